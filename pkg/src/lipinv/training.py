"""Joint training of the recognition loss plus the two disentanglement
branches, evaluation with CER/WER, checkpointing, and the speaker probe
diagnostic."""

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .adversary import grl_lambda_at
from .config import ModelConfig, TrainConfig
from .data import (CorpusData, bucket_by_length, collate, draw_negative_ids,
                   epoch_batches)
from .metrics import error_rates
from .model import LipreadingModel

METRIC_COLUMNS = ["epoch", "l_pt", "l_cl", "l_ce", "l_id", "l_ed", "l_total",
                  "seen_cer", "unseen_cer", "probe_acc"]

CKPT_MAGIC = "LIPINV-CKPT"
CKPT_VERSION = 1

# SeedSequence stream tags for the trainer's numpy RNGs
_STREAM_ORDER = 10
_STREAM_NEGATIVES = 11


class TrainingDiverged(RuntimeError):
    """Loss blew up or went NaN; message names the offending component."""


@dataclass
class LossBundle:
    l_pt: float = 0.0
    l_cl: float = 0.0
    l_ce: float = 0.0
    l_id: float = 0.0
    l_ed: float = 0.0
    l_total: float = 0.0

    def as_dict(self):
        return dataclasses.asdict(self)


def total_loss(l_pt, l_id, l_ed, alpha, beta):
    """Weighted joint loss; NaN in any component aborts with its name."""
    for name, value in (("l_pt", l_pt), ("l_id", l_id), ("l_ed", l_ed)):
        v = float(value)
        if math.isnan(v) or math.isinf(v):
            raise TrainingDiverged(f"loss component {name} is {v}")
    return l_pt + alpha * l_id + beta * l_ed


# -- checkpoint format: one JSON header line, then raw little-endian bytes --

def save_checkpoint(path, model: LipreadingModel, meta: dict):
    state = model.state_dict()
    params = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        blob = np.ascontiguousarray(arr).tobytes()
        params.append({"name": name, "shape": list(arr.shape),
                       "dtype": arr.dtype.name, "offset": offset,
                       "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"magic": CKPT_MAGIC, "version": CKPT_VERSION, "meta": meta,
              "params": params, "total_bytes": offset}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Returns (header dict, {name: np.ndarray})."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("magic") != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        if header.get("version") != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version "
                             f"{header.get('version')}")
        body = fh.read()
    if len(body) != header["total_bytes"]:
        raise ValueError(f"{path}: checkpoint body is truncated")
    arrays = {}
    for p in header["params"]:
        raw = body[p["offset"]:p["offset"] + p["nbytes"]]
        arrays[p["name"]] = np.frombuffer(raw, dtype=p["dtype"]).reshape(
            p["shape"]).copy()
    return header, arrays


def load_model_from_checkpoint(path, lexicon, n_speakers, frame_shape):
    header, arrays = read_checkpoint(path)
    model_cfg = ModelConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in header["meta"]["model"].items()})
    model = LipreadingModel(model_cfg, frame_shape, lexicon, n_speakers)
    if header["meta"].get("precision") == "float64":
        model.double()
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, header


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Trainer:
    def __init__(self, train_cfg: TrainConfig, model_cfg: ModelConfig,
                 data: CorpusData, out_dir):
        train_cfg.validate()
        model_cfg.validate()
        self.cfg = train_cfg
        self.model_cfg = model_cfg
        self.data = data
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = (torch.float64 if train_cfg.precision == "float64"
                      else torch.float32)

        torch.manual_seed(train_cfg.seed)
        self.model = LipreadingModel(
            model_cfg, data.manifest.config.frame_shape, data.lexicon,
            data.n_speakers)
        if self.dtype == torch.float64:
            self.model.double()
        self.optimizer = torch.optim.Adam(self.model.parameters(),
                                          lr=train_cfg.learning_rate)
        self.train_samples = data.split("train")
        if not self.train_samples:
            raise ValueError("corpus has no train split")

    # branch is active only when toggled on AND carrying weight; a zero
    # weight therefore reproduces the toggled-off run exactly
    @property
    def _align_on(self):
        return (self.cfg.use_text_alignment and self.cfg.alpha > 0
                and (self.cfg.use_contrastive or self.cfg.use_matrix_ce))

    @property
    def _adversary_on(self):
        return self.cfg.use_speaker_adversary and self.cfg.beta > 0

    def _negatives_for_epoch(self, epoch):
        if not self._align_on:
            return None
        tag = 0 if self.cfg.freeze_negatives else epoch
        rng = np.random.default_rng(
            np.random.SeedSequence((self.cfg.seed, _STREAM_NEGATIVES, tag)))
        return {
            s.index: draw_negative_ids(s, len(self.data.lexicon), rng,
                                       self.cfg.per_frame_negatives)
            for s in self.train_samples
        }

    def _batch_losses(self, batch_samples, negatives, lam):
        """Loss bundle averaged over the batch, bucketing equal-T samples."""
        n = len(batch_samples)
        sums = {k: 0.0 for k in ("l_pt", "l_cl", "l_ce", "l_id", "l_ed")}
        tensor_total = None
        for bucket in bucket_by_length(batch_samples):
            batch = collate(bucket, negatives, dtype=self.dtype)
            k = len(bucket)
            v, tap = self.model.encode(batch["frames"])
            l_pt = self.model.decoder.predicted_text_loss(
                v, batch["targets"], batch["lengths"])
            bucket_total = l_pt * k
            sums["l_pt"] += float(l_pt) * k
            if self._align_on:
                l_id, l_cl, l_ce = self.model.text_head.loss(
                    v, batch["pos_ids"], batch["neg_ids"],
                    self.cfg.use_contrastive, self.cfg.use_matrix_ce)
                bucket_total = bucket_total + self.cfg.alpha * l_id * k
                sums["l_cl"] += float(l_cl) * k
                sums["l_ce"] += float(l_ce) * k
                sums["l_id"] += float(l_id) * k
            if self._adversary_on:
                l_ed = self.model.adversary.loss(tap, batch["speaker_ids"],
                                                 lam)
                bucket_total = bucket_total + self.cfg.beta * l_ed * k
                sums["l_ed"] += float(l_ed) * k
            tensor_total = (bucket_total if tensor_total is None
                            else tensor_total + bucket_total)
        means = {k_: v_ / n for k_, v_ in sums.items()}
        # recompute the scalar total from the means so the CSV recomposes
        l_total = total_loss(means["l_pt"], means["l_id"], means["l_ed"],
                             self.cfg.alpha, self.cfg.beta)
        bundle = LossBundle(**means, l_total=l_total)
        return tensor_total / n, bundle

    def train(self):
        """Run the configured number of epochs; returns a result summary."""
        cfg = self.cfg
        rows = []
        best_key = None
        best_path = self.out_dir / "best.ckpt"
        final_path = self.out_dir / "final.ckpt"
        csv_path = self.out_dir / "metrics.csv"

        order_rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _STREAM_ORDER)))

        for epoch in range(1, cfg.epochs + 1):
            self.model.train()
            negatives = self._negatives_for_epoch(epoch)
            lam = grl_lambda_at((epoch - 1) / max(1, cfg.epochs - 1),
                                cfg.grl_lambda, cfg.grl_schedule,
                                cfg.grl_ramp_gamma)
            epoch_sums = {k: 0.0 for k in
                          ("l_pt", "l_cl", "l_ce", "l_id", "l_ed", "l_total")}
            n_batches = 0
            for batch_samples in epoch_batches(self.train_samples,
                                               cfg.batch_size, order_rng):
                loss, bundle = self._batch_losses(batch_samples, negatives,
                                                  lam)
                if float(loss) > cfg.divergence_threshold:
                    raise TrainingDiverged(
                        f"epoch {epoch}: total loss {float(loss):.3g} "
                        f"exceeds {cfg.divergence_threshold:.3g}")
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()
                for key, value in bundle.as_dict().items():
                    epoch_sums[key] += value
                n_batches += 1

            row = {"epoch": epoch}
            row.update({k: v / n_batches for k, v in epoch_sums.items()})
            do_eval = (epoch % cfg.eval_every == 0) or epoch == cfg.epochs
            if do_eval:
                row.update(self._eval_row())
                key = row.get("unseen_cer")
                if key is None or key == "":
                    key = row.get("seen_cer")
                if key is not None and key != "" and (
                        best_key is None or key < best_key):
                    best_key = key
                    save_checkpoint(best_path, self.model,
                                    self._meta(epoch=epoch))
            rows.append(row)
            self._write_csv(csv_path, rows)

        save_checkpoint(final_path, self.model, self._meta(epoch=cfg.epochs))
        if not best_path.exists():
            save_checkpoint(best_path, self.model,
                            self._meta(epoch=cfg.epochs))
        self._write_csv(csv_path, rows)
        return {
            "final_checkpoint": final_path,
            "best_checkpoint": best_path,
            "metrics_csv": csv_path,
            "rows": rows,
            "final_hash": checkpoint_hash(final_path),
        }

    def _meta(self, epoch):
        return {
            "model": {k: list(v) if isinstance(v, tuple) else v
                      for k, v in dataclasses.asdict(self.model_cfg).items()},
            "train": dataclasses.asdict(self.cfg),
            "precision": self.cfg.precision,
            "epoch": epoch,
            "corpus_fingerprint": self.data.manifest.config_fingerprint,
            "echo": self.model.config_echo(),
        }

    def _eval_row(self):
        out = {}
        seen = self.data.split("seen_test")
        unseen = self.data.split("unseen_test")
        out["seen_cer"] = (evaluate_samples(self.model, seen,
                                            self.cfg.max_decode_len)["cer"]
                           if seen else "")
        out["unseen_cer"] = (evaluate_samples(self.model, unseen,
                                              self.cfg.max_decode_len)["cer"]
                             if unseen else "")
        try:
            out["probe_acc"] = speaker_probe(self.model, self.data,
                                             seed=self.cfg.seed)
        except ValueError:
            out["probe_acc"] = ""
        return out

    def _write_csv(self, path, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})


@torch.no_grad()
def evaluate_samples(model: LipreadingModel, samples, max_decode_len,
                     dtype=None):
    """Greedy-decode a sample list and score CER/WER against references."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if dtype is None:
        dtype = next(model.parameters()).dtype
    model.eval()
    references, hypotheses, records = [], [], []
    for bucket in bucket_by_length(samples):
        batch = collate(bucket, dtype=dtype)
        v, _ = model.encode(batch["frames"])
        decoded = model.decoder.greedy_decode(v, max_decode_len)
        for sample, ids in zip(bucket, decoded):
            hyp = model.vocab.decode(ids)
            references.append(sample.words)
            hypotheses.append(hyp)
            records.append({"sample": sample.index,
                            "reference": list(sample.words),
                            "hypothesis": hyp})
    rates = error_rates(references, hypotheses)
    return {"cer": rates["cer"], "wer": rates["wer"],
            "n_samples": len(samples), "records": records,
            "char_dist": rates["char_dist"], "char_len": rates["char_len"],
            "word_dist": rates["word_dist"], "word_len": rates["word_len"]}


def evaluate_split(model, data: CorpusData, split_name, max_decode_len=16):
    samples = data.split(split_name)
    if not samples:
        raise ValueError(f"split {split_name!r} is empty")
    report = evaluate_samples(model, samples, max_decode_len)
    report["split"] = split_name
    return report


def fit_speaker_probe(train_features, train_ids, eval_features, eval_ids,
                      seed=0):
    """Accuracy of a fresh linear classifier on frozen features."""
    if len(set(train_ids)) < 2:
        raise ValueError("speaker probe needs at least 2 speakers")
    clf = LogisticRegression(max_iter=1000, random_state=seed)
    clf.fit(train_features, train_ids)
    return float(clf.score(eval_features, eval_ids))


@torch.no_grad()
def _pooled_features(model, samples, dtype):
    model.eval()
    feats, ids = [], []
    for bucket in bucket_by_length(samples):
        batch = collate(bucket, dtype=dtype)
        emb = model.utterance_embedding(batch["frames"])
        feats.append(emb.cpu().numpy())
        ids.extend(s.speaker_id for s in bucket)
    return np.concatenate(feats, axis=0), np.array(ids)


def speaker_probe(model: LipreadingModel, data: CorpusData, seed=0):
    """Train a linear probe on train-split utterance embeddings, report its
    accuracy on the held-out seen-speaker samples. Lower accuracy means
    fewer speaker traces survive in the encoder."""
    dtype = next(model.parameters()).dtype
    train = data.split("train")
    held_out = data.split("seen_test")
    if not train or not held_out:
        raise ValueError("speaker probe needs train and seen_test splits")
    train_x, train_y = _pooled_features(model, train, dtype)
    eval_x, eval_y = _pooled_features(model, held_out, dtype)
    return fit_speaker_probe(train_x, train_y, eval_x, eval_y, seed=seed)
