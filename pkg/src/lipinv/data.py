"""In-memory corpus access for training: label encoding and length-bucketed
batching. Desk-scale corpora are a few tens of MB, so everything loads up
front."""

from dataclasses import dataclass

import numpy as np
import torch

from . import corpus as corpus_mod
from .alignment import LabelSequence, assign_frame_labels, make_negative_labels
from .seq2seq import EOS, NUM_SPECIALS, PAD


@dataclass
class EncodedSample:
    index: int
    frames: np.ndarray
    speaker_id: int
    words: list
    split: str
    frame_label_ids: np.ndarray     # (T,) lexicon ids, one per frame
    label_spans: list               # (lexicon id, start, end)
    target_ids: np.ndarray          # decoder ids, EOS-terminated

    @property
    def num_frames(self):
        return self.frames.shape[0]


class CorpusData:
    """Loaded corpus plus the vocab maps the model needs."""

    def __init__(self, manifest: corpus_mod.CorpusManifest):
        self.manifest = manifest
        self.lexicon = list(manifest.lexicon)
        self._lex_index = {w: i for i, w in enumerate(self.lexicon)}
        self.n_speakers = len(manifest.speakers)
        self.samples = []
        for idx, rec in enumerate(manifest.samples):
            sample = corpus_mod.load_sample(manifest, rec)
            labels = assign_frame_labels(sample.boundaries, sample.words,
                                         sample.num_frames)
            label_ids = np.array([self._lex_index[w] for w in labels.labels],
                                 dtype=np.int64)
            spans = [(self._lex_index[w], s, e) for w, s, e in labels.spans]
            target = np.array(
                [self._lex_index[w] + NUM_SPECIALS for w in sample.words]
                + [EOS], dtype=np.int64)
            self.samples.append(EncodedSample(
                index=idx, frames=sample.frames, speaker_id=sample.speaker_id,
                words=sample.words, split=sample.split,
                frame_label_ids=label_ids, label_spans=spans,
                target_ids=target))

    @classmethod
    def load(cls, corpus_dir):
        return cls(corpus_mod.load_manifest(corpus_dir))

    def split(self, name):
        return [s for s in self.samples if s.split == name]


def draw_negative_ids(sample: EncodedSample, lexicon_size: int, rng,
                      per_frame=False) -> np.ndarray:
    """Frame-level negative labels for one sample (lexicon ids)."""
    positive = LabelSequence(labels=list(sample.frame_label_ids),
                             polarity="positive")
    negative = make_negative_labels(positive, range(lexicon_size), rng,
                                    per_frame=per_frame)
    return np.array(negative.labels, dtype=np.int64)


def bucket_by_length(samples):
    """Group samples by frame count; deterministic order within groups."""
    buckets = {}
    for s in samples:
        buckets.setdefault(s.num_frames, []).append(s)
    return [buckets[t] for t in sorted(buckets)]


def epoch_batches(samples, batch_size, rng=None):
    """Yield lists of samples; shuffled when an rng is given."""
    if rng is None:
        order = np.arange(len(samples))
    else:
        order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield [samples[i] for i in order[start:start + batch_size]]


def collate(bucket, negatives=None, dtype=torch.float32):
    """Stack a same-length bucket into tensors.

    negatives: optional {sample index -> (T,) negative id array}.
    Targets are PAD-padded to the longest sequence in the bucket.
    """
    frames = torch.as_tensor(
        np.stack([s.frames for s in bucket]), dtype=dtype)
    pos_ids = torch.as_tensor(np.stack([s.frame_label_ids for s in bucket]))
    neg_ids = None
    if negatives is not None:
        neg_ids = torch.as_tensor(
            np.stack([negatives[s.index] for s in bucket]))
    lengths = torch.as_tensor([len(s.target_ids) for s in bucket])
    max_len = int(lengths.max())
    targets = torch.full((len(bucket), max_len), PAD, dtype=torch.long)
    for row, s in enumerate(bucket):
        targets[row, :len(s.target_ids)] = torch.as_tensor(s.target_ids)
    speaker_ids = torch.as_tensor([s.speaker_id for s in bucket])
    return {
        "frames": frames,
        "pos_ids": pos_ids,
        "neg_ids": neg_ids,
        "targets": targets,
        "lengths": lengths,
        "speaker_ids": speaker_ids,
        "samples": bucket,
    }
