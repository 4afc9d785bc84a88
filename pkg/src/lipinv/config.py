"""Dataclass configs for corpus generation, model architecture, and training.

All configs round-trip through YAML. Unknown keys are rejected so a typo in a
config file fails loudly instead of silently using a default.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class CorpusConfig:
    """Knobs for the synthetic factorized lip corpus.

    Content (which words are spoken, with what motion) and speaker appearance
    (a fixed additive per-speaker offset) are independent factors, so
    speaker-invariance claims can be checked directly.
    """

    n_speakers: int = 5
    n_unseen: int = 2
    lexicon_size: int = 20
    sentence_len: tuple = (2, 4)        # words per utterance, inclusive range
    frames_per_word: tuple = (3, 6)     # inclusive range
    t_max: int = 40
    frame_mode: str = "image"           # "image" -> (T,H,W), "flat" -> (T,D)
    height: int = 16
    width: int = 16
    flat_dim: int = 64
    noise_sigma: float = 0.05
    appearance_scale: float = 1.5       # std of the per-speaker offset field
    gain_range: tuple = (1.0, 1.0)      # per-speaker articulation gain
    n_keyframes: int = 3                # motion keyframes per word template
    train_per_speaker: int = 200
    eval_per_speaker: int = 30

    def validate(self):
        if self.n_speakers < 3:
            raise ConfigError(f"n_speakers must be >= 3, got {self.n_speakers}")
        if self.n_unseen < 0:
            raise ConfigError(f"n_unseen must be >= 0, got {self.n_unseen}")
        if self.n_unseen >= self.n_speakers:
            raise ConfigError(
                f"n_unseen ({self.n_unseen}) must be smaller than "
                f"n_speakers ({self.n_speakers})"
            )
        if self.lexicon_size < 4:
            raise ConfigError(f"lexicon_size must be >= 4, got {self.lexicon_size}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("sentence_len", "frames_per_word", "gain_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is reversed: ({lo}, {hi})")
        if self.sentence_len[0] < 1 or self.frames_per_word[0] < 1:
            raise ConfigError("sentence_len and frames_per_word must be >= 1")
        if self.gain_range[0] <= 0:
            raise ConfigError("articulation gains must be positive")
        if self.frame_mode not in ("image", "flat"):
            raise ConfigError(f"unknown frame_mode {self.frame_mode!r}")
        if self.n_keyframes < 2:
            raise ConfigError("n_keyframes must be >= 2")
        longest = self.sentence_len[1] * self.frames_per_word[1]
        if self.t_max < longest:
            raise ConfigError(
                f"t_max={self.t_max} cannot fit the longest sentence "
                f"({self.sentence_len[1]} words x {self.frames_per_word[1]} frames "
                f"= {longest} frames)"
            )

    @property
    def frame_shape(self):
        if self.frame_mode == "image":
            return (self.height, self.width)
        return (self.flat_dim,)


@dataclass
class ModelConfig:
    """Architecture of the visual encoder, branch heads, and decoder.

    Desk-scale defaults keep CPU training in the minutes range; crank
    ``model_dim``/``attn_layers`` for a larger preset.
    """

    conv_channels: tuple = (8, 16, 32)
    conv_kernel: int = 3
    conv_dropout: float = 0.1
    recurrent_hidden: int = 32
    model_dim: int = 64
    attn_layers: int = 2
    attn_heads: int = 4
    attn_dropout: float = 0.1
    text_layers: int = 2
    # Branch heads carry no dropout: toggling a branch then never perturbs the
    # RNG stream seen by the shared backbone, which keeps runs comparable.
    adversary_tap: str = "conv"          # "conv" or "recurrent"
    adversary_hidden: int = 32
    flat_group_size: int = 4             # channel-group max in flat mode
    decoder_hidden: int = 64
    decoder_embed: int = 32
    similarity: str = "cosine"           # "cosine" or "dot"
    tau_init: float = 0.07
    ce_shares_temperature: bool = True
    ce_reduction: str = "mean"           # "mean" or "sum"

    def validate(self):
        if self.model_dim % self.attn_heads != 0:
            raise ConfigError(
                f"model_dim ({self.model_dim}) must be divisible by "
                f"attn_heads ({self.attn_heads})"
            )
        for name in ("recurrent_hidden", "model_dim", "attn_heads",
                     "adversary_hidden", "decoder_hidden", "decoder_embed"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.conv_dropout < 1.0 or not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.adversary_tap not in ("conv", "recurrent"):
            raise ConfigError(f"unknown adversary_tap {self.adversary_tap!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.ce_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown ce_reduction {self.ce_reduction!r}")

    @classmethod
    def paper_scale(cls):
        """Large preset: 6 attention layers, width 512, 8 heads."""
        return cls(model_dim=512, attn_layers=6, attn_heads=8,
                   recurrent_hidden=256, decoder_hidden=512, decoder_embed=128)


@dataclass
class TrainConfig:
    """Joint-training hyperparameters and module toggles."""

    alpha: float = 0.5          # weight of the text-alignment loss
    beta: float = 2.0           # weight of the speaker-adversary loss
    grl_lambda: float = 1.0     # gradient reversal strength
    grl_schedule: str = "constant"   # "constant" or "ramp"
    grl_ramp_gamma: float = 10.0
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    precision: str = "float32"  # "float32" or "float64"
    use_text_alignment: bool = True
    use_speaker_adversary: bool = True
    use_contrastive: bool = True     # L_CL term inside the alignment branch
    use_matrix_ce: bool = True       # L_CE term inside the alignment branch
    freeze_negatives: bool = False   # resample negative labels every epoch?
    per_frame_negatives: bool = False
    eval_every: int = 10
    max_decode_len: int = 16
    divergence_threshold: float = 1e6

    def validate(self):
        for name in ("alpha", "beta", "grl_lambda", "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.grl_schedule not in ("constant", "ramp"):
            raise ConfigError(f"unknown grl_schedule {self.grl_schedule!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class RunConfig:
    """Everything one run needs, as written to ``config.yaml`` in a run dir."""

    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.corpus.validate()
        self.model.validate()
        self.train.validate()


_SECTIONS = {"corpus": CorpusConfig, "model": ModelConfig, "train": TrainConfig}

# tuple-typed fields arrive from YAML as lists; normalize on construction
def _coerce(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(
            f"unknown {cls.__name__} keys: {sorted(unknown)} "
            f"(known: {sorted(known)})"
        )
    kwargs = {}
    for key, value in data.items():
        default = known[key].default
        if isinstance(default, tuple) or known[key].type == "tuple":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{cls.__name__}.{key} expects a 2-item list")
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown config sections: {sorted(unknown)} "
            f"(known: {sorted(_SECTIONS)})"
        )
    parts = {}
    for name, cls in _SECTIONS.items():
        section = data.get(name, {}) or {}
        parts[name] = _coerce(cls, section)
    return RunConfig(**parts)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: list(v) if isinstance(v, tuple) else v
                     for k, v in section.items()}
    return out


def load_config(path) -> RunConfig:
    """Read a YAML config file; missing sections/keys take defaults."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply dotted-key overrides like ``train.alpha=0.25``.

    Values are parsed as YAML scalars, so ``true``, ``0.5``, ``[3, 6]`` all
    do the expected thing.
    """
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(
                f"override key {key!r} must look like "
                f"<section>.<field> with section in {sorted(_SECTIONS)}"
            )
        section, name = parts
        if name not in data[section]:
            raise ConfigError(f"unknown field {key!r}")
        data[section][name] = yaml.safe_load(raw)
    return config_from_dict(data)


def config_fingerprint(corpus_cfg: CorpusConfig, seed: int) -> str:
    """Stable hash of the generation config plus seed."""
    payload = {
        "corpus": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in dataclasses.asdict(corpus_cfg).items()},
        "seed": seed,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
