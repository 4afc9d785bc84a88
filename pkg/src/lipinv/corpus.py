"""Synthetic factorized lip-motion corpus.

Every frame is built as ``gain * word_motion + speaker_offset + noise``:
content (word-specific motion templates) and speaker appearance (a fixed
additive offset per speaker) are independent factors. Held-out speakers get
offsets never seen in training, which is exactly the generalization axis the
model is supposed to survive.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CorpusConfig, ConfigError, config_fingerprint

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "meta.json"

# SeedSequence stream tags: keep sample streams independent of speaker and
# template streams so parallel generation stays byte-identical to serial.
_STREAM_SAMPLE = 0
_STREAM_SPEAKER = 1
_STREAM_TEMPLATE = 2


class CorpusError(ValueError):
    """Malformed corpus data or invalid generation request."""


class LexiconError(CorpusError):
    """A word is not part of the corpus lexicon."""


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    appearance_offset: np.ndarray   # frame-shaped, constant for this speaker
    articulation_gain: float

    def __post_init__(self):
        if self.articulation_gain <= 0:
            raise CorpusError("articulation_gain must be positive")


@dataclass
class SampleRecord:
    sample_path: str
    speaker_id: int
    words: list
    boundaries: list                # [word_index, start, end] inclusive
    split: str


@dataclass
class VideoSample:
    frames: np.ndarray              # (T, H, W) or (T, D)
    speaker_id: int
    words: list
    boundaries: list
    split: str

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class CorpusManifest:
    root: Path
    samples: list                   # SampleRecord
    lexicon: list
    speakers: list
    unseen_speakers: list
    config: CorpusConfig
    seed: int
    config_fingerprint: str

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def validate(self):
        """Split hygiene and per-sample boundary tiling."""
        unseen = set(self.unseen_speakers)
        train_speakers = {s.speaker_id for s in self.samples if s.split == "train"}
        if train_speakers & unseen:
            raise CorpusError(
                f"unseen speakers {sorted(train_speakers & unseen)} "
                f"appear in the train split"
            )
        vocab = set(self.lexicon)
        for rec in self.samples:
            check_boundary_tiling(rec.boundaries, len(rec.words))
            bad = [w for w in rec.words if w not in vocab]
            if bad:
                raise CorpusError(f"{rec.sample_path}: words {bad} not in lexicon")


def check_boundary_tiling(boundaries, n_words):
    """Boundaries must tile [0, T-1] in order with valid word indices."""
    if not boundaries:
        raise CorpusError("empty boundary list")
    expected_start = 0
    for word_index, start, end in boundaries:
        if not 0 <= word_index < n_words:
            raise CorpusError(f"word_index {word_index} out of range [0, {n_words})")
        if start != expected_start:
            raise CorpusError(
                f"boundary starting at {start} leaves a gap/overlap "
                f"(expected start {expected_start})"
            )
        if end < start:
            raise CorpusError(f"boundary ({start}, {end}) is reversed")
        expected_start = end + 1
    return expected_start  # == T


def build_lexicon(size: int) -> list:
    """Deterministic pseudo-words: two consonant-vowel syllables each."""
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    syllables = [c + v for c in consonants for v in vowels]
    words = []
    for first in syllables:
        for second in syllables:
            words.append(first + second)
            if len(words) == size:
                return words
    raise ConfigError(f"lexicon_size {size} exceeds the nameable vocabulary")


def _stream(seed, tag, index) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, index)))


def _smooth_field(rng, shape):
    """Unit-std random pattern; spatially smooth in image mode."""
    if len(shape) == 1:
        field = rng.standard_normal(shape)
    else:
        coarse = 4
        grid = rng.standard_normal((coarse, coarse))
        h, w = shape
        ys = np.linspace(0.0, coarse - 1.0, h)
        xs = np.linspace(0.0, coarse - 1.0, w)
        y0 = np.minimum(ys.astype(int), coarse - 2)
        x0 = np.minimum(xs.astype(int), coarse - 2)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        field = (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
                 + grid[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
                 + grid[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
                 + grid[np.ix_(y0 + 1, x0 + 1)] * fy * fx)
    std = field.std()
    if std > 0:
        field = field / std
    return field


class CorpusGenerator:
    """Holds the lexicon, per-word motion templates, and speaker profiles
    derived deterministically from (config, seed)."""

    def __init__(self, config: CorpusConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.lexicon = build_lexicon(config.lexicon_size)
        shape = config.frame_shape
        self.templates = {}
        for idx, word in enumerate(self.lexicon):
            rng = _stream(seed, _STREAM_TEMPLATE, idx)
            keys = np.stack([_smooth_field(rng, shape)
                             for _ in range(config.n_keyframes)])
            self.templates[word] = keys
        self.profiles = []
        for sid in range(config.n_speakers):
            rng = _stream(seed, _STREAM_SPEAKER, sid)
            offset = _smooth_field(rng, shape) * config.appearance_scale
            gain = float(rng.uniform(*config.gain_range))
            self.profiles.append(SpeakerProfile(sid, offset, gain))

    @property
    def unseen_speakers(self):
        n = self.config.n_speakers
        return list(range(n - self.config.n_unseen, n))

    def word_motion(self, word, span_len):
        """Interpolate the word's keyframes across a span of given length."""
        keys = self.templates.get(word)
        if keys is None:
            raise LexiconError(f"word {word!r} is not in the lexicon")
        n_keys = keys.shape[0]
        if span_len == 1:
            positions = np.array([0.5 * (n_keys - 1)])
        else:
            positions = np.linspace(0.0, n_keys - 1.0, span_len)
        lo = np.minimum(positions.astype(int), n_keys - 2)
        frac = positions - lo
        frac = frac.reshape((-1,) + (1,) * (keys.ndim - 1))
        return keys[lo] * (1 - frac) + keys[lo + 1] * frac

    def render_utterance(self, profile: SpeakerProfile, words, rng):
        """Render one utterance; rng drives span lengths and pixel noise.

        Returns (frames, boundaries) with frames of shape (T, *frame_shape)
        and inclusive (word_index, start, end) boundaries tiling [0, T-1].
        """
        if not words:
            raise CorpusError("cannot render an empty word sequence")
        cfg = self.config
        lo, hi = cfg.frames_per_word
        span_lens = [int(rng.integers(lo, hi + 1)) for _ in words]
        total = sum(span_lens)
        if total > cfg.t_max:
            raise CorpusError(f"utterance needs {total} frames > t_max={cfg.t_max}")
        chunks = []
        boundaries = []
        start = 0
        for word_index, (word, span_len) in enumerate(zip(words, span_lens)):
            chunks.append(self.word_motion(word, span_len))
            boundaries.append((word_index, start, start + span_len - 1))
            start += span_len
        frames = np.concatenate(chunks, axis=0) * profile.articulation_gain
        frames = frames + profile.appearance_offset[None]
        if cfg.noise_sigma > 0:
            frames = frames + cfg.noise_sigma * rng.standard_normal(frames.shape)
        return frames.astype(np.float32), boundaries

    def sample_plan(self):
        """Deterministic (speaker_id, split) assignment per sample index."""
        plan = []
        unseen = set(self.unseen_speakers)
        for sid in range(self.config.n_speakers):
            if sid in unseen:
                plan.extend((sid, "unseen_test")
                            for _ in range(self.config.eval_per_speaker))
            else:
                plan.extend((sid, "train")
                            for _ in range(self.config.train_per_speaker))
                plan.extend((sid, "seen_test")
                            for _ in range(self.config.eval_per_speaker))
        return plan

    def build_sample(self, sample_index: int, speaker_id: int, split: str):
        """Sample content and render; the RNG stream depends only on
        (seed, sample_index), so generation order never matters."""
        rng = _stream(self.seed, _STREAM_SAMPLE, sample_index)
        cfg = self.config
        n_words = int(rng.integers(cfg.sentence_len[0], cfg.sentence_len[1] + 1))
        words = [self.lexicon[int(rng.integers(0, len(self.lexicon)))]
                 for _ in range(n_words)]
        frames, boundaries = self.render_utterance(
            self.profiles[speaker_id], words, rng)
        return VideoSample(frames, speaker_id, words, boundaries, split)


def generate_corpus(config: CorpusConfig, seed: int, out_dir) -> CorpusManifest:
    """Write sample files plus manifest/meta; byte-identical for a fixed
    (config, seed)."""
    gen = CorpusGenerator(config, seed)
    root = Path(out_dir)
    (root / "samples").mkdir(parents=True, exist_ok=True)

    records = []
    for k, (sid, split) in enumerate(gen.sample_plan()):
        sample = gen.build_sample(k, sid, split)
        rel = f"samples/s{k:05d}.npy"
        np.save(root / rel, sample.frames)
        records.append(SampleRecord(
            sample_path=rel,
            speaker_id=sid,
            words=sample.words,
            boundaries=[list(b) for b in sample.boundaries],
            split=split,
        ))

    with open(root / MANIFEST_NAME, "w") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")

    meta = {
        "format_version": 1,
        "lexicon": gen.lexicon,
        "speakers": list(range(config.n_speakers)),
        "unseen_speakers": gen.unseen_speakers,
        "seed": seed,
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in dataclasses.asdict(config).items()},
        "config_fingerprint": config_fingerprint(config, seed),
    }
    (root / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))

    manifest = CorpusManifest(
        root=root,
        samples=records,
        lexicon=gen.lexicon,
        speakers=meta["speakers"],
        unseen_speakers=meta["unseen_speakers"],
        config=config,
        seed=seed,
        config_fingerprint=meta["config_fingerprint"],
    )
    manifest.validate()
    return manifest


def load_manifest(corpus_dir) -> CorpusManifest:
    root = Path(corpus_dir)
    meta_path = root / META_NAME
    manifest_path = root / MANIFEST_NAME
    if not meta_path.exists() or not manifest_path.exists():
        raise CorpusError(f"{root} does not look like a corpus directory")
    meta = json.loads(meta_path.read_text())
    cfg_data = dict(meta["config"])
    for key in ("sentence_len", "frames_per_word", "gain_range"):
        cfg_data[key] = tuple(cfg_data[key])
    config = CorpusConfig(**cfg_data)
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            if line.strip():
                records.append(SampleRecord(**json.loads(line)))
    manifest = CorpusManifest(
        root=root,
        samples=records,
        lexicon=meta["lexicon"],
        speakers=meta["speakers"],
        unseen_speakers=meta["unseen_speakers"],
        config=config,
        seed=meta["seed"],
        config_fingerprint=meta["config_fingerprint"],
    )
    manifest.validate()
    return manifest


def load_sample(manifest: CorpusManifest, record: SampleRecord) -> VideoSample:
    frames = np.load(manifest.root / record.sample_path)
    return VideoSample(
        frames=frames,
        speaker_id=record.speaker_id,
        words=list(record.words),
        boundaries=[tuple(b) for b in record.boundaries],
        split=record.split,
    )
