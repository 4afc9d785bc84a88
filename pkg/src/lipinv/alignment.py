"""Frame-level label sequences and positive/negative pair construction.

A word-boundary list turns an utterance into a per-frame label sequence (the
positive pair for cross-modal alignment); negatives replace the word on each
span with a different lexicon word. Also parses/writes the tab-separated
boundary files produced by forced-alignment tooling.
"""

from dataclasses import dataclass, field

import numpy as np


class AlignmentError(ValueError):
    """Boundaries that do not tile the frame range, or length mismatches."""


class BoundaryParseError(AlignmentError):
    """Malformed boundary file; carries the offending line number."""


@dataclass
class LabelSequence:
    labels: list                    # one token per frame
    polarity: str                   # "positive" | "negative"
    spans: list = field(default_factory=list)   # (token, start, end) inclusive

    def __len__(self):
        return len(self.labels)


@dataclass
class WordBoundaries:
    entries: list                   # (token, start, end) inclusive

    @property
    def num_frames(self):
        return self.entries[-1][2] + 1 if self.entries else 0


def token_runs(labels):
    """Maximal constant runs as (token, start, end) inclusive."""
    runs = []
    for i, tok in enumerate(labels):
        if runs and runs[-1][0] == tok and runs[-1][2] == i - 1:
            runs[-1] = (tok, runs[-1][1], i)
        else:
            runs.append((tok, i, i))
    return runs


def assign_frame_labels(boundaries, words, T: int) -> LabelSequence:
    """Expand word boundaries into a length-T positive label sequence.

    ``boundaries`` holds (word_index, start, end) inclusive spans; the label
    of every frame in a span is words[word_index].
    """
    expected_start = 0
    labels = []
    spans = []
    for word_index, start, end in boundaries:
        if start != expected_start:
            kind = "gap" if start > expected_start else "overlap"
            raise AlignmentError(
                f"{kind} at frame {min(start, expected_start)}: span starts at "
                f"{start}, expected {expected_start}"
            )
        if end < start:
            raise AlignmentError(f"span ({start}, {end}) is reversed")
        if not 0 <= word_index < len(words):
            raise AlignmentError(f"word_index {word_index} out of range")
        token = words[word_index]
        labels.extend([token] * (end - start + 1))
        spans.append((token, start, end))
        expected_start = end + 1
    if expected_start != T:
        raise AlignmentError(
            f"boundaries cover [0, {expected_start - 1}] but T={T}"
        )
    return LabelSequence(labels=labels, polarity="positive", spans=spans)


def make_negative_labels(positive: LabelSequence, lexicon, rng,
                         per_frame: bool = False,
                         avoid_adjacent_collisions: bool = False) -> LabelSequence:
    """Replace every label with a different lexicon token.

    Default is one draw per constant run, broadcast to its frames, which
    preserves the piecewise structure the text encoder expects. ``per_frame``
    redraws independently at every frame (ablation mode).
    ``avoid_adjacent_collisions`` additionally forbids two adjacent runs from
    drawing the same replacement, so run counts match the positive exactly.
    """
    if len(lexicon) < 2:
        raise AlignmentError(
            "need at least 2 lexicon tokens to build a negative sequence"
        )
    pool = list(lexicon)
    index = {tok: i for i, tok in enumerate(pool)}

    def draw(exclude):
        candidates = [t for t in pool if t not in exclude]
        if not candidates:
            raise AlignmentError("lexicon too small to avoid all exclusions")
        return candidates[int(rng.integers(0, len(candidates)))]

    if per_frame:
        labels = [draw({tok}) for tok in positive.labels]
        return LabelSequence(labels=labels, polarity="negative",
                             spans=token_runs(labels))

    labels = [None] * len(positive)
    spans = []
    prev = None
    for token, start, end in token_runs(positive.labels):
        if token not in index:
            raise AlignmentError(f"label {token!r} is not in the lexicon")
        exclude = {token}
        if avoid_adjacent_collisions and prev is not None:
            exclude.add(prev)
        replacement = draw(exclude)
        for i in range(start, end + 1):
            labels[i] = replacement
        spans.append((replacement, start, end))
        prev = replacement
    return LabelSequence(labels=labels, polarity="negative", spans=spans)


def parse_boundary_file(path) -> WordBoundaries:
    """Parse tab-separated ``token<TAB>start<TAB>end`` lines (inclusive
    frame indices) and validate ordering and coverage from frame 0."""
    entries = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise BoundaryParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}"
                )
            token, start_s, end_s = parts
            try:
                start, end = int(start_s), int(end_s)
            except ValueError:
                raise BoundaryParseError(
                    f"{path}:{lineno}: non-integer frame index in {line!r}"
                ) from None
            entries.append((lineno, token, start, end))

    expected_start = 0
    out = []
    for lineno, token, start, end in entries:
        if end < start:
            raise AlignmentError(f"{path}:{lineno}: span ({start}, {end}) reversed")
        if start < expected_start:
            raise AlignmentError(
                f"{path}:{lineno}: row ({token}, {start}, {end}) overlaps or is "
                f"out of order relative to the previous row ending at "
                f"{expected_start - 1}"
            )
        if start > expected_start:
            raise AlignmentError(
                f"{path}:{lineno}: frames [{expected_start}, {start - 1}] are "
                f"uncovered before row ({token}, {start}, {end})"
            )
        out.append((token, start, end))
        expected_start = end + 1
    return WordBoundaries(entries=out)


def write_boundary_file(boundaries: WordBoundaries, path):
    with open(path, "w") as fh:
        for token, start, end in boundaries.entries:
            fh.write(f"{token}\t{start}\t{end}\n")


def labels_to_ids(labels, lexicon) -> np.ndarray:
    index = {tok: i for i, tok in enumerate(lexicon)}
    try:
        return np.array([index[tok] for tok in labels], dtype=np.int64)
    except KeyError as exc:
        raise AlignmentError(f"label {exc.args[0]!r} is not in the lexicon") from None
