"""Edit distance and the CER/WER evaluation metrics.

The Levenshtein core is a numba kernel over int arrays: evaluation only needs
hundreds of calls, but the exhaustive correctness harness runs it millions of
times, and a compiled kernel keeps that honest on one CPU.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def levenshtein_kernel(a, b):
    """Unit-cost insert/delete/substitute distance between two int arrays."""
    la, lb = a.shape[0], b.shape[0]
    if la < lb:
        a, b = b, a
        la, lb = lb, la
    prev = np.empty(lb + 1, dtype=np.int64)
    cur = np.empty(lb + 1, dtype=np.int64)
    for j in range(lb + 1):
        prev[j] = j
    for i in range(1, la + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, lb + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1]
            else:
                best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = best + 1
        prev, cur = cur, prev
    return prev[lb]


def _encode_pair(ref, hyp):
    codes = {}
    def enc(seq):
        out = np.empty(len(seq), dtype=np.int32)
        for i, tok in enumerate(seq):
            out[i] = codes.setdefault(tok, len(codes))
        return out
    return enc(list(ref)), enc(list(hyp))


def edit_distance(ref, hyp) -> int:
    """Minimal edit count between two token sequences (any hashable tokens)."""
    a, b = _encode_pair(ref, hyp)
    return int(levenshtein_kernel(a, b))


def _as_chars(words):
    return list(" ".join(words))


def error_rates(references, hypotheses):
    """Corpus-level CER and WER.

    CER works on the character spelling of the word sequence (spaces
    included); WER on word tokens. Both are total edit distance over total
    reference length, so empty hypotheses against nonempty references score
    exactly 1.0.
    """
    if len(references) != len(hypotheses):
        raise ValueError("reference/hypothesis count mismatch")
    char_dist = char_len = word_dist = word_len = 0
    per_sample = []
    for ref, hyp in zip(references, hypotheses):
        cd = edit_distance(_as_chars(ref), _as_chars(hyp))
        wd = edit_distance(ref, hyp)
        char_dist += cd
        char_len += len(_as_chars(ref))
        word_dist += wd
        word_len += len(ref)
        per_sample.append({"char_dist": cd, "char_len": len(_as_chars(ref)),
                           "word_dist": wd, "word_len": len(ref)})
    cer = char_dist / char_len if char_len else 0.0
    wer = word_dist / word_len if word_len else 0.0
    return {"cer": cer, "wer": wer, "char_dist": char_dist,
            "char_len": char_len, "word_dist": word_dist,
            "word_len": word_len, "per_sample": per_sample}
