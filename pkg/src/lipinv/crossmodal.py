"""Cross-modal text alignment: the implicit route to speaker invariance.

Per-frame label sequences are embedded by a small transformer text encoder;
frame-wise similarity matrices against the visual features feed a contrastive
loss over positive/negative label pairs plus a diagonal cross-entropy that
sharpens the frame-to-frame correspondence. Pulling every speaker's visual
features toward the same (speaker-blind) text anchors is what squeezes the
speaker-specific component out of the backbone.
"""

import math
import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoder import sinusoidal_positions


class VocabError(ValueError):
    """Label id outside the text-encoder vocabulary."""


class TextEncoder(nn.Module):
    """Embedding + position encoding + N transformer layers.

    Dropout is intentionally 0 here: the branch must not consume global RNG,
    so toggling it cannot perturb an otherwise identical run.
    """

    def __init__(self, vocab_size, d, layers, heads):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, d)
        self.d = d
        if layers > 0:
            layer = nn.TransformerEncoderLayer(
                d_model=d, nhead=heads, dim_feedforward=4 * d,
                dropout=0.0, batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        else:
            self.encoder = None

    def forward(self, label_ids):
        """(B, T) int label ids -> (B, T, d) per-frame text features."""
        if label_ids.numel() and int(label_ids.max()) >= self.vocab_size:
            raise VocabError(
                f"label id {int(label_ids.max())} >= vocab size {self.vocab_size}"
            )
        if label_ids.numel() and int(label_ids.min()) < 0:
            raise VocabError(f"negative label id {int(label_ids.min())}")
        q = self.embedding(label_ids)
        pe = sinusoidal_positions(q.shape[1], self.d, dtype=q.dtype,
                                  device=q.device)
        h = q + pe.unsqueeze(0)
        if self.encoder is not None:
            h = self.encoder(h)
        return h


def similarity_matrix(v, l, kind="cosine"):
    """All-pairs frame similarity: out[..., i, j] compares v_i with l_j.

    Cosine mode L2-normalizes rows; zero-norm rows are defined to have zero
    similarity (with a warning) rather than NaN.
    """
    if v.shape != l.shape:
        raise ValueError(f"shape mismatch: {tuple(v.shape)} vs {tuple(l.shape)}")
    if kind == "dot":
        return v @ l.transpose(-1, -2)
    if kind != "cosine":
        raise ValueError(f"unknown similarity kind {kind!r}")
    v_norm = v.norm(dim=-1, keepdim=True)
    l_norm = l.norm(dim=-1, keepdim=True)
    if (v_norm == 0).any() or (l_norm == 0).any():
        warnings.warn("zero-norm feature row; its similarities are set to 0")
    v_unit = v / v_norm.clamp(min=torch.finfo(v.dtype).tiny)
    l_unit = l / l_norm.clamp(min=torch.finfo(l.dtype).tiny)
    v_unit = torch.where(v_norm > 0, v_unit, torch.zeros_like(v_unit))
    l_unit = torch.where(l_norm > 0, l_unit, torch.zeros_like(l_unit))
    return v_unit @ l_unit.transpose(-1, -2)


def infonce_loss(e_pos, e_neg, tau):
    """Contrastive loss over the diagonals of the two similarity matrices.

    For each frame i the positive diagonal entry competes against the whole
    negative diagonal:

        -(1/T) sum_i log[ exp(p_i/tau) / (exp(p_i/tau) + sum_j exp(n_j/tau)) ]

    computed via log-sum-exp, so values like |E/tau| ~ 1e4 stay finite.
    """
    tau = _as_scalar_tensor(tau, e_pos)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {float(tau)}")
    if e_pos.shape[-1] != e_pos.shape[-2] or e_pos.shape != e_neg.shape:
        raise ValueError("similarity matrices must be square and same-shape")
    pos = torch.diagonal(e_pos, dim1=-2, dim2=-1) / tau    # (..., T)
    neg = torch.diagonal(e_neg, dim1=-2, dim2=-1) / tau
    # per i: logsumexp([p_i, n_1..n_T]) - p_i
    stacked = torch.cat([pos.unsqueeze(-1),
                         neg.unsqueeze(-2).expand(*pos.shape, neg.shape[-1])],
                        dim=-1)
    return (torch.logsumexp(stacked, dim=-1) - pos).mean()


def alignment_ce_loss(e_pos, tau=None, reduction="mean"):
    """Cross-entropy between row-softmaxed similarities and the identity
    target: each visual frame should match its own text frame."""
    if e_pos.shape[-1] != e_pos.shape[-2]:
        raise ValueError("positive similarity matrix must be square")
    logits = e_pos
    if tau is not None:
        tau = _as_scalar_tensor(tau, e_pos)
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {float(tau)}")
        logits = e_pos / tau
    log_rows = F.log_softmax(logits, dim=-1)
    diag = torch.diagonal(log_rows, dim1=-2, dim2=-1)
    per_matrix = -diag.mean(dim=-1) if reduction == "mean" else -diag.sum(dim=-1)
    return per_matrix.mean()


def _as_scalar_tensor(tau, like):
    if torch.is_tensor(tau):
        return tau.to(like.dtype)
    return torch.tensor(float(tau), dtype=like.dtype)


class ContrastiveTextHead(nn.Module):
    """Text encoder plus a trainable temperature, bundled with the combined
    alignment loss. Temperature lives in log space so it stays positive no
    matter what the optimizer does."""

    def __init__(self, vocab_size, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(vocab_size, cfg.model_dim,
                                        cfg.text_layers, cfg.attn_heads)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))

    @property
    def tau(self):
        return self.log_tau.exp()

    def loss(self, v, pos_ids, neg_ids, use_contrastive=True,
             use_matrix_ce=True):
        """Combined alignment loss for a batch of same-length sequences.

        v: (B, T, d); pos_ids/neg_ids: (B, T) label ids.
        Returns (l_id, l_cl, l_ce); l_id = l_cl + l_ce with unit weights.
        """
        l_pos = self.text_encoder(pos_ids)
        e_pos = similarity_matrix(v, l_pos, self.cfg.similarity)
        zero = v.new_zeros(())
        l_cl = zero
        l_ce = zero
        if use_contrastive:
            l_neg = self.text_encoder(neg_ids)
            e_neg = similarity_matrix(v, l_neg, self.cfg.similarity)
            l_cl = infonce_loss(e_pos, e_neg, self.tau)
        if use_matrix_ce:
            ce_tau = self.tau if self.cfg.ce_shares_temperature else None
            l_ce = alignment_ce_loss(e_pos, ce_tau, self.cfg.ce_reduction)
        return l_cl + l_ce, l_cl, l_ce
