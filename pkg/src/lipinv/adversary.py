"""Speaker adversary: pooling, classifier, and the gradient reversal layer.

The classifier itself trains normally to recognize speakers; the reversal
layer flips (and scales by lambda) the gradient flowing back into the visual
encoder, so whatever helps the classifier gets actively removed upstream.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def gradient_reverse(x, lam: float):
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    if lam < 0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    return _ReverseGrad.apply(x, lam)


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        self.lam = lam

    def forward(self, x):
        return gradient_reverse(x, self.lam)


def compress_spatial(conv_map):
    """Global spatial max per channel: (B, C, T, H, W) -> (B, T, C)."""
    pooled = conv_map.amax(dim=(-2, -1))            # (B, C, T)
    return pooled.transpose(1, 2)


def compress_channels(seq, group_size):
    """Channel-group max for flat features: (B, T, C) -> (B, T, C//group)."""
    b, t, c = seq.shape
    if c % group_size != 0:
        raise ValueError(f"{c} channels not divisible by group size {group_size}")
    return seq.reshape(b, t, c // group_size, group_size).amax(dim=-1)


def statistical_pool(f_prime):
    """Concat of temporal mean and population std: (B, T, d) -> (B, 2d).

    Permutation of the T frames cannot change the output. A single frame
    has zero standard deviation by definition.
    """
    squeeze = f_prime.dim() == 2
    if squeeze:
        f_prime = f_prime.unsqueeze(0)
    if f_prime.shape[1] < 1:
        raise ValueError("cannot pool an empty sequence")
    mean = f_prime.mean(dim=1)
    if f_prime.shape[1] == 1:
        std = torch.zeros_like(mean)
    else:
        var = ((f_prime - mean.unsqueeze(1)) ** 2).mean(dim=1)
        std = var.clamp(min=0).sqrt()
    out = torch.cat([mean, std], dim=-1)
    return out.squeeze(0) if squeeze else out


class SpeakerClassifier(nn.Module):
    """Linear -> ReLU -> Linear over the pooled utterance embedding (Softmax
    on top when probabilities are requested)."""

    def __init__(self, embed_dim, hidden, n_speakers):
        super().__init__()
        self.n_speakers = n_speakers
        self.net = nn.Sequential(
            nn.Linear(embed_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, n_speakers),
        )

    def forward(self, emb):
        return self.net(emb)

    def predict_proba(self, emb):
        return F.softmax(self.net(emb), dim=-1)


def speaker_ce_loss(probs, speaker_ids):
    """-log p[true speaker], averaged over the batch."""
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    speaker_ids = torch.as_tensor(speaker_ids, device=probs.device).reshape(-1)
    if int(speaker_ids.max()) >= probs.shape[-1]:
        raise IndexError(
            f"speaker id {int(speaker_ids.max())} >= {probs.shape[-1]} classes"
        )
    picked = probs.gather(1, speaker_ids.unsqueeze(1)).squeeze(1)
    return -picked.clamp(min=torch.finfo(probs.dtype).tiny).log().mean()


class AdversarialSpeakerHead(nn.Module):
    """Reversal layer + pooling + classifier, with the tap-dependent spatial
    compression baked in."""

    def __init__(self, tap_dim, hidden, n_speakers, mode="image",
                 flat_group_size=4):
        super().__init__()
        self.mode = mode
        self.flat_group_size = flat_group_size
        if mode == "flat" and tap_dim % flat_group_size != 0:
            raise ValueError(
                f"tap width {tap_dim} not divisible by group {flat_group_size}"
            )
        pooled_dim = tap_dim if mode == "image" else tap_dim // flat_group_size
        self.embed_dim = 2 * pooled_dim
        self.classifier = SpeakerClassifier(self.embed_dim, hidden, n_speakers)

    def pool(self, tap):
        """Tap features -> per-utterance embedding (mean||std)."""
        if self.mode == "image":
            f_prime = compress_spatial(tap)
        else:
            f_prime = compress_channels(tap, self.flat_group_size)
        return statistical_pool(f_prime)

    def forward(self, tap, lam: float):
        """Returns speaker logits; gradient to ``tap`` is reversed by lam."""
        reversed_tap = gradient_reverse(tap, lam)
        return self.classifier(self.pool(reversed_tap))

    def loss(self, tap, speaker_ids, lam: float):
        """Stable cross-entropy straight from logits; equals
        speaker_ce_loss(softmax(logits), ids) up to rounding."""
        logits = self.forward(tap, lam)
        return F.cross_entropy(logits, torch.as_tensor(speaker_ids,
                                                       device=logits.device))


def grl_lambda_at(step_fraction: float, base_lambda: float,
                  schedule: str = "constant", gamma: float = 10.0):
    """Reversal strength at a point in training; ``ramp`` is the classic
    0 -> base_lambda warm-up 2/(1+exp(-gamma*p)) - 1."""
    if schedule == "constant":
        return base_lambda
    if schedule == "ramp":
        p = min(max(step_fraction, 0.0), 1.0)
        return base_lambda * (2.0 / (1.0 + math.exp(-gamma * p)) - 1.0)
    raise ValueError(f"unknown schedule {schedule!r}")
