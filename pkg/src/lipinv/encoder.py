"""Visual front-end: conv stack -> bidirectional GRU -> self-attention encoder.

The temporal axis is preserved end to end (stride 1, same-padding), which the
frame-level alignment losses depend on. Image input runs through 3D convs
with spatial max-pooling; flat feature input runs through temporal 1D convs.
"""

import math

import torch
import torch.nn as nn

from .config import ModelConfig, ConfigError


class EmptySequenceError(ValueError):
    """A zero-length frame sequence reached a temporal module."""


def sinusoidal_positions(T: int, d: int, dtype=torch.float32, device=None):
    """Classic fixed position encoding: sin on even dims, cos on odd dims."""
    position = torch.arange(T, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, d, 2, dtype=dtype, device=device)
    div = torch.exp(-half * math.log(10000.0) / d)
    pe = torch.zeros(T, d, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: d // 2])
    return pe


class ConvFrontend3D(nn.Module):
    """Stack of Conv3d+ReLU+MaxPool(1,2,2)+Dropout layers over (B,T,H,W)."""

    def __init__(self, height, width, channels=(8, 16, 32), kernel=3,
                 dropout=0.1):
        super().__init__()
        if height < kernel or width < kernel:
            raise ConfigError(
                f"spatial dims ({height}x{width}) smaller than kernel {kernel}"
            )
        h, w = height, width
        layers = []
        in_c = 1
        for out_c in channels:
            layers.append(nn.Conv3d(in_c, out_c, kernel_size=kernel,
                                    padding=kernel // 2))
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(
                    f"{height}x{width} input cannot survive "
                    f"{len(channels)} spatial poolings"
                )
            in_c = out_c
        self.convs = nn.ModuleList(layers)
        self.pool = nn.MaxPool3d(kernel_size=(1, 2, 2))
        self.dropout = nn.Dropout(dropout)
        self.kernel = kernel
        self.out_channels = channels[-1]
        self.out_spatial = (h, w)
        self.out_dim = channels[-1] * h * w

    def feature_map(self, frames):
        """(B, T, H, W) -> (B, C, T, H', W') conv feature volume."""
        if frames.shape[1] < 1:
            raise EmptySequenceError("got a 0-frame input")
        x = frames.unsqueeze(1)                       # (B, 1, T, H, W)
        for conv in self.convs:
            x = self.dropout(self.pool(torch.relu(conv(x))))
        return x

    def forward(self, frames):
        """(B, T, H, W) -> (B, T, out_dim) flattened per-frame features."""
        x = self.feature_map(frames)
        b, c, t = x.shape[:3]
        return x.permute(0, 2, 1, 3, 4).reshape(b, t, -1), x


class ConvFrontend1D(nn.Module):
    """Temporal conv stack for flat per-frame feature vectors (B, T, D)."""

    def __init__(self, flat_dim, channels=(8, 16, 32), kernel=3, dropout=0.1):
        super().__init__()
        layers = []
        in_c = flat_dim
        for out_c in channels:
            layers.append(nn.Conv1d(in_c, out_c, kernel_size=kernel,
                                    padding=kernel // 2))
            in_c = out_c
        self.convs = nn.ModuleList(layers)
        self.dropout = nn.Dropout(dropout)
        self.out_channels = channels[-1]
        self.out_dim = channels[-1]

    def forward(self, frames):
        if frames.shape[1] < 1:
            raise EmptySequenceError("got a 0-frame input")
        x = frames.transpose(1, 2)                    # (B, D, T)
        for conv in self.convs:
            x = self.dropout(torch.relu(conv(x)))
        seq = x.transpose(1, 2)                       # (B, T, C)
        return seq, x


class BidirectionalRecurrent(nn.Module):
    """Bi-GRU; output frame i is [forward_i, backward_i] of width 2*hidden."""

    def __init__(self, input_dim, hidden):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden, batch_first=True,
                          bidirectional=True)
        self.out_dim = 2 * hidden

    def forward(self, x):
        if x.shape[1] < 1:
            raise EmptySequenceError("recurrent layer got an empty sequence")
        out, _ = self.gru(x)
        return out


class SelfAttentionEncoder(nn.Module):
    """Linear projection + position encoding + transformer encoder.

    With zero layers this degenerates to projection + PE, handy for tests.
    """

    def __init__(self, input_dim, d, layers, heads, dropout=0.1):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.proj = nn.Linear(input_dim, d)
        self.d = d
        if layers > 0:
            layer = nn.TransformerEncoderLayer(
                d_model=d, nhead=heads, dim_feedforward=4 * d,
                dropout=dropout, batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        else:
            self.encoder = None

    def forward(self, x):
        h = self.proj(x)
        pe = sinusoidal_positions(h.shape[1], self.d, dtype=h.dtype,
                                  device=h.device)
        h = h + pe.unsqueeze(0)
        if self.encoder is not None:
            h = self.encoder(h)
        return h


class VisualEncoder(nn.Module):
    """Full visual pathway producing per-frame embeddings ``v`` plus the
    intermediate features tapped by the speaker-adversary branch."""

    def __init__(self, cfg: ModelConfig, frame_shape):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.frame_shape = tuple(frame_shape)
        if len(frame_shape) == 2:
            self.frontend = ConvFrontend3D(
                frame_shape[0], frame_shape[1], cfg.conv_channels,
                cfg.conv_kernel, cfg.conv_dropout)
            self.mode = "image"
        elif len(frame_shape) == 1:
            self.frontend = ConvFrontend1D(
                frame_shape[0], cfg.conv_channels, cfg.conv_kernel,
                cfg.conv_dropout)
            self.mode = "flat"
        else:
            raise ConfigError(f"unsupported frame shape {frame_shape}")
        self.recurrent = BidirectionalRecurrent(self.frontend.out_dim,
                                                cfg.recurrent_hidden)
        self.attention = SelfAttentionEncoder(
            self.recurrent.out_dim, cfg.model_dim, cfg.attn_layers,
            cfg.attn_heads, cfg.attn_dropout)
        # the adversary either sees the conv volume (spatial max applies) or
        # an already-flat per-frame sequence (channel-group max applies)
        if cfg.adversary_tap == "conv" and self.mode == "image":
            self.tap_layout = "image"
            self.tap_dim = self.frontend.out_channels
        elif cfg.adversary_tap == "conv":
            self.tap_layout = "flat"
            self.tap_dim = self.frontend.out_dim
        else:
            self.tap_layout = "flat"
            self.tap_dim = self.recurrent.out_dim

    def forward(self, frames):
        """(B, T, ...) frames -> (v, tap) with v of shape (B, T, d).

        ``tap`` is the representation the adversary branch consumes: the raw
        conv feature volume ("conv" tap) or the Bi-GRU output ("recurrent").
        """
        seq, conv_map = self.frontend(frames)
        rec = self.recurrent(seq)
        v = self.attention(rec)
        if self.cfg.adversary_tap == "recurrent":
            tap = rec
        elif self.mode == "image":
            tap = conv_map
        else:
            tap = seq
        return v, tap
