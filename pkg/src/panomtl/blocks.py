"""Panoramic transformer block: deformable spherical attention + local feed-forward.

The attention follows

    P(f, s) = sum_m W_m [ sum_k A_mqk * W'_m f(s_mqk + ds_mqk) ]

for every token q: the per-token flow ``ds`` and weights ``A`` are predicted
from the token's own feature, ``s`` is the precomputed spherical grid and
``f(.)`` is wrap-aware bilinear sampling. ``W'_m`` is the head-``m`` slice of
a value projection and ``sum_m W_m`` one output projection over the
concatenated heads.
"""
import numpy as np

from . import functional as F
from .module import Module, he_normal
from .tensor import Tensor, gelu, tsum


def conv1x1(x, w, b):
    return F.conv2d(x, w, b)


class PanoAttention(Module):
    def __init__(self, channels, heads=2, k=9, rng=None):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels do not split into {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        C, M = channels, heads
        self.channels, self.heads, self.k = C, M, k
        # flow head starts at exactly zero so the first pass samples the grid
        self.flow_w = self.param("flow.weight", np.zeros((2 * M * k, C, 1, 1)))
        self.flow_b = self.param("flow.bias", np.zeros(2 * M * k))
        self.attn_w = self.param("attn.weight", he_normal(rng, (M * k, C, 1, 1), C, 0.1))
        self.attn_b = self.param("attn.bias", np.zeros(M * k))
        self.value_w = self.param("value.weight", he_normal(rng, (C, C, 1, 1), C, 1.0))
        self.value_b = self.param("value.bias", np.zeros(C))
        self.out_w = self.param("out.weight", he_normal(rng, (C, C, 1, 1), C, 0.5))
        self.out_b = self.param("out.bias", np.zeros(C))

    def sampling_coords(self, x, grid):
        """Effective (u, v) per (batch, head, sample, token): grid + learned flow."""
        B, C, H, W = x.shape
        if (grid.height, grid.width) != (H, W):
            raise ValueError(f"grid {grid.height}x{grid.width} does not match features {H}x{W}")
        if grid.k != self.k:
            raise ValueError(f"grid has {grid.k} samples, block expects {self.k}")
        M, k, N = self.heads, self.k, H * W
        flow = conv1x1(x, self.flow_w, self.flow_b).reshape(B, M, k, 2, N)
        gu = Tensor(np.ascontiguousarray(grid.u.T), dtype=x.dtype)  # (k, N)
        gv = Tensor(np.ascontiguousarray(grid.v.T), dtype=x.dtype)
        return gu + flow[:, :, :, 0, :], gv + flow[:, :, :, 1, :]

    def attention_weights(self, x):
        B, _, H, W = x.shape
        logits = conv1x1(x, self.attn_w, self.attn_b).reshape(B, self.heads, self.k, H * W)
        return F.softmax(logits, axis=2)

    def delta(self, x, grid):
        """The attention term P(x, grid) without the residual."""
        B, C, H, W = x.shape
        M, k, N = self.heads, self.k, H * W
        u, v = self.sampling_coords(x, grid)
        A = self.attention_weights(x)
        value = conv1x1(x, self.value_w, self.value_b).reshape(B * M, C // M, H, W)
        s = F.sample_bilinear_wrap(value, u.reshape(B * M, k * N), v.reshape(B * M, k * N))
        s = s.reshape(B, M, C // M, k, N) * A.reshape(B, M, 1, k, N)
        mixed = tsum(s, 3).reshape(B, C, H, W)
        return conv1x1(mixed, self.out_w, self.out_b)


def pano_attention(f, grid, attn):
    """Residual spherical attention: ``f + P(f, grid)``."""
    return f + attn.delta(f, grid)


class LocalFFN(Module):
    """Pointwise expand -> GELU -> depthwise 3x3 (longitude wrap) -> pointwise contract."""

    def __init__(self, channels, ratio=2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        C, E = channels, ratio * channels
        self.pw1_w = self.param("pw1.weight", he_normal(rng, (E, C, 1, 1), C))
        self.pw1_b = self.param("pw1.bias", np.zeros(E))
        self.dw_w = self.param("dw.weight", he_normal(rng, (E, 3, 3), 9, 1.0))
        self.dw_b = self.param("dw.bias", np.zeros(E))
        self.pw2_w = self.param("pw2.weight", he_normal(rng, (C, E, 1, 1), E, 0.5))
        self.pw2_b = self.param("pw2.bias", np.zeros(C))

    def delta(self, x):
        h = gelu(conv1x1(x, self.pw1_w, self.pw1_b))
        h = F.depthwise_conv2d(h, self.dw_w, self.dw_b, padding=1, wrap=True)
        return conv1x1(h, self.pw2_w, self.pw2_b)


def local_ffn(f, ffn):
    return f + ffn.delta(f)


class Norm(Module):
    def __init__(self, channels, mode="layer"):
        super().__init__()
        self.mode = mode
        self.gain = self.param("gain", np.ones(channels))
        self.shift = self.param("shift", np.zeros(channels))

    def __call__(self, x):
        return F.normalize_layer(x, self.mode, self.gain, self.shift)


class PanoBlock(Module):
    """Pre-norm residual block: x + Attn(Norm(x)), then x + FFN(Norm(x))."""

    def __init__(self, channels, heads=2, k=9, ffn_ratio=2, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.norm1 = self.child("norm1", Norm(channels))
        self.attn = self.child("attn", PanoAttention(channels, heads, k, rng))
        self.norm2 = self.child("norm2", Norm(channels))
        self.ffn = self.child("ffn", LocalFFN(channels, ffn_ratio, rng))

    def __call__(self, f, grid):
        g = f + self.attn.delta(self.norm1(f), grid)
        return g + self.ffn.delta(self.norm2(g))


def pano_block(f, grid, block):
    return block(f, grid)
