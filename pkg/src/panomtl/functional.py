"""Differentiable primitives the network is built from.

Spatial ops take rank-4 ``(batch, channels, height, width)`` tensors. Where
an op has a ``wrap`` flag, the width axis is treated as periodic (longitude
on an equirectangular image) while the height axis is zero padded or
clamped.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import as_tensor, make, mean, sqrt, tsum

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "maxpool2",
    "bilinear_resize",
    "linear",
    "softmax",
    "normalize_layer",
    "switchable_norm",
    "sample_bilinear_wrap",
    "vector_angle",
    "normalize_vectors",
]


def _pad(x, p, wrap):
    if p == 0:
        return x
    x = np.pad(x, ((0, 0), (0, 0), (p, p), (0, 0)))
    if wrap:
        if p > x.shape[3]:
            raise ValueError("circular padding wider than the input")
        return np.concatenate([x[..., -p:], x, x[..., :p]], axis=3)
    return np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p)))


def _unpad(gp, p, wrap, H, W):
    if p == 0:
        return gp
    g = gp[:, :, p:p + H]
    if not wrap:
        return np.ascontiguousarray(g[..., p:p + W])
    out = g[..., p:p + W].copy()
    out[..., W - p:] += g[..., :p]
    out[..., :p] += g[..., p + W:]
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0, wrap=False):
    """2-D cross-correlation.

    ``padding`` pixels are added on every side: zeros along the height and,
    with ``wrap=True``, a circular copy of the opposite edge along the width.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects rank-4 input and weight")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"bias shape {bias.shape} does not match {O} output channels")
    parents = (x, weight) if bias is None else (x, weight, bias)
    xd, wd = x.data, weight.data

    if kh == kw == 1 and stride == 1 and padding == 0:
        flat = xd.reshape(B, C, H * W)
        out = np.matmul(wd[:, :, 0, 0], flat).reshape(B, O, H, W)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def back(g):
            gf = g.reshape(B, O, H * W)
            gx = np.matmul(wd[:, :, 0, 0].T, gf).reshape(B, C, H, W)
            gw = np.tensordot(gf, flat, axes=([0, 2], [0, 2]))[:, :, None, None]
            grads = (gx, gw)
            return grads if bias is None else grads + (gf.sum(axis=(0, 2)),)

        return make(out, parents, back, "conv2d")

    xp = _pad(xd, padding, wrap)
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d output would be empty")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gcol = np.tensordot(g, wd, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
        gxp = np.zeros_like(xp)
        hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcol[..., i, j].transpose(0, 3, 1, 2)
        grads = (_unpad(gxp, padding, wrap, H, W), gw)
        return grads if bias is None else grads + (g.sum(axis=(0, 2, 3)),)

    return make(out, parents, back, "conv2d")


def depthwise_conv2d(x, weight, bias=None, padding=1, wrap=False):
    """Per-channel ``k x k`` convolution, stride 1; ``weight`` is (C, k, k)."""
    B, C, H, W = x.shape
    if weight.shape[0] != C or weight.ndim != 3:
        raise ValueError(f"depthwise weight {weight.shape} does not match {C} channels")
    kh, kw = weight.shape[1:]
    xp = _pad(x.data, padding, wrap)
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    wd = weight.data
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + Ho, j:j + Wo] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho, j:j + Wo] += g * wd[None, :, i, j, None, None]
                gw[:, i, j] = np.sum(g * xp[:, :, i:i + Ho, j:j + Wo], axis=(0, 2, 3))
        grads = (_unpad(gxp, padding, wrap, H, W), gw)
        return grads if bias is None else grads + (g.sum(axis=(0, 2, 3)),)

    return make(out, parents, back, "depthwise_conv2d")


def maxpool2(x):
    """2x2 max pooling, stride 2; gradient goes to the first maximal cell."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(x.data))
    return make(out, (x,), lambda g: (kernels.maxpool2_backward(arg, np.ascontiguousarray(g)),),
                "maxpool2")


def resize_matrix(n_in, n_out, wrap=False, dtype=np.float64):
    """(n_out, n_in) interpolation matrix for align-corners-false linear resampling."""
    R = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    if not wrap:
        src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    if wrap:
        i1 = (i0 + 1) % n_in
        i0 = i0 % n_in
    else:
        i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - frac)
    np.add.at(R, (rows, i1), frac)
    return R


def bilinear_resize(x, out_h, out_w, wrap_width=False):
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    B, C, H, W = x.shape
    Rh = resize_matrix(H, out_h, False, x.dtype)
    Rw = resize_matrix(W, out_w, wrap_width, x.dtype)
    out = np.matmul(np.matmul(Rh, x.data), Rw.T)
    return make(out, (x,), lambda g: (np.matmul(Rh.T, np.matmul(g, Rw)),), "bilinear_resize")


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias``; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        grads = (g @ wd, gw)
        return grads if bias is None else grads + (g2.sum(axis=0),)

    return make(out, parents, back, "linear")


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),),
                "softmax")


_NORM_AXES = {"batch": (0, 2, 3), "layer": (1, 2, 3), "instance": (2, 3)}


def _affine(y, gain, shift):
    C = y.shape[1]
    if gain is not None:
        y = y * gain.reshape(1, C, 1, 1)
    if shift is not None:
        y = y + shift.reshape(1, C, 1, 1)
    return y


def normalize_layer(x, mode, gain=None, shift=None, eps=1e-5):
    """Standardise over the statistic axes of ``mode`` then apply a per-channel affine."""
    try:
        axes = _NORM_AXES[mode]
    except KeyError:
        raise ValueError(f"unknown normalisation mode {mode!r}") from None
    mu = mean(x, axes, keepdims=True)
    d = x - mu
    var = mean(d * d, axes, keepdims=True)
    return _affine(d / sqrt(var + eps), gain, shift)


def switchable_norm(x, mean_logits, var_logits, gain=None, shift=None, eps=1e-5):
    """Normalise with a softmax-weighted mix of batch, layer and instance statistics.

    Logit order is (batch, layer, instance) for both mixtures.
    """
    mu_in = mean(x, (2, 3), keepdims=True)
    d = x - mu_in
    var_in = mean(d * d, (2, 3), keepdims=True)
    second = var_in + mu_in * mu_in
    mu_ln = mean(mu_in, 1, keepdims=True)
    var_ln = mean(second, 1, keepdims=True) - mu_ln * mu_ln
    mu_bn = mean(mu_in, 0, keepdims=True)
    var_bn = mean(second, 0, keepdims=True) - mu_bn * mu_bn
    mw = softmax(mean_logits, 0)
    vw = softmax(var_logits, 0)
    mu = mw[0] * mu_bn + mw[1] * mu_ln + mw[2] * mu_in
    var = vw[0] * var_bn + vw[1] * var_ln + vw[2] * var_in
    return _affine((x - mu) / sqrt(var + eps), gain, shift)


def sample_bilinear_wrap(feat, u, v):
    """Sample ``feat`` (B,C,H,W) at fractional pixel coordinates ``u, v`` of shape (B,N).

    Integer coordinates hit pixel centres. ``u`` wraps modulo the width and
    ``v`` is clamped to the first/last row. Differentiable in the feature
    values and in both coordinates. Returns (B,C,N).
    """
    u, v = as_tensor(u, like=feat), as_tensor(v, like=feat)
    if u.shape != v.shape or u.ndim != 2 or u.shape[0] != feat.shape[0]:
        raise ValueError(f"coordinates must be (B,N) matching the batch, got {u.shape}, {v.shape}")
    fd = np.ascontiguousarray(feat.data)
    ud = np.ascontiguousarray(u.data, dtype=fd.dtype)
    vd = np.ascontiguousarray(v.data, dtype=fd.dtype)
    if not (np.isfinite(ud).all() and np.isfinite(vd).all()):
        raise ValueError("non-finite sampling coordinates")
    out = kernels.wrap_sample_forward(fd, ud, vd)
    return make(out, (feat, u, v),
                lambda g: kernels.wrap_sample_backward(fd, ud, vd, np.ascontiguousarray(g)),
                "sample_bilinear_wrap")


def vector_angle(a, b, squared=False):
    """Angle between 3-vectors along axis 1, as ``atan2(|a x b|, a . b)``.

    Works for any vector lengths (the angle is scale free) and is defined for
    perpendicular and antiparallel pairs. At parallel/antiparallel pairs the
    direction of ``a x b`` is undefined; that term's gradient is taken as 0.
    """
    a, b = as_tensor(a), as_tensor(b, like=a)
    ad, bd = a.data, b.data
    c = np.cross(ad, bd, axis=1)
    s = np.sqrt(np.sum(c * c, axis=1))
    d = np.sum(ad * bd, axis=1)
    theta = np.arctan2(s, d)
    out = theta * theta if squared else theta

    def back(g):
        if squared:
            g = 2.0 * theta * g
        r2 = s * s + d * d
        r2 = np.where(r2 > 0, r2, 1.0)
        ds = (d / r2) * g
        dd = (-s / r2) * g
        chat = np.where(s[:, None] > 0, c / np.where(s > 0, s, 1.0)[:, None], 0.0)
        ga = ds[:, None] * np.cross(bd, chat, axis=1) + dd[:, None] * bd
        gb = ds[:, None] * np.cross(chat, ad, axis=1) + dd[:, None] * ad
        return ga.astype(ad.dtype), gb.astype(bd.dtype)

    return make(out.astype(ad.dtype), (a, b), back, "vector_angle")


def normalize_vectors(x, eps=1e-8):
    """Scale vectors along axis 1 to unit length, ``x / sqrt(|x|^2 + eps^2)``."""
    n2 = tsum(x * x, 1, keepdims=True)
    return x / sqrt(n2 + eps * eps)
