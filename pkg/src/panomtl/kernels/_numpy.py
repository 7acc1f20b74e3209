"""Vectorised numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_numba``; the
two are kept numerically interchangeable (results agree to rounding).
"""
import numpy as np


def _corners(u, v, H, W):
    x0f = np.floor(u)
    fx = u - x0f
    x0 = x0f.astype(np.int64) % W
    x1 = (x0 + 1) % W
    vc = np.clip(v, 0.0, H - 1.0)
    y0f = np.floor(vc)
    fy = vc - y0f
    y0 = y0f.astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    inside = (v > 0.0) & (v < H - 1.0)
    return x0, x1, fx, y0, y1, fy, inside


def wrap_sample_forward(feat, u, v):
    """Bilinear gather from ``feat`` (B,C,H,W) at (B,N) coordinates -> (B,C,N)."""
    B, C, H, W = feat.shape
    x0, x1, fx, y0, y1, fy, _ = _corners(u, v, H, W)
    flat = feat.reshape(B, C, H * W)

    def take(y, x):
        idx = (y * W + x)[:, None, :]
        return np.take_along_axis(flat, np.broadcast_to(idx, (B, C, idx.shape[-1])), axis=2)

    fx = fx[:, None, :]
    fy = fy[:, None, :]
    top = take(y0, x0) * (1 - fx) + take(y0, x1) * fx
    bot = take(y1, x0) * (1 - fx) + take(y1, x1) * fx
    return (top * (1 - fy) + bot * fy).astype(feat.dtype, copy=False)


def wrap_sample_backward(feat, u, v, gout):
    """Gradients of :func:`wrap_sample_forward` w.r.t. feat, u and v."""
    B, C, H, W = feat.shape
    N = u.shape[1]
    x0, x1, fx, y0, y1, fy, inside = _corners(u, v, H, W)
    flat = feat.reshape(B, C, H * W)

    def take(y, x):
        idx = (y * W + x)[:, None, :]
        return np.take_along_axis(flat, np.broadcast_to(idx, (B, C, N)), axis=2)

    f00, f01 = take(y0, x0), take(y0, x1)
    f10, f11 = take(y1, x0), take(y1, x1)
    fxe = fx[:, None, :]
    fye = fy[:, None, :]
    gu = np.sum(gout * ((1 - fye) * (f01 - f00) + fye * (f11 - f10)), axis=1)
    gv = np.sum(gout * ((1 - fxe) * (f10 - f00) + fxe * (f11 - f01)), axis=1)
    gv = np.where(inside, gv, 0.0)

    # scatter-add through one bincount over (b, c, pixel)
    base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
    idx, wts = [], []
    for y, x, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                    (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        idx.append(base + (y * W + x)[:, None, :])
        wts.append(gout * w[:, None, :])
    idx = np.concatenate([np.broadcast_to(i, (B, C, N)).ravel() for i in idx])
    wts = np.concatenate([w.ravel() for w in wts])
    gfeat = np.bincount(idx, weights=wts, minlength=B * C * H * W)
    return (gfeat.reshape(B, C, H, W).astype(feat.dtype, copy=False),
            gu.astype(u.dtype, copy=False), gv.astype(v.dtype, copy=False))


def maxpool2_forward(x):
    """2x2/stride-2 max; returns (out, flat window argmax in 0..3, first max wins)."""
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(arg, gout):
    B, C, h, w = gout.shape
    g = np.zeros((B, C, h, w, 4), dtype=gout.dtype)
    np.put_along_axis(g, arg[..., None], gout[..., None], axis=-1)
    g = g.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(B, C, 2 * h, 2 * w)


def raycast_boxes(dirs, room_lo, room_hi, obj_lo, obj_hi):
    """Nearest hit of rays from the origin against a room (inside) and boxes (outside).

    Returns ``(t, axis, sign, box)`` per ray: ``axis`` is the hit face axis,
    ``sign`` the sign along ``axis`` of the camera-facing face normal and
    ``box`` the object index, -1 for the room.
    """
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_room = np.where(dirs > 0, room_hi[None, :] * inv, room_lo[None, :] * inv)
        t_room = np.where(dirs == 0, np.inf, t_room)
    axis = np.argmin(t_room, axis=1)
    t = t_room[np.arange(n), axis]
    sign = -np.sign(dirs[np.arange(n), axis])
    box = np.full(n, -1, dtype=np.int64)
    for k in range(obj_lo.shape[0]):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = obj_lo[k][None, :] * inv
            t2 = obj_hi[k][None, :] * inv
        # rays parallel to a slab: inside the slab -> unconstrained, else miss
        par = dirs == 0
        inslab = (obj_lo[k][None, :] <= 0) & (obj_hi[k][None, :] >= 0)
        tmin = np.where(par, np.where(inslab, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(par, np.where(inslab, np.inf, -np.inf), np.maximum(t1, t2))
        near_axis = np.argmax(tmin, axis=1)
        tnear = tmin[np.arange(n), near_axis]
        tfar = np.min(tmax, axis=1)
        hit = (tnear <= tfar) & (tnear > 0) & (tnear < t)
        t = np.where(hit, tnear, t)
        axis = np.where(hit, near_axis, axis)
        sign = np.where(hit, -np.sign(dirs[np.arange(n), near_axis]), sign)
        box = np.where(hit, k, box)
    return t, axis, sign, box
