"""numba-compiled versions of the hot kernels (same signatures as ``_numpy``)."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _corner(u, v, H, W):
    x0f = math.floor(u)
    fx = u - x0f
    x0 = int(x0f) % W
    x1 = (x0 + 1) % W
    vc = min(max(v, 0.0), H - 1.0)
    y0f = math.floor(vc)
    fy = vc - y0f
    y0 = int(y0f)
    y1 = min(y0 + 1, H - 1)
    return x0, x1, fx, y0, y1, fy


@njit(cache=True)
def wrap_sample_forward(feat, u, v):
    B, C, H, W = feat.shape
    N = u.shape[1]
    out = np.empty((B, C, N), dtype=feat.dtype)
    for b in range(B):
        for n in range(N):
            x0, x1, fx, y0, y1, fy = _corner(u[b, n], v[b, n], H, W)
            w00 = (1 - fx) * (1 - fy)
            w01 = fx * (1 - fy)
            w10 = (1 - fx) * fy
            w11 = fx * fy
            for c in range(C):
                out[b, c, n] = (feat[b, c, y0, x0] * w00 + feat[b, c, y0, x1] * w01
                                + feat[b, c, y1, x0] * w10 + feat[b, c, y1, x1] * w11)
    return out


@njit(cache=True)
def wrap_sample_backward(feat, u, v, gout):
    B, C, H, W = feat.shape
    N = u.shape[1]
    gfeat = np.zeros_like(feat)
    gu = np.zeros_like(u)
    gv = np.zeros_like(v)
    for b in range(B):
        for n in range(N):
            vv = v[b, n]
            x0, x1, fx, y0, y1, fy = _corner(u[b, n], vv, H, W)
            inside = vv > 0.0 and vv < H - 1.0
            w00 = (1 - fx) * (1 - fy)
            w01 = fx * (1 - fy)
            w10 = (1 - fx) * fy
            w11 = fx * fy
            su = 0.0
            sv = 0.0
            for c in range(C):
                g = gout[b, c, n]
                f00 = feat[b, c, y0, x0]
                f01 = feat[b, c, y0, x1]
                f10 = feat[b, c, y1, x0]
                f11 = feat[b, c, y1, x1]
                su += g * ((1 - fy) * (f01 - f00) + fy * (f11 - f10))
                sv += g * ((1 - fx) * (f10 - f00) + fx * (f11 - f01))
                gfeat[b, c, y0, x0] += g * w00
                gfeat[b, c, y0, x1] += g * w01
                gfeat[b, c, y1, x0] += g * w10
                gfeat[b, c, y1, x1] += g * w11
            gu[b, n] = su
            gv[b, n] = sv if inside else 0.0
    return gfeat, gu, gv


@njit(cache=True)
def maxpool2_forward(x):
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    out = np.empty((B, C, h, w), dtype=x.dtype)
    arg = np.empty((B, C, h, w), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for i in range(h):
                for j in range(w):
                    best = x[b, c, 2 * i, 2 * j]
                    k = 0
                    for q in range(1, 4):
                        val = x[b, c, 2 * i + q // 2, 2 * j + q % 2]
                        if val > best:
                            best = val
                            k = q
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = k
    return out, arg


@njit(cache=True)
def maxpool2_backward(arg, gout):
    B, C, h, w = gout.shape
    g = np.zeros((B, C, 2 * h, 2 * w), dtype=gout.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(h):
                for j in range(w):
                    q = arg[b, c, i, j]
                    g[b, c, 2 * i + q // 2, 2 * j + q % 2] = gout[b, c, i, j]
    return g


@njit(cache=True)
def raycast_boxes(dirs, room_lo, room_hi, obj_lo, obj_hi):
    n = dirs.shape[0]
    t_out = np.empty(n)
    axis_out = np.empty(n, dtype=np.int64)
    sign_out = np.empty(n)
    box_out = np.empty(n, dtype=np.int64)
    for r in range(n):
        t = np.inf
        ax = 0
        for a in range(3):
            d = dirs[r, a]
            if d > 0:
                ta = room_hi[a] / d
            elif d < 0:
                ta = room_lo[a] / d
            else:
                continue
            if ta < t:
                t = ta
                ax = a
        sg = -1.0 if dirs[r, ax] > 0 else 1.0
        bx = -1
        for k in range(obj_lo.shape[0]):
            tnear = -np.inf
            tfar = np.inf
            near_ax = 0
            miss = False
            for a in range(3):
                d = dirs[r, a]
                if d == 0:
                    if obj_lo[k, a] > 0 or obj_hi[k, a] < 0:
                        miss = True
                    # argmax over -inf entries picks the first axis, as numpy does
                    tmin = -np.inf if not miss else np.inf
                    tmax = np.inf if not miss else -np.inf
                else:
                    t1 = obj_lo[k, a] / d
                    t2 = obj_hi[k, a] / d
                    tmin = min(t1, t2)
                    tmax = max(t1, t2)
                if tmin > tnear:
                    tnear = tmin
                    near_ax = a
                if tmax < tfar:
                    tfar = tmax
            if miss:
                continue
            if tnear <= tfar and tnear > 0 and tnear < t:
                t = tnear
                ax = near_ax
                sg = -1.0 if dirs[r, near_ax] > 0 else 1.0
                bx = k
        t_out[r] = t
        axis_out[r] = ax
        sign_out[r] = sg
        box_out[r] = bx
    return t_out, axis_out, sign_out, box_out
