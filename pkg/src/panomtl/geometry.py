"""Equirectangular (ERP) and spherical coordinate math.

Conventions: camera frame is y-up with +z forward at ``(lon, lat) = (0, 0)``.
Columns sweep longitude over ``[-pi, pi)`` left to right and rows sweep
latitude from ``+pi/2`` (top) to ``-pi/2``. Pixel ``(u, v)`` has its centre at
integer coordinates. Image-shaped arrays are ``(H, W)`` / ``(H, W, 3)``.
"""
from collections import namedtuple
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .functional import sample_bilinear_wrap  # noqa: F401  (re-exported)

UP = np.array([0.0, 1.0, 0.0])
GNOMONIC_HORIZON_DEG = 89.0
GRID_MAX_DEG = 80.0


@dataclass(frozen=True)
class ErpLayout:
    height: int
    width: int

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise ValueError(f"ERP width must be twice the height, got {self.height}x{self.width}")
        if self.height < 8 or self.height % 2:
            raise ValueError(f"ERP height must be even and >= 8, got {self.height}")

    @property
    def pixel_pitch(self):
        """Angular size of one pixel (equal in both directions), radians."""
        return 2.0 * np.pi / self.width


# Feature-map resolution inside the network; unlike ErpLayout it may be
# smaller than an image (down to 1 x 2 at the bottleneck).
StageShape = namedtuple("StageShape", "height width")


def pixel_to_latlon(u, v, layout):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lon = (u + 0.5) / layout.width * 2.0 * np.pi - np.pi
    lat = np.pi / 2 - (v + 0.5) / layout.height * np.pi
    return lon, lat


def latlon_to_pixel(lon, lat, layout):
    u = (np.asarray(lon) + np.pi) / (2.0 * np.pi) * layout.width - 0.5
    v = (np.pi / 2 - np.asarray(lat)) / np.pi * layout.height - 0.5
    return u, v


def latlon_to_dir(lon, lat):
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    c = np.cos(lat)
    return np.stack([c * np.sin(lon), np.sin(lat), c * np.cos(lon)], axis=-1)


def dir_to_latlon(d):
    d = np.asarray(d, dtype=np.float64)
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1] / np.linalg.norm(d, axis=-1), -1.0, 1.0))
    return lon, lat


def pixel_dirs(layout):
    """Unit view direction of every pixel centre, shape (H, W, 3)."""
    v, u = np.meshgrid(np.arange(layout.height), np.arange(layout.width), indexing="ij")
    return latlon_to_dir(*pixel_to_latlon(u, v, layout))


def tangent_frame(center):
    """Local (east, north) axes of the plane tangent at ``center``.

    east = normalize(up x center), north = center x east; at the poles, where
    up x center vanishes, east is pinned to +x.
    """
    center = np.asarray(center, dtype=np.float64)
    east = np.cross(UP, center)
    n = np.linalg.norm(east, axis=-1, keepdims=True)
    pole = n < 1e-12
    east = np.where(pole, np.array([1.0, 0.0, 0.0]), east / np.where(pole, 1.0, n))
    north = np.cross(center, east)
    return east, north


def gnomonic(d, center):
    """Project unit direction(s) ``d`` onto the plane tangent at ``center`` -> (x, y)."""
    d = np.asarray(d, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    cos_t = np.sum(d * center, axis=-1)
    if np.any(cos_t <= np.cos(np.radians(GNOMONIC_HORIZON_DEG))):
        raise ValueError("direction within 1 degree of the tangent horizon or behind it")
    east, north = tangent_frame(center)
    return np.sum(d * east, axis=-1) / cos_t, np.sum(d * north, axis=-1) / cos_t


def gnomonic_inv(x, y, center):
    """Inverse of :func:`gnomonic`: tangent-plane coordinates back to unit directions."""
    center = np.asarray(center, dtype=np.float64)
    east, north = tangent_frame(center)
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    p = center + x * east + y * north
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


@dataclass(frozen=True)
class SamplingGrid:
    """Fractional ERP coordinates of the ``k`` spherical samples of every token.

    ``u`` and ``v`` have shape (H*W, k) with tokens in row-major order and the
    samples of a token ordered north-to-south, west-to-east. ``u`` is not
    wrapped; ``v`` is clamped to ``[-0.5, H - 0.5]``.
    """
    height: int
    width: int
    k_side: int
    u: np.ndarray
    v: np.ndarray

    @property
    def k(self):
        return self.k_side * self.k_side

    @property
    def center_index(self):
        return self.k // 2


def build_sampling_grid(layout, k_side=3, spacing=None):
    """Spherical sampling grid: a ``k_side x k_side`` square on each token's tangent plane.

    Tangent-plane offsets are integer multiples of ``spacing`` (default: one
    equatorial pixel pitch). Offsets are computed once per row and shifted by
    the column index, so the grid is exactly longitude-equivariant.
    """
    if layout.width != 2 * layout.height:
        raise ValueError(f"grid layout must be 2:1, got {layout.height}x{layout.width}")
    if spacing is None:
        spacing = 2.0 * np.pi / layout.width
    return _grid_cached(layout.height, layout.width, int(k_side), float(spacing))


@lru_cache(maxsize=64)
def _grid_cached(H, W, k_side, spacing):
    if k_side < 1 or k_side % 2 == 0:
        raise ValueError(f"k_side must be odd and positive, got {k_side}")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    layout = StageShape(H, W)
    half = k_side // 2
    if np.degrees(np.arctan(np.hypot(half * spacing, half * spacing))) > GRID_MAX_DEG:
        raise ValueError("sampling spacing exceeds the 80 degree gnomonic guard")

    offs = np.arange(-half, half + 1) * spacing
    ty, tx = np.meshgrid(-offs, offs, indexing="ij")  # first row is north
    tx, ty = tx.reshape(-1), ty.reshape(-1)

    # one token per row, placed at lon = 0; other columns are pure shifts
    _, lat = pixel_to_latlon(0.0, np.arange(H), layout)
    centers = latlon_to_dir(np.zeros(H), lat)  # (H, 3)
    dirs = gnomonic_inv(tx[None, :], ty[None, :], centers[:, None, :])  # (H, k, 3)
    lon_s, lat_s = dir_to_latlon(dirs)
    du = lon_s * W / (2.0 * np.pi)
    _, v_s = latlon_to_pixel(lon_s, lat_s, layout)
    v_s = np.clip(v_s, -0.5, H - 0.5)

    cols = np.arange(W, dtype=np.float64)
    u = cols[None, :, None] + du[:, None, :]
    v = np.broadcast_to(v_s[:, None, :], u.shape)
    k = k_side * k_side
    u = np.ascontiguousarray(u.reshape(H * W, k))
    v = np.ascontiguousarray(v.reshape(H * W, k))
    u.flags.writeable = False
    v.flags.writeable = False
    return SamplingGrid(H, W, k_side, u, v)


def depth_to_points(depth, mask, layout, color=None):
    """Back-project valid pixels: point = view direction * depth.

    Returns ``points`` (P, 3) and, when ``color`` (H, W, 3) is given, the
    matching (P, 3) colours; rows follow pixel raster order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    pts = pixel_dirs(layout)[mask] * depth[mask][:, None]
    if color is None:
        return pts
    return pts, np.asarray(color)[mask]


def depth_to_normals_oracle(depth, mask, layout):
    """Surface normals from depth by central differences of back-projected points.

    Returns ``(normals (H, W, 3), valid (H, W))``. A pixel is valid only when
    its full 3x3 neighbourhood (longitude wrapping, no vertical wrap) is
    valid and the cross product is not degenerate. Normals face the camera.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    dirs = pixel_dirs(layout)
    P = dirs * depth[..., None]
    tu = np.roll(P, -1, axis=1) - np.roll(P, 1, axis=1)
    tv = np.zeros_like(P)
    tv[1:-1] = P[2:] - P[:-2]
    n = np.cross(tv, tu)
    norm = np.linalg.norm(n, axis=-1)

    valid = erode3x3(mask)
    valid &= norm > 1e-12 * np.maximum(np.linalg.norm(tu, axis=-1) * np.linalg.norm(tv, axis=-1), 1e-300)
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    flip = np.sum(n * dirs, axis=-1) > 0
    n[flip] *= -1
    n[~valid] = 0.0
    return n, valid


def erode3x3(mask):
    """True where the whole 3x3 neighbourhood is True (wrapping in width, not height)."""
    m = np.asarray(mask, dtype=bool)
    out = m & np.roll(m, 1, axis=1) & np.roll(m, -1, axis=1)
    res = np.zeros_like(out)
    res[1:-1] = out[1:-1] & out[:-2] & out[2:]
    return res
