"""Depth and surface-normal evaluation metrics over valid pixels.

Depth metrics take metric depth (metres); normals are unit vectors along
``axis`` (default: channel axis 1 for (B,3,H,W) maps, or the last axis for
(N,3) arrays). Per-sample results merge exactly through ``MetricsAccumulator``.
"""
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

DEPTH_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
NORMAL_THRESHOLDS = (5.0, 7.5, 11.25, 22.5, 30.0)
MIN_DEPTH = 1e-4


@dataclass
class MetricsReport:
    mae: float = None
    are: float = None
    rmse: float = None
    rmse_log: float = None
    delta_d1: float = None
    delta_d2: float = None
    delta_d3: float = None
    depth_pixels: int = 0
    normal_mean: float = None
    normal_median: float = None
    normal_mse: float = None
    delta_n1: float = None
    delta_n2: float = None
    delta_n3: float = None
    delta_n4: float = None
    delta_n5: float = None
    normal_pixels: int = 0

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        """One ``key value`` pair per line; missing halves print as ``nan``."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} {'nan' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kw = {}
        for line in text.strip().splitlines():
            key, value = line.split(None, 1)
            if value == "nan":
                kw[key] = None
            elif key.endswith("_pixels"):
                kw[key] = int(value)
            else:
                kw[key] = float(value)
        return cls(**kw)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _vectors(x, axis):
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        axis = 1 if x.ndim == 4 else -1
    return np.moveaxis(x, axis, -1)


def angles_deg(pred, gt, mask, axis=None):
    """Per-pixel angle in degrees between renormalised ``pred`` and ``gt``."""
    p = _vectors(pred, axis)
    g = _vectors(gt, axis)
    m = np.asarray(mask, dtype=bool)
    m = m.reshape(p.shape[:-1])
    p, g = p[m], g[m]
    p = p / np.sqrt((p * p).sum(-1, keepdims=True) + 1e-16)
    cos = np.clip((p * g).sum(-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


class MetricsAccumulator:
    """Sums of per-pixel errors; merging two accumulators is exact."""

    def __init__(self):
        self.n_d = 0
        self.abs = 0.0
        self.rel = 0.0
        self.sq = 0.0
        self.sq_log = 0.0
        self.delta_d = np.zeros(len(DEPTH_THRESHOLDS), dtype=np.int64)
        self.angles = []

    def add_depth(self, pred, gt, mask):
        m = np.asarray(mask, dtype=bool)
        gt = np.asarray(gt, dtype=np.float64)
        pred = np.asarray(pred, dtype=np.float64)
        m = m.reshape(gt.shape)
        d, p = gt[m], np.maximum(pred.reshape(gt.shape)[m], MIN_DEPTH)
        if np.any(d <= 0):
            raise ValueError("ground-truth depth must be > 0 on valid pixels")
        diff = p - d
        ratio = np.maximum(p / d, d / p)
        self.n_d += d.size
        self.abs += np.abs(diff).sum()
        self.rel += (np.abs(diff) / d).sum()
        self.sq += (diff * diff).sum()
        self.sq_log += ((np.log10(p) - np.log10(d)) ** 2).sum()
        self.delta_d += [(ratio < t).sum() for t in DEPTH_THRESHOLDS]
        return self

    def add_normal(self, pred, gt, mask, axis=None):
        self.angles.append(angles_deg(pred, gt, mask, axis))
        return self

    def merge(self, other):
        self.n_d += other.n_d
        self.abs += other.abs
        self.rel += other.rel
        self.sq += other.sq
        self.sq_log += other.sq_log
        self.delta_d = self.delta_d + other.delta_d
        self.angles.extend(other.angles)
        return self

    def report(self):
        r = MetricsReport()
        if self.n_d:
            n = self.n_d
            r.mae, r.are = self.abs / n, self.rel / n
            r.rmse, r.rmse_log = float(np.sqrt(self.sq / n)), float(np.sqrt(self.sq_log / n))
            r.delta_d1, r.delta_d2, r.delta_d3 = (100.0 * self.delta_d / n).tolist()
            r.mae, r.are = float(r.mae), float(r.are)
            r.depth_pixels = int(n)
        theta = np.concatenate(self.angles) if self.angles else np.zeros(0)
        if theta.size:
            srt = np.sort(theta)
            r.normal_mean = float(theta.mean())
            r.normal_median = float(srt[(srt.size - 1) // 2])
            r.normal_mse = float((theta * theta).mean())
            deltas = [100.0 * (theta < t).sum() / theta.size for t in NORMAL_THRESHOLDS]
            r.delta_n1, r.delta_n2, r.delta_n3, r.delta_n4, r.delta_n5 = (float(x) for x in deltas)
            r.normal_pixels = int(theta.size)
        return r


def depth_metrics(pred, gt, mask):
    """Depth half of a ``MetricsReport``; raises on an empty mask."""
    if not np.any(mask):
        raise ValueError("no valid pixels")
    return MetricsAccumulator().add_depth(pred, gt, mask).report()


def normal_metrics(pred, gt, mask, axis=None):
    """Normal half of a ``MetricsReport``; raises on an empty mask."""
    if not np.any(mask):
        raise ValueError("no valid pixels")
    return MetricsAccumulator().add_normal(pred, gt, mask, axis).report()
