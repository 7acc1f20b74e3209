"""Training losses with valid-pixel masking.

Depth enters every loss in normalised units (metres / d_max). Prediction and
ground-truth tensors are channel-first: depth (B,1,h,w), normals (B,3,h,w),
masks (B,1,h,w). Multi-scale lists run coarse to fine.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .geometry import erode3x3
from .tensor import Tensor, concat, gelu, tabs, tsum

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL = np.stack([SOBEL_X, SOBEL_X.T])[:, None]  # (2, 1, 3, 3): x then y


@dataclass
class LossWeights:
    dmse: float = 2.0
    grad: float = 1.0
    dperc: float = 0.05
    nmse: float = 1.0
    quat: float = 10.0
    nperc: float = 0.05

    def __post_init__(self):
        for name, w in asdict(self).items():
            if w < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {w}")

    def to_dict(self):
        return asdict(self)


@dataclass
class SupervisionPyramid:
    """Ground truth per scale, coarse to fine; each entry is (B, C, h, w)."""
    depth: list = field(default_factory=list)
    normal: list = field(default_factory=list)
    mask: list = field(default_factory=list)

    def __len__(self):
        return len(self.mask)

    def last(self, n):
        return SupervisionPyramid(self.depth[-n:], self.normal[-n:], self.mask[-n:])


def _pool_masked(x, m):
    B, C, H, W = x.shape
    xs = (x * m).reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))
    cnt = m.reshape(B, 1, H // 2, 2, W // 2, 2).sum(axis=(3, 5))
    return xs / np.maximum(cnt, 1), cnt


def build_pyramid(gt_depth, gt_normal, mask, scales=4):
    """Supervision targets for ``scales`` resolutions by masked 2x2 averaging.

    A coarse pixel is valid only when all four children are valid; averaged
    normals are re-normalised (and dropped if they cancel out).
    """
    d = np.asarray(gt_depth, dtype=np.float64)
    n = np.asarray(gt_normal, dtype=np.float64)
    m = np.asarray(mask).astype(np.float64)
    if d.ndim == 3:
        d, n, m = d[:, None], n, m[:, None]
    depth, normal, masks = [d], [n], [m > 0]
    for _ in range(scales - 1):
        d, cnt = _pool_masked(d, m)
        n, _ = _pool_masked(n, m)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        m = ((cnt == 4) & (norm > 1e-6)).astype(np.float64)
        n = n / np.where(norm > 0, norm, 1.0)
        depth.append(d)
        normal.append(n)
        masks.append(m > 0)
    return SupervisionPyramid(depth[::-1], normal[::-1], masks[::-1])


def _masked_mean(x, mask):
    m = np.asarray(mask, dtype=x.dtype)
    M = float(m.sum())
    if M == 0:
        raise ValueError("no valid pixels")
    return tsum(x * Tensor(m)) * (1.0 / M)


def loss_dmse(pred, gt, mask):
    """Mean squared depth error over valid pixels."""
    diff = pred - Tensor(np.asarray(gt, dtype=pred.dtype))
    return _masked_mean(diff * diff, mask)


def _angles(pred, gt, squared):
    return F.vector_angle(pred, Tensor(np.asarray(gt, dtype=pred.dtype)), squared=squared)


def loss_nmse(preds, pyramid):
    """Sum over scales of the mean squared angular error (radians^2)."""
    pyr = pyramid.last(len(preds))
    total = None
    for p, n, m in zip(preds, pyr.normal, pyr.mask):
        term = _masked_mean(_angles(p, n, True), m[:, 0])
        total = term if total is None else total + term
    return total


def loss_quat(preds, pyramid):
    """Sum over scales of the mean angle atan2(|a x b|, a . b) (radians)."""
    pyr = pyramid.last(len(preds))
    total = None
    for p, n, m in zip(preds, pyr.normal, pyr.mask):
        term = _masked_mean(_angles(p, n, False), m[:, 0])
        total = term if total is None else total + term
    return total


def sobel(x):
    """Sobel x/y responses of a (B,1,h,w) map, longitude-wrapped -> (B,2,h,w)."""
    w = Tensor(SOBEL.astype(x.dtype))
    return F.conv2d(x, w, None, stride=1, padding=1, wrap=True)


def gradient_mask(mask):
    """Pixels whose full 3x3 neighbourhood is valid, per batch element."""
    m = np.asarray(mask, dtype=bool)
    return np.stack([erode3x3(mb[0]) for mb in m])[:, None]


def loss_grad(preds, pyramid):
    """Sum over scales of the mean |(|grad D| - |grad D_hat|)| over Sobel x and y."""
    pyr = pyramid.last(len(preds))
    total = None
    for p, d, m in zip(preds, pyr.depth, pyr.mask):
        gm = gradient_mask(m)
        if not gm.any():
            continue
        g_gt = np.abs(sobel(Tensor(np.asarray(d, dtype=p.dtype))).data)
        diff = tabs(Tensor(g_gt) - tabs(sobel(p)))
        term = _masked_mean(tsum(diff, 1, keepdims=True), gm)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=preds[-1].dtype))
    return total


class FeatureExtractor:
    """Frozen random conv stack standing in for a pretrained perceptual network.

    3x3 convs, stride 2, longitude-wrapped, each followed by GELU. Weights
    are fixed by ``seed`` and never receive gradients.
    """

    def __init__(self, layers):
        self.layers = [(np.asarray(w), np.asarray(b)) for w, b in layers]

    @classmethod
    def from_seed(cls, seed=1234, widths=(8, 16, 16), in_channels=3):
        rng = np.random.default_rng(seed)
        layers, cin = [], in_channels
        for cout in widths:
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (9 * cin))
            layers.append((w, np.zeros(cout)))
            cin = cout
        return cls(layers)

    @property
    def out_channels(self):
        return self.layers[-1][0].shape[0]

    def __call__(self, x):
        for w, b in self.layers:
            x = gelu(F.conv2d(x, Tensor(w.astype(x.dtype)), Tensor(b.astype(x.dtype)),
                              stride=2, padding=1, wrap=True))
        return x


def loss_perceptual(pred, gt, mask, extractor, kind="depth"):
    """Feature-space squared error ``sum |phi(pred) - phi(gt)|^2 / (C_k * M_k)``.

    Invalid pixels are zeroed in both inputs before feature extraction, so
    they cannot influence the loss. ``M_k`` counts feature pixels over the batch.
    """
    m = np.asarray(mask, dtype=pred.dtype)
    gt = np.asarray(gt, dtype=pred.dtype) * m
    pred = pred * Tensor(m)
    if kind == "depth":
        pred = concat([pred, pred, pred], axis=1)
        gt = np.concatenate([gt, gt, gt], axis=1)
    elif kind != "normal":
        raise ValueError(f"unknown perceptual kind {kind!r}")
    fp = extractor(pred)
    fg = extractor(Tensor(gt)).data
    B, C, h, w = fp.shape
    d = fp - Tensor(fg)
    return tsum(d * d) * (1.0 / (C * B * h * w))


TERMS = ("dmse", "grad", "dperc", "nmse", "quat", "nperc")


def loss_total(preds, pyramid, weights, extractor):
    """Weighted sum of every loss term the available predictions support.

    ``preds`` maps task -> list of predictions (coarse to fine). Returns
    ``(total, breakdown)`` where breakdown holds the unweighted float value of
    all six terms (0.0 for terms of an absent task).
    """
    terms = {}
    finest_mask = pyramid.mask[-1]
    if "depth" in preds:
        D = preds["depth"]
        terms["dmse"] = loss_dmse(D[-1], pyramid.depth[-1], finest_mask)
        terms["grad"] = loss_grad(D, pyramid)
        terms["dperc"] = loss_perceptual(D[-1], pyramid.depth[-1], finest_mask, extractor, "depth")
    if "normal" in preds:
        N = [F.normalize_vectors(n) for n in preds["normal"]]
        terms["nmse"] = loss_nmse(N, pyramid)
        terms["quat"] = loss_quat(N, pyramid)
        terms["nperc"] = loss_perceptual(N[-1], pyramid.normal[-1], finest_mask, extractor, "normal")
    total = None
    for name, value in terms.items():
        w = getattr(weights, name)
        if w == 0:
            continue
        part = value * w
        total = part if total is None else total + part
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float32))
    breakdown = {name: float(terms[name].data) if name in terms else 0.0 for name in TERMS}
    breakdown["total"] = float(total.data)
    return total, breakdown
