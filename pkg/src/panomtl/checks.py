"""Gradient-check suites at float64 for primitives, blocks, losses and the network.

Each suite returns ``[(name, GradCheckReport), ...]``. Inputs are drawn away
from the kinks of relu/abs/maxpool so central differences stay valid.
"""
from contextlib import contextmanager

import numpy as np

from . import functional as F
from . import tensor as T
from .blocks import LocalFFN, PanoAttention, PanoBlock
from .geometry import StageShape, build_sampling_grid
from .gradcheck import grad_check
from .losses import (FeatureExtractor, build_pyramid, loss_dmse, loss_grad, loss_nmse,
                     loss_perceptual, loss_quat)
from .net import Embedding, Fusion, MTLNet, NetworkConfig
from .tensor import Tensor

F64 = np.float64


def _t(rng, *shape, lo=None, hi=None, away=None):
    if lo is not None:
        x = rng.uniform(lo, hi, shape)
    else:
        x = rng.standard_normal(shape)
    if away is not None:  # push values at least ``away`` off zero
        x = np.where(x >= 0, x + away, x - away)
    return Tensor(x, dtype=F64, requires_grad=True)


def buggy_sigmoid(a):
    """Sigmoid whose backward drops the (1 - s) factor; used as a negative control."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    return T.make(s, (a,), lambda g: (g * s,), "buggy_sigmoid")


SHAPES = [
    dict(m=(3, 4), r3=(2, 3, 4), img=(2, 3, 4, 8), small=(1, 2, 4, 8), sq=(2, 3, 4, 4)),
    dict(m=(5, 2), r3=(3, 3, 2), img=(1, 2, 6, 12), small=(2, 1, 2, 4), sq=(3, 2, 2, 6)),
]


def op_cases(seed=0, size=0):
    """``(name, fn, inputs)`` for every differentiable primitive; ``size`` picks a shape set."""
    rng = np.random.default_rng(seed)
    x = lambda *s, **k: _t(rng, *s, **k)
    pos = lambda *s: _t(rng, *s, lo=0.5, hi=2.0)
    S = SHAPES[size]
    m, r3, img, small, sq = S["m"], S["r3"], S["img"], S["small"], S["sq"]
    C, Cs = img[1], small[1]
    cases = [
        ("add", lambda a, b: a + b, [x(*m), x(m[1])]),
        ("sub", lambda a, b: a - b, [x(*m), x(m[0], 1)]),
        ("mul", lambda a, b: a * b, [x(*r3), x(1, r3[1], 1)]),
        ("div", lambda a, b: a / b, [x(*m), pos(*m)]),
        ("power", lambda a: T.power(a, 3.0), [x(*m)]),
        ("exp", T.exp, [x(*m)]),
        ("log", T.log, [pos(*m)]),
        ("log10", T.log10, [pos(*m)]),
        ("sqrt", T.sqrt, [pos(*m)]),
        ("abs", T.tabs, [x(*m, away=0.05)]),
        ("relu", T.relu, [x(*m, away=0.05)]),
        ("gelu", T.gelu, [x(*m)]),
        ("sigmoid", T.sigmoid, [x(*m)]),
        ("tanh", T.tanh, [x(*m)]),
        ("clamp", lambda a: T.clamp(a, -0.5, 0.5), [x(*m, away=0.05)]),
        ("where", lambda a, b: T.where(np.arange(a.size).reshape(m) % 2 == 0, a, b), [x(*m), x(*m)]),
        ("sum", lambda a: T.tsum(a, 1), [x(*r3)]),
        ("mean", lambda a: T.mean(a, (0, 2), keepdims=True), [x(*r3)]),
        ("reshape", lambda a: T.reshape(a, (-1, 2)), [x(*r3)]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [x(*r3)]),
        ("concat", lambda a, b: T.concat([a, b], 1), [x(*m), x(m[0], 3)]),
        ("getitem", lambda a: a[1:, ::2], [x(*m)]),
        ("getitem_fancy", lambda a: a[np.array([0, 2, 0])], [x(*m)]),
        ("roll", lambda a: T.roll(a, 2, 1), [x(*m)]),
        ("conv2d_wrap", lambda a, w, b: F.conv2d(a, w, b, padding=1, wrap=True), [x(*img), x(4, C, 3, 3), x(4)]),
        ("conv2d_zero_pad", lambda a, w, b: F.conv2d(a, w, b, padding=1), [x(*img), x(2, C, 3, 3), x(2)]),
        ("conv2d_stride2", lambda a, w, b: F.conv2d(a, w, b, stride=2, padding=1, wrap=True),
         [x(*small), x(3, Cs, 3, 3), x(3)]),
        ("conv2d_1x1", lambda a, w, b: F.conv2d(a, w, b), [x(*img), x(5, C, 1, 1), x(5)]),
        ("depthwise_conv2d", lambda a, w, b: F.depthwise_conv2d(a, w, b, padding=1, wrap=True),
         [x(*img), x(C, 3, 3), x(C)]),
        ("maxpool2", F.maxpool2, [Tensor(rng.permutation(int(np.prod(small))).reshape(small) * 0.1, dtype=F64)]),
        ("bilinear_resize", lambda a: F.bilinear_resize(a, 2 * small[2], 2 * small[3], wrap_width=True), [x(*small)]),
        ("bilinear_resize_clamp", lambda a: F.bilinear_resize(a, 3, 5), [x(*small)]),
        ("linear", F.linear, [x(5, m[1]), x(4, m[1]), x(4)]),
        ("softmax", lambda a: F.softmax(a, axis=1), [x(*m)]),
        ("norm_batch", lambda a, g, s: F.normalize_layer(a, "batch", g, s), [x(*sq), x(sq[1]), x(sq[1])]),
        ("norm_layer", lambda a, g, s: F.normalize_layer(a, "layer", g, s), [x(*sq), x(sq[1]), x(sq[1])]),
        ("norm_instance", lambda a, g, s: F.normalize_layer(a, "instance", g, s), [x(*sq), x(sq[1]), x(sq[1])]),
        ("switchable_norm", F.switchable_norm, [x(*sq), x(3), x(3), x(sq[1]), x(sq[1])]),
        ("sample_bilinear_wrap", F.sample_bilinear_wrap,
         [x(*img), _t(rng, img[0], 10, lo=-3.0, hi=img[3] + 2.0), _t(rng, img[0], 10, lo=0.2, hi=img[2] - 1.2)]),
        ("vector_angle", F.vector_angle, [x(2, 3, m[1]), x(2, 3, m[1])]),
        ("vector_angle_sq", lambda a, b: F.vector_angle(a, b, squared=True), [x(2, 3, m[1]), x(2, 3, m[1])]),
        ("normalize_vectors", F.normalize_vectors, [x(2, 3, m[1])]),
    ]
    # keep bilinear sample positions off integer lines where the kernel kinks
    for name, _, inputs in cases:
        if name == "sample_bilinear_wrap":
            for t in inputs[1:]:
                frac = t.data - np.floor(t.data)
                t.data = np.where(np.abs(frac - 0.5) > 0.4, np.floor(t.data) + 0.5, t.data)
    return cases


def op_suite(seed=0, inject_bug=False, size=0):
    results = []
    for name, fn, inputs in op_cases(seed, size):
        results.append((name, grad_check(fn, inputs)))
    if inject_bug:
        rng = np.random.default_rng(seed)
        results.append(("buggy_sigmoid", grad_check(buggy_sigmoid, [_t(rng, 3, 4)])))
    return results


@contextmanager
def recorded_sample_coords():
    """Collect every (u, v) passed to wrap sampling while the context is open."""
    seen = []
    orig = F.sample_bilinear_wrap

    def rec(feat, u, v):
        seen.append((np.array(u.data), np.array(v.data)))
        return orig(feat, u, v)

    F.sample_bilinear_wrap = rec
    try:
        yield seen
    finally:
        F.sample_bilinear_wrap = orig


def kink_distance(run):
    """Smallest distance of any sampling coordinate to an integer (bilinear kink)."""
    with recorded_sample_coords() as seen:
        run()
    d = np.inf
    for u, v in seen:
        for c in (u, v):
            d = min(d, float(np.abs(c - np.round(c)).min()))
    return d


def set_flow_state(module, rng, scale=0.02):
    """Give every attention flow head small random weights and an offset bias.

    Zero-initialised flow puts each centre sample exactly on an integer
    coordinate where bilinear sampling is not differentiable; an offset moves
    the check to a generic point.
    """
    for name, p in module.named_parameters():
        if name.endswith("flow.weight"):
            p.data = rng.standard_normal(p.shape) * scale
        elif name.endswith("flow.bias"):
            p.data = rng.uniform(0.2, 0.8, p.shape) * rng.choice([-1.0, 1.0], p.shape)


def generic_flow_state(module, run, seed=0, margin=1e-3, tries=50):
    """Re-draw the flow state until all sample coordinates are ``margin`` off a kink."""
    for k in range(tries):
        set_flow_state(module, np.random.default_rng([seed, k]))
        if kink_distance(run) >= margin:
            return k
    raise RuntimeError("could not find a kink-free flow state")


def block_suite(seed=0):
    rng = np.random.default_rng(seed)
    grid = build_sampling_grid(StageShape(8, 16), 3)
    f = _t(rng, 1, 4, 8, 16)
    results = []

    attn = PanoAttention(4, heads=2, k=9, rng=np.random.default_rng(1)).to_dtype(F64)
    generic_flow_state(attn, lambda: attn.delta(f, grid), seed)
    results.append(("pano_attention", grad_check(lambda x, *p: x + attn.delta(x, grid),
                                                 [f] + attn.parameters())))
    ffn = LocalFFN(4, 2, rng=np.random.default_rng(3)).to_dtype(F64)
    results.append(("local_ffn", grad_check(lambda x, *p: x + ffn.delta(x), [f] + ffn.parameters())))
    block = PanoBlock(4, 2, 9, 2, rng=np.random.default_rng(4)).to_dtype(F64)
    generic_flow_state(block, lambda: block(f, grid), seed)
    results.append(("pano_block", grad_check(lambda x, *p: block(x, grid), [f] + block.parameters())))

    fusion = Fusion(4, np.random.default_rng(6)).to_dtype(F64)
    fa, fb = _t(rng, 2, 4, 4, 8), _t(rng, 2, 4, 4, 8)

    def run_fusion(a, b, *p):
        out = fusion(a, b)
        return T.concat([out.depth, out.normal, out.fuse], 1)

    results.append(("fusion", grad_check(run_fusion, [fa, fb] + fusion.parameters())))

    embed = Embedding(4, np.random.default_rng(7)).to_dtype(F64)
    rgb = Tensor(rng.uniform(0, 1, (1, 3, 8, 16)), dtype=F64, requires_grad=True)
    results.append(("shared_embed", grad_check(lambda x, *p: embed(x), [rgb] + embed.parameters())))
    return results


def loss_suite(seed=0):
    rng = np.random.default_rng(seed)
    B, H, W = 1, 16, 32
    depth = rng.uniform(0.1, 0.9, (B, 1, H, W))
    normal = rng.standard_normal((B, 3, H, W))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    mask = rng.uniform(size=(B, 1, H, W)) > 0.02
    pyr = build_pyramid(depth, normal, mask, 2)
    dpred = [Tensor(d + 0.1 * rng.standard_normal(d.shape), dtype=F64, requires_grad=True) for d in pyr.depth]
    npred = [Tensor(n + 0.3 * rng.standard_normal(n.shape), dtype=F64, requires_grad=True) for n in pyr.normal]
    phi = FeatureExtractor.from_seed(1234)
    return [
        ("loss_dmse", grad_check(lambda p: loss_dmse(p, pyr.depth[-1], pyr.mask[-1]), [dpred[-1]])),
        ("loss_grad", grad_check(lambda *p: loss_grad(list(p), pyr), dpred)),
        ("loss_dperc", grad_check(lambda p: loss_perceptual(p, pyr.depth[-1], pyr.mask[-1], phi, "depth"),
                                  [dpred[-1]])),
        ("loss_nmse", grad_check(lambda *p: loss_nmse(list(p), pyr), npred)),
        ("loss_quat", grad_check(lambda *p: loss_quat(list(p), pyr), npred)),
        ("loss_nperc", grad_check(lambda p: loss_perceptual(p, pyr.normal[-1], pyr.mask[-1], phi, "normal"),
                                  [npred[-1]])),
    ]


NETWORK_CHECK_CONFIG = dict(base_channels=4, stages=4, heads=2, height=32, width=64)


def network_suite(seed=0, per_tensor=2, eps=1e-5):
    """End-to-end check on a 1x3x32x64 input: the image plus every parameter tensor.

    ``per_tensor`` entries are sampled from each parameter tensor. The flow
    state is re-drawn (deterministically) until every sampling coordinate sits
    at least ``1.5 * eps`` away from a bilinear kink.
    """
    cfg = NetworkConfig(**NETWORK_CHECK_CONFIG, init_seed=seed)
    net = MTLNet(cfg).to_dtype(F64)
    rng = np.random.default_rng(seed)
    rgb = Tensor(rng.uniform(-1, 1, (1, 3, cfg.height, cfg.width)), dtype=F64, requires_grad=True)
    generic_flow_state(net, lambda: net(rgb), seed, margin=1.5 * eps, tries=500)

    def run(x, *p):
        out = net(x)
        parts = [T.reshape(t, (-1,)) for task in cfg.tasks for t in out[task]]
        return T.concat(parts, 0)

    rep = grad_check(run, [rgb] + net.parameters(), eps=eps, max_elems=per_tensor, seed=seed)
    return [("network", rep)]


SUITES = {"op": op_suite, "block": block_suite, "loss": loss_suite, "network": network_suite}
