"""Two-branch depth / surface-normal network.

Layout for an ``H x W`` input with base width ``C0`` and ``S`` stages:

* shared embedding: two 3x3 conv + ReLU, 2x2 max-pool -> ``C0 x H/2 x W/2``
* encoder level l = 1..S per branch: pano block at ``C0*2^(l-1)`` channels,
  fusion across branches, strided 3x3 conv to the next level
* per-branch bottleneck pano block at ``C0*2^S`` channels
* decoder step i = 1..S per branch: 1x1 conv + bilinear x2, concat with the
  branch skip and the fused feature of the matching level, 1x1 merge, pano
  block, then a 3x3 head -> sigmoid (depth) / tanh (normal) -> bilinear x2

Predictions come out coarse to fine at ``H/8, H/4, H/2, H`` for ``S = 4``.
"""
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import functional as F
from .blocks import PanoBlock
from .geometry import ErpLayout, StageShape, build_sampling_grid
from .module import Module, he_normal
from .tensor import Tensor, concat, relu, sigmoid, tanh

TASKS = ("depth", "normal")
TASK_MODES = ("both", "depth_only", "normal_only")
OUT_CHANNELS = {"depth": 1, "normal": 3}


@dataclass
class NetworkConfig:
    base_channels: int = 16
    stages: int = 4
    heads: int = 2
    k_side: int = 3
    ffn_ratio: int = 2
    height: int = 64
    width: int = 128
    use_shared_fb: bool = True
    use_fusion: bool = True
    use_multiscale: bool = True
    task_mode: str = "both"
    d_max: float = 10.0
    init_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.base_channels % self.heads:
            raise ValueError("base_channels must be divisible by heads")
        if self.height % (2 ** (self.stages + 1)):
            raise ValueError(f"input height {self.height} must be divisible by 2^(stages+1)")
        ErpLayout(self.height, self.width)
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"task_mode must be one of {TASK_MODES}")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    @property
    def tasks(self):
        if self.task_mode == "both":
            return TASKS
        return (self.task_mode.split("_")[0],)

    @property
    def fusion_active(self):
        return self.use_fusion and self.task_mode == "both"

    def level_channels(self, level):
        """Channel width of encoder level ``level`` (1-based); level S+1 is the bottleneck."""
        return self.base_channels * 2 ** (level - 1)

    def level_shape(self, level):
        return self.height // 2 ** level, self.width // 2 ** level

    def output_shapes(self):
        """(h, w) of each supervised prediction, coarse to fine."""
        S = self.stages
        shapes = [(self.height // 2 ** (S - i), self.width // 2 ** (S - i)) for i in range(1, S + 1)]
        return shapes if self.use_multiscale else shapes[-1:]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class FusionOutputs:
    depth: Tensor
    normal: Tensor
    fuse: Tensor


class Conv(Module):
    def __init__(self, cin, cout, k, rng, gain=np.sqrt(2.0), zero=False):
        super().__init__()
        shape = (cout, cin, k, k)
        self.weight = self.param("weight", np.zeros(shape) if zero else he_normal(rng, shape, cin * k * k, gain))
        self.bias = self.param("bias", np.zeros(cout))
        self.k = k

    def __call__(self, x, stride=1):
        pad = self.k // 2
        return F.conv2d(x, self.weight, self.bias, stride=stride, padding=pad, wrap=pad > 0)


class Embedding(Module):
    def __init__(self, cout, rng):
        super().__init__()
        self.conv1 = self.child("conv1", Conv(3, cout, 3, rng))
        self.conv2 = self.child("conv2", Conv(cout, cout, 3, rng))

    def __call__(self, rgb):
        return F.maxpool2(relu(self.conv2(relu(self.conv1(rgb)))))


class FusionBlock(Module):
    """1x1 conv -> switchable norm -> ReLU."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv = self.child("conv", Conv(cin, cout, 1, rng))
        self.mean_logits = self.param("sn.mean_logits", np.zeros(3))
        self.var_logits = self.param("sn.var_logits", np.zeros(3))
        self.gain = self.param("sn.gain", np.ones(cout))
        self.shift = self.param("sn.shift", np.zeros(cout))

    def __call__(self, x):
        y = F.switchable_norm(self.conv(x), self.mean_logits, self.var_logits, self.gain, self.shift)
        return relu(y)


class Fusion(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.depth = self.child("depth", FusionBlock(2 * channels, channels, rng))
        self.normal = self.child("normal", FusionBlock(2 * channels, channels, rng))
        self.fuse = self.child("fuse", FusionBlock(2 * channels, channels, rng))

    def __call__(self, f_depth, f_normal):
        if f_depth.shape != f_normal.shape:
            raise ValueError(f"fusion inputs differ: {f_depth.shape} vs {f_normal.shape}")
        cat = concat([f_depth, f_normal], axis=1)
        return FusionOutputs(f_depth + self.depth(cat), f_normal + self.normal(cat), self.fuse(cat))


def fuse_level(f_depth, f_normal, fusion):
    return fusion(f_depth, f_normal)


class DecoderStep(Module):
    def __init__(self, cin, cout, cfg, rng, with_head, out_channels):
        super().__init__()
        self.up = self.child("up", Conv(cin, cout, 1, rng, gain=1.0))
        self.merge = self.child("merge", Conv(3 * cout, cout, 1, rng, gain=1.0))
        self.block = self.child("block", PanoBlock(cout, cfg.heads, cfg.k_side ** 2, cfg.ffn_ratio, rng))
        self.head = self.child("head", Conv(cout, out_channels, 3, rng, gain=0.1)) if with_head else None


class Branch(Module):
    def __init__(self, task, cfg, rng):
        super().__init__()
        S = cfg.stages
        self.task = task
        if not cfg.use_shared_fb:
            self.embed = self.child("embed", Embedding(cfg.base_channels, rng))
        self.enc = []
        self.down = []
        for level in range(1, S + 1):
            C = cfg.level_channels(level)
            self.enc.append(self.child(f"enc{level}", PanoBlock(C, cfg.heads, cfg.k_side ** 2, cfg.ffn_ratio, rng)))
            self.down.append(self.child(f"down{level}", Conv(C, 2 * C, 3, rng)))
        Cb = cfg.level_channels(S + 1)
        self.bottleneck = self.child("bottleneck", PanoBlock(Cb, cfg.heads, cfg.k_side ** 2, cfg.ffn_ratio, rng))
        self.dec = []
        for i in range(1, S + 1):
            level = S - i + 1
            C = cfg.level_channels(level)
            with_head = cfg.use_multiscale or i == S
            self.dec.append(self.child(f"dec{i}", DecoderStep(2 * C, C, cfg, rng, with_head,
                                                              OUT_CHANNELS[task])))


class MTLNet(Module):
    """The full network. ``forward`` returns ``{task: [pred_1, ..., pred_S]}`` coarse to fine."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config if config is not None else NetworkConfig()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.init_seed)
        if cfg.use_shared_fb:
            self.embed = self.child("embed", Embedding(cfg.base_channels, rng))
        self.branches = {}
        for task in cfg.tasks:
            self.branches[task] = self.child(task, Branch(task, cfg, rng))
        self.fusion = []
        if cfg.task_mode == "both":
            for level in range(1, cfg.stages + 1):
                self.fusion.append(self.child(f"fusion{level}", Fusion(cfg.level_channels(level), rng)))

    # -- pieces ---------------------------------------------------------------
    def grid(self, level):
        h, w = self.config.level_shape(level)
        return build_sampling_grid(StageShape(h, w), self.config.k_side)

    def shared_embed(self, rgb):
        return self.embed(rgb)

    def encode(self, rgb, trace=None):
        """Run the encoders; returns per-level skips and the bottleneck features."""
        cfg = self.config
        log = trace.append if trace is not None else (lambda _: None)
        if cfg.use_shared_fb:
            log("embed")
            f0 = self.embed(rgb)
            feats = {t: f0 for t in cfg.tasks}
        else:
            feats = {}
            for t in cfg.tasks:
                log(f"{t}.embed")
                feats[t] = self.branches[t].embed(rgb)
        skips = []
        for level in range(1, cfg.stages + 1):
            grid = self.grid(level)
            for t in cfg.tasks:
                log(f"{t}.enc{level}")
                feats[t] = self.branches[t].enc[level - 1](feats[t], grid)
            if cfg.fusion_active:
                log(f"fusion{level}")
                out = self.fusion[level - 1](feats["depth"], feats["normal"])
                feats = {"depth": out.depth, "normal": out.normal}
                fused = out.fuse
            else:
                ref = feats[cfg.tasks[0]]
                fused = Tensor(np.zeros(ref.shape, dtype=ref.dtype))
            skips.append({**feats, "fuse": fused})
            for t in cfg.tasks:
                feats[t] = self.branches[t].down[level - 1](feats[t], stride=2)
        grid = self.grid(cfg.stages + 1)
        bottleneck = {}
        for t in cfg.tasks:
            log(f"{t}.bottleneck")
            bottleneck[t] = self.branches[t].bottleneck(feats[t], grid)
        return skips, bottleneck

    def decode(self, task, skips, bottleneck, trace=None):
        cfg = self.config
        S = cfg.stages
        act = sigmoid if task == "depth" else tanh
        x = bottleneck[task]
        preds = []
        for i, step in enumerate(self.branches[task].dec, start=1):
            level = S - i + 1
            h, w = cfg.level_shape(level)
            if trace is not None:
                trace.append(f"{task}.dec{i}")
            x = F.bilinear_resize(step.up(x), h, w, wrap_width=True)
            x = step.merge(concat([x, skips[level - 1][task], skips[level - 1]["fuse"]], axis=1))
            x = step.block(x, self.grid(level))
            if step.head is not None:
                y = act(step.head(x))
                preds.append(F.bilinear_resize(y, 2 * h, 2 * w, wrap_width=True))
        return preds

    def forward(self, rgb, trace=None):
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        cfg = self.config
        if rgb.ndim != 4 or rgb.shape[1:] != (3, cfg.height, cfg.width):
            raise ValueError(f"expected (B, 3, {cfg.height}, {cfg.width}) input, got {rgb.shape}")
        skips, bottleneck = self.encode(rgb, trace)
        return {t: self.decode(t, skips, bottleneck, trace) for t in cfg.tasks}

    __call__ = forward

    def num_parameters(self):
        return sum(t.size for t in self.parameters())


# -- closed-form parameter count ---------------------------------------------

def _conv(cin, cout, k):
    return cout * cin * k * k + cout


def _block(C, M, k, r):
    attn = _conv(C, 2 * M * k, 1) + _conv(C, M * k, 1) + 2 * _conv(C, C, 1)
    ffn = _conv(C, r * C, 1) + (r * C * 9 + r * C) + _conv(r * C, C, 1)
    return 4 * C + attn + ffn


def parameter_count(cfg):
    """Number of scalars in :class:`MTLNet` for ``cfg``, derived without building it."""
    C0, S, M, k, r = cfg.base_channels, cfg.stages, cfg.heads, cfg.k_side ** 2, cfg.ffn_ratio
    embed = _conv(3, C0, 3) + _conv(C0, C0, 3)
    n_tasks = len(cfg.tasks)
    total = embed if cfg.use_shared_fb else n_tasks * embed
    for task in cfg.tasks:
        for level in range(1, S + 1):
            C = C0 * 2 ** (level - 1)
            total += _block(C, M, k, r) + _conv(C, 2 * C, 3)
            step = _conv(2 * C, C, 1) + _conv(3 * C, C, 1) + _block(C, M, k, r)
            i = S - level + 1
            if cfg.use_multiscale or i == S:
                step += _conv(C, OUT_CHANNELS[task], 3)
            total += step
        total += _block(C0 * 2 ** S, M, k, r)
    if cfg.task_mode == "both":
        for level in range(1, S + 1):
            C = C0 * 2 ** (level - 1)
            total += 3 * (_conv(2 * C, C, 1) + 6 + 2 * C)
    return total
