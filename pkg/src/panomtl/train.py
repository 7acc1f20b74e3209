"""Adam, learning-rate schedule, training and evaluation loops, export."""
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .functional import normalize_vectors
from .geometry import ErpLayout, depth_to_points
from .io import encode_normals, ensure_dir, to_uint8, write_pfm, write_ply, write_png
from .losses import FeatureExtractor, LossWeights, build_pyramid, loss_total
from .metrics import MetricsAccumulator
from .net import MTLNet, NetworkConfig
from .synth import PanoDataset
from .tensor import NonFiniteError, Tensor, no_grad

LOG_NAME = "train_log.jsonl"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state, lr):
    """One bias-corrected Adam update over ``(name, tensor)`` pairs, in place.

    Parameters without a gradient are treated as having a zero gradient.
    A non-finite gradient raises before any parameter is touched.
    """
    named_params = list(named_params)
    grads = {}
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient for {name} ({bad} entries); step aborted")
        grads[name] = g
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in named_params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    lr_halve_every: int = 12
    batch_size: int = 2
    epochs: int = 120
    early_stop_patience: int = 12
    max_steps: int = 0          # 0 = no step budget
    grad_clip: float = 5.0      # 0 disables clipping
    eval_every: int = 1         # epochs between validation passes
    perceptual_seed: int = 1234
    seed: int = 0
    data_dir: str = "data"
    val_dir: str = ""           # empty = validate on the training set
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.lr_halve_every < 1:
            raise ValueError("lr_halve_every must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        net = NetworkConfig.from_dict(d.pop("network", {}))
        weights = LossWeights(**d.pop("weights", {}))
        names = {f.name for f in fields(cls)}
        return cls(network=net, weights=weights, **{k: v for k, v in d.items() if k in names})


def _coerce(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return type(like)(text)


def apply_overrides(cfg, pairs):
    """Set ``key=value`` pairs; ``net.*`` and ``loss.*`` address the nested configs."""
    net = cfg.network.to_dict()
    weights = cfg.weights.to_dict()
    top = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("network", "weights")}
    for key, value in pairs:
        if key.startswith("net."):
            target, name = net, key[4:]
        elif key.startswith("loss."):
            target, name = weights, key[5:]
        else:
            target, name = top, key
        if name not in target:
            raise KeyError(f"unknown config key {key!r}")
        target[name] = _coerce(value, target[name])
    return TrainConfig(network=NetworkConfig(**net), weights=LossWeights(**weights), **top)


def parse_config_text(text):
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs.append((key, value))
    return pairs


def load_config(path=None, overrides=(), env=None):
    """Build a TrainConfig from a key=value file, explicit overrides and the environment.

    Precedence: environment (``PANOMTL_SEED``, ``PANOMTL_OUT_DIR``) beats
    ``overrides`` which beat the file, which beats the defaults.
    """
    env = os.environ if env is None else env
    pairs = []
    if path:
        with open(path) as f:
            pairs += parse_config_text(f.read())
    pairs += list(overrides)
    if env.get("PANOMTL_SEED"):
        pairs.append(("seed", env["PANOMTL_SEED"]))
    if env.get("PANOMTL_OUT_DIR"):
        pairs.append(("out_dir", env["PANOMTL_OUT_DIR"]))
    return apply_overrides(TrainConfig(), pairs)


def lr_at(epoch, config):
    """Step schedule: ``lr * 0.5 ** floor(epoch / lr_halve_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * 0.5 ** (epoch // config.lr_halve_every)


# -- data ---------------------------------------------------------------------

def rgb_to_input(rgb):
    """(H, W, 3) or (B, H, W, 3) colours in [0, 1] -> (B, 3, H, W) network input."""
    x = np.asarray(rgb, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2) * 2.0 - 1.0)


class Batcher:
    """Caches tensors and supervision pyramids per sample and stacks minibatches."""

    def __init__(self, dataset, net_cfg):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        lay = dataset.layout
        if (lay.height, lay.width) != (net_cfg.height, net_cfg.width):
            raise ValueError(f"dataset is {lay.height}x{lay.width}, network expects "
                             f"{net_cfg.height}x{net_cfg.width}")
        self.dataset, self.cfg = dataset, net_cfg
        self.items = [self._prepare(dataset[i]) for i in range(len(dataset))]

    def __len__(self):
        return len(self.items)

    def _prepare(self, s):
        cfg = self.cfg
        depth = (s.depth / cfg.d_max)[None, None]
        normal = s.normal.transpose(2, 0, 1)[None]
        mask = s.mask[None, None]
        pyr = build_pyramid(depth, normal, mask, cfg.stages)
        return {"x": rgb_to_input(s.rgb), "pyramid": pyr, "sample": s}

    def batch(self, idx):
        items = [self.items[i] for i in idx]
        x = np.concatenate([it["x"] for it in items])
        pyrs = [it["pyramid"] for it in items]
        pyr = type(pyrs[0])(
            [np.concatenate(p) for p in zip(*(q.depth for q in pyrs))],
            [np.concatenate(p) for p in zip(*(q.normal for q in pyrs))],
            [np.concatenate(p) for p in zip(*(q.mask for q in pyrs))],
        )
        return x, pyr


# -- checkpoints --------------------------------------------------------------

def save_state(path, cfg, net, adam, progress):
    tensors = dict(net.state_dict())
    for name, m in adam.m.items():
        tensors[f"adam.m.{name}"] = m
        tensors[f"adam.v.{name}"] = adam.v[name]
    meta = dict(progress, adam_step=adam.step)
    save_checkpoint(path, cfg.to_dict(), tensors, meta)


def load_state(path):
    """Return ``(TrainConfig, MTLNet, AdamState, progress meta)`` from a checkpoint."""
    cfg_d, tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(cfg_d) if "network" in cfg_d else TrainConfig(network=NetworkConfig.from_dict(cfg_d))
    net = MTLNet(cfg.network)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    net.load_state_dict(params)
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    for k, arr in tensors.items():
        if k.startswith("adam.m."):
            adam.m[k[7:]] = arr.copy()
        elif k.startswith("adam.v."):
            adam.v[k[7:]] = arr.copy()
    return cfg, net, adam, meta


def load_model(path):
    cfg, net, _, meta = load_state(path)
    return net, cfg, meta


# -- evaluation ---------------------------------------------------------------

def predict(net, rgb):
    """Finest-scale predictions for (H, W, 3) colours: depth in metres, unit normals (H, W, 3)."""
    with no_grad():
        out = net(Tensor(rgb_to_input(rgb)))
    res = {}
    if "depth" in out:
        res["depth"] = out["depth"][-1].data[0, 0].astype(np.float64) * net.config.d_max
    if "normal" in out:
        n = normalize_vectors(out["normal"][-1]).data[0]
        res["normal"] = n.transpose(1, 2, 0).astype(np.float64)
    return res


def evaluate(net, dataset):
    """Pixel-weighted metrics over every sample of ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    lay = dataset.layout
    if (lay.height, lay.width) != (net.config.height, net.config.width):
        raise ValueError(f"dataset is {lay.height}x{lay.width}, network expects "
                         f"{net.config.height}x{net.config.width}")
    acc = MetricsAccumulator()
    for i in range(len(dataset)):
        s = dataset[i]
        pred = predict(net, s.rgb)
        if "depth" in pred:
            acc.add_depth(pred["depth"], s.depth, s.mask)
        if "normal" in pred:
            acc.add_normal(pred["normal"], s.normal, s.mask, axis=-1)
    return acc.report()


def monitored(report, task_mode):
    return report.normal_mean if task_mode == "normal_only" else report.rmse


# -- training -----------------------------------------------------------------

def train(cfg, resume=None, dataset=None, val_dataset=None, quiet=True):
    """Train per ``cfg``; returns a summary dict. Logs append to ``out_dir/train_log.jsonl``.

    ``resume`` names a checkpoint written by an earlier run; training then
    continues from the epoch after the one stored there.
    """
    dataset = dataset if dataset is not None else PanoDataset(cfg.data_dir)
    if val_dataset is None:
        val_dataset = PanoDataset(cfg.val_dir) if cfg.val_dir else dataset
    ensure_dir(cfg.out_dir)
    log_path = os.path.join(cfg.out_dir, LOG_NAME)

    if resume:
        saved_cfg, net, adam, progress = load_state(resume)
        if saved_cfg.network != cfg.network:
            raise ValueError("checkpoint network config differs from the requested one")
        start_epoch = progress["epoch"] + 1
        step, best = progress["step"], progress["best"]
        bad_epochs, history = progress["bad_epochs"], progress.get("history", [])
    else:
        net, adam = MTLNet(cfg.network), AdamState()
        start_epoch, step, best, bad_epochs, history = 0, 0, None, 0, []
        open(log_path, "w").close()

    batcher = Batcher(dataset, cfg.network)
    extractor = FeatureExtractor.from_seed(cfg.perceptual_seed)
    params = list(net.named_parameters())
    n = len(batcher)
    stop_reason = "epochs"
    epoch = start_epoch - 1
    with open(log_path, "a") as log:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            for b in range(0, n, cfg.batch_size):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                x, pyr = batcher.batch(order[b:b + cfg.batch_size])
                preds = net(Tensor(x))
                total, breakdown = loss_total(preds, pyr, cfg.weights, extractor)
                net.zero_grad()
                total.backward()
                gnorm = clip_grad_norm([p for _, p in params], cfg.grad_clip)
                adam_step(params, adam, lr)
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, "grad_norm": gnorm, **breakdown}
                log.write(json.dumps(rec) + "\n")
                if not quiet:
                    print(f"step {step} epoch {epoch} loss {breakdown['total']:.5f}")
            log.flush()
            budget_done = bool(cfg.max_steps) and step >= cfg.max_steps
            if (epoch + 1) % cfg.eval_every == 0 or budget_done or epoch == cfg.epochs - 1:
                report = evaluate(net, val_dataset)
                score = monitored(report, cfg.network.task_mode)
                history.append({"epoch": epoch, "step": step, "score": score})
                log.write(json.dumps({"epoch": epoch, "step": step, "eval": report.to_dict()}) + "\n")
                if best is None or score < best:
                    best, bad_epochs = score, 0
                    progress = _progress(epoch, step, best, bad_epochs, history)
                    save_state(os.path.join(cfg.out_dir, BEST_NAME), cfg, net, adam, progress)
                else:
                    bad_epochs += cfg.eval_every
            progress = _progress(epoch, step, best, bad_epochs, history)
            save_state(os.path.join(cfg.out_dir, LAST_NAME), cfg, net, adam, progress)
            if budget_done:
                stop_reason = "max_steps"
                break
            if bad_epochs >= cfg.early_stop_patience:
                stop_reason = "early_stop"
                break
    return {"steps": step, "epochs_run": epoch + 1, "best": best, "stop": stop_reason,
            "log": log_path, "net": net}


def _progress(epoch, step, best, bad_epochs, history):
    return {"epoch": epoch, "step": step, "best": best, "bad_epochs": bad_epochs,
            "history": list(history)}


def read_log(path):
    steps, evals = [], []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            (evals if "eval" in rec else steps).append(rec)
    return steps, evals


# -- export -------------------------------------------------------------------

def infer_and_export(net, rgb, out_dir, mask=None):
    """Write finest predictions for one panorama and two coloured point clouds.

    Files: ``depth.pfm`` (metres), ``normal.pfm``, ``normal.png`` and,
    when depth is predicted, ``cloud_rgb.ply`` and ``cloud_normal.ply``.
    """
    ensure_dir(out_dir)
    pred = predict(net, rgb)
    lay = net.config
    mask = np.ones((lay.height, lay.width), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    paths = {}
    if "normal" in pred:
        paths["normal_pfm"] = os.path.join(out_dir, "normal.pfm")
        paths["normal_png"] = os.path.join(out_dir, "normal.png")
        write_pfm(paths["normal_pfm"], pred["normal"])
        write_png(paths["normal_png"], encode_normals(pred["normal"]))
    if "depth" in pred:
        paths["depth_pfm"] = os.path.join(out_dir, "depth.pfm")
        write_pfm(paths["depth_pfm"], pred["depth"])
        paths.update(export_clouds(pred["depth"], mask, rgb, pred.get("normal"), out_dir))
    return paths


def export_clouds(depth, mask, rgb, normal, out_dir):
    """RGB-coloured and (if normals are given) normal-coloured PLY clouds."""
    layout = ErpLayout(*np.shape(depth))
    paths = {"cloud_rgb": os.path.join(out_dir, "cloud_rgb.ply")}
    pts, col = depth_to_points(depth, mask, layout, to_uint8(rgb))
    write_ply(paths["cloud_rgb"], pts, col)
    if normal is not None:
        paths["cloud_normal"] = os.path.join(out_dir, "cloud_normal.ply")
        write_ply(paths["cloud_normal"], pts, encode_normals(np.asarray(normal)[np.asarray(mask, bool)]))
    return paths
