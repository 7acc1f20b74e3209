"""End-to-end acceptance checks, one group per criterion.

The slow groups (convergence and ablation) train real networks on synthetic
data; together they take roughly half an hour on one core.
"""
import os
import time

import numpy as np
import pytest

from panomtl import functional as F
from panomtl.checks import SUITES, op_suite, set_flow_state
from panomtl.geometry import (ErpLayout, build_sampling_grid, depth_to_normals_oracle, gnomonic,
                              gnomonic_inv, latlon_to_pixel, pixel_to_latlon)
from panomtl.io import read_pfm, read_ply, read_png, write_pfm, write_ply, write_png
from panomtl.losses import TERMS, FeatureExtractor, LossWeights, build_pyramid, loss_total
from panomtl.metrics import depth_metrics, normal_metrics
from panomtl.net import MTLNet, NetworkConfig
from panomtl.synth import PanoDataset, interior_mask, raycast, sample_scene, write_dataset
from panomtl.tensor import Tensor, no_grad
from panomtl.train import (LAST_NAME, LOG_NAME, evaluate, load_config, load_state, read_log, save_state,
                           train)

import test_losses
from test_losses import gt_maps, perfect_preds
from test_metrics import depth_loop, normal_loop, unit

DESK_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "desk.cfg")


# -- 1: gradient suite --------------------------------------------------------

@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite_passes_within_five_minutes():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(3):
        for size in range(2):
            for name, rep in op_suite(seed, size=size):
                assert rep.passed, (name, seed, size, rep.max_rel_error)
                worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    for scope in ("block", "loss", "network"):
        for name, rep in SUITES[scope](0):
            assert rep.passed, (scope, name, rep.max_rel_error)
            worst[f"{scope}:{name}"] = rep.max_rel_error
    elapsed = time.perf_counter() - t0
    assert max(worst.values()) < 1e-4
    required = ["block:pano_attention", "block:pano_block", "block:fusion", "network:network"]
    assert set(required + [f"loss:loss_{t}" for t in TERMS]) <= worst.keys()
    assert elapsed < 300, elapsed


@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite_catches_wrong_backward():
    reps = dict(op_suite(0, inject_bug=True))
    assert not reps["buggy_sigmoid"].passed


# -- 2: geometry --------------------------------------------------------------

@pytest.mark.criterion(2, "geometry suite")
def test_pixel_latlon_round_trip():
    layout = ErpLayout(256, 512)
    rng = np.random.default_rng(0)
    u = rng.uniform(-0.5, 511.5, 10000)
    v = rng.uniform(-0.5, 255.5, 10000)
    u2, v2 = latlon_to_pixel(*pixel_to_latlon(u, v, layout), layout)
    assert np.abs(u2 - u).max() < 1e-9 and np.abs(v2 - v).max() < 1e-9


@pytest.mark.criterion(2, "geometry suite")
def test_gnomonic_round_trip_and_radial_identity():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        c = unit(rng, 3)
        axis = np.cross(c, unit(rng, 3))
        axis /= np.linalg.norm(axis)
        theta = rng.uniform(0, np.radians(80))
        d = c * np.cos(theta) + np.cross(axis, c) * np.sin(theta)
        x, y = gnomonic(d, c)
        assert np.abs(gnomonic_inv(x, y, c) - d).max() < 1e-9
    c = np.array([0.3, 0.4, np.sqrt(0.75)])
    for deg in (5, 30, 60):
        t = np.radians(deg)
        e = np.cross([0.0, 1.0, 0.0], c)
        e /= np.linalg.norm(e)
        x, y = gnomonic(c * np.cos(t) + e * np.sin(t), c)
        assert abs(np.hypot(x, y) - np.tan(t)) < 1e-9


@pytest.mark.criterion(2, "geometry suite")
def test_sampling_grid_equator_is_planar():
    layout = ErpLayout(64, 128)
    g = build_sampling_grid(layout, 3)
    du, dv = np.meshgrid([-1, 0, 1], [-1, 0, 1])
    for row in (31, 32):
        for col in (0, 40, 127):
            q = row * 128 + col
            dev = np.hypot(g.u[q] - (col + du.ravel()), g.v[q] - (row + dv.ravel())).max()
            assert dev < 0.01


@pytest.mark.criterion(2, "geometry suite")
@pytest.mark.parametrize("shift", [32, -32])
def test_full_network_longitude_roll_equivariance(shift):
    net = MTLNet(NetworkConfig(base_channels=4, height=32, width=64, init_seed=3)).to_dtype(np.float64)
    set_flow_state(net, np.random.default_rng(1), scale=0.05)
    x = np.random.default_rng(2).uniform(-1, 1, (1, 3, 32, 64))
    with no_grad():
        a, b = net(Tensor(x)), net(Tensor(np.roll(x, shift, axis=3)))
    for task in a:
        for pa, pb in zip(a[task], b[task]):
            s = shift * pa.shape[3] // 64
            assert np.abs(np.roll(pa.data, s, axis=3) - pb.data).max() < 1e-4


# -- 3: loss identities -------------------------------------------------------

@pytest.mark.criterion(3, "loss identities")
def test_all_terms_zero_at_ground_truth():
    pyr = build_pyramid(*gt_maps(np.random.default_rng(20), B=2, H=32, W=64, invalid=0.02), 3)
    total, parts = loss_total(perfect_preds(pyr), pyr, LossWeights(), FeatureExtractor.from_seed(1234))
    assert total.item() == pytest.approx(0.0, abs=1e-12)
    for t in TERMS:
        assert parts[t] == pytest.approx(0.0, abs=1e-12), t


@pytest.mark.criterion(3, "loss identities")
def test_atan2_angle_equals_arccos_on_1e5_pairs():
    rng = np.random.default_rng(21)
    a, b = test_losses.unit(rng, 100000, 3, 1), test_losses.unit(rng, 100000, 3, 1)
    atan = F.vector_angle(Tensor(a), Tensor(b)).data[:, 0]
    acos = np.arccos(np.clip(np.sum(a * b, axis=1)[:, 0], -1, 1))
    assert np.abs(atan - acos).max() < 1e-9


@pytest.mark.criterion(3, "loss identities")
def test_invalid_pixels_change_no_loss_term():
    test_losses.test_invalid_pixels_change_nothing_exhaustive()


# -- 4: metric oracle ---------------------------------------------------------

@pytest.mark.criterion(4, "metric oracle")
def test_metrics_match_loops_on_100_maps():
    rng = np.random.default_rng(30)
    for _ in range(100):
        gt = rng.uniform(0.5, 10.0, (16, 32))
        pred = gt * rng.uniform(0.5, 1.6, gt.shape)
        mask = rng.uniform(size=gt.shape) > rng.uniform(0, 0.5)
        rep = depth_metrics(pred, gt, mask)
        for k, v in depth_loop(pred, gt, mask).items():
            assert abs(getattr(rep, k) - v) < 1e-9, k
        ng, npred = unit(rng, 3, 16, 32), rng.standard_normal((3, 16, 32))
        rep = normal_metrics(npred[None], ng[None], mask[None])
        for k, v in normal_loop(npred, ng, mask).items():
            assert abs(getattr(rep, k) - v) < 1e-9, k


@pytest.mark.criterion(4, "metric oracle")
def test_metric_closed_forms():
    gt = np.random.default_rng(31).uniform(1, 5, (16, 32))
    mask = np.ones_like(gt, bool)
    r = depth_metrics(2 * gt, gt, mask)
    assert r.are == 1.0 and (r.delta_d1, r.delta_d2, r.delta_d3) == (0.0, 0.0, 0.0)
    r = depth_metrics(1.2 * gt, gt, mask)
    assert r.delta_d1 == 100.0 and round(r.rmse_log, 5) == 0.07918


# -- 5: cross-task consistency ------------------------------------------------

@pytest.mark.criterion(5, "geometric consistency")
def test_depth_normals_agree_with_analytic_normals():
    layout = ErpLayout(64, 128)
    for seed in range(10):
        s = raycast(sample_scene(seed), layout)
        n, valid = depth_to_normals_oracle(s.depth, s.mask, layout)
        inner = interior_mask(s) & valid
        cos = np.clip(np.sum(n[inner] * s.normal[inner], axis=-1), -1, 1)
        frac = (np.degrees(np.arccos(cos)) < 1.0).mean()
        assert frac >= 0.95, (seed, frac)


# -- 6: desk-scale convergence ------------------------------------------------

@pytest.mark.criterion(6, "desk convergence")
def test_desk_training_converges(tmp_path):
    write_dataset(range(4), ErpLayout(64, 128), tmp_path / "data")
    cfg = load_config(DESK_CONFIG, [("data_dir", str(tmp_path / "data")), ("out_dir", str(tmp_path / "run"))],
                      env={})
    assert (cfg.network.base_channels, cfg.seed, cfg.max_steps) == (16, 0, 300)
    t0 = time.perf_counter()
    res = train(cfg)
    elapsed = time.perf_counter() - t0
    steps, _ = read_log(res["log"])
    assert len(steps) == 300
    ratio = steps[-1]["total"] / steps[0]["total"]
    report = evaluate(res["net"], PanoDataset(tmp_path / "data"))
    print(f"desk: loss {steps[0]['total']:.3f} -> {steps[-1]['total']:.3f} (ratio {ratio:.3f}), "
          f"delta_d1 {report.delta_d1:.1f}%, normal mean {report.normal_mean:.2f} deg, {elapsed:.0f}s")
    assert ratio <= 0.1
    assert report.delta_d1 > 90.0
    assert report.normal_mean < 10.0
    assert elapsed < 1800


# -- 7: ablation ordering -----------------------------------------------------

ABLATION_STEPS = 800
VARIANTS = {"full": [],
            "nofusion": [("net.use_fusion", "false")],
            "single": [("net.use_fusion", "false"), ("net.use_multiscale", "false")]}


@pytest.fixture(scope="module")
def ablation_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    write_dataset(range(100, 132), ErpLayout(32, 64), root)
    return root


def ablation_mae(data, out, seed, overrides):
    pairs = [("data_dir", str(data)), ("out_dir", str(out)), ("lr", "1e-3"), ("lr_halve_every", "1000"),
             ("batch_size", "4"), ("epochs", "100000"), ("max_steps", str(ABLATION_STEPS)),
             ("eval_every", "100000"), ("early_stop_patience", "100000"), ("seed", str(seed)),
             ("net.init_seed", str(seed)), ("net.height", "32"), ("net.width", "64"),
             ("net.base_channels", "8")]
    res = train(load_config(overrides=pairs + overrides, env={}))
    return evaluate(res["net"], PanoDataset(data)).mae


@pytest.mark.criterion(7, "ablation ordering")
def test_ablation_ordering_holds_for_majority_of_seeds(ablation_data, tmp_path):
    ordered = 0
    for seed in range(3):
        mae = {name: ablation_mae(ablation_data, tmp_path / f"{name}{seed}", seed, ov)
               for name, ov in VARIANTS.items()}
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in mae.items()))
        ordered += mae["full"] <= mae["nofusion"] <= mae["single"]
    assert ordered >= 2


# -- 8: determinism and persistence -------------------------------------------

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(range(50, 54), ErpLayout(32, 64), root)
    return root


def tiny_run(data, out):
    pairs = [("data_dir", str(data)), ("out_dir", str(out)), ("net.height", "32"), ("net.width", "64"),
             ("net.base_channels", "4"), ("epochs", "3"), ("lr", "1e-3")]
    return train(load_config(overrides=pairs, env={}))


@pytest.mark.criterion(8, "determinism and persistence")
def test_same_seed_gives_bit_identical_logs(tiny_data, tmp_path):
    tiny_run(tiny_data, tmp_path / "a")
    tiny_run(tiny_data, tmp_path / "b")
    assert (tmp_path / "a" / LOG_NAME).read_bytes() == (tmp_path / "b" / LOG_NAME).read_bytes()


@pytest.mark.criterion(8, "determinism and persistence")
def test_checkpoint_round_trip_is_bit_exact(tiny_data, tmp_path):
    res = tiny_run(tiny_data, tmp_path)
    cfg, net, adam, meta = load_state(tmp_path / LAST_NAME)
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 64)).astype(np.float32))
    with no_grad():
        a, b = res["net"](x), net(x)
    for task in a:
        for pa, pb in zip(a[task], b[task]):
            np.testing.assert_array_equal(pa.data, pb.data)
    save_state(tmp_path / "again.ckpt", cfg, net, adam, meta)
    _, net2, adam2, meta2 = load_state(tmp_path / "again.ckpt")
    assert meta2 == meta and adam2.step == adam.step
    for name in adam.m:
        np.testing.assert_array_equal(adam.m[name], adam2.m[name])
        np.testing.assert_array_equal(adam.v[name], adam2.v[name])
    assert (tmp_path / LAST_NAME).read_bytes() == (tmp_path / "again.ckpt").read_bytes()


@pytest.mark.criterion(8, "determinism and persistence")
def test_file_formats_round_trip(tmp_path):
    rng = np.random.default_rng(80)
    depth = rng.uniform(0.1, 10, (32, 64)).astype(np.float32)
    normal = rng.standard_normal((32, 64, 3)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", depth)
    write_pfm(tmp_path / "n.pfm", normal)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), depth)
    np.testing.assert_array_equal(read_pfm(tmp_path / "n.pfm"), normal)
    img = rng.integers(0, 256, (32, 64, 3), dtype=np.uint8)
    write_png(tmp_path / "i.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "i.png"), img)
    pts = rng.standard_normal((500, 3))
    col = rng.integers(0, 256, (500, 3), dtype=np.uint8)
    write_ply(tmp_path / "c.ply", pts, col)
    p, c = read_ply(tmp_path / "c.ply")
    np.testing.assert_array_equal(p, pts)
    np.testing.assert_array_equal(c, col)
