"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the PANOMTL_NUMBA flag does not
matter here. The first numba call (compilation) is excluded from timings.
"""
import argparse
import time

import numpy as np

from panomtl.geometry import ErpLayout, pixel_dirs
from panomtl.kernels import _numba, _numpy
from panomtl.synth import sample_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    B, C, H, W, N = 4, 16, 32, 64, 32 * 64 * 9
    feat = rng.standard_normal((B, C, H, W)).astype(np.float32)
    u = rng.uniform(-2, W + 2, (B, N)).astype(np.float32)
    v = rng.uniform(-0.5, H - 0.5, (B, N)).astype(np.float32)
    gout = rng.standard_normal((B, C, N)).astype(np.float32)
    x = rng.standard_normal((B, C, 2 * H, 2 * W)).astype(np.float32)
    _, arg = _numpy.maxpool2_forward(x)
    g = rng.standard_normal((B, C, H, W)).astype(np.float32)
    scene = sample_scene(3, n_objects=6)
    dirs = np.ascontiguousarray(pixel_dirs(ErpLayout(256, 512)).reshape(-1, 3))
    boxes = (dirs, scene.room_lo, scene.room_hi, scene.obj_lo, scene.obj_hi)
    return [
        ("wrap_sample_forward", "wrap_sample_forward", (feat, u, v)),
        ("wrap_sample_backward", "wrap_sample_backward", (feat, u, v, gout)),
        ("maxpool2_forward", "maxpool2_forward", (x,)),
        ("maxpool2_backward", "maxpool2_backward", (arg, g)),
        ("raycast_boxes 256x512", "raycast_boxes", boxes),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, inputs in cases(rng):
        f_np, f_nb = getattr(_numpy, name), getattr(_numba, name)
        f_nb(*inputs)  # compile
        t_np = best_of(lambda: f_np(*inputs), args.repeat)
        t_nb = best_of(lambda: f_nb(*inputs), args.repeat)
        print(f"{label:24s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
