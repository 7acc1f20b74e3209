"""Command-line entry point: ``panomtl <command> ...``."""
import argparse
import json
import os
import sys
import time

import numpy as np

from .geometry import ErpLayout


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def cmd_synth(args):
    from .synth import write_dataset
    layout = ErpLayout(args.height, 2 * args.height)
    seeds = range(args.seed, args.seed + args.count)
    t0 = time.perf_counter()
    path = write_dataset(seeds, layout, args.out, args.objects)
    print(f"wrote {args.count} samples ({layout.height}x{layout.width}) to {args.out} "
          f"in {time.perf_counter() - t0:.2f}s; manifest {path}")
    return 0


def cmd_train(args):
    from .train import load_config, train
    cfg = load_config(args.config, args.set)
    summary = train(cfg, resume=args.resume, quiet=args.quiet)
    summary.pop("net")
    print(json.dumps(summary, indent=2))
    return 0


def _write_report(report, out):
    if not out:
        return
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.txt"), "w") as f:
        f.write(report.to_text())
    with open(os.path.join(out, "metrics.json"), "w") as f:
        f.write(report.to_json() + "\n")


def cmd_eval(args):
    from .synth import PanoDataset
    from .train import evaluate, load_model
    net, _, _ = load_model(args.checkpoint)
    report = evaluate(net, PanoDataset(args.data))
    sys.stdout.write(report.to_text())
    _write_report(report, args.out)
    return 0


def cmd_infer(args):
    from .io import read_png
    from .train import infer_and_export, load_model
    net, _, _ = load_model(args.checkpoint)
    rgb = read_png(args.rgb).astype(np.float32)[..., :3] / 255.0
    mask = read_png(args.mask) > 127 if args.mask else None
    paths = infer_and_export(net, rgb, args.out, mask)
    for k, v in sorted(paths.items()):
        print(f"{k} {v}")
    return 0


def cmd_export_ply(args):
    from .io import read_pfm, read_png
    from .train import export_clouds
    depth = read_pfm(args.depth).astype(np.float64)
    H, W = depth.shape
    rgb = read_png(args.rgb).astype(np.float64)[..., :3] / 255.0 if args.rgb else np.full((H, W, 3), 0.5)
    normal = read_pfm(args.normal) if args.normal else None
    mask = read_png(args.mask) > 127 if args.mask else np.isfinite(depth) & (depth > 0)
    os.makedirs(args.out, exist_ok=True)
    for k, v in sorted(export_clouds(depth, mask, rgb, normal, args.out).items()):
        print(f"{k} {v}")
    return 0


def cmd_gradcheck(args):
    from .checks import SUITES, op_suite
    scopes = list(SUITES) if args.scope == "all" else [args.scope]
    failed = 0
    t0 = time.perf_counter()
    for scope in scopes:
        if scope == "op":
            results = op_suite(args.seed, inject_bug=args.inject_bug)
        else:
            results = SUITES[scope](args.seed)
        for name, rep in results:
            status = "ok" if rep.passed else "FAIL"
            failed += not rep.passed
            print(f"{scope:8s} {name:24s} max_rel_err={rep.max_rel_error:.3e} {status}")
    print(f"{failed} failure(s) in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="panomtl", description="360-degree depth and normal estimation")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic box-room dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0, help="first scene seed")
    s.add_argument("--height", type=int, default=64, help="panorama height (width is twice this)")
    s.add_argument("--objects", type=int, default=None, help="fixed object count (default random 0-6)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="directory for metrics.txt and metrics.json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict one panorama and export maps and point clouds")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rgb", required=True, help="input PNG")
    s.add_argument("--mask", help="optional validity mask PNG")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks at float64")
    s.add_argument("--scope", choices=["op", "block", "loss", "network", "all"], default="op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject-bug", action="store_true",
                   help="add a deliberately wrong op that must be reported as a failure")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-ply", help="point clouds from a depth PFM")
    s.add_argument("--depth", required=True)
    s.add_argument("--rgb")
    s.add_argument("--normal")
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
