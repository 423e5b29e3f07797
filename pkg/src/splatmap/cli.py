"""Command line entry point: ``splatmap {run,render,eval,gradcheck,bench,config}``.

Exit codes: 0 success, 1 error, 2 a check did not pass (gradient check,
determinism across repeats, bench time limit).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets, evaluation
from .config import BACKGROUNDS, RunConfig, load_config, parse_config
from .errors import SplatError
from .geometry import CameraIntrinsics, CameraPose
from .rasterizer import THREADS_ENV, render, set_threads
from .scene import GaussianMap, load_checkpoint

log = logging.getLogger("splatmap")

EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    return cfg.validate()


def cmd_run(args):
    from .slam import run

    cfg = _load_cfg(args)
    if args.deterministic:
        cfg.set("run.deterministic", "true")
    if args.output:
        cfg.set("run.output", args.output)
    base = Path(cfg.run.output)
    digests, reports = [], []
    for r in range(args.repeats):
        out = base if args.repeats == 1 else base / f"repeat_{r}"
        report, _ = run(cfg, out)
        print(report.to_json())
        reports.append(report)
        digests.append(((out / "trajectory.txt").read_bytes(), (out / "map.ckpt").read_bytes()))
    if len(reports) > 1:
        for name in ("ate_rmse", "psnr", "ssim", "depth_l1", "fps"):
            vals = [getattr(rep, name) for rep in reports if getattr(rep, name) is not None]
            if vals:
                print(f"{name}: {np.mean(vals):.6g} +- {np.std(vals):.3g} over {len(vals)} runs")
    if cfg.run.deterministic and len(digests) > 1 and any(d != digests[0] for d in digests[1:]):
        print("repeats differ: outputs are not bitwise identical", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _parse_floats(text, n, what):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != n:
        raise ValueError(f"{what} needs {n} numbers, got {len(vals)}")
    return vals


def cmd_render(args):
    gmap = load_checkpoint(args.checkpoint)
    fx, fy, cx, cy, w, h = _parse_floats(args.intrinsics, 6, "--intrinsics")
    K = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    if args.trajectory:
        traj = datasets.read_trajectory(args.trajectory)
        poses = traj.poses
    elif args.pose:
        tx, ty, tz, qx, qy, qz, qw = _parse_floats(args.pose, 7, "--pose")
        poses = [CameraPose([qw, qx, qy, qz], [tx, ty, tz])]
    else:
        raise ValueError("give --pose or --trajectory")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        r = render(gmap, pose.normalized(), K, background=BACKGROUNDS[args.background])
        datasets.save_color_png(out / f"color_{i:05d}.png", r.color)
        datasets.save_depth_png(out / f"depth_{i:05d}.png", r.depth, datasets.TUM_DEPTH_SCALE)
    print(f"rendered {len(poses)} view(s) of {len(gmap)} gaussians to {out}")
    return EXIT_OK


def _image_metrics(est_dir, gt_dir):
    psnrs, ssims = [], []
    for gt_path in sorted(Path(gt_dir).glob("*.png")):
        est_path = Path(est_dir) / gt_path.name
        if not est_path.exists():
            continue
        a, b = datasets.load_color_png(est_path), datasets.load_color_png(gt_path)
        psnrs.append(evaluation.psnr(a, b))
        ssims.append(evaluation.ssim(a, b))
    if not psnrs:
        raise ValueError(f"no matching PNG names between {est_dir} and {gt_dir}")
    return float(np.mean(psnrs)), float(np.mean(ssims))


def cmd_eval(args):
    est = datasets.read_trajectory(args.est)
    gt = datasets.read_trajectory(args.gt)
    rmse, errs, aligned, gt_pos = evaluation.ate(est, gt, args.max_dt)
    report = evaluation.EvalReport(ate_rmse=rmse, translation_errors=[float(e) for e in errs],
                                   frame_count=len(est))
    if args.est_images and args.gt_images:
        report.psnr, report.ssim = _image_metrics(args.est_images, args.gt_images)
    if args.output:
        evaluation.write_report(report, args.output, aligned, gt_pos)
    print(report.to_json())
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import corruption, run_gradcheck

    hook = corruption(args.corrupt) if args.corrupt else None
    report = run_gradcheck(args.seed, args.trials, corrupt=hook)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_CHECK


def bench_scene(n, width, height, seed=0):
    """A random cloud of ``n`` Gaussians filling a ``width``x``height`` view."""
    rng = np.random.default_rng(seed)
    f = 0.8 * width
    K = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    z = rng.uniform(2.0, 6.0, n)
    x = rng.uniform(-0.6, 0.6, n) * z * width / f
    y = rng.uniform(-0.6, 0.6, n) * z * height / f
    gmap = GaussianMap()
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rng.normal(0, 1, (n, 3))
    gmap.append_raw(np.stack([x, y, z], 1), rng.normal(size=(n, 4)),
                    np.log(rng.uniform(0.01, 0.04, (n, 3))), rng.uniform(-1, 3, n), sh)
    return gmap, K


def cmd_bench(args):
    if args.config:
        from .slam import run

        cfg = _load_cfg(args)
        if args.output:
            cfg.set("run.output", args.output)
        report, _ = run(cfg)
        print(json.dumps({"frames": report.frame_count, "system_fps": report.fps}))
        return EXIT_OK
    gmap, K = bench_scene(args.gaussians, args.width, args.height, args.seed)
    render(gmap, CameraPose.identity(), K)  # compile / warm up
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        render(gmap, CameraPose.identity(), K)
        times.append(time.perf_counter() - t0)
    best = min(times)
    print(json.dumps({"gaussians": args.gaussians, "width": args.width, "height": args.height,
                      "threads": set_threads(None), "best_s": best, "median_s": float(np.median(times))}))
    if args.max_seconds and best > args.max_seconds:
        return EXIT_CHECK
    return EXIT_OK


def cmd_config(args):
    cfg = _load_cfg(args)
    if args.dump:
        sys.stdout.write(cfg.dump())
    else:
        print(f"configuration ok ({args.config or 'defaults'})")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="splatmap", description="Gaussian splatting RGB-D SLAM.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, help=f"kernel worker threads (overrides ${THREADS_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")

    sp = sub.add_parser("run", help="run SLAM on a sequence")
    with_config(sp, required=True)
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--deterministic", action="store_true")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("render", help="render a map checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pose", help="'tx ty tz qx qy qz qw' camera-to-world")
    sp.add_argument("--trajectory", help="trajectory file, one render per pose")
    sp.add_argument("--intrinsics", required=True, help="'fx fy cx cy width height'")
    sp.add_argument("--background", choices=sorted(BACKGROUNDS), default="black")
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="evaluate an estimated trajectory")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--max-dt", type=float, default=datasets.TUM_MAX_DT)
    sp.add_argument("--est-images")
    sp.add_argument("--gt-images")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the renderer gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="render timing, or system FPS with --config")
    with_config(sp)
    sp.add_argument("--output")
    sp.add_argument("--gaussians", type=int, default=10000)
    sp.add_argument("--width", type=int, default=640)
    sp.add_argument("--height", type=int, default=480)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-seconds", type=float, default=0.0)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("config", help="validate or print a configuration")
    with_config(sp)
    sp.add_argument("--dump", action="store_true", help="print every key with its value")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except (SplatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
