"""Command-line entry point: dataset generation, reconstruction, evaluation,
and novel-view rendering as subcommands of one binary.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 pipeline failure.
All randomness flows from the --seed flag; reruns with identical inputs
produce byte-identical trajectories and checkpoints.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .depth_objective import LossWeights
from .errors import DegenerateGeometry, TooShort
from .geometry import Intrinsics, Pose, load_tum, save_tum
from .metrics import ate, psnr, rpe, ssim
from .radiance import load_field, outside_fraction, render_rays, save_field
from .raster import Raster, load_png, save_pfm, save_png
from .scheduler import (ScheduleConfig, read_run_config, run_pipeline,
                        write_losses_csv, write_run_config)
from .synthscene import generate_dataset, load_dataset, write_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PIPELINE = 4

log = logging.getLogger("lorf")


class UsageError(Exception):
    pass


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict = field(default_factory=dict)
    git: str = field(default_factory=_git_describe)
    wall_times: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def write(self, path):
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)


class _Timer:
    def __init__(self, manifest, stage):
        self.manifest, self.stage = manifest, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.wall_times[self.stage] = round(
            time.perf_counter() - self.t0, 3)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.kind not in ("room", "corridor", "pedestal", "flat", "empty"):
        raise UsageError(f"unknown generator {args.kind!r}")
    manifest = RunManifest("generate", args.seed,
                           {"kind": args.kind, "frames": args.frames,
                            "size": args.size})
    with _Timer(manifest, "generate"):
        ds = generate_dataset(args.kind, args.traj, n_frames=args.frames,
                              width=args.size, height=args.size,
                              seed=args.seed, length=args.length)
    with _Timer(manifest, "write"):
        write_dataset(ds, args.out)
    manifest.outputs = sorted(os.listdir(args.out))
    manifest.write(os.path.join(args.out, "run_manifest.json"))
    log.info("wrote %d frames to %s", len(ds), args.out)
    return EXIT_OK


def cmd_reconstruct(args):
    if not os.path.isdir(args.data):
        print(f"error: dataset directory not found: {args.data}",
              file=sys.stderr)
        return EXIT_IO
    try:
        ds = load_dataset(args.data)
    except (OSError, KeyError, ValueError) as e:
        print(f"error: failed to load dataset: {e}", file=sys.stderr)
        return EXIT_IO

    config, weights = ScheduleConfig(), LossWeights()
    if args.config:
        try:
            config, weights, _, _ = read_run_config(args.config)
        except OSError as e:
            print(f"error: cannot read config: {e}", file=sys.stderr)
            return EXIT_IO
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"bad config: {e}")

    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest("reconstruct", args.seed, config.to_dict())
    try:
        with _Timer(manifest, "pipeline"):
            state = run_pipeline(ds, config, weights, seed=args.seed)
    except Exception as e:
        wid = getattr(e, "window_id", "bootstrap")
        print(f"error: pipeline failed in window {wid}: {e}", file=sys.stderr)
        return EXIT_PIPELINE

    with _Timer(manifest, "write"):
        save_tum(os.path.join(args.out, "est_trajectory.txt"),
                 state.trajectory())
        write_losses_csv(os.path.join(args.out, "losses.csv"), state)
        for f in state.fields.fields:
            save_field(os.path.join(args.out, f"field_{f.id}.lrf"), f)
        with open(os.path.join(args.out, "intrinsics.json"), "w") as fh:
            json.dump(ds.K.as_dict(), fh, indent=2)
        write_run_config(os.path.join(args.out, "run_config.json"), config,
                         weights, seed=args.seed)
        if args.trace_ba:
            with open(os.path.join(args.out, "ba_trace.csv"), "w",
                      newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["level", "iter", "cost", "mu", "accepted"])
                w.writerows(state.ba_trace)
    manifest.outputs = sorted(os.listdir(args.out))
    manifest.write(os.path.join(args.out, "run_manifest.json"))
    log.info("reconstructed %d frames, %d fields, %d shifts",
             len(state.poses), len(state.fields.fields), state.shifts)
    return EXIT_OK


def cmd_evaluate(args):
    for path in (args.est, args.gt):
        if not os.path.isfile(path):
            print(f"error: trajectory not found: {path}", file=sys.stderr)
            return EXIT_IO
    est, gt = load_tum(args.est), load_tum(args.gt)
    rows = [("align_mode", args.align)]
    try:
        rows.append(("ate_m", f"{ate(est, gt, args.align):.6f}"))
        r, t = rpe(est, gt)
        rows.append(("rpe_r_deg", f"{r:.6f}"))
        rows.append(("rpe_t_m", f"{t:.6f}"))
    except (DegenerateGeometry, TooShort) as e:
        raise UsageError(f"trajectories not comparable: {e}")

    if args.renders and args.frames:
        names = sorted(os.listdir(args.renders))
        ps, ss = [], []
        for name in names:
            gt_path = os.path.join(args.frames, name)
            if not os.path.isfile(gt_path):
                continue
            a = load_png(os.path.join(args.renders, name))
            b = load_png(gt_path)
            ps.append(psnr(a, b))
            ss.append(ssim(a, b))
        if ps:
            rows.append(("psnr_db", f"{np.mean(ps):.4f}"))
            rows.append(("ssim", f"{np.mean(ss):.6f}"))

    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            w.writerows(rows)
    return EXIT_OK


def _render_one(fields, pose: Pose, K: Intrinsics, seed, n_samples=64,
                near=0.05, far=24.0):
    h, w = K.height, K.width
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    d_cam = np.stack([(u.ravel() - K.cx) / K.fx, (v.ravel() - K.cy) / K.fy,
                      np.ones(h * w)], axis=-1)
    dirs = d_cam @ pose.rotation.as_matrix().T
    origins = np.tile(pose.translation, (h * w, 1))
    # active-field selection: the field covering the view best (smallest
    # fraction of ray samples outside its contracted cube, probed at each
    # field's own radius)
    fracs = [outside_fraction(f, origins + f.radius * dirs) for f in fields]
    best = int(np.argmin(fracs))
    if fracs[best] >= 1.0:
        log.warning("pose outside every field extent; rendering background")
    res = render_rays(fields[best], origins, dirs, n_samples, near, far,
                      seed=seed)
    color = res.color.reshape(h, w, 3)
    # expected depth is along the unit ray; convert to z-depth
    depth = (res.depth / np.linalg.norm(d_cam, axis=1)).reshape(h, w)
    return color, depth


def cmd_render(args):
    ckpts = sorted(p for p in os.listdir(args.run)
                   if p.startswith("field_") and p.endswith(".lrf")) \
        if os.path.isdir(args.run) else []
    if not ckpts:
        print(f"error: no field checkpoints in {args.run}", file=sys.stderr)
        return EXIT_IO
    fields = [load_field(os.path.join(args.run, p)) for p in ckpts]
    try:
        with open(os.path.join(args.run, "intrinsics.json")) as f:
            K = Intrinsics.from_dict(json.load(f))
    except OSError as e:
        print(f"error: missing intrinsics: {e}", file=sys.stderr)
        return EXIT_IO
    traj = load_tum(args.poses if args.poses
                    else os.path.join(args.run, "est_trajectory.txt"))
    os.makedirs(args.out, exist_ok=True)
    idx = range(len(traj)) if args.frame is None else [args.frame]
    for i in idx:
        color, depth = _render_one(fields, traj.poses[i], K, args.seed,
                                   n_samples=args.samples)
        save_png(os.path.join(args.out, f"render_{i:06d}.png"),
                 Raster(np.clip(color, 0.0, 1.0)))
        if args.depth:
            save_pfm(os.path.join(args.out, f"depth_{i:06d}.pfm"),
                     Raster(depth.astype(np.float32), "depth"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="lorf",
        description="Joint depth, pose, and local-radiance-field "
                    "reconstruction on synthetic oracle scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--kind", default="corridor")
    g.add_argument("--traj", default="corridor")
    g.add_argument("--frames", type=int, default=48)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--length", type=float, default=None)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="run the windowed pipeline")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--trace-ba", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="trajectory and view metrics")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--align", choices=("se3", "sim3"), default="se3")
    e.add_argument("--renders", default=None)
    e.add_argument("--frames", default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("render", help="novel views from a run directory")
    d.add_argument("--run", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--poses", default=None)
    d.add_argument("--frame", type=int, default=None)
    d.add_argument("--samples", type=int, default=64)
    d.add_argument("--depth", action="store_true")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("LORF_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
