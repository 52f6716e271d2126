"""Command line entry point ``vo``: run, eval, synth, ats-debug."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np

from . import dataset_io as dio
from .evaluation import EvaluationError, evaluate, read_trajectory
from .events import seconds_to_us
from .odometry import FrameDiagnostics, RunConfig, run_odometry
from .pixel_selection import select_ats_pixels
from .time_surface import SurfaceOfActiveEvents, render_ats, render_ts

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_TRACKING = 3

log = logging.getLogger("vo")


def _load_cfg(path) -> RunConfig:
    return dio.load_config(path) if path else RunConfig()


def cmd_run(args) -> int:
    cfg = _load_cfg(args.config)
    data = dio.load_dataset(args.data, levels=cfg.mapping.pyramid_levels)
    frames = data.frames()
    if args.max_frames:
        frames = (f for i, f in zip(range(args.max_frames), frames))
    init = None
    if data.groundtruth is not None and not args.identity_start:
        init = data.groundtruth[0]
    traj, diags = run_odometry(frames, data.events, data.rig, cfg, init, stop_on_failure=True)
    dio.write_trajectory(traj, args.out)
    diag_path = Path(args.diagnostics) if args.diagnostics else Path(args.out).with_suffix(".diag.csv")
    diag_path.write_text(",".join(FrameDiagnostics.FIELDS) + "\n"
                         + "".join(d.row() + "\n" for d in diags))
    branches = {}
    for d in diags:
        branches[d.branch] = branches.get(d.branch, 0) + 1
    print(f"tracked {len(traj)} frames {branches} -> {args.out}")
    if diags and diags[-1].branch == "failed":
        print(f"tracking failed at frame {diags[-1].index}; partial trajectory written",
              file=sys.stderr)
        return EXIT_TRACKING
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    report = evaluate(est, gt, args.unit, args.k_first, args.max_dt)
    print(report.to_json())
    if report.partial_cut_time is not None:
        part = evaluate(est.until(report.partial_cut_time), gt, args.unit, args.k_first, args.max_dt)
        print(json.dumps({"partial": json.loads(part.to_json())}))
    print(report.table())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import synthetic as syn
    if args.profile:
        profile = syn.MotionProfile.load(args.profile)
    elif args.preset == "spin":
        profile = syn.spin_profile(args.duration or 1.2)
    else:
        slow = args.slow if args.slow is not None else 4.0
        fast = args.fast if args.fast is not None else 6.0
        profile = syn.slow_fast_profile(slow, fast)
    rig = syn.default_rig()
    cfg = syn.SynthConfig(frame_rate=args.rate, exposure=args.blur, blur_samples=args.blur_samples,
                          events=syn.EventSimConfig(contrast=args.contrast, min_depth=1.5,
                                                    seed=args.seed))
    seq = syn.make_sequence(syn.Scene.textured_room(args.seed), profile, rig, args.rate, cfg)
    out = dio.write_dataset(args.out, seq.frames, seq.events, rig, seq.groundtruth,
                            event_format=args.event_format)
    print(f"wrote {len(seq.frames)} frames, {len(seq.events)} events to {out}")
    return EXIT_OK


def cmd_ats_debug(args) -> int:
    cfg = _load_cfg(args.config)
    data = dio.load_dataset(args.data)
    if not 1 <= args.frame < len(data):
        raise ValueError(f"frame must be in [1, {len(data) - 1}]")
    t_prev = data.rgb_index[args.frame - 1][0]
    t_now = data.rgb_index[args.frame][0]
    t_us = seconds_to_us(t_now)
    ev = data.rig.event_cam
    sae = SurfaceOfActiveEvents(ev.width, ev.height)
    sae.ingest(data.events.between(-1, t_us))
    ats = render_ats(sae, t_us, cfg.ats)
    ts = render_ts(sae, t_us, cfg.ats.tau_upper, cfg.ats.box_blur_radius, cfg.ats.median_blur_radius)
    build = data.events.between(seconds_to_us(t_prev), t_us)
    pix = select_ats_pixels(ats, build, seconds_to_us(t_prev), cfg.event_select)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(out / "ts.png"), ts.gray)
    cv2.imwrite(str(out / "ats.png"), ats.gray)
    d = ats.decay
    span = max(cfg.ats.tau_upper - cfg.ats.tau_lower, 1e-12)
    cv2.imwrite(str(out / "decay.png"),
                np.clip(255 * (d - cfg.ats.tau_lower) / span, 0, 255).astype(np.uint8))
    vis = cv2.cvtColor(ats.gray, cv2.COLOR_GRAY2BGR)
    vis[pix.v, pix.u] = (0, 0, 255)
    cv2.imwrite(str(out / "selected.png"), vis)
    print(f"frame {args.frame}: {len(pix)} selected pixels -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vo", description="Event + RGB-D direct visual odometry")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track a dataset")
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--diagnostics", help="per-frame CSV (default <out>.diag.csv)")
    r.add_argument("--max-frames", type=int, default=0)
    r.add_argument("--identity-start", action="store_true",
                   help="start from identity instead of the first ground-truth pose")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a trajectory against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--unit", default="per_degree", choices=("per_frame", "per_degree", "per_meter"))
    e.add_argument("--k-first", type=int, default=10)
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--json-out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--preset", default="slow_fast", choices=("slow_fast", "spin"))
    s.add_argument("--profile", help="motion profile JSON (overrides --preset)")
    s.add_argument("--slow", type=float)
    s.add_argument("--fast", type=float)
    s.add_argument("--duration", type=float)
    s.add_argument("--rate", type=float, default=30.0)
    s.add_argument("--blur", type=float, default=0.033, help="exposure time in seconds (0 = sharp)")
    s.add_argument("--blur-samples", type=int, default=15, help="sub-exposure renders per frame")
    s.add_argument("--contrast", type=float, default=0.25)
    s.add_argument("--event-format", default="bin", choices=("bin", "csv"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ats-debug", help="dump TS / ATS / selected-pixel images for one frame")
    a.add_argument("--data", required=True)
    a.add_argument("--frame", type=int, required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ats_debug)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except dio.ConfigError as exc:
        print(f"invalid configuration key {exc.key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dio.DatasetError, EvaluationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
