"""Command-line entry point: ``delaycomp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 bench budget exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import PLANES
from .bundle import SequenceBundle, write_mask, write_png, write_synthetic
from .depth import DEFAULT_INTRINSICS, SCENES, FileDepth, load_frame, raycast, synthetic_sequence
from .errors import DataError, DelayCompError
from .geometry import CameraIntrinsics
from .inpaint import METHODS as INPAINT_METHODS
from .inpaint import InpaintConfig, fill
from .splat import SplatConfig, max_threads, render_compensated
from .stream import (
    METHODS,
    NetworkConditions,
    PipelineConfig,
    compensate,
    run_live,
    run_offline_eval,
    source_poses,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_OVERRUN = 3

logger = logging.getLogger("delaycomp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(choices):
    def parse(text: str) -> list[str]:
        items = [x.strip() for x in text.split(",") if x.strip()]
        bad = [x for x in items if x not in choices]
        if bad:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; expected from {list(choices)}")
        return items

    return parse


def _add_render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=SplatConfig.gamma, help="softmax blending temperature")
    p.add_argument("--radius", type=float, default=SplatConfig.radius, help="sphere radius (fraction of image width at unit focal)")
    p.add_argument("--inpaint", choices=INPAINT_METHODS, default="pullpush")
    p.add_argument("--plane", choices=PLANES, default="frontal", help="plane assumed by the homography baseline")
    p.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="delaycomp", description="Frame-delay compensation by depth reprojection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="ray cast a synthetic sequence bundle")
    p.add_argument("--scene", choices=sorted(SCENES), default="corridor")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-rate", type=float, default=30.0)
    p.add_argument("--width", type=int, default=DEFAULT_INTRINSICS.width)
    p.add_argument("--height", type=int, default=DEFAULT_INTRINSICS.height)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("render", help="compensate one frame by a number of steps")
    p.add_argument("--seq", type=Path, required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--delay", type=int, default=1)
    p.add_argument("--method", choices=METHODS, default="pointcloud")
    _add_render_flags(p)
    p.add_argument("--out", type=Path, default=Path("render_out"))

    p = sub.add_parser("evaluate", help="offline evaluation against recorded future frames")
    p.add_argument("--seq", type=Path, required=True)
    p.add_argument("--delays", type=_int_list, default=[1, 5, 10])
    p.add_argument("--methods", type=_str_list(METHODS), default=list(METHODS))
    p.add_argument("--stride", type=int, default=1, help="evaluate every n-th source frame")
    p.add_argument("--predicted-pose", action="store_true", help="use the kinematic prediction instead of the recorded pose")
    p.add_argument("--no-ms-ssim", action="store_true")
    _add_render_flags(p)
    p.add_argument("--out", type=Path, default=Path("metrics.csv"))

    p = sub.add_parser("simulate", help="live-mode emulation over a delayed, decimated link")
    p.add_argument("--seq", type=Path, required=True)
    p.add_argument("--profile", type=Path, help="JSON file with network condition fields")
    p.add_argument("--delay-ms", type=float, default=None)
    p.add_argument("--jitter-ms", type=float, default=None)
    p.add_argument("--skip", type=int, default=None)
    p.add_argument("--drop", type=float, default=None, help="independent drop probability")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--method", choices=METHODS, default="pointcloud")
    p.add_argument("--horizon", default="now", help="'now' or a fixed number of display periods")
    p.add_argument("--fps", type=float, default=30.0, help="display rate")
    p.add_argument("--ticks", type=int, default=None)
    p.add_argument("--clock", choices=("virtual", "wall"), default="virtual")
    p.add_argument("--no-frames", action="store_true", help="do not write emitted PNGs")
    _add_render_flags(p)
    p.add_argument("--out", type=Path, default=Path("simulate_out"))

    p = sub.add_parser("bench", help="rasterizer + inpaint throughput")
    p.add_argument("--seq", type=Path, help="bundle to take the frame from (default: synthetic 1280x720 corridor)")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--threads", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--budget-ms", type=float, default=None, help="exit 3 if the median at the largest thread count exceeds this")
    p.add_argument("--out", type=Path, default=None, help="write the report as JSON here")
    return parser


# ---------------------------------------------------------------------------


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "matrix"):
        return obj.matrix.tolist()
    return obj


def write_run_config(directory: Path, args: argparse.Namespace, **extra) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "tool": "delaycomp",
        "version": __version__,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        **extra,
    }
    path = directory / "run_config.json"
    path.write_text(json.dumps(_jsonable(header), indent=2, sort_keys=True) + "\n")
    return path


def _pipeline_config(args, method: str, display_period: float = 1.0 / 30.0, horizon="now") -> PipelineConfig:
    try:
        return PipelineConfig(
            display_period=display_period,
            horizon=horizon,
            method=method,
            splat=SplatConfig(radius=args.radius, gamma=args.gamma),
            inpaint=InpaintConfig(method=args.inpaint),
            homography_plane=args.plane,
            threads=args.threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _open(seq: Path) -> FileDepth:
    return FileDepth(SequenceBundle(seq))


def cmd_synth(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    intr = DEFAULT_INTRINSICS
    if (args.width, args.height) != (intr.width, intr.height):
        sx, sy = args.width / intr.width, args.height / intr.height
        intr = CameraIntrinsics(intr.fx * sx, intr.fy * sy, (args.width - 1) / 2, (args.height - 1) / 2, args.width, args.height)
    seq = synthetic_sequence(args.scene, args.frames, args.seed, args.frame_rate, intr)
    bundle = write_synthetic(args.out, seq, name=f"{args.scene}-seed{args.seed}")
    write_run_config(args.out, args, intrinsics=intr.to_dict())
    print(f"wrote {len(bundle)} frames to {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    source = _open(args.seq)
    n = len(source.bundle)
    if not (0 <= args.frame and args.frame + args.delay < n and args.delay >= 0):
        raise UsageError(f"frame {args.frame} + delay {args.delay} outside sequence of {n} frames")
    cfg = _pipeline_config(args, args.method)
    image, depth, pose, _ = load_frame(source, args.frame)
    dst = source.bundle.poses[args.frame + args.delay]
    intr = source.bundle.intrinsics
    args.out.mkdir(parents=True, exist_ok=True)
    if args.method == "pointcloud":
        raw = render_compensated((image, depth), intr, pose, dst, cfg.splat, cfg.threads)
        write_png(args.out / "raw.png", raw.image)
        write_mask(args.out / "holes.png", raw.hole_mask)
        out_image = fill(raw, cfg.inpaint)
        hole_fraction = raw.hole_fraction
    else:
        out = compensate(image, depth, intr, pose, dst, cfg)
        out_image, hole_fraction = out.image, out.hole_fraction
    write_png(args.out / "frame.png", out_image)
    write_run_config(args.out, args, pipeline=cfg.to_dict(), hole_fraction=hole_fraction)
    print(f"hole fraction {hole_fraction:.4f}; wrote {args.out / 'frame.png'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    source = _open(args.seq)
    cfg = _pipeline_config(args, args.methods[0])
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    rows = run_offline_eval(
        source,
        args.delays,
        args.methods,
        cfg,
        out_csv=args.out,
        sequence_id=source.bundle.manifest.name,
        frame_stride=args.stride,
        predicted_pose=args.predicted_pose,
        with_ms_ssim=not args.no_ms_ssim,
    )
    write_run_config(args.out.parent, args, pipeline=cfg.to_dict(), rows=len(rows))
    for k in args.delays:
        means = []
        for m in args.methods:
            vals = [r["psnr"] for r in rows if r["method"] == m and r["delay_steps"] == k]
            means.append(f"{m}={np.mean(vals):.2f}dB" if vals else f"{m}=n/a")
        print(f"t+{k}: " + " ".join(means))
    return EXIT_OK


def _conditions(args) -> NetworkConditions:
    fields = {}
    if args.profile is not None:
        try:
            fields.update(json.loads(args.profile.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(args.profile, f"unreadable profile: {exc}") from exc
    if args.delay_ms is not None:
        fields["base_delay"] = args.delay_ms / 1000.0
    if args.jitter_ms is not None:
        fields["jitter_stddev"] = args.jitter_ms / 1000.0
    if args.skip is not None:
        fields["skip"] = args.skip
    if args.drop is not None:
        fields["drop_probability"] = args.drop
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        return NetworkConditions(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad network conditions: {exc}") from exc


def cmd_simulate(args) -> int:
    cond = _conditions(args)
    if args.horizon == "now":
        horizon = "now"
    else:
        try:
            horizon = int(args.horizon)
        except ValueError:
            raise UsageError(f"--horizon must be 'now' or an integer, got {args.horizon!r}") from None
    if not args.fps > 0:
        raise UsageError("--fps must be positive")
    cfg = _pipeline_config(args, args.method, 1.0 / args.fps, horizon)
    source = _open(args.seq)
    out = args.out
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    def sink(tick, image):
        if not args.no_frames:
            write_png(frames_dir / f"{tick:06d}.png", image)

    result = run_live(source, cond, cfg, n_ticks=args.ticks, clock=args.clock, sink=sink)
    log = result.log
    log.write_csv(out / "framelog.csv")
    log.write_timings(out / "timings.csv")
    compared = [e for e in log if not e.placeholder and e.psnr is not None]
    summary = {
        "emitted_frames": len(log),
        "placeholder_frames": sum(e.placeholder for e in log),
        "delivered_frames": len(log.deliveries),
        "delivered_fps": log.delivered_fps(),
        "causality_violations": log.causality_violations(),
        "overruns": sum(e.overrun for e in log),
        "frames_beating_raw": sum(e.psnr > e.psnr_raw for e in compared),
        "frames_compared": len(compared),
        "median_total_ms": statistics.median(e.total_ms for e in log) if len(log) else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_run_config(out, args, network=dataclasses.asdict(cond), pipeline=cfg.to_dict())
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _bench_frame(args):
    if args.seq is None:
        intr = CameraIntrinsics(800.0, 800.0, 639.5, 359.5, 1280, 720)
        seq = synthetic_sequence("corridor", 2, seed=0, intr=intr)
        image, depth = raycast(seq.scene, intr, seq.poses[0])
        return intr, image, depth, seq.poses[0], seq.poses[1]
    source = _open(args.seq)
    n = len(source.bundle)
    if not 0 <= args.frame < n - 1:
        raise UsageError(f"--frame must lie in [0, {n - 1})")
    image, depth, pose, _ = load_frame(source, args.frame)
    return source.bundle.intrinsics, image, depth, pose, source_poses(source)[args.frame + 1]


def bench(intr, image, depth, src, dst, threads: Sequence[int], repeats: int) -> dict:
    """Median rasterize + inpaint wall time per thread count, plus a bit-exactness check."""
    cfg = SplatConfig()
    inp = InpaintConfig()
    report = {"width": intr.width, "height": intr.height, "points": int(depth.valid.sum()),
              "max_threads": max_threads(), "results": []}
    reference = None
    for n in threads:
        render_compensated((image, depth), intr, src, dst, cfg, n)  # warm-up / JIT
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            r = render_compensated((image, depth), intr, src, dst, cfg, n)
            out = fill(r, inp)
            times.append(1e3 * (time.perf_counter() - t0))
        if reference is None:
            reference = out
        report["results"].append({
            "threads": n,
            "effective_threads": min(n, max_threads()),
            "median_ms": statistics.median(times),
            "min_ms": min(times),
            "bit_exact": bool(np.array_equal(out, reference)),
        })
    base = report["results"][0]["median_ms"]
    for row in report["results"]:
        row["speedup"] = base / row["median_ms"]
    return report


def cmd_bench(args) -> int:
    if any(t < 1 for t in args.threads) or args.repeats < 1:
        raise UsageError("--threads and --repeats must be positive")
    intr, image, depth, src, dst = _bench_frame(args)
    report = bench(intr, image, depth, src, dst, args.threads, args.repeats)
    text = json.dumps(report, indent=2)
    print(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
        write_run_config(args.out.parent, args)
    if args.budget_ms is not None and report["results"][-1]["median_ms"] > args.budget_ms:
        print(f"median {report['results'][-1]['median_ms']:.1f} ms exceeds budget {args.budget_ms} ms", file=sys.stderr)
        return EXIT_OVERRUN
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"delaycomp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"delaycomp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DelayCompError as exc:
        print(f"delaycomp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
