"""Live compensation loop, link emulation and offline evaluation.

The live loop ticks at a fixed display cadence. On every tick it takes the
freshest frame that has *arrived* by then, predicts where the robot is now
from the buffered commands, re-renders the frame from that pose, fills the
holes and emits the result. Time is virtual by default so runs are exactly
reproducible; ``clock="wall"`` replays arrivals in real time on an ingestion
thread for throughput measurements.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, TypeVar, Union

import numpy as np

from .baselines import PLANES, CropScaleParams, crop_and_scale, homography_compensate, planar_displacement
from .depth import DepthSource, FileDepth, PlaneDepth, SyntheticDepth, load_frame, source_intrinsics, source_length
from .errors import DelayCompError
from .geometry import CameraIntrinsics, DepthMap, RigidPose, compose, invert
from .inpaint import InpaintConfig, fill
from .kinematics import (
    CommandBuffer,
    KinematicParams,
    PlanarPose,
    VelocityCommand,
    camera_to_planar,
    planar_to_base,
    predict,
)
from .metrics import evaluate_frame, psnr
from .splat import RenderOutput, SplatConfig, render_compensated

logger = logging.getLogger(__name__)

METHODS = ("pointcloud", "homography", "cropscale")
PLACEHOLDER_GRAY = 0.25
TIME_TOL = 1e-6


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class NetworkConditions:
    base_delay: float = 0.0
    jitter_stddev: float = 0.0
    skip: int = 1
    drop_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.base_delay >= 0:
            raise ValueError(f"base_delay must be >= 0, got {self.base_delay}")
        if not self.jitter_stddev >= 0:
            raise ValueError(f"jitter_stddev must be >= 0, got {self.jitter_stddev}")
        if self.skip < 0:
            raise ValueError(f"skip must be >= 0, got {self.skip}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop_probability must lie in [0, 1], got {self.drop_probability}")

    @property
    def keep_every(self) -> int:
        """One frame in ``keep_every`` is sent (skip 0 and 1 both mean all)."""
        return max(self.skip, 1)


@dataclass(frozen=True)
class PipelineConfig:
    display_period: float = 1.0 / 30.0
    horizon: Union[str, int] = "now"  # "now" or a fixed number of display periods
    method: str = "pointcloud"
    splat: SplatConfig = field(default_factory=SplatConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    homography_plane: str = "frontal"
    cropscale: Optional[CropScaleParams] = None  # None: calibrate from the first frame
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.display_period > 0:
            raise ValueError(f"display_period must be positive, got {self.display_period}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.homography_plane not in PLANES:
            raise ValueError(f"unknown plane {self.homography_plane!r}; expected one of {PLANES}")
        if self.horizon != "now" and not (isinstance(self.horizon, int) and self.horizon >= 0):
            raise ValueError(f"horizon must be 'now' or a non-negative integer, got {self.horizon!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Frames and the link


@dataclass(frozen=True)
class FrameRef:
    """A sensor frame known by index; pixels are decoded only when used."""

    index: int
    capture_time: float
    arrival_time: float

    def __post_init__(self):
        if self.arrival_time < self.capture_time:
            raise ValueError("arrival_time precedes capture_time")


@dataclass(eq=False)
class StampedFrame:
    image: np.ndarray
    depth: DepthMap
    pose: RigidPose
    capture_time: float
    arrival_time: float

    def __post_init__(self):
        if self.arrival_time < self.capture_time:
            raise ValueError("arrival_time precedes capture_time")


F = TypeVar("F", FrameRef, StampedFrame)


def emulate_link(frames: Iterable[F], cond: NetworkConditions) -> list[F]:
    """Decimate, delay, jitter and drop a frame stream, preserving order.

    Frames are returned sorted by arrival time with ``arrival_time`` filled
    in. A frame that would arrive after a newer one has already been
    delivered is discarded.
    """
    rng = np.random.default_rng(cond.seed)
    sent = []
    last_capture = -math.inf
    for i, fr in enumerate(frames):
        if not fr.capture_time > last_capture:
            raise ValueError("capture timestamps must be strictly increasing")
        last_capture = fr.capture_time
        if i % cond.keep_every:
            continue
        jitter = rng.normal(0.0, cond.jitter_stddev) if cond.jitter_stddev > 0 else 0.0
        dropped = rng.random() < cond.drop_probability
        if dropped:
            continue
        arrival = max(fr.capture_time, fr.capture_time + cond.base_delay + jitter)
        sent.append(dataclasses.replace(fr, arrival_time=arrival))
    sent.sort(key=lambda f: (f.arrival_time, f.capture_time))
    delivered = []
    newest = -math.inf
    for fr in sent:
        if fr.capture_time < newest:
            continue
        newest = fr.capture_time
        delivered.append(fr)
    return delivered


def source_frames(source: DepthSource) -> list[FrameRef]:
    """Index/timestamp records for every frame of ``source``."""
    times = source_timestamps(source)
    return [FrameRef(i, t, t) for i, t in enumerate(times)]


def source_timestamps(source: DepthSource) -> list[float]:
    if isinstance(source, SyntheticDepth):
        return list(source.sequence.timestamps)
    if isinstance(source, FileDepth):
        return list(source.bundle.timestamps)
    if isinstance(source, PlaneDepth) and source.base is not None:
        return source_timestamps(source.base)
    raise ValueError("source has no timestamps")


def source_commands(source: DepthSource) -> list[VelocityCommand]:
    if isinstance(source, SyntheticDepth):
        return list(source.sequence.commands)
    if isinstance(source, FileDepth):
        return list(source.bundle.commands)
    if isinstance(source, PlaneDepth) and source.base is not None:
        return source_commands(source.base)
    return []


def source_params(source: DepthSource) -> KinematicParams:
    if isinstance(source, SyntheticDepth):
        return source.sequence.params
    if isinstance(source, FileDepth):
        return source.bundle.params
    if isinstance(source, PlaneDepth) and source.base is not None:
        return source_params(source.base)
    return KinematicParams()


def source_poses(source: DepthSource) -> list[RigidPose]:
    if isinstance(source, SyntheticDepth):
        return list(source.sequence.poses)
    if isinstance(source, FileDepth):
        return source.bundle.poses
    if isinstance(source, PlaneDepth) and source.base is not None:
        return source_poses(source.base)
    raise ValueError("source has no poses")


def delivered_rate(deliveries: Sequence[FrameRef]) -> float:
    """Mean delivered frames per second, from consecutive capture spacing."""
    if len(deliveries) < 2:
        return 0.0
    span = deliveries[-1].capture_time - deliveries[0].capture_time
    return (len(deliveries) - 1) / span


# ---------------------------------------------------------------------------
# Pose prediction and method dispatch


def predict_camera_pose(
    camera_pose: RigidPose,
    capture_time: float,
    target_time: float,
    commands: CommandBuffer,
    params: KinematicParams,
) -> tuple[RigidPose, PlanarPose, bool]:
    """Move ``camera_pose`` along the commanded planar path to ``target_time``.

    Height, pitch and roll of the source pose are kept; only the planar
    motion predicted by the kinematic model is applied on top.
    """
    start = camera_to_planar(camera_pose, params)
    pred = predict(start, capture_time, commands, target_time, params)
    if pred.pose == start:
        return camera_pose, pred.pose, pred.no_commands
    delta = compose(invert(planar_to_base(start)), planar_to_base(pred.pose))
    base = compose(camera_pose, invert(params.camera_mount))
    return compose(compose(base, delta), params.camera_mount), pred.pose, pred.no_commands


def calibrate_cropscale(intr: CameraIntrinsics, depth: DepthMap) -> CropScaleParams:
    """Zoom for the median scene depth, one focal length of shift per radian."""
    d = depth.values[depth.valid]
    return CropScaleParams.for_camera(intr, float(np.median(d)) if d.size else 1.0)


@dataclass(eq=False)
class Compensated:
    image: np.ndarray
    hole_fraction: float
    render_ms: float
    inpaint_ms: float
    blended_depth: Optional[np.ndarray] = None


def compensate(
    image: np.ndarray,
    depth: DepthMap,
    intr: CameraIntrinsics,
    src_pose: RigidPose,
    dst_pose: RigidPose,
    cfg: PipelineConfig,
    method: Optional[str] = None,
    cropscale: Optional[CropScaleParams] = None,
) -> Compensated:
    """Generate the ``dst_pose`` view from one source frame with any method."""
    method = method or cfg.method
    t0 = time.perf_counter()
    if method == "pointcloud":
        render = render_compensated((image, depth), intr, src_pose, dst_pose, cfg.splat, cfg.threads)
    elif method == "homography":
        warped, valid = homography_compensate(image, depth, intr, src_pose, dst_pose, cfg.homography_plane)
        render = RenderOutput(warped, ~valid, None)
    elif method == "cropscale":
        params = cropscale or cfg.cropscale or calibrate_cropscale(intr, depth)
        out = crop_and_scale(image, planar_displacement(src_pose, dst_pose), params, intr)
        render = RenderOutput(out, np.zeros(out.shape[:2], dtype=bool), None)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    t1 = time.perf_counter()
    filled = fill(render, cfg.inpaint)
    t2 = time.perf_counter()
    return Compensated(filled, render.hole_fraction, 1e3 * (t1 - t0), 1e3 * (t2 - t1), render.blended_depth)


# ---------------------------------------------------------------------------
# Live loop


@dataclass
class FrameLogEntry:
    tick: int
    display_time: float
    placeholder: bool
    source_index: Optional[int] = None
    source_capture_time: Optional[float] = None
    source_arrival_time: Optional[float] = None
    effective_latency: Optional[float] = None  # arrival - capture
    frame_age: Optional[float] = None  # display - capture
    pred_x: Optional[float] = None
    pred_y: Optional[float] = None
    pred_theta: Optional[float] = None
    no_commands: Optional[bool] = None
    hole_fraction: Optional[float] = None
    psnr: Optional[float] = None
    psnr_raw: Optional[float] = None
    # wall-clock measurements; excluded from equality so logs compare across runs
    depth_ms: float = field(default=0.0, compare=False)
    render_ms: float = field(default=0.0, compare=False)
    inpaint_ms: float = field(default=0.0, compare=False)
    total_ms: float = field(default=0.0, compare=False)
    overrun: bool = field(default=False, compare=False)

    def causal(self) -> bool:
        return self.placeholder or self.source_arrival_time <= self.display_time + 1e-12


TIMING_FIELDS = ("depth_ms", "render_ms", "inpaint_ms", "total_ms", "overrun")
LOG_FIELDS = tuple(f.name for f in dataclasses.fields(FrameLogEntry) if f.name not in TIMING_FIELDS)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class FrameLog:
    entries: list[FrameLogEntry] = field(default_factory=list)
    deliveries: list[FrameRef] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def causality_violations(self) -> int:
        return sum(not e.causal() for e in self.entries)

    def delivered_fps(self) -> float:
        return delivered_rate(self.deliveries)

    def write_csv(self, path) -> None:
        """Deterministic fields only; see :meth:`write_timings`."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_FIELDS)
            for e in self.entries:
                w.writerow([_fmt(getattr(e, k)) for k in LOG_FIELDS])

    def write_timings(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("tick",) + TIMING_FIELDS)
            for e in self.entries:
                w.writerow([e.tick] + [_fmt(getattr(e, k)) for k in TIMING_FIELDS])


FrameSink = Callable[[int, np.ndarray], None]
DepthHook = Callable[[np.ndarray, DepthMap], DepthMap]


@dataclass
class LiveResult:
    log: FrameLog
    frames: list[np.ndarray]


class Snapshot:
    """Single-writer, multi-reader holder; readers always see a whole bundle."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = None

    def publish(self, value) -> None:
        with self._lock:
            self._value = value

    def read(self):
        with self._lock:
            return self._value


def placeholder_frame(intr: CameraIntrinsics) -> np.ndarray:
    return np.full(intr.shape + (3,), PLACEHOLDER_GRAY)


def _truth_index(times: Sequence[float], t: float) -> Optional[int]:
    i = int(np.searchsorted(times, t - TIME_TOL))
    if i < len(times) and abs(times[i] - t) <= TIME_TOL:
        return i
    return None


class _FrameCache:
    """Decoded frames keyed by index, evicting the oldest beyond ``size``."""

    def __init__(self, source: DepthSource, size: int = 16, depth_hook: Optional[DepthHook] = None):
        self.source = source
        self.size = size
        self.depth_hook = depth_hook
        self._items: dict[int, tuple] = {}
        self._lock = threading.Lock()

    def get(self, index: int) -> tuple[np.ndarray, DepthMap, RigidPose, float]:
        with self._lock:
            hit = self._items.get(index)
        if hit is not None:
            return hit
        image, depth, pose, t = load_frame(self.source, index)
        if self.depth_hook is not None:
            depth = self.depth_hook(image, depth)
        item = (image, depth, pose, t)
        with self._lock:
            self._items[index] = item
            while len(self._items) > self.size:
                del self._items[min(self._items)]
        return item


def run_live(
    source: DepthSource,
    cond: NetworkConditions,
    cfg: PipelineConfig = PipelineConfig(),
    commands: Optional[Sequence[VelocityCommand]] = None,
    *,
    n_ticks: Optional[int] = None,
    clock: str = "virtual",
    sink: Optional[FrameSink] = None,
    keep_frames: bool = False,
    evaluate: bool = True,
    depth_hook: Optional[DepthHook] = None,
) -> LiveResult:
    """Emit one compensated frame per display tick.

    Args:
        source: Frames, depths and camera poses.
        cond: Link profile applied to the source stream.
        cfg: Display cadence, method and renderer settings.
        commands: Operator commands; defaults to those stored with the source.
            A command is usable from its own timestamp on (commands travel
            from the operator, so they are never delayed).
        n_ticks: Number of ticks; by default the ticks span the sequence.
        clock: ``"virtual"`` (deterministic) or ``"wall"`` (real-time replay).
        sink: Called with (tick, image) for every emitted frame.
        keep_frames: Also return all emitted frames in memory.
        evaluate: Log PSNR against the ground-truth frame captured at the
            display time (and of the raw stale frame) when the source has one.
        depth_hook: Optional depth stage run on every decoded frame.
    """
    if clock not in ("virtual", "wall"):
        raise ValueError(f"clock must be 'virtual' or 'wall', got {clock!r}")
    intr = source_intrinsics(source)
    times = source_timestamps(source)
    if not times:
        raise DelayCompError("source has no frames")
    params = source_params(source)
    cmds = CommandBuffer(source_commands(source) if commands is None else commands)
    deliveries = emulate_link(source_frames(source), cond)
    t0 = times[0]
    if n_ticks is None:
        n_ticks = int(math.floor((times[-1] - t0) / cfg.display_period + TIME_TOL)) + 1
    cache = _FrameCache(source, depth_hook=depth_hook)
    truth_cache = _FrameCache(source, size=2)
    frames: list[np.ndarray] = []
    log = FrameLog(deliveries=deliveries)
    cropscale = cfg.cropscale

    def emit(tick: int, image: np.ndarray, entry: FrameLogEntry) -> None:
        log.entries.append(entry)
        if sink is not None:
            sink(tick, image)
        if keep_frames:
            frames.append(image)

    def process(tick: int, display_time: float, latest: Optional[FrameRef]) -> tuple[np.ndarray, FrameLogEntry]:
        nonlocal cropscale
        start = time.perf_counter()
        if latest is None:
            entry = FrameLogEntry(tick, display_time, True)
            return placeholder_frame(intr), entry
        image, depth, pose, _ = cache.get(latest.index)
        t_load = time.perf_counter()
        target = display_time if cfg.horizon == "now" else latest.capture_time + cfg.horizon * cfg.display_period
        dst, planar, no_cmds = predict_camera_pose(pose, latest.capture_time, target, cmds.until(display_time), params)
        if cfg.method == "cropscale" and cropscale is None:
            cropscale = calibrate_cropscale(intr, depth)
        out = compensate(image, depth, intr, pose, dst, cfg, cropscale=cropscale)
        entry = FrameLogEntry(
            tick,
            display_time,
            False,
            source_index=latest.index,
            source_capture_time=latest.capture_time,
            source_arrival_time=latest.arrival_time,
            effective_latency=latest.arrival_time - latest.capture_time,
            frame_age=display_time - latest.capture_time,
            pred_x=planar.x,
            pred_y=planar.y,
            pred_theta=planar.theta,
            no_commands=no_cmds,
            hole_fraction=out.hole_fraction,
            depth_ms=1e3 * (t_load - start),
            render_ms=out.render_ms,
            inpaint_ms=out.inpaint_ms,
        )
        if evaluate:
            k = _truth_index(times, display_time)
            if k is not None:
                truth = truth_cache.get(k)[0]
                entry.psnr = psnr(out.image, truth)
                entry.psnr_raw = psnr(image, truth)
        entry.total_ms = 1e3 * (time.perf_counter() - start)
        entry.overrun = entry.total_ms > 1e3 * cfg.display_period
        return out.image, entry

    if clock == "virtual":
        j = -1
        for tick in range(n_ticks):
            display_time = t0 + tick * cfg.display_period
            while j + 1 < len(deliveries) and deliveries[j + 1].arrival_time <= display_time:
                j += 1
            image, entry = process(tick, display_time, deliveries[j] if j >= 0 else None)
            emit(tick, image, entry)
    else:
        _run_wall(deliveries, t0, n_ticks, cfg, cache, process, emit)
    return LiveResult(log, frames)


def _run_wall(deliveries, t0, n_ticks, cfg, cache, process, emit) -> None:
    """Real-time replay: ingestion thread, compensator (caller), logger thread."""
    latest = Snapshot()
    stop = threading.Event()
    wall0 = time.perf_counter()

    def now() -> float:
        return t0 + time.perf_counter() - wall0

    def ingest():
        for fr in deliveries:
            while not stop.is_set() and now() < fr.arrival_time:
                time.sleep(min(0.002, max(fr.arrival_time - now(), 0.0)))
            if stop.is_set():
                return
            cache.get(fr.index)  # decode before publishing
            latest.publish(fr)

    out_q: queue.Queue = queue.Queue()

    def log_worker():
        while True:
            item = out_q.get()
            if item is None:
                return
            emit(*item)

    ingestion = threading.Thread(target=ingest, name="ingestion", daemon=True)
    logger_thread = threading.Thread(target=log_worker, name="frame-logger", daemon=True)
    ingestion.start()
    logger_thread.start()
    try:
        for tick in range(n_ticks):
            display_time = t0 + tick * cfg.display_period
            wait = display_time - now()
            if wait > 0:
                time.sleep(wait)
            fr = latest.read()
            if fr is not None and fr.arrival_time > display_time:
                fr = None  # published early by a late tick; never look ahead
            image, entry = process(tick, display_time, fr)
            if now() - display_time > cfg.display_period:
                entry.overrun = True
            out_q.put((tick, image, entry))
    finally:
        stop.set()
        out_q.put(None)
        logger_thread.join()
        ingestion.join(timeout=1.0)


# ---------------------------------------------------------------------------
# Offline evaluation


EVAL_COLUMNS = (
    "sequence_id",
    "frame_index",
    "delay_steps",
    "method",
    "psnr",
    "ms_ssim",
    "abs_rel",
    "delta1",
    "si_loss",
    "hole_fraction",
    "render_ms",
)


def run_offline_eval(
    source: DepthSource,
    delays: Sequence[int],
    methods: Sequence[str] = METHODS,
    cfg: PipelineConfig = PipelineConfig(),
    *,
    out_csv=None,
    sequence_id: str = "sequence",
    frame_stride: int = 1,
    predicted_pose: bool = False,
    with_ms_ssim: bool = True,
) -> list[dict]:
    """Compensate frame t to t+k for every frame, delay and method.

    The target pose is the recorded pose of frame t+k (or the kinematic
    prediction when ``predicted_pose``). Image metrics are computed over the
    full inpainted frame; depth metrics compare the splatted depth of the
    point-cloud method with the recorded depth of frame t+k.
    """
    delays = [int(k) for k in delays]
    if not delays or min(delays) < 0:
        raise ValueError("delays must be a non-empty list of non-negative integers")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    n = source_length(source)
    if n < max(delays) + 1:
        raise DelayCompError(f"sequence has {n} frames but delay {max(delays)} needs at least {max(delays) + 1}")
    intr = source_intrinsics(source)
    params = source_params(source)
    cmds = CommandBuffer(source_commands(source))
    cache = _FrameCache(source, size=max(delays) + 2)
    cropscale = cfg.cropscale
    rows = []
    for t in range(0, n, frame_stride):
        for k in delays:
            if t + k >= n:
                continue
            image, depth, pose, ts = cache.get(t)
            truth_img, truth_depth, truth_pose, truth_t = cache.get(t + k)
            if cropscale is None:
                cropscale = calibrate_cropscale(intr, depth)
            if predicted_pose:
                dst = predict_camera_pose(pose, ts, truth_t, cmds.until(truth_t), params)[0]
            else:
                dst = truth_pose
            for m in methods:
                out = compensate(image, depth, intr, pose, dst, cfg, method=m, cropscale=cropscale)
                pred_depth = None
                if out.blended_depth is not None:
                    pred_depth = DepthMap.from_array(out.blended_depth)
                rep = evaluate_frame(out.image, truth_img, None, pred_depth, truth_depth if pred_depth is not None else None,
                                     with_ms_ssim=with_ms_ssim)
                rows.append({
                    "sequence_id": sequence_id,
                    "frame_index": t,
                    "delay_steps": k,
                    "method": m,
                    "psnr": rep.psnr,
                    "ms_ssim": rep.ms_ssim,
                    "abs_rel": rep.abs_rel,
                    "delta1": rep.delta1,
                    "si_loss": rep.si_loss,
                    "hole_fraction": out.hole_fraction,
                    "render_ms": out.render_ms,
                })
    if out_csv is not None:
        write_rows(out_csv, rows)
    return rows


def write_rows(path, rows: Sequence[dict], columns: Sequence[str] = EVAL_COLUMNS) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})


def summarize(rows: Iterable[dict], key: str = "psnr") -> dict[tuple[str, int], float]:
    """Mean of ``key`` per (method, delay), ignoring missing values."""
    acc: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        v = r[key]
        if isinstance(v, float) and math.isnan(v):
            continue
        acc.setdefault((r["method"], r["delay_steps"]), []).append(float(v))
    return {k: float(np.mean(v)) for k, v in acc.items()}
