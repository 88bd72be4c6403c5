"""Depth providers: dataset bundles, analytic planes and synthetic ray casting.

The synthetic scenes are built from textured axis-aligned rectangles and act
as the exact-ground-truth oracle for everything downstream. World frame is
z up; the robot drives along +x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, RigidPose, rotation_about_axis
from .kinematics import (
    CommandBuffer,
    KinematicParams,
    PlanarPose,
    VelocityCommand,
    forward_camera_mount,
    planar_to_camera,
    predict,
)

TEXTURES = ("noise", "stripes", "rows", "checker")


# ---------------------------------------------------------------------------
# Procedural textures


def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1) (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        h = (
            i.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ j.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ np.uint64((seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(a: np.ndarray, b: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1] with features about ``scale`` meters wide."""
    x = a / scale
    y = b / scale
    i0 = np.floor(x)
    j0 = np.floor(y)
    fx = x - i0
    fy = y - j0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    n00 = _hash01(i0, j0, seed)
    n10 = _hash01(i0 + 1, j0, seed)
    n01 = _hash01(i0, j0 + 1, seed)
    n11 = _hash01(i0 + 1, j0 + 1, seed)
    return (n00 * (1 - sx) + n10 * sx) * (1 - sy) + (n01 * (1 - sx) + n11 * sx) * sy


def texture_value(kind: str, a: np.ndarray, b: np.ndarray, seed: int) -> np.ndarray:
    """Scalar pattern in [0, 1] at in-plane coordinates (a, b) in meters."""
    if kind == "noise":
        return 0.7 * value_noise(a, b, 0.5, seed) + 0.3 * value_noise(a, b, 0.2, seed + 1)
    if kind == "stripes":
        s = 0.5 + 0.5 * np.sin(2 * np.pi * a / 0.6)
        return 0.6 * s + 0.4 * value_noise(a, b, 0.4, seed)
    if kind == "rows":
        # leafy columns: vertical bands modulated by noise
        s = 0.5 + 0.5 * np.cos(2 * np.pi * a / 0.8)
        return 0.5 * s * value_noise(a, b, 0.3, seed) + 0.5 * value_noise(a, b, 0.6, seed + 7)
    if kind == "checker":
        s = np.sin(2 * np.pi * a / 1.0) * np.sin(2 * np.pi * b / 1.0)
        return 0.5 + 0.5 * np.tanh(3 * s)
    raise ValueError(f"unknown texture {kind!r}; expected one of {TEXTURES}")


@dataclass(frozen=True)
class Quad:
    """Axis-aligned textured rectangle.

    ``extent`` has exactly one zero component: the axis the quad is normal to.
    The texture is parameterized by the two remaining world coordinates.
    """

    corner: tuple[float, float, float]
    extent: tuple[float, float, float]
    texture: str = "noise"
    seed: int = 0
    color0: tuple[float, float, float] = (0.2, 0.3, 0.1)
    color1: tuple[float, float, float] = (0.6, 0.7, 0.3)

    def __post_init__(self):
        ext = np.asarray(self.extent, dtype=float)
        zeros = np.flatnonzero(ext == 0)
        if len(zeros) != 1 or np.any(ext[ext != 0] <= 0):
            raise ValueError(f"quad extent must have one zero and two positive components, got {self.extent}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")

    @property
    def normal_axis(self) -> int:
        return int(np.flatnonzero(np.asarray(self.extent) == 0)[0])

    @property
    def plane_axes(self) -> tuple[int, int]:
        a, b = (k for k in range(3) if k != self.normal_axis)
        return a, b

    def shade(self, points: np.ndarray) -> np.ndarray:
        a, b = self.plane_axes
        t = texture_value(self.texture, points[:, a], points[:, b], self.seed)[:, None]
        c0 = np.asarray(self.color0)
        c1 = np.asarray(self.color1)
        return np.clip(c0 + (c1 - c0) * t, 0.0, 1.0)


@dataclass(frozen=True)
class SyntheticScene:
    quads: tuple[Quad, ...] = ()
    background_color: tuple[float, float, float] = (0.55, 0.7, 0.9)
    name: str = "custom"


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with unit z component."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    x, y = intr.pixel_to_normalized(u, v)
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def raycast(scene: SyntheticScene, intr: CameraIntrinsics, pose: RigidPose) -> tuple[np.ndarray, DepthMap]:
    """Render the scene from ``pose``: nearest quad hit per pixel.

    Depth is the z-depth of the hit in the camera frame. Pixels hitting
    nothing get the background color and an invalid depth.
    """
    rays = pixel_rays(intr).reshape(-1, 3)
    dirs = rays @ pose.rotation.T
    origin = pose.translation
    n = len(dirs)
    best = np.full(n, np.inf)
    owner = np.full(n, -1)
    for qi, quad in enumerate(scene.quads):
        ax = quad.normal_axis
        a, b = quad.plane_axes
        denom = dirs[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (quad.corner[ax] - origin[ax]) / denom
        ok = np.isfinite(t) & (t > 1e-12) & (t < best)
        pa = origin[a] + t * dirs[:, a]
        pb = origin[b] + t * dirs[:, b]
        ok &= (pa >= quad.corner[a]) & (pa <= quad.corner[a] + quad.extent[a])
        ok &= (pb >= quad.corner[b]) & (pb <= quad.corner[b] + quad.extent[b])
        best[ok] = t[ok]
        owner[ok] = qi
    colors = np.empty((n, 3))
    colors[:] = scene.background_color
    for qi, quad in enumerate(scene.quads):
        sel = owner == qi
        if np.any(sel):
            pts = origin + best[sel, None] * dirs[sel]
            colors[sel] = quad.shade(pts)
    image = colors.reshape(intr.height, intr.width, 3)
    depth = DepthMap(best.reshape(intr.shape), (owner >= 0).reshape(intr.shape))
    return image, depth


def plane_depth(intr: CameraIntrinsics, pose: RigidPose, normal, offset: float) -> DepthMap:
    """Analytic depth of the plane ``normal · (X - C) = -offset``.

    ``normal`` is a world-frame unit vector pointing toward the camera side of
    the plane, ``C`` the camera center and ``offset`` > 0 its distance to the
    plane. Rays parallel to the plane or hitting it behind the camera are
    invalid.
    """
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError(f"plane normal must be unit length, got |n|={np.linalg.norm(n)}")
    if not offset > 0:
        raise ValueError(f"plane offset must be positive, got {offset}")
    dirs = pixel_rays(intr) @ pose.rotation.T
    nd = dirs @ n
    valid = nd < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(valid, -offset / nd, np.inf)
    return DepthMap(t, valid & np.isfinite(t))


def random_holes(depth: DepthMap, fraction: float, seed: int) -> DepthMap:
    """Invalidate a seeded random subset of pixels (sensor-dropout emulation)."""
    rng = np.random.default_rng(seed)
    drop = rng.random(depth.shape) < fraction
    return DepthMap(depth.values, depth.valid & ~drop)


# ---------------------------------------------------------------------------
# Presets and scripted trajectories

DEFAULT_INTRINSICS = CameraIntrinsics(400.0, 400.0, 319.5, 179.5, 640, 360)
CAMERA_HEIGHT = 0.5


def corridor_scene(seed: int = 0, length: float = 16.0, half_width: float = 1.0, height: float = 1.5) -> SyntheticScene:
    """Crop-row analog: textured side walls, ground, canopy and a far wall."""
    x0 = -2.0
    leaf0, leaf1 = (0.10, 0.30, 0.05), (0.45, 0.75, 0.25)
    soil0, soil1 = (0.30, 0.20, 0.10), (0.60, 0.45, 0.30)
    quads = (
        Quad((x0, -half_width, 0.0), (length, 2 * half_width, 0.0), "noise", seed + 1, soil0, soil1),
        Quad((x0, half_width, 0.0), (length, 0.0, height), "rows", seed + 2, leaf0, leaf1),
        Quad((x0, -half_width, 0.0), (length, 0.0, height), "rows", seed + 3, leaf0, leaf1),
        Quad((x0, -half_width, height), (length, 2 * half_width, 0.0), "noise", seed + 4, (0.15, 0.35, 0.10), (0.35, 0.55, 0.20)),
        Quad((x0 + length, -half_width, 0.0), (0.0, 2 * half_width, height), "stripes", seed + 5, leaf0, leaf1),
    )
    return SyntheticScene(quads, name="corridor")


def frontal_scene(seed: int = 0, distance: float = 4.0) -> SyntheticScene:
    """Single large textured wall facing the robot: the homography-friendly case."""
    quad = Quad((distance, -8.0, -4.0), (0.0, 16.0, 9.0), "noise", seed + 1, (0.2, 0.25, 0.1), (0.8, 0.7, 0.4))
    return SyntheticScene((quad,), name="frontal")


SCENES = {"corridor": corridor_scene, "frontal": frontal_scene}


def make_scene(name: str, seed: int = 0) -> SyntheticScene:
    try:
        return SCENES[name](seed)
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; expected one of {sorted(SCENES)}") from None


def scripted_commands(
    n_frames: int,
    frame_rate: float,
    seed: int,
    speed: float = 0.6,
    max_turn: float = 0.3,
    segment: float = 0.5,
) -> list[VelocityCommand]:
    """Seeded weaving drive: constant speed, alternating-sign turn segments."""
    rng = np.random.default_rng(seed)
    duration = n_frames / frame_rate
    cmds = []
    t = 0.0
    k = 0
    while t < duration:
        omega = max_turn * (-1) ** k * rng.uniform(0.3, 1.0)
        v = speed * rng.uniform(0.8, 1.0)
        cmds.append(VelocityCommand(float(v), float(omega), round(t, 9)))
        t += segment * rng.uniform(0.6, 1.4)
        k += 1
    return cmds


@dataclass(frozen=True)
class SyntheticSequence:
    """Scene + camera path; frames are ray cast on demand."""

    scene: SyntheticScene
    intrinsics: CameraIntrinsics
    poses: tuple[RigidPose, ...]
    timestamps: tuple[float, ...]
    commands: tuple[VelocityCommand, ...] = ()
    params: KinematicParams = field(default_factory=KinematicParams)
    frame_rate: float = 30.0

    def __len__(self):
        return len(self.poses)

    def frame(self, index: int) -> tuple[np.ndarray, DepthMap]:
        return raycast(self.scene, self.intrinsics, self.poses[index])


def synthetic_sequence(
    scene: Union[str, SyntheticScene] = "corridor",
    n_frames: int = 30,
    seed: int = 0,
    frame_rate: float = 30.0,
    intr: CameraIntrinsics = DEFAULT_INTRINSICS,
    speed: float = 0.6,
    max_turn: float = 0.3,
    start: PlanarPose = PlanarPose(),
) -> SyntheticSequence:
    """Drive a robot through ``scene`` with seeded commands."""
    if isinstance(scene, str):
        scene = make_scene(scene, seed)
    params = KinematicParams(camera_mount=forward_camera_mount(CAMERA_HEIGHT))
    cmds = CommandBuffer(scripted_commands(n_frames, frame_rate, seed, speed, max_turn))
    times = tuple(i / frame_rate for i in range(n_frames))
    poses = []
    for t in times:
        planar = predict(start, 0.0, cmds, t, params).pose
        poses.append(planar_to_camera(planar, params))
    return SyntheticSequence(scene, intr, tuple(poses), times, tuple(cmds), params, frame_rate)


def offset_pose(pose: RigidPose, forward: float = 0.0, lateral: float = 0.0, yaw: float = 0.0) -> RigidPose:
    """Move a camera in its own frame: +forward along z, +lateral to the right, +yaw to the left."""
    R = pose.rotation @ rotation_about_axis([0.0, -1.0, 0.0], yaw)
    t = pose.translation + pose.rotation @ np.array([lateral, 0.0, forward])
    return RigidPose(R, t)


# ---------------------------------------------------------------------------
# Depth source variants


@dataclass(frozen=True)
class FileDepth:
    bundle: "object"  # bundle.SequenceBundle


@dataclass(frozen=True)
class SyntheticDepth:
    sequence: SyntheticSequence


@dataclass(frozen=True)
class PlaneDepth:
    """Replace another source's depth with an analytic plane.

    The plane is given relative to each frame's camera center (see
    :func:`plane_depth`); ``base`` supplies images, poses and timestamps.
    """

    normal: tuple[float, float, float]
    offset: float
    base: Union[FileDepth, SyntheticDepth, None] = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        if not self.offset > 0:
            raise ValueError("plane offset must be positive")


DepthSource = Union[FileDepth, PlaneDepth, SyntheticDepth]


def source_intrinsics(source: DepthSource) -> CameraIntrinsics:
    if isinstance(source, SyntheticDepth):
        return source.sequence.intrinsics
    if isinstance(source, FileDepth):
        return source.bundle.intrinsics
    if isinstance(source, PlaneDepth) and source.base is not None:
        return source_intrinsics(source.base)
    raise ValueError("plane source without a base sequence has no intrinsics")


def source_length(source: DepthSource) -> int:
    if isinstance(source, SyntheticDepth):
        return len(source.sequence)
    if isinstance(source, FileDepth):
        return len(source.bundle)
    if isinstance(source, PlaneDepth) and source.base is not None:
        return source_length(source.base)
    return 0


def load_frame(source: DepthSource, index: int) -> tuple[np.ndarray, DepthMap, RigidPose, float]:
    """Decode frame ``index`` as (image, depth, camera pose, timestamp)."""
    n = source_length(source)
    if not 0 <= index < n:
        raise IndexError(f"frame index {index} out of range [0, {n})")
    if isinstance(source, SyntheticDepth):
        seq = source.sequence
        image, depth = seq.frame(index)
        return image, depth, seq.poses[index], seq.timestamps[index]
    if isinstance(source, FileDepth):
        return source.bundle.read_frame(index)
    if isinstance(source, PlaneDepth):
        image, _, pose, t = load_frame(source.base, index)
        depth = plane_depth(source_intrinsics(source.base), pose, source.normal, source.offset)
        return image, depth, pose, t
    raise TypeError(f"unsupported depth source {type(source).__name__}")
