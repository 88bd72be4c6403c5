"""On-disk sequence bundles.

Layout of a bundle directory::

    manifest.json        intrinsics, frame rate, pose convention, depth range
    rgb/000000.png       8-bit RGB
    depth/000000.pfm     float32 z-depth, invalid = +inf
    poses.csv            timestamp_s + 12 row-major rotation/translation values
    commands.csv         timestamp_s, v, omega

Every reader failure is reported as :class:`DataError` naming the offending
path.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import CameraIntrinsics, DepthMap, RigidPose, as_image, compose
from .kinematics import KinematicParams, VelocityCommand

MANIFEST = "manifest.json"
POSES = "poses.csv"
COMMANDS = "commands.csv"
POSE_FRAMES = ("camera", "base+mount")
FORMAT_VERSION = 1

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects a 2D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(path, f"cannot read: {exc.strerror}") from exc
    lines = []
    pos = 0
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise DataError(path, "truncated PFM header")
        lines.append(data[pos:end].decode("ascii", "replace").strip())
        pos = end + 1
    if lines[0] != "Pf":
        raise DataError(path, f"expected single-channel PFM ('Pf'), got {lines[0]!r}")
    try:
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise DataError(path, "malformed PFM header") from None
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[pos:]
    if len(body) != 4 * w * h:
        raise DataError(path, f"expected {4 * w * h} bytes of pixel data, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w)[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# Images


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: PathLike, image: np.ndarray) -> None:
    arr = image if image.dtype == np.uint8 else quantize(image)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return as_image(np.asarray(im.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise DataError(path, f"cannot decode image: {exc}") from exc


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)


# ---------------------------------------------------------------------------
# Manifest


def _pose_to_row(pose: RigidPose) -> list[float]:
    return [float(x) for x in pose.rotation.ravel()] + [float(x) for x in pose.translation]


def _pose_from_row(values: Sequence[float]) -> RigidPose:
    T = np.eye(4)
    T[:3, :3] = np.reshape(values[:9], (3, 3))
    T[:3, 3] = values[9:12]
    return RigidPose.from_matrix(T)


@dataclass
class SequenceManifest:
    name: str
    intrinsics: CameraIntrinsics
    frame_rate: float
    frame_count: int
    depth_range: tuple[float, float] = (0.05, 20.0)
    pose_frame: str = "camera"
    camera_mount: RigidPose = field(default_factory=RigidPose.identity)
    rgb_pattern: str = "rgb/{:06d}.png"
    depth_pattern: str = "depth/{:06d}.pfm"

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        lo, hi = self.depth_range
        if not lo < hi:
            raise ValueError(f"depth_range min must be below max, got {self.depth_range}")
        if self.pose_frame not in POSE_FRAMES:
            raise ValueError(f"pose_frame must be one of {POSE_FRAMES}, got {self.pose_frame!r}")
        if self.frame_count < 0:
            raise ValueError("frame_count must be non-negative")

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "intrinsics": self.intrinsics.to_dict(),
            "frame_rate": self.frame_rate,
            "frame_count": self.frame_count,
            "depth_range": list(self.depth_range),
            "pose_frame": self.pose_frame,
            "camera_mount": _pose_to_row(self.camera_mount),
            "rgb_pattern": self.rgb_pattern,
            "depth_pattern": self.depth_pattern,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceManifest":
        return cls(
            name=str(obj["name"]),
            intrinsics=CameraIntrinsics(**obj["intrinsics"]),
            frame_rate=float(obj["frame_rate"]),
            frame_count=int(obj["frame_count"]),
            depth_range=tuple(float(x) for x in obj["depth_range"]),
            pose_frame=str(obj.get("pose_frame", "camera")),
            camera_mount=_pose_from_row(obj["camera_mount"]) if "camera_mount" in obj else RigidPose.identity(),
            rgb_pattern=str(obj.get("rgb_pattern", "rgb/{:06d}.png")),
            depth_pattern=str(obj.get("depth_pattern", "depth/{:06d}.pfm")),
        )


def _pattern_regex(pattern: str) -> re.Pattern:
    head, _, tail = pattern.partition("{")
    tail = tail.partition("}")[2]
    return re.compile(re.escape(head.rsplit("/", 1)[-1]) + r"(\d+)" + re.escape(tail) + "$")


# ---------------------------------------------------------------------------
# Bundle


class SequenceBundle:
    """A validated bundle directory; frames are decoded on demand."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        mpath = self.root / MANIFEST
        try:
            obj = json.loads(mpath.read_text())
        except FileNotFoundError:
            raise DataError(mpath, "manifest not found") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(mpath, f"unreadable manifest: {exc}") from exc
        try:
            self.manifest = SequenceManifest.from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(mpath, f"invalid manifest: {exc}") from exc
        self.timestamps, self._raw_poses = _read_poses(self.root / POSES)
        self.commands = _read_commands(self.root / COMMANDS)
        self._validate()

    # -- properties -----------------------------------------------------------

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.manifest.intrinsics

    @property
    def frame_rate(self) -> float:
        return self.manifest.frame_rate

    @property
    def params(self) -> KinematicParams:
        return KinematicParams(camera_mount=self.manifest.camera_mount)

    @property
    def poses(self) -> list[RigidPose]:
        """Camera-to-world poses regardless of the stored convention."""
        if self.manifest.pose_frame == "camera":
            return list(self._raw_poses)
        return [compose(p, self.manifest.camera_mount) for p in self._raw_poses]

    def __len__(self):
        return self.manifest.frame_count

    def rgb_path(self, index: int) -> Path:
        return self.root / self.manifest.rgb_pattern.format(index)

    def depth_path(self, index: int) -> Path:
        return self.root / self.manifest.depth_pattern.format(index)

    # -- validation -----------------------------------------------------------

    def _validate(self) -> None:
        n = self.manifest.frame_count
        if len(self._raw_poses) != n:
            raise DataError(self.root / POSES, f"has {len(self._raw_poses)} poses but manifest declares {n} frames")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise DataError(self.root / POSES, "timestamps are not strictly increasing")
        for pattern, path_of in ((self.manifest.rgb_pattern, self.rgb_path),
                                 (self.manifest.depth_pattern, self.depth_path)):
            for i in range(n):
                if not path_of(i).is_file():
                    raise DataError(path_of(i), f"missing file for frame {i} of {n}")
            folder = path_of(0).parent if n else self.root / Path(pattern).parent
            rx = _pattern_regex(pattern)
            if folder.is_dir():
                for entry in sorted(folder.iterdir()):
                    m = rx.match(entry.name)
                    if m and int(m.group(1)) >= n:
                        raise DataError(entry, f"file beyond declared frame count {n}")

    # -- frames ---------------------------------------------------------------

    def read_image(self, index: int) -> np.ndarray:
        self._check_index(index)
        image = read_png(self.rgb_path(index))
        if image.shape[:2] != self.intrinsics.shape:
            raise DataError(self.rgb_path(index), f"image is {image.shape[:2]}, intrinsics say {self.intrinsics.shape}")
        return image

    def read_depth(self, index: int) -> DepthMap:
        self._check_index(index)
        values = read_pfm(self.depth_path(index))
        if values.shape != self.intrinsics.shape:
            raise DataError(self.depth_path(index), f"depth is {values.shape}, intrinsics say {self.intrinsics.shape}")
        lo, hi = self.manifest.depth_range
        return DepthMap.from_array(values, lo, hi)

    def read_frame(self, index: int) -> tuple[np.ndarray, DepthMap, RigidPose, float]:
        """(image, depth, camera pose, timestamp) of frame ``index``."""
        return self.read_image(index), self.read_depth(index), self.poses[index], self.timestamps[index]

    def _check_index(self, index: int) -> None:
        if not 0 <= index < len(self):
            raise IndexError(f"frame index {index} out of range [0, {len(self)})")


def _read_csv(path: Path, width: int, header: Sequence[str]) -> list[list[float]]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise DataError(path, "file not found") from None
    if not rows or [c.strip() for c in rows[0]] != list(header):
        raise DataError(path, f"expected header {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(path, f"line {lineno}: expected {width} columns, got {len(row)}")
        try:
            vals = [float(x) for x in row]
        except ValueError:
            raise DataError(path, f"line {lineno}: non-numeric value") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(path, f"line {lineno}: non-finite value")
        out.append(vals)
    return out


POSE_HEADER = ["timestamp_s"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]
COMMAND_HEADER = ["timestamp_s", "v", "omega"]


def _read_poses(path: Path) -> tuple[list[float], list[RigidPose]]:
    rows = _read_csv(path, 13, POSE_HEADER)
    try:
        poses = [_pose_from_row(r[1:]) for r in rows]
    except ValueError as exc:
        raise DataError(path, f"invalid pose: {exc}") from exc
    return [r[0] for r in rows], poses


def _read_commands(path: Path) -> list[VelocityCommand]:
    if not path.exists():
        return []
    rows = _read_csv(path, 3, COMMAND_HEADER)
    cmds = [VelocityCommand(r[1], r[2], r[0]) for r in rows]
    if any(b.timestamp <= a.timestamp for a, b in zip(cmds, cmds[1:])):
        raise DataError(path, "command timestamps are not strictly increasing")
    return cmds


def write_bundle(
    root: PathLike,
    manifest: SequenceManifest,
    frames: Iterable[tuple[np.ndarray, DepthMap]],
    poses: Sequence[RigidPose],
    timestamps: Sequence[float],
    commands: Sequence[VelocityCommand] = (),
) -> SequenceBundle:
    """Write a bundle; ``poses`` follow ``manifest.pose_frame``."""
    root = Path(root)
    if len(poses) != manifest.frame_count or len(timestamps) != manifest.frame_count:
        raise ValueError("poses and timestamps must match frame_count")
    for sub in {Path(manifest.rgb_pattern).parent, Path(manifest.depth_pattern).parent}:
        (root / sub).mkdir(parents=True, exist_ok=True)
    count = 0
    for i, (image, depth) in enumerate(frames):
        write_png(root / manifest.rgb_pattern.format(i), image)
        write_pfm(root / manifest.depth_pattern.format(i), depth.values)
        count += 1
    if count != manifest.frame_count:
        raise ValueError(f"got {count} frames, manifest declares {manifest.frame_count}")
    with open(root / POSES, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(POSE_HEADER)
        for t, p in zip(timestamps, poses):
            w.writerow([repr(float(t))] + [repr(x) for x in _pose_to_row(p)])
    with open(root / COMMANDS, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COMMAND_HEADER)
        for c in commands:
            w.writerow([repr(float(c.timestamp)), repr(float(c.v)), repr(float(c.omega))])
    (root / MANIFEST).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return SequenceBundle(root)


def write_synthetic(root: PathLike, sequence, name: Optional[str] = None,
                    depth_range: tuple[float, float] = (0.05, 20.0)) -> SequenceBundle:
    """Ray cast every frame of a :class:`depth.SyntheticSequence` to disk."""
    manifest = SequenceManifest(
        name=name or sequence.scene.name,
        intrinsics=sequence.intrinsics,
        frame_rate=sequence.frame_rate,
        frame_count=len(sequence),
        depth_range=depth_range,
        pose_frame="camera",
        camera_mount=sequence.params.camera_mount,
    )
    frames = (sequence.frame(i) for i in range(len(sequence)))
    return write_bundle(root, manifest, frames, sequence.poses, sequence.timestamps, sequence.commands)


__all__ = [
    "SequenceBundle",
    "SequenceManifest",
    "quantize",
    "read_pfm",
    "read_png",
    "write_bundle",
    "write_mask",
    "write_pfm",
    "write_png",
    "write_synthetic",
]
