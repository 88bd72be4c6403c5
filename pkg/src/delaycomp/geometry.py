"""Pinhole camera model, rigid poses, back-projection and projection.

Conventions used throughout the package:

* Pixel ``(u, v)`` is column ``u``, row ``v``; the pixel *center* sits at the
  integer coordinate, so pixel ``(0, 0)`` covers ``[-0.5, 0.5]^2``.
* Camera frame is x right, y down, z forward. Depth means z in that frame.
* A :class:`RigidPose` maps camera coordinates to world coordinates
  (``world = R @ cam + t``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GeometryError, ShapeMismatchError

Z_NEAR = 0.05
ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        """Square-pixel camera with a centered principal point."""
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def pixel_to_normalized(self, u, v):
        """Pixel coordinates to normalized image coordinates (z = 1 plane)."""
        return (np.asarray(u, dtype=np.float64) - self.cx) / self.fx, (
            np.asarray(v, dtype=np.float64) - self.cy
        ) / self.fy

    def normalized_to_pixel(self, x, y):
        return np.asarray(x) * self.fx + self.cx, np.asarray(y) * self.fy + self.cy

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


def _orthonormality_error(R: np.ndarray) -> float:
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to ``R`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class RigidPose:
    """SE(3) transform stored as rotation + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite values")
        err = _orthonormality_error(R)
        if err > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError(f"rotation is not orthonormal (|R^T R - I| = {err:.3g})")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "RigidPose":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_matrix(cls, T, *, repair: bool = True) -> "RigidPose":
        """Build from a 4x4 (or 3x4) matrix.

        With ``repair`` the rotation block is re-orthonormalized when it drifts
        more than ``ORTHO_TOL`` from a proper rotation.
        """
        T = np.asarray(T, dtype=np.float64)
        R = T[:3, :3]
        if repair and _orthonormality_error(R) > ORTHO_TOL:
            R = orthonormalize(R)
        return cls(R, T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"RigidPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidPose) -> RigidPose:
    Rt = a.rotation.T
    return RigidPose(Rt, -Rt @ a.translation)


def relative_pose(src_pose: RigidPose, dst_pose: RigidPose) -> RigidPose:
    """Transform taking src-camera coordinates to dst-camera coordinates."""
    return compose(invert(dst_pose), src_pose)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)


@dataclass(eq=False)
class DepthMap:
    """Metric z-depth raster with an explicit validity mask.

    Invalid entries always hold ``+inf`` so a stray read cannot be mistaken
    for a real depth.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2:
            raise ShapeMismatchError("depth map", ("H", "W"), values.shape)
        if valid.shape != values.shape:
            raise ShapeMismatchError("depth validity mask", values.shape, valid.shape)
        valid = valid & np.isfinite(values) & (values > 0)
        values[~valid] = np.inf
        self.values = values
        self.valid = valid

    @classmethod
    def from_array(
        cls,
        values,
        min_depth: Optional[float] = None,
        max_depth: Optional[float] = None,
    ) -> "DepthMap":
        """Mark non-finite, non-positive and out-of-range entries invalid.

        Out-of-range values are never clamped.
        """
        values = np.asarray(values, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(values) & (values > 0)
            if min_depth is not None:
                valid &= values >= min_depth
            if max_depth is not None:
                valid &= values <= max_depth
        return cls(values, valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def as_image(pixels) -> np.ndarray:
    """Promote an RGB raster to float64 in [0, 1]; uint8 input is scaled."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatchError("image", ("H", "W", 3), arr.shape)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


@dataclass(eq=False)
class ColoredPointCloud:
    positions: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    source_pixel: np.ndarray  # (N, 2) int (u, v)

    def __post_init__(self):
        n = len(self.positions)
        if len(self.colors) != n or len(self.source_pixel) != n:
            raise ShapeMismatchError(
                "point cloud arrays",
                (n,),
                (len(self.positions), len(self.colors), len(self.source_pixel)),
            )

    def __len__(self):
        return len(self.positions)


@dataclass(eq=False)
class Projection:
    """Points expressed in a destination view (continuous pixel coordinates)."""

    pixels: np.ndarray  # (M, 2) float (u, v)
    depth: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3)
    source_pixel: np.ndarray  # (M, 2)

    def __len__(self):
        return len(self.depth)


def _check_frame(intr: CameraIntrinsics, depth: DepthMap, image: np.ndarray) -> None:
    if depth.shape != intr.shape:
        raise ShapeMismatchError("depth map vs intrinsics", intr.shape, depth.shape)
    if image.shape[:2] != intr.shape:
        raise ShapeMismatchError("image vs intrinsics", intr.shape + (3,), image.shape)


def backproject(intr: CameraIntrinsics, depth: DepthMap, image) -> ColoredPointCloud:
    """Lift every valid depth pixel to a colored 3D point in the camera frame."""
    image = np.asarray(image)
    _check_frame(intr, depth, image)
    v, u = np.nonzero(depth.valid)
    d = depth.values[v, u]
    x = (u - intr.cx) / intr.fx * d
    y = (v - intr.cy) / intr.fy * d
    positions = np.stack([x, y, d], axis=1)
    colors = as_image(image)[v, u]
    return ColoredPointCloud(positions, colors, np.stack([u, v], axis=1))


def project(
    intr: CameraIntrinsics,
    cloud: ColoredPointCloud,
    src_pose: RigidPose,
    dst_pose: RigidPose,
    z_near: float = Z_NEAR,
) -> Projection:
    """Move a src-camera cloud into the dst camera and project it.

    Points whose new depth is ``<= z_near`` are dropped. Pixel coordinates are
    left continuous.
    """
    rel = relative_pose(src_pose, dst_pose)
    p = rel.apply(cloud.positions) if len(cloud) else np.zeros((0, 3))
    z = p[:, 2]
    keep = z > z_near
    p, z = p[keep], z[keep]
    u = intr.fx * p[:, 0] / z + intr.cx
    v = intr.fy * p[:, 1] / z + intr.cy
    return Projection(
        np.stack([u, v], axis=1), z, cloud.colors[keep], cloud.source_pixel[keep]
    )
