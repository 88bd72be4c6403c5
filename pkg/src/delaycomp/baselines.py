"""Non-learned comparison compensators: plane-induced homography and crop+scale.

Plane convention: a plane seen from a camera is ``(n, d)`` with ``n`` a unit
normal in that camera's frame pointing back toward the camera and ``d > 0``
the camera-to-plane distance, i.e. points satisfy ``n . X = -d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .geometry import CameraIntrinsics, DepthMap, RigidPose, backproject, relative_pose

DET_TOL = 1e-12
MIN_WINDOW = 0.2
PLANES = ("ground", "fit", "frontal")


def _normalize_h(H: np.ndarray) -> np.ndarray:
    if abs(np.linalg.det(H)) <= DET_TOL:
        raise GeometryError("homography is singular")
    if H[2, 2] != 0.0:
        H = H / H[2, 2]
    return H


def plane_homography(
    intr: CameraIntrinsics,
    src_pose: RigidPose,
    dst_pose: RigidPose,
    normal,
    distance: float,
) -> np.ndarray:
    """Pixel map src -> dst induced by a plane given in the src camera frame."""
    if not distance > 0:
        raise GeometryError(f"plane distance must be positive, got {distance}")
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    rel = relative_pose(src_pose, dst_pose)
    R, t = rel.rotation, rel.translation
    dst_center = -R.T @ t
    if abs(n @ dst_center + distance) <= 1e-9 * max(1.0, distance):
        raise GeometryError("destination camera lies on the plane")
    H = intr.K @ (R - np.outer(t, n) / distance) @ intr.K_inv
    return _normalize_h(H)


def ground_plane(pose: RigidPose) -> tuple[np.ndarray, float]:
    """The world z=0 plane in the camera frame of ``pose`` (camera above it)."""
    height = float(pose.translation[2])
    if not height > 0:
        raise GeometryError(f"camera must be above the ground plane, got height {height}")
    return pose.rotation.T @ np.array([0.0, 0.0, 1.0]), height


def fit_plane(intr: CameraIntrinsics, depth: DepthMap) -> tuple[np.ndarray, float]:
    """Least-squares plane through the valid depth pixels, in the camera frame."""
    if np.count_nonzero(depth.valid) < 3:
        raise GeometryError("need at least three valid depth pixels to fit a plane")
    cloud = backproject(intr, depth, np.zeros(depth.shape + (3,)))
    pts = cloud.positions
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    n = vt[-1]
    if n @ centroid > 0:
        n = -n
    d = float(-(n @ centroid))
    if not d > 0:
        raise GeometryError("fitted plane passes through the camera")
    return n, d


def frontal_plane(depth: DepthMap) -> tuple[np.ndarray, float]:
    """Fronto-parallel plane at the median valid depth."""
    if not depth.valid.any():
        raise GeometryError("depth map has no valid pixels")
    return np.array([0.0, 0.0, -1.0]), float(np.median(depth.values[depth.valid]))


def warp(image: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp ``image`` by the src->dst homography ``H``.

    Bilinear sampling; dst pixels whose source lies outside the image are
    flagged invalid (and hold the clamped border value).
    """
    H = np.asarray(H, dtype=np.float64)
    h, w = image.shape[:2]
    Hinv = np.linalg.inv(H)
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    q = Hinv @ np.stack([uu.ravel(), vv.ravel(), np.ones(h * w)])
    with np.errstate(divide="ignore", invalid="ignore"):
        su = q[0] / q[2]
        sv = q[1] / q[2]
    eps = 1e-9
    valid = (q[2] > 0) & (su >= -eps) & (su <= w - 1 + eps) & (sv >= -eps) & (sv <= h - 1 + eps)
    su = np.where(valid, su, 0.0)
    sv = np.where(valid, sv, 0.0)
    out = _sample(image, sv, su).reshape(image.shape)
    return out, valid.reshape(h, w)


def _sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    coords = np.stack([rows, cols])
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


@dataclass(frozen=True)
class CropScaleParams:
    zoom_per_meter: float = 0.25
    shift_per_radian: float = 0.0

    def __post_init__(self):
        if not self.zoom_per_meter >= 0:
            raise ValueError(f"zoom_per_meter must be >= 0, got {self.zoom_per_meter}")

    @classmethod
    def for_camera(cls, intr: CameraIntrinsics, scene_depth: float) -> "CropScaleParams":
        """Zoom for a scene at ``scene_depth`` meters; shift by one focal length per radian of yaw."""
        return cls(zoom_per_meter=1.0 / scene_depth, shift_per_radian=-intr.fx)


def planar_displacement(src_pose: RigidPose, dst_pose: RigidPose) -> tuple[float, float]:
    """(forward meters, leftward heading radians) of dst relative to src camera."""
    rel = relative_pose(dst_pose, src_pose)  # dst camera expressed in src frame
    forward = float(rel.translation[2])
    f = rel.rotation[:, 2]
    return forward, math.atan2(-f[0], f[2])


def crop_window(width: int, height: int, cx: float, cy: float, forward: float, heading: float,
                params: CropScaleParams) -> tuple[float, float, float, float]:
    """(left, top, window width, window height) in pixel-edge coordinates."""
    if not (math.isfinite(forward) and math.isfinite(heading)):
        raise ValueError("displacement must be finite")
    s = max(MIN_WINDOW, min(1.0, 1.0 - params.zoom_per_meter * forward))
    ww, wh = width * s, height * s
    left = (cx + 0.5) + params.shift_per_radian * heading - ww / 2
    top = (cy + 0.5) - wh / 2
    left = min(max(left, 0.0), width - ww)
    top = min(max(top, 0.0), height - wh)
    return left, top, ww, wh


def crop_and_scale(image: np.ndarray, displacement: tuple[float, float], params: CropScaleParams,
                   intr: CameraIntrinsics | None = None) -> np.ndarray:
    """Crop a motion-dependent window and upsample it back to full size."""
    h, w = image.shape[:2]
    cx = intr.cx if intr is not None else (w - 1) / 2
    cy = intr.cy if intr is not None else (h - 1) / 2
    left, top, ww, wh = crop_window(w, h, cx, cy, displacement[0], displacement[1], params)
    if left == 0.0 and top == 0.0 and ww == w and wh == h:
        return np.asarray(image, dtype=np.float64).copy()
    cols = left + (np.arange(w) + 0.5) * (ww / w) - 0.5
    rows = top + (np.arange(h) + 0.5) * (wh / h) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _sample(image, rr.ravel(), cc.ravel()).reshape(np.shape(image))


def homography_compensate(
    image: np.ndarray,
    depth: DepthMap | None,
    intr: CameraIntrinsics,
    src_pose: RigidPose,
    dst_pose: RigidPose,
    plane: str = "ground",
) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``image`` to ``dst_pose`` assuming the scene is a single plane."""
    if plane == "ground":
        n, d = ground_plane(src_pose)
    elif plane in ("fit", "frontal"):
        if depth is None:
            raise ValueError(f"plane={plane!r} needs a depth map")
        n, d = fit_plane(intr, depth) if plane == "fit" else frontal_plane(depth)
    else:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")
    H = plane_homography(intr, src_pose, dst_pose, n, d)
    return warp(image, H)


__all__ = [
    "CropScaleParams",
    "crop_and_scale",
    "crop_window",
    "fit_plane",
    "frontal_plane",
    "ground_plane",
    "homography_compensate",
    "plane_homography",
    "planar_displacement",
    "warp",
]
