"""Sphere-splatting renderer for colored point clouds.

Every point becomes a screen-space disk whose world radius grows linearly
with its distance from the camera, so all disks share one on-screen size.
Overlapping disks are blended with a depth softmax whose temperature
``gamma`` sets how transparent nearby points are. Pixels no disk reaches are
holes and are painted ``hole_color``.

Rasterization is tiled: points are binned to fixed-size screen tiles in
ascending index order, tiles are processed in parallel, and each pixel
accumulates its contributors in point-index order. The result is therefore
bit-identical for any worker count.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from numba import njit, prange

from .geometry import (
    CameraIntrinsics,
    ColoredPointCloud,
    DepthMap,
    RigidPose,
    backproject,
    relative_pose,
)


GREEN = (0.0, 1.0, 0.0)
KERNELS = {"disk": 0, "gaussian": 1}


@dataclass(frozen=True)
class SplatConfig:
    radius: float = 3e-3
    gamma: float = 0.1
    hole_color: tuple[float, float, float] = GREEN
    z_near: float = 0.05
    z_far: float = 20.0
    spheres_per_pixel: int = 1
    tile_size: int = 64
    kernel: str = "disk"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius constant must be positive, got {self.radius}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.z_near < self.z_far:
            raise ValueError(f"need 0 < z_near < z_far, got {self.z_near}, {self.z_far}")
        if self.spheres_per_pixel != 1:
            raise ValueError("only one sphere per source pixel is supported")
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {sorted(KERNELS)}")


@dataclass(eq=False)
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    hole_mask: np.ndarray  # (H, W) bool, True where nothing was drawn
    blended_depth: Optional[np.ndarray] = None  # (H, W), inf at holes

    @property
    def hole_fraction(self) -> float:
        return float(self.hole_mask.mean())


def sphere_radius(distance, intr: CameraIntrinsics, cfg: SplatConfig = SplatConfig()):
    """World-space sphere radius for a point ``distance`` meters from the camera.

    The sensor-width / focal-length ratio of the physical camera equals
    ``width / fx`` for a pinhole calibration.
    """
    return cfg.radius * np.asarray(distance, dtype=np.float64) * intr.width / (2.0 * intr.fx)


def screen_radius(intr: CameraIntrinsics, cfg: SplatConfig = SplatConfig()) -> float:
    """On-screen disk radius in pixels; the same for every sphere."""
    return cfg.radius * intr.width / 2.0


@contextlib.contextmanager
def num_threads(n: Optional[int]):
    """Temporarily set the rasterizer worker count."""
    if n is None:
        yield
        return
    old = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(old)


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


# 1/gamma above this risks exp() underflow in the unstabilized weights
_SINGLE_PASS_LIMIT = 600.0
_BIN_CHUNKS = 64


@njit(parallel=True, cache=True)
def _project_points(pos, R, t, fx, fy, cx, cy, z_near, z_far, pix_radius, u, v, z, r):
    """Move points into the destination camera, project, and size their disks.

    Culled points get ``r = -1``. ``pix_radius`` is the on-screen radius
    ``fx * sphere_radius(dist) / dist``, the same for every point.
    """
    for i in prange(pos.shape[0]):
        x = R[0, 0] * pos[i, 0] + R[0, 1] * pos[i, 1] + R[0, 2] * pos[i, 2] + t[0]
        y = R[1, 0] * pos[i, 0] + R[1, 1] * pos[i, 1] + R[1, 2] * pos[i, 2] + t[1]
        zz = R[2, 0] * pos[i, 0] + R[2, 1] * pos[i, 1] + R[2, 2] * pos[i, 2] + t[2]
        z[i] = zz
        if not (zz > z_near and zz <= z_far):
            r[i] = -1.0
            u[i] = 0.0
            v[i] = 0.0
        else:
            u[i] = fx * x / zz + cx
            v[i] = fy * y / zz + cy
            r[i] = pix_radius


@njit(parallel=True, cache=True)
def _pixel_spans(u, v, r, width, height, span):
    """Clipped integer bounding box of pixel centers each disk may cover.

    Culled or off-screen disks get an empty span (x0 > x1).
    """
    for i in prange(u.shape[0]):
        if r[i] < 0:
            span[i, 0] = 1
            span[i, 1] = 0
            span[i, 2] = 1
            span[i, 3] = 0
            continue
        span[i, 0] = max(int(np.ceil(u[i] - r[i])), 0)
        span[i, 1] = min(int(np.floor(u[i] + r[i])), width - 1)
        span[i, 2] = max(int(np.ceil(v[i] - r[i])), 0)
        span[i, 3] = min(int(np.floor(v[i] + r[i])), height - 1)
        if span[i, 0] > span[i, 1] or span[i, 2] > span[i, 3]:
            span[i, 0] = 1
            span[i, 1] = 0


@njit(parallel=True, cache=True)
def _bin_points(span, tile, ntx, nty):
    """CSR lists of point indices per tile, each list in ascending index order.

    Points are split into a fixed number of contiguous chunks; chunks count
    and fill in parallel, and the (tile, chunk) prefix sum reproduces the
    serial ordering whatever the worker count.
    """
    n = span.shape[0]
    ntiles = ntx * nty
    nch = _BIN_CHUNKS
    step = (n + nch - 1) // nch
    counts = np.zeros((ntiles, nch), dtype=np.int64)
    for c in prange(nch):
        for i in range(c * step, min((c + 1) * step, n)):
            if span[i, 0] > span[i, 1]:
                continue
            for ty in range(span[i, 2] // tile, span[i, 3] // tile + 1):
                for tx in range(span[i, 0] // tile, span[i, 1] // tile + 1):
                    counts[ty * ntx + tx, c] += 1
    flat = counts.ravel()
    starts = np.empty(flat.shape[0] + 1, dtype=np.int64)
    starts[0] = 0
    for k in range(flat.shape[0]):
        starts[k + 1] = starts[k] + flat[k]
    items = np.empty(starts[-1], dtype=np.int64)
    for c in prange(nch):
        cursor = np.empty(ntiles, dtype=np.int64)
        for k in range(ntiles):
            cursor[k] = starts[k * nch + c]
        for i in range(c * step, min((c + 1) * step, n)):
            if span[i, 0] > span[i, 1]:
                continue
            for ty in range(span[i, 2] // tile, span[i, 3] // tile + 1):
                for tx in range(span[i, 0] // tile, span[i, 1] // tile + 1):
                    k = ty * ntx + tx
                    items[cursor[k]] = i
                    cursor[k] += 1
    offsets = np.empty(ntiles + 1, dtype=np.int64)
    for k in range(ntiles + 1):
        offsets[k] = starts[k * nch]
    return offsets, items


@njit(parallel=True, cache=True)
def _raster_tiles(u, v, z, r, colors, span, offsets, items, width, height, tile, ntx,
                  z_near, scale, kernel, stabilized, hole_color, image, hole, depth):
    """Softmax-blend every tile's disks into the output rasters.

    Unstabilized: weight ``exp(-(z - z_near) / scale)``, evaluated once per
    point. Stabilized: a first pass records each pixel's nearest depth and
    weights are taken relative to it, which yields the same normalized blend
    without underflow at tiny temperatures.
    """
    ntiles = offsets.shape[0] - 1
    for k in prange(ntiles):
        ty = k // ntx
        tx = k - ty * ntx
        px0 = tx * tile
        py0 = ty * tile
        px1 = min(px0 + tile, width) - 1
        py1 = min(py0 + tile, height) - 1
        th = py1 - py0 + 1
        tw = px1 - px0 + 1
        acc = np.zeros(th * tw * 5)
        zmin = np.full((th, tw), np.inf)
        if stabilized:
            for j in range(offsets[k], offsets[k + 1]):
                i = items[j]
                ui = u[i]
                vi = v[i]
                rr = r[i] * r[i]
                zi = z[i]
                for y in range(max(span[i, 2], py0), min(span[i, 3], py1) + 1):
                    dy = y - vi
                    for x in range(max(span[i, 0], px0), min(span[i, 1], px1) + 1):
                        dx = x - ui
                        if dx * dx + dy * dy <= rr and zi < zmin[y - py0, x - px0]:
                            zmin[y - py0, x - px0] = zi
        for j in range(offsets[k], offsets[k + 1]):
            i = items[j]
            ui = u[i]
            vi = v[i]
            rr = r[i] * r[i]
            zi = z[i]
            ci0 = colors[i, 0]
            ci1 = colors[i, 1]
            ci2 = colors[i, 2]
            w0 = np.exp(-(zi - z_near) / scale)
            wz = w0 * zi
            wc0 = w0 * ci0
            wc1 = w0 * ci1
            wc2 = w0 * ci2
            for y in range(max(span[i, 2], py0), min(span[i, 3], py1) + 1):
                dy = y - vi
                dy2 = dy * dy
                for x in range(max(span[i, 0], px0), min(span[i, 1], px1) + 1):
                    dx = x - ui
                    d2 = dx * dx + dy2
                    if d2 > rr:
                        continue
                    q = ((y - py0) * tw + (x - px0)) * 5
                    if stabilized or kernel == 1:
                        w = w0
                        if stabilized:
                            w = np.exp(-(zi - zmin[y - py0, x - px0]) / scale)
                        if kernel == 1:
                            w *= np.exp(-2.0 * d2 / rr)
                        acc[q] += w
                        acc[q + 1] += w * zi
                        acc[q + 2] += w * ci0
                        acc[q + 3] += w * ci1
                        acc[q + 4] += w * ci2
                    else:
                        acc[q] += w0
                        acc[q + 1] += wz
                        acc[q + 2] += wc0
                        acc[q + 3] += wc1
                        acc[q + 4] += wc2
        for y in range(th):
            for x in range(tw):
                q = (y * tw + x) * 5
                if acc[q] > 0:
                    inv = 1.0 / acc[q]
                    hole[py0 + y, px0 + x] = False
                    depth[py0 + y, px0 + x] = acc[q + 1] * inv
                    image[py0 + y, px0 + x, 0] = acc[q + 2] * inv
                    image[py0 + y, px0 + x, 1] = acc[q + 3] * inv
                    image[py0 + y, px0 + x, 2] = acc[q + 4] * inv
                else:
                    hole[py0 + y, px0 + x] = True
                    depth[py0 + y, px0 + x] = np.inf
                    image[py0 + y, px0 + x, 0] = hole_color[0]
                    image[py0 + y, px0 + x, 1] = hole_color[1]
                    image[py0 + y, px0 + x, 2] = hole_color[2]


def _splat(u, v, z, r, colors, intr: CameraIntrinsics, cfg: SplatConfig, threads: Optional[int]) -> RenderOutput:
    W, H, T = intr.width, intr.height, cfg.tile_size
    ntx = -(-W // T)
    nty = -(-H // T)
    image = np.empty((H, W, 3))
    hole = np.empty((H, W), dtype=np.bool_)
    depth = np.empty((H, W))
    scale = cfg.gamma * (cfg.z_far - cfg.z_near)
    stabilized = 1.0 / cfg.gamma > _SINGLE_PASS_LIMIT
    span = np.empty((len(z), 4), dtype=np.int64)
    with num_threads(threads):
        _pixel_spans(u, v, r, W, H, span)
        offsets, items = _bin_points(span, T, ntx, nty)
        _raster_tiles(u, v, z, r, colors, span, offsets, items, W, H, T, ntx, cfg.z_near, scale,
                      KERNELS[cfg.kernel], stabilized, np.asarray(cfg.hole_color, dtype=np.float64),
                      image, hole, depth)
    return RenderOutput(image, hole, depth)


def splat_projection(
    pixels: np.ndarray,
    depth: np.ndarray,
    colors: np.ndarray,
    radius_px,
    intr: CameraIntrinsics,
    cfg: SplatConfig = SplatConfig(),
    threads: Optional[int] = None,
) -> RenderOutput:
    """Rasterize already-projected disks (continuous centers, pixel radii)."""
    depth = np.asarray(depth, dtype=np.float64)
    r = np.array(np.broadcast_to(radius_px, depth.shape), dtype=np.float64)
    r[(depth < cfg.z_near) | (depth > cfg.z_far)] = -1.0
    return _splat(
        np.ascontiguousarray(pixels[:, 0], dtype=np.float64),
        np.ascontiguousarray(pixels[:, 1], dtype=np.float64),
        np.ascontiguousarray(depth),
        r,
        np.ascontiguousarray(colors, dtype=np.float64),
        intr,
        cfg,
        threads,
    )


def rasterize(
    cloud: ColoredPointCloud,
    src_pose: RigidPose,
    dst_pose: RigidPose,
    intr: CameraIntrinsics,
    cfg: SplatConfig = SplatConfig(),
    threads: Optional[int] = None,
) -> RenderOutput:
    """Render a src-camera cloud as seen from ``dst_pose``.

    Projection follows :func:`geometry.project` (fused into one parallel
    pass here); points outside ``[z_near, z_far]`` are culled.
    """
    rel = relative_pose(src_pose, dst_pose)
    n = len(cloud)
    u, v, z, r = (np.empty(n) for _ in range(4))
    if n:
        with num_threads(threads):
            _project_points(
                np.ascontiguousarray(cloud.positions, dtype=np.float64),
                np.ascontiguousarray(rel.rotation),
                np.ascontiguousarray(rel.translation),
                intr.fx, intr.fy, intr.cx, intr.cy,
                cfg.z_near, cfg.z_far, screen_radius(intr, cfg),
                u, v, z, r,
            )
    colors = np.ascontiguousarray(cloud.colors, dtype=np.float64)
    return _splat(u, v, z, r, colors, intr, cfg, threads)


def render_compensated(
    frame: tuple[np.ndarray, DepthMap],
    intr: CameraIntrinsics,
    src_pose: RigidPose,
    dst_pose: RigidPose,
    cfg: SplatConfig = SplatConfig(),
    threads: Optional[int] = None,
) -> RenderOutput:
    image, depth = frame
    return rasterize(backproject(intr, depth, image), src_pose, dst_pose, intr, cfg, threads)
