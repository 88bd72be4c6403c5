"""Deterministic hole filling for rendered frames.

Only pixels flagged in the hole mask are ever written; everything else is
returned bit-for-bit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import ShapeMismatchError
from .splat import RenderOutput

logger = logging.getLogger(__name__)

METHODS = ("pullpush", "diffusion", "none")


class InpaintWarning(UserWarning):
    """Raised (as a warning) when there is nothing to fill from."""


@dataclass(frozen=True)
class InpaintConfig:
    method: str = "pullpush"
    iterations: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown inpaint method {self.method!r}; expected one of {METHODS}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@njit(parallel=True, cache=True)
def _pull(color, weight):
    """Halve resolution, averaging known contributors; weights clamp at 1."""
    h, w = weight.shape
    H = (h + 1) // 2
    W = (w + 1) // 2
    c = np.zeros((H, W, 3))
    cw = np.zeros((H, W))
    for i in prange(H):
        for j in range(W):
            s = 0.0
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for y in range(2 * i, min(2 * i + 2, h)):
                for x in range(2 * j, min(2 * j + 2, w)):
                    wt = weight[y, x]
                    if wt > 0:
                        s += wt
                        a0 += wt * color[y, x, 0]
                        a1 += wt * color[y, x, 1]
                        a2 += wt * color[y, x, 2]
            if s > 0:
                c[i, j, 0] = a0 / s
                c[i, j, 1] = a1 / s
                c[i, j, 2] = a2 / s
            cw[i, j] = min(s, 1.0)
    return c, cw


@njit(parallel=True, cache=True)
def _push(color, weight, coarse):
    """Blend each fine pixel with the bilinearly upsampled coarse level.

    Coarse pixel ``i`` is centered at fine coordinate ``2i + 0.5``. Pixels
    with full weight are copied untouched.
    """
    h, w = weight.shape
    H, W = coarse.shape[0], coarse.shape[1]
    out = np.empty((h, w, 3))
    for y in prange(h):
        fy = min(max((y - 0.5) / 2.0, 0.0), H - 1.0)
        y0 = int(fy)
        y1 = min(y0 + 1, H - 1)
        ty = fy - y0
        for x in range(w):
            wt = weight[y, x]
            if wt >= 1.0:
                out[y, x, 0] = color[y, x, 0]
                out[y, x, 1] = color[y, x, 1]
                out[y, x, 2] = color[y, x, 2]
                continue
            fx = min(max((x - 0.5) / 2.0, 0.0), W - 1.0)
            x0 = int(fx)
            x1 = min(x0 + 1, W - 1)
            tx = fx - x0
            for ch in range(3):
                up = (coarse[y0, x0, ch] * (1 - tx) + coarse[y0, x1, ch] * tx) * (1 - ty) + (
                    coarse[y1, x0, ch] * (1 - tx) + coarse[y1, x1, ch] * tx
                ) * ty
                out[y, x, ch] = wt * color[y, x, ch] + (1.0 - wt) * up
    return out


def pull_push(image: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown pixels from a pyramid of weighted averages of known ones."""
    colors = [np.ascontiguousarray(image, dtype=np.float64)]
    weights = [known.astype(np.float64)]
    while colors[-1].shape[0] > 1 or colors[-1].shape[1] > 1:
        c, w = _pull(colors[-1], weights[-1])
        colors.append(c)
        weights.append(w)
    filled = colors[-1]
    for c, w in zip(reversed(colors[:-1]), reversed(weights[:-1])):
        filled = _push(c, w, filled)
    return filled


@njit(cache=True)
def _diffuse(cur, have, ys, xs, iterations, tol):
    """Jacobi sweeps over the hole pixels listed in (ys, xs)."""
    h, w = have.shape
    n = ys.shape[0]
    nxt = np.empty((n, 3))
    reached = np.zeros(n, dtype=np.bool_)
    it = 0
    while it < iterations:
        it += 1
        delta = 0.0
        grew = False
        for k in range(n):
            y = ys[k]
            x = xs[k]
            cnt = 0
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy = y + dy
                xx = x + dx
                if 0 <= yy < h and 0 <= xx < w and have[yy, xx]:
                    cnt += 1
                    s0 += cur[yy, xx, 0]
                    s1 += cur[yy, xx, 1]
                    s2 += cur[yy, xx, 2]
            reached[k] = cnt > 0
            if cnt > 0:
                nxt[k, 0] = s0 / cnt
                nxt[k, 1] = s1 / cnt
                nxt[k, 2] = s2 / cnt
        for k in range(n):
            if reached[k]:
                y = ys[k]
                x = xs[k]
                if have[y, x]:
                    for ch in range(3):
                        delta = max(delta, abs(nxt[k, ch] - cur[y, x, ch]))
                else:
                    grew = True
                    have[y, x] = True
                for ch in range(3):
                    cur[y, x, ch] = nxt[k, ch]
        if not grew and delta < tol:
            break
    return it


def diffusion_fill(image: np.ndarray, known: np.ndarray, iterations: int, tol: float = 1e-6) -> np.ndarray:
    """Grow known values into holes by repeated 4-neighbor averaging.

    Hole pixels take the mean of their already-known neighbors; once reached
    they keep relaxing until the largest update falls below ``tol`` or the
    iteration cap is hit. Anything still unreached falls back to pull-push.
    """
    cur = np.ascontiguousarray(np.where(known[..., None], image, 0.0), dtype=np.float64)
    have = known.copy()
    ys, xs = np.nonzero(~known)
    its = _diffuse(cur, have, ys, xs, iterations, tol)
    logger.debug("diffusion stopped after %d iterations", its)
    if not have.all():
        cur = np.where(have[..., None], cur, pull_push(cur, have))
    return cur


def fill(render: RenderOutput, cfg: InpaintConfig = InpaintConfig()) -> np.ndarray:
    """Paint the holes of ``render``; non-hole pixels are returned unchanged."""
    image = render.image
    hole = np.asarray(render.hole_mask, dtype=bool)
    if hole.shape != image.shape[:2]:
        raise ShapeMismatchError("hole mask vs image", image.shape[:2], hole.shape)
    if cfg.method == "none" or not hole.any():
        return image.copy()
    if hole.all():
        warnings.warn("every pixel is a hole; returning uniform mid-gray", InpaintWarning, stacklevel=2)
        return np.full_like(image, 0.5, dtype=np.float64)
    known = ~hole
    if cfg.method == "pullpush":
        painted = pull_push(image, known)
    else:
        painted = diffusion_fill(image, known, cfg.iterations)
    out = image.astype(np.float64, copy=True)
    out[hole] = np.clip(painted[hole], 0.0, 1.0)
    return out
