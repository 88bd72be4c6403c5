"""Image-quality and depth-accuracy metrics.

Images are float arrays in [0, 1] (dynamic range 1). Depth metrics only look
at pixels valid in both maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MetricError, ShapeMismatchError
from .geometry import DepthMap

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MS_SSIM_MIN_SIZE = SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)  # 176


@dataclass
class MetricReport:
    psnr: float = math.nan
    ms_ssim: float = math.nan
    abs_rel: float = math.nan
    delta1: float = math.nan
    si_loss: float = math.nan
    valid_pixel_count: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ShapeMismatchError("prediction vs truth", truth.shape, pred.shape)


def psnr(pred, truth, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio in dB over ``mask`` (all pixels if None).

    Identical inputs give ``PSNR_CAP`` instead of infinity.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    if mask is None:
        mask = np.ones(truth.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != truth.shape[:2]:
        raise ShapeMismatchError("psnr mask", truth.shape[:2], mask.shape)
    if not mask.any():
        raise MetricError("psnr mask selects no pixels")
    err = (pred[mask] - truth[mask]) ** 2
    mse = float(err.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D array with 1D kernel ``g``."""
    tmp = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(tmp, len(g), axis=1) @ g


def _ssim_maps(x: np.ndarray, y: np.ndarray, g: np.ndarray):
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def _channels(img: np.ndarray):
    return [img] if img.ndim == 2 else [img[..., c] for c in range(img.shape[2])]


def ssim(pred, truth) -> float:
    """Single-scale SSIM (Gaussian window), averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    if min(truth.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"image must be at least {SSIM_WINDOW} px on each side")
    g = gaussian_window()
    vals = []
    for x, y in zip(_channels(pred), _channels(truth)):
        lum, cs = _ssim_maps(x, y, g)
        vals.append(float(np.mean(lum * cs)))
    return float(np.mean(vals))


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(pred, truth) -> float:
    """Five-scale MS-SSIM, averaged over channels.

    Negative contrast-structure terms are clamped to zero before the
    fractional powers.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    if min(truth.shape[:2]) < MS_SSIM_MIN_SIZE:
        raise MetricError(
            f"MS-SSIM needs images at least {MS_SSIM_MIN_SIZE} px on the short side, got {truth.shape[:2]}"
        )
    g = gaussian_window()
    scores = []
    for x, y in zip(_channels(pred), _channels(truth)):
        total = 1.0
        for level, weight in enumerate(MS_SSIM_WEIGHTS):
            lum, cs = _ssim_maps(x, y, g)
            if level == len(MS_SSIM_WEIGHTS) - 1:
                term = float(np.mean(lum * cs))
            else:
                term = float(np.mean(cs))
                x = _avg_pool2(x)
                y = _avg_pool2(y)
            total *= max(term, 0.0) ** weight
        scores.append(total)
    return float(np.mean(scores))


def _depth_arrays(d: Union[DepthMap, np.ndarray]):
    if isinstance(d, DepthMap):
        return d.values, d.valid
    arr = np.asarray(d, dtype=np.float64)
    return arr, np.isfinite(arr)


def _joint(pred, truth):
    pv, pm = _depth_arrays(pred)
    tv, tm = _depth_arrays(truth)
    if pv.shape != tv.shape:
        raise ShapeMismatchError("predicted vs true depth", tv.shape, pv.shape)
    joint = pm & tm
    if not joint.any():
        raise MetricError("no pixel is valid in both depth maps")
    return pv[joint], tv[joint]


def depth_metrics(pred, truth) -> tuple[float, float]:
    """(AbsRel, delta1) over jointly valid pixels."""
    p, t = _joint(pred, truth)
    if np.any(p <= 0) or np.any(t <= 0):
        raise MetricError("depth metrics need strictly positive depths")
    abs_rel = float(np.mean(np.abs(p - t) / t))
    ratio = np.maximum(p / t, t / p)
    return abs_rel, float(np.mean(ratio < 1.25))


def si_loss(pred, truth, lam: float = 0.85) -> float:
    """Root scale-invariant log-depth loss over jointly valid pixels.

    Evaluated as ``sqrt(var(d) + (1 - lam) * mean(d)^2)`` with
    ``d = log(truth) - log(pred)``, which equals the usual
    ``mean(d^2) - lam * mean(d)^2`` form but cancels exactly when ``d`` is
    constant and ``lam = 1``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p, t = _joint(pred, truth)
    if np.any(p <= 0) or np.any(t <= 0):
        raise MetricError("scale-invariant loss needs strictly positive depths")
    lt = np.log(t)
    lp = np.log(p)
    d = lt - lp
    mean = float(np.mean(d))
    spread = float(np.max(d) - np.min(d))
    # rounding in c*t and log() leaves a pure rescale a few ulps off constant
    scale = max(1.0, float(np.max(np.abs(lt))), float(np.max(np.abs(lp))))
    if spread <= 16 * np.finfo(float).eps * scale:
        var = 0.0
    else:
        var = float(np.mean((d - mean) ** 2))
    return math.sqrt(max(var + (1.0 - lam) * mean * mean, 0.0))


def evaluate_frame(
    pred_image,
    truth_image,
    mask: Optional[np.ndarray] = None,
    pred_depth=None,
    truth_depth=None,
    lam: float = 0.85,
    with_ms_ssim: bool = True,
) -> MetricReport:
    """All metrics for one generated frame; depth metrics only when both depths are given."""
    report = MetricReport()
    report.psnr = psnr(pred_image, truth_image, mask)
    report.valid_pixel_count = int(np.count_nonzero(mask)) if mask is not None else int(np.prod(truth_image.shape[:2]))
    if with_ms_ssim and min(np.shape(truth_image)[:2]) >= MS_SSIM_MIN_SIZE:
        report.ms_ssim = ms_ssim(pred_image, truth_image)
    if pred_depth is not None and truth_depth is not None:
        try:
            report.abs_rel, report.delta1 = depth_metrics(pred_depth, truth_depth)
            report.si_loss = si_loss(pred_depth, truth_depth, lam)
        except MetricError:
            pass
    return report
