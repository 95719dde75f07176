"""Image and depth quality metrics and the evaluation report."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d


def psnr(a, b) -> float:
    """Peak-1 PSNR in dB; ``math.inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    y = correlate1d(correlate1d(x, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim(a, b, window: int = 11, sigma: float = 1.5, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Gaussian-window SSIM over valid windows, averaged over pixels then channels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window(window, sigma)
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def depth_rmse(pred, true, mask) -> float:
    """Root-mean-square error over masked pixels; NaN when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return math.nan
    d = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(true, dtype=np.float64)[mask]
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class ViewMetrics:
    view: str
    psnr: float
    ssim: float
    depth_rmse: float

    def to_dict(self) -> dict:
        return {"view": self.view, **_flag("psnr", self.psnr), "ssim": self.ssim,
                **_flag("depth_rmse", self.depth_rmse)}


def _flag(key: str, v: float) -> dict:
    # JSON has no inf/nan; non-finite values are written as null with a flag
    if math.isinf(v):
        return {key: None, f"{key}_infinite": True}
    if math.isnan(v):
        return {key: None, f"{key}_missing": True}
    return {key: v}


def _mean(vals: list[float]) -> float:
    if any(math.isinf(v) for v in vals):
        return math.inf
    finite = [v for v in vals if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


@dataclass
class EvalReport:
    views: list[ViewMetrics]
    config: dict | None = None
    notes: list[str] = field(default_factory=lambda: ["LPIPS not computed (needs a pretrained network)"])

    @property
    def mean(self) -> ViewMetrics:
        return ViewMetrics("mean", _mean([v.psnr for v in self.views]),
                           _mean([v.ssim for v in self.views]),
                           _mean([v.depth_rmse for v in self.views]))

    def to_dict(self) -> dict:
        return {"views": [v.to_dict() for v in self.views], "mean": self.mean.to_dict(),
                "config": self.config, "notes": self.notes}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate_images(names, preds, gts, pred_depths=None, gt_depths=None, masks=None,
                    config=None) -> EvalReport:
    rows = []
    for k, name in enumerate(names):
        rmse = math.nan
        if pred_depths is not None and gt_depths is not None:
            rmse = depth_rmse(pred_depths[k], gt_depths[k], masks[k])
        rows.append(ViewMetrics(name, psnr(preds[k], gts[k]), ssim(preds[k], gts[k]), rmse))
    return EvalReport(rows, config)
