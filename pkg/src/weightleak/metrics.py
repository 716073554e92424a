"""Image similarity metrics and trial aggregation."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError

PSNR_CAP = 100.0


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; identical inputs give ``PSNR_CAP``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if not peak > 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, peak: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, averaged over channels.

    Accepts [H, W], [C, H, W] or [B, C, H, W].
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim < 2 or a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise ValueError(f"ssim: image {a.shape} smaller than {window_size}x{window_size} window")
    a = a.reshape(-1, *a.shape[-2:])
    b = b.reshape(-1, *b.shape[-2:])
    w = gaussian_window(window_size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(x):
        return np.einsum("nijkl,kl->nij", sliding_window_view(x, w.shape, axis=(1, 2)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean(axis=(1, 2)).mean())


def eval_window(shape) -> int:
    """Largest odd window <= 11 that fits the image."""
    side = min(11, shape[-1], shape[-2])
    return side if side % 2 else side - 1


def image_scores(recovered, truth) -> tuple[float, float]:
    """PSNR and SSIM of one image after clamping the reconstruction to [0, 1]."""
    rec = np.clip(recovered, 0.0, 1.0)
    return psnr(rec, truth), ssim(rec, truth, window_size=eval_window(np.shape(truth)))


def best_assignment(recovered, truth) -> tuple[tuple, list[float]]:
    """Exhaustive matching of recovered to true images maximising total PSNR.

    Returns (perm, per-image PSNR), where recovered[perm[i]] pairs truth[i].
    """
    recovered = np.clip(np.asarray(recovered), 0.0, 1.0)
    truth = np.asarray(truth)
    n = truth.shape[0]
    if recovered.shape != truth.shape:
        raise ContractError(f"batch shapes {recovered.shape} and {truth.shape} differ")
    if n > 8:
        raise ValueError("exhaustive matching supports at most 8 images")
    table = np.array([[psnr(recovered[j], truth[i]) for j in range(n)] for i in range(n)])
    perm = max(itertools.permutations(range(n)), key=lambda p: sum(table[i, p[i]] for i in range(n)))
    return perm, [float(table[i, perm[i]]) for i in range(n)]


@dataclass(frozen=True)
class Summary:
    acc: float
    mean_psnr: float
    mean_ssim: float
    n_trials: int


def success_rate(psnrs: Sequence[float], ssims: Sequence[float] | None = None,
                 threshold_db: float = 30.0) -> Summary:
    """Fraction of trials with PSNR strictly above the threshold, plus means."""
    psnrs = [float(p) for p in psnrs]
    if not psnrs:
        raise ValueError("no trials to summarise")
    ssims = [float(s) for s in ssims] if ssims is not None else [float("nan")]
    acc = sum(p > threshold_db for p in psnrs) / len(psnrs)
    return Summary(acc, float(np.mean(psnrs)), float(np.mean(ssims)), len(psnrs))


def summarize_results(results, threshold_db: float | None = None) -> Summary:
    """Summary over AttackResult objects (or their dict forms) carrying ground-truth scores."""
    psnrs, ssims, thresholds = [], [], []
    for r in results:
        get = r.get if isinstance(r, dict) else lambda k: getattr(r, k)
        if get("final_psnr") is None:
            raise ValueError("result has no ground-truth evaluation")
        psnrs.append(get("final_psnr"))
        ssims.append(get("final_ssim"))
        thresholds.append(get("success_threshold_db"))
    if threshold_db is None:
        threshold_db = thresholds[0] if thresholds else 30.0
    return success_rate(psnrs, ssims, threshold_db)
