"""Client-side transformations applied to an update before upload."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_choice, check_number, check_positive
from .models import ModelWeights

NOISE_KINDS = ("gaussian", "laplacian")


def dp_clip(weights: ModelWeights, clip: float) -> ModelWeights:
    """Scale each tensor by 1 / max(1, ||W_l|| / clip)."""
    if not clip > 0:
        raise ValueError(f"clip must be > 0, got {clip}")
    out = []
    for t in weights:
        norm = float(np.sqrt(np.vdot(t, t)))
        # the relative band absorbs rounding in the rescaled norm, making clip idempotent
        out.append(t * (clip / norm) if norm > clip * (1 + 1e-13) else t)
    return weights.like(out)


def dp_noise(weights: ModelWeights, clip: float, sigma: float, noise: str = "gaussian",
             group_size: int = 1, seed=None) -> ModelWeights:
    """(W_l + n) / group_size with n ~ N(0, (sigma*clip)^2) or Laplace(0, sigma*clip)."""
    if sigma < 0 or group_size < 1:
        raise ValueError("need sigma >= 0 and group_size >= 1")
    if noise not in NOISE_KINDS:
        raise ValueError(f"noise must be one of {NOISE_KINDS}, got {noise!r}")
    rng = np.random.default_rng(seed)
    scale = sigma * clip
    out = []
    for t in weights:
        if scale == 0:
            n = 0.0
        elif noise == "gaussian":
            n = rng.normal(0.0, scale, size=t.shape)
        else:
            n = rng.laplace(0.0, scale, size=t.shape)
        out.append((t + n) / group_size if group_size != 1 else t + n)
    return weights.like(out)


def dp_apply(weights: ModelWeights, clip: float, sigma: float, noise: str = "gaussian",
             group_size: int = 1, seed=None) -> ModelWeights:
    return dp_noise(dp_clip(weights, clip), clip, sigma, noise, group_size, seed)


def sparsify(weights: ModelWeights, rate: float, scope: str = "global") -> ModelWeights:
    """Zero every entry whose magnitude is below the rate-quantile.

    With k = ceil(rate * n), the threshold is the magnitude at sorted position
    k (0-based), so the k smallest entries go; entries tied with the
    threshold survive.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    if scope not in ("global", "per-layer"):
        raise ValueError(f"scope must be 'global' or 'per-layer', got {scope!r}")
    if rate == 0:
        return weights
    if scope == "global":
        mags = np.abs(weights.flatten())
        thresholds = [_threshold(mags, rate)] * len(weights)
    else:
        thresholds = [_threshold(np.abs(t.ravel()), rate) for t in weights]
    return weights.like([np.where(np.abs(t) < th, 0.0, t) for t, th in zip(weights, thresholds)])


def _threshold(mags: np.ndarray, rate: float) -> float:
    k = math.ceil(rate * mags.size)
    if k >= mags.size:
        return math.inf
    return float(np.partition(mags, k)[k])


class DPDefense(TransformerMixin, BaseEstimator):
    """Per-tensor norm clipping followed by seeded Gaussian or Laplacian noise."""

    def __init__(self, clip=1.0, sigma=0.0, noise="gaussian", group_size=1, random_state=None):
        self.clip = clip
        self.sigma = sigma
        self.noise = noise
        self.group_size = group_size
        self.random_state = random_state

    def fit(self, weights=None, y=None):
        check_positive("clip", self.clip)
        check_number("sigma", self.sigma, 0)
        check_choice("noise", self.noise, NOISE_KINDS)
        check_positive("group_size", self.group_size, integer=True)
        return self

    def transform(self, weights: ModelWeights) -> ModelWeights:
        return dp_apply(weights, self.clip, self.sigma, self.noise, self.group_size, self.random_state)


class Sparsifier(TransformerMixin, BaseEstimator):
    """Magnitude pruning of an update to a target zero fraction."""

    def __init__(self, rate=0.0, scope="global", random_state=None):
        self.rate = rate
        self.scope = scope
        self.random_state = random_state  # unused; keeps the defense interface uniform

    def fit(self, weights=None, y=None):
        check_number("rate", self.rate, 0, 1, high_inclusive=False)
        check_choice("scope", self.scope, ("global", "per-layer"))
        return self

    def transform(self, weights: ModelWeights) -> ModelWeights:
        return sparsify(weights, self.rate, self.scope)


def build_defense(cfg: dict | None):
    """Validated defense transformer from a config mapping (``kind`` = dp | sparsify)."""
    if not cfg:
        return None
    params = dict(cfg)
    kind = params.pop("kind")
    if kind == "dp":
        return DPDefense(**params).fit()
    if kind == "sparsify":
        return Sparsifier(**params).fit()
    raise ValueError(f"unknown defense kind {kind!r}")
