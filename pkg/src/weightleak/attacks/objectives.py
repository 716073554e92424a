"""Matching objectives between a dummy gradient and an observed update.

``dummy_grad`` is a list of (usually recorded) ``DiffVar`` tensors; observed
quantities may be arrays or ``ModelWeights``. All norms are global over the
concatenated parameter vector.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..exceptions import ContractError, DegenerateUpdateError

EPS = 1e-12


def _aligned(dummy_grad: Sequence, other: Sequence, what: str) -> list[np.ndarray]:
    other = [np.asarray(t, dtype=np.float64) for t in other]
    if len(dummy_grad) != len(other):
        raise ContractError(f"{what}: {len(dummy_grad)} dummy tensors vs {len(other)} observed")
    for g, t in zip(dummy_grad, other):
        if tuple(g.shape) != t.shape:
            raise ContractError(f"{what}: shape {tuple(g.shape)} vs {t.shape}")
    return other


def weight_delta(w_before: Sequence, w_after: Sequence) -> list[np.ndarray]:
    """W^t - W^{t+1}, tensor by tensor."""
    before = [np.asarray(a, dtype=np.float64) for a in w_before]
    after = [np.asarray(b, dtype=np.float64) for b in w_after]
    if len(before) != len(after) or any(a.shape != b.shape for a, b in zip(before, after)):
        raise ContractError("weights before and after the update differ in structure")
    return [a - b for a, b in zip(before, after)]


def _norm(tensors: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.vdot(t, t) for t in tensors)))


def _guarded_norm(tensors) -> ad.DiffVar:
    # a floor rather than an offset, so exact rescaling stays exact above EPS
    norm = ad.frobenius_norm_all(tensors)
    return norm if norm.item() > EPS else ad.constant(EPS)


def objective_dlg(dummy_grad, true_grad) -> ad.DiffVar:
    """||g_hat - g||_F^2."""
    true_grad = _aligned(dummy_grad, true_grad, "dlg")
    return ad.sum_of_squares([ad.sub(g, t) for g, t in zip(dummy_grad, true_grad)])


def objective_dlg_k(dummy_grad, true_grad, k: float) -> ad.DiffVar:
    """||g_hat - k * g||_F^2; k = 1 is plain DLG."""
    true_grad = _aligned(dummy_grad, true_grad, "dlg-k")
    return ad.sum_of_squares([ad.sub(g, k * t) for g, t in zip(dummy_grad, true_grad)])


def objective_cosine(dummy_grad, true_grad, beta_tv: float = 0.0, dummy_x=None) -> ad.DiffVar:
    """1 - <g_hat, g> / (||g_hat|| ||g||) with eps-floored norms, plus an optional TV prior on the dummy image."""
    true_grad = _aligned(dummy_grad, true_grad, "cosine")
    dot = ad.inner_product(dummy_grad, true_grad)
    denom = ad.mul(_guarded_norm(dummy_grad), max(_norm(true_grad), EPS))
    value = ad.sub(1.0, ad.div(dot, denom))
    return _with_tv(value, beta_tv, dummy_x)


def objective_dlm(dummy_grad, w_before, w_after, gamma) -> ad.DiffVar:
    """||g_hat - gamma * (W^t - W^{t+1})||_F^2 with a learnable scalar gamma."""
    delta = _aligned(dummy_grad, weight_delta(w_before, w_after), "dlm")
    return ad.sum_of_squares([ad.sub(g, ad.mul(gamma, d)) for g, d in zip(dummy_grad, delta)])


def objective_dlm_plus(dummy_grad, w_before, w_after, beta_tv: float = 0.0, dummy_x=None) -> ad.DiffVar:
    """|| g_hat / ||g_hat|| - delta / ||delta|| ||_F^2 (+ beta_tv * TV(x_hat)).

    Free of the client learning rate: any positive rescaling of the delta
    leaves the value unchanged.
    """
    delta = _aligned(dummy_grad, weight_delta(w_before, w_after), "dlm-plus")
    delta_norm = _norm(delta)
    if delta_norm == 0.0:
        raise DegenerateUpdateError("weights before and after the update are identical")
    target = [d / delta_norm for d in delta]
    denom = _guarded_norm(dummy_grad)
    value = ad.sum_of_squares([ad.sub(ad.div(g, denom), t) for g, t in zip(dummy_grad, target)])
    return _with_tv(value, beta_tv, dummy_x)


def _with_tv(value: ad.DiffVar, beta_tv: float, dummy_x) -> ad.DiffVar:
    if beta_tv < 0:
        raise ValueError("beta_tv must be >= 0")
    if beta_tv == 0:
        return value
    if dummy_x is None:
        raise ValueError("a TV weight needs the dummy image")
    return ad.add(value, ad.mul(beta_tv, ad.total_variation(dummy_x)))


def estimate_alpha(dummy_grad, w_before, w_after) -> float:
    """||W^t - W^{t+1}|| / ||g_hat||: the client step size implied by the dummy gradient."""
    grads = [np.asarray(getattr(g, "value", g), dtype=np.float64) for g in dummy_grad]
    g_norm = _norm(grads)
    if g_norm == 0.0:
        raise DegenerateUpdateError("dummy gradient is zero")
    return _norm(weight_delta(w_before, w_after)) / g_norm
