"""Adversary-side optimisers over a flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Closure = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


@dataclass
class AdamState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float | None = None) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    lr = state.lr if lr is None else lr
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LBFGSState:
    lr: float = 1.0
    history: int = 100
    line_search: bool = False
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    value: float | None = None
    grad: np.ndarray | None = None
    resets: int = 0


def two_loop(grad: np.ndarray, s_hist: list, y_hist: list) -> np.ndarray:
    """-H g via the two-loop recursion; plain -g with no history."""
    q = grad.copy()
    if not s_hist:
        return -q
    rho = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    alphas = []
    for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho)):
        a = r * float(s @ q)
        alphas.append(a)
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y, r), a in zip(zip(s_hist, y_hist, rho), reversed(alphas)):
        b = r * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_step(state: LBFGSState, params: np.ndarray, closure: Closure) -> np.ndarray:
    """One L-BFGS iteration with a constant step (optionally Armijo backtracking).

    Curvature pairs with s'y <= 1e-10 are dropped. A non-finite or ascent
    direction clears the history and falls back to steepest descent.
    """
    if state.grad is None:
        state.value, state.grad = closure(params)
    f, g = state.value, state.grad
    d = two_loop(g, state.s, state.y)
    if not np.all(np.isfinite(d)) or float(g @ d) >= 0:
        state.s.clear()
        state.y.clear()
        state.resets += 1
        d = -g
    t = state.lr
    new = params + t * d
    f_new, g_new = closure(new)
    if state.line_search:
        slope = float(g @ d)
        for _ in range(30):
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            new = params + t * d
            f_new, g_new = closure(new)
    s_vec, y_vec = new - params, g_new - g
    if float(s_vec @ y_vec) > 1e-10:
        state.s.append(s_vec)
        state.y.append(y_vec)
        if len(state.s) > state.history:
            del state.s[0], state.y[0]
    state.value, state.grad = f_new, g_new
    return new
