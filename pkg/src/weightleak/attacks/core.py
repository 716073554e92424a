"""Recovery loop: optimise a dummy batch until its gradient matches the wiretap."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .. import autodiff as ad
from .._validation import check_choice, check_number, check_positive
from ..exceptions import AttackDiverged, ContractError, DegenerateUpdateError
from ..flsim import AttackView, TransmittedUpdate
from ..metrics import best_assignment, eval_window, image_scores, psnr, ssim
from ..models import ModelSpec, check_compatible, forward
from . import objectives as obj
from .optim import AdamState, LBFGSState, adam_step, lbfgs_step

WEIGHT_OBJECTIVES = ("dlm", "dlm-plus", "dlm-plus-tv")
GRADIENT_OBJECTIVES = ("dlg", "dlg-k", "cosine")
OBJECTIVES = GRADIENT_OBJECTIVES + WEIGHT_OBJECTIVES
ADVERSARY_OPTIMIZERS = ("adam", "lbfgs")


@dataclass(frozen=True)
class AttackConfig:
    objective: str = "dlm-plus"
    k: float = 1.0
    gamma0: float = 1.0
    beta_tv: float = 0.0
    optimizer: str = "adam"
    lr: float = 0.1
    history: int = 100
    line_search: bool = False
    iterations: int = 4000
    seed: int = 0
    success_threshold_db: float = 30.0
    batch_size: int = 1
    tol: float = 1e-10

    def __post_init__(self):
        check_choice("objective", self.objective, OBJECTIVES)
        check_choice("optimizer", self.optimizer, ADVERSARY_OPTIMIZERS)
        check_number("k", self.k)
        check_number("gamma0", self.gamma0)
        check_number("beta_tv", self.beta_tv, 0)
        check_positive("lr", self.lr)
        for name in ("history", "iterations", "batch_size"):
            check_positive(name, getattr(self, name), integer=True)
        check_number("seed", self.seed, 0, integer=True)
        check_number("success_threshold_db", self.success_threshold_db)
        check_number("tol", self.tol, 0)

    @property
    def needs_weights(self) -> bool:
        return self.objective in WEIGHT_OBJECTIVES


@dataclass
class AttackResult:
    recovered: np.ndarray
    labels: list[int]
    loss_trace: list[float]
    psnr_trace: list[float]
    iterations_used: int
    final_loss: float
    objective: str
    seed: int
    success_threshold_db: float = 30.0
    alpha_estimate: float | None = None
    gamma: float | None = None
    final_psnr: float | None = None
    final_ssim: float | None = None
    per_image_psnr: list[float] = field(default_factory=list)
    label_correct: bool | None = None

    @property
    def label(self) -> int:
        return self.labels[0]

    @property
    def success(self) -> bool | None:
        if self.final_psnr is None:
            return None
        return self.final_psnr > self.success_threshold_db

    def to_dict(self, traces: bool = True) -> dict:
        d = asdict(self)
        d["recovered"] = {"shape": list(self.recovered.shape), "data": self.recovered.ravel().tolist()}
        d["success"] = self.success
        if not traces:
            del d["loss_trace"], d["psnr_trace"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        rec = d["recovered"]
        kw["recovered"] = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        kw.setdefault("loss_trace", [])
        kw.setdefault("psnr_trace", [])
        return cls(**kw)


def _view(update) -> AttackView:
    return update.attack_view() if isinstance(update, TransmittedUpdate) else update


class _Problem:
    """Objective and its gradient over the flat vector (x_hat, y_hat[, gamma])."""

    def __init__(self, view: AttackView, spec: ModelSpec, cfg: AttackConfig, loss: Callable):
        if cfg.needs_weights and view.kind != "weights":
            raise ContractError(f"{cfg.objective} requires a weights-mode update, got {view.kind}")
        if not cfg.needs_weights and view.kind != "gradients":
            raise ContractError(f"{cfg.objective} requires gradients mode, got a {view.kind}-mode update")
        if view.global_before.fingerprint != spec.fingerprint:
            raise ContractError("wiretap weights were produced for a different model")
        check_compatible(view.global_before, view.payload)
        self.spec, self.cfg, self.loss = spec, cfg, loss
        self.before = list(view.global_before)
        self.payload = list(view.payload)
        if cfg.needs_weights and not any(np.any(a != b) for a, b in zip(self.before, self.payload)):
            raise DegenerateUpdateError("weights before and after the update are identical")
        self.leaves = [ad.variable(t) for t in self.before]
        self.x_shape = (cfg.batch_size, *spec.input_shape)
        self.y_shape = (cfg.batch_size, spec.num_classes)
        self.nx = math.prod(self.x_shape)
        self.ny = math.prod(self.y_shape)

    def initial(self) -> np.ndarray:
        rng = np.random.default_rng(self.cfg.seed)
        x = rng.normal(size=self.x_shape)
        y = rng.normal(size=self.y_shape)
        parts = [x.ravel(), y.ravel()]
        if self.cfg.objective == "dlm":
            parts.append(np.array([self.cfg.gamma0], dtype=np.float64))
        return np.concatenate(parts)

    def split(self, theta: np.ndarray):
        x = theta[:self.nx].reshape(self.x_shape)
        y = theta[self.nx:self.nx + self.ny].reshape(self.y_shape)
        gamma = float(theta[-1]) if self.cfg.objective == "dlm" else None
        return x, y, gamma

    def dummy_gradient(self, x, y, retain: bool = True) -> list:
        value = self.loss(forward(self.spec, self.leaves, x), y)
        return list(ad.gradients(value, self.leaves, retain_graph=retain).grads)

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        x_np, y_np, gamma = self.split(theta)
        x, y = ad.variable(x_np), ad.variable(y_np)
        wrt = [x, y]
        g_hat = self.dummy_gradient(x, y)
        c = self.cfg
        if c.objective == "dlg":
            value = obj.objective_dlg(g_hat, self.payload)
        elif c.objective == "dlg-k":
            value = obj.objective_dlg_k(g_hat, self.payload, c.k)
        elif c.objective == "cosine":
            value = obj.objective_cosine(g_hat, self.payload, c.beta_tv, x)
        elif c.objective == "dlm":
            g = ad.variable(gamma)
            wrt.append(g)
            value = obj.objective_dlm(g_hat, self.before, self.payload, g)
        else:
            beta = c.beta_tv if c.objective == "dlm-plus-tv" else 0.0
            value = obj.objective_dlm_plus(g_hat, self.before, self.payload, beta, x)
        grads = ad.gradients(value, wrt).grads
        return value.item(), np.concatenate([np.ravel(g) for g in grads])


def _score(recovered: np.ndarray, truth: np.ndarray) -> float:
    if truth.shape[0] == 1:
        return psnr(np.clip(recovered, 0, 1), truth)
    return float(np.mean(best_assignment(recovered, truth)[1]))


def run_attack(update, spec: ModelSpec, cfg: AttackConfig, loss: Callable = ad.cross_entropy_soft,
               truth: np.ndarray | None = None, true_labels=None) -> AttackResult:
    """Recover the private batch behind one upload.

    ``update`` is a TransmittedUpdate or its attack view. ``truth`` (and
    ``true_labels``) are used only for scoring: they never enter the
    optimisation. Without them the PSNR trace is empty.
    """
    problem = _Problem(_view(update), spec, cfg, loss)
    theta = problem.initial()
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64).reshape(problem.x_shape)
    adam = AdamState(lr=cfg.lr)
    lbfgs = LBFGSState(lr=cfg.lr, history=cfg.history, line_search=cfg.line_search)
    loss_trace: list[float] = []
    psnr_trace: list[float] = []
    used = 0
    for it in range(1, cfg.iterations + 1):
        used = it
        if cfg.optimizer == "adam":
            value, grad = problem(theta)
        else:
            if lbfgs.grad is None:
                lbfgs.value, lbfgs.grad = problem(theta)
            value, grad = lbfgs.value, lbfgs.grad
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise AttackDiverged(it)
        loss_trace.append(value)
        if truth is not None:
            psnr_trace.append(_score(problem.split(theta)[0], truth))
        if value < cfg.tol:
            break
        if cfg.optimizer == "adam":
            theta = adam_step(adam, theta, grad)
        else:
            theta = lbfgs_step(lbfgs, theta, problem)
    else:
        value, _ = problem(theta)
        if not np.isfinite(value):
            raise AttackDiverged(used)
    x, y, gamma = problem.split(theta)
    result = AttackResult(
        recovered=x.copy(),
        labels=[int(i) for i in np.argmax(y, axis=1)],
        loss_trace=loss_trace,
        psnr_trace=psnr_trace,
        iterations_used=used,
        final_loss=float(value),
        objective=cfg.objective,
        seed=cfg.seed,
        success_threshold_db=cfg.success_threshold_db,
        gamma=gamma,
    )
    if cfg.needs_weights:
        g_hat = problem.dummy_gradient(ad.constant(x), ad.constant(y), retain=False)
        try:
            result.alpha_estimate = obj.estimate_alpha(g_hat, problem.before, problem.payload)
        except DegenerateUpdateError:
            result.alpha_estimate = None
    if truth is not None:
        evaluate(result, truth, true_labels)
    return result


def evaluate(result: AttackResult, truth: np.ndarray, true_labels=None) -> AttackResult:
    """Fill the ground-truth scores of ``result`` in place (best assignment for batches)."""
    truth = np.asarray(truth, dtype=np.float64).reshape(result.recovered.shape)
    if truth.shape[0] == 1:
        perm = (0,)
        p, s = image_scores(result.recovered[0], truth[0])
        per_image, ssims = [p], [s]
    else:
        perm, per_image = best_assignment(result.recovered, truth)
        win = eval_window(truth.shape)
        rec = np.clip(result.recovered, 0, 1)
        ssims = [ssim(rec[perm[i]], truth[i], window_size=win) for i in range(len(perm))]
    result.per_image_psnr = [float(p) for p in per_image]
    result.final_psnr = float(np.mean(per_image))
    result.final_ssim = float(np.mean(ssims))
    if true_labels is not None:
        true_labels = [int(v) for v in np.ravel(true_labels)]
        result.label_correct = all(result.labels[perm[i]] == t for i, t in enumerate(true_labels))
    return result
