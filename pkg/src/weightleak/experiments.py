"""Seeded trials: simulate a federation, attack one upload, score the result.

Trial ``i`` of a run uses seed ``seed_base + i`` for the federation (model
init, partition, batch draw, defense noise) and for the attack
initialisation. The CLI and the acceptance tests both go through here.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .attacks.core import AttackResult, run_attack
from .config import RunConfig, from_dict
from .dataio import Dataset, load_cifar_binary, load_idx, synthetic_dataset
from .exceptions import ConfigError
from .flsim import TransmittedUpdate, run_simulation
from .metrics import success_rate
from .models import preset


def load_dataset(cfg: RunConfig) -> Dataset:
    data = cfg.doc["data"]
    spec = preset(cfg.model)
    if data["source"] == "synthetic":
        return synthetic_dataset(data["n"], spec.input_shape, spec.num_classes, seed=data["seed"])
    if data["path"] is None:
        raise ConfigError(f"data.path is required for source {data['source']!r}")
    if data["source"] == "idx":
        ds = load_idx(data["path"], data["labels_path"], channels=data["channels"], num_classes=spec.num_classes)
    else:
        ds = load_cifar_binary(data["path"], data["source"])
    if ds.image_shape != spec.input_shape:
        raise ConfigError(f"dataset images {ds.image_shape} do not fit model {cfg.model} {spec.input_shape}")
    return ds


def simulate(cfg: RunConfig, seed: int | None = None) -> list[TransmittedUpdate]:
    fed = cfg.federation if seed is None else replace(cfg.federation, seed=seed)
    return run_simulation(fed, cfg.client, preset(cfg.model), load_dataset(cfg), cfg.defense)


def select_target(log: Sequence[TransmittedUpdate], cfg: RunConfig) -> TransmittedUpdate:
    t = cfg.doc["target"]
    for upd in log:
        if upd.round == t["round"] and upd.client == t["client"]:
            return upd
    raise ConfigError(f"no update for round {t['round']} client {t['client']} in the wiretap")


def as_gradient_update(update: TransmittedUpdate, learning_rate: float) -> TransmittedUpdate:
    """The FedSGD view of a single-step weights upload: (W_g - W_k) / lr."""
    if update.kind == "gradients":
        return update
    view = update.attack_view()
    before = view.global_before
    grad = before.like([(a - b) / learning_rate for a, b in zip(before, view.payload)])
    try:
        truth = update.evaluation_view()
    except LookupError:
        truth = None
    return TransmittedUpdate(update.round, update.client, "gradients", before, grad, truth, update.metadata)


def attack_update(update: TransmittedUpdate, cfg: RunConfig, seed: int) -> AttackResult:
    attack = replace(cfg.attack, seed=seed)
    try:
        truth = update.evaluation_view()
    except LookupError:
        return run_attack(update, preset(cfg.model), attack)
    return run_attack(update, preset(cfg.model), attack, truth=truth.images, true_labels=truth.labels)


def run_trial(doc: dict, index: int, algorithm: str | None = None, grid=None) -> dict:
    """One seeded simulate-then-attack trial, as a JSON-ready record."""
    cfg = from_dict(doc)
    seed = cfg.seed_base + index
    update = select_target(simulate(cfg, seed), cfg)
    if not cfg.attack.needs_weights:
        update = as_gradient_update(update, cfg.client.learning_rate)
    result = attack_update(update, cfg, seed)
    record = {"trial": index, "seed": seed, "algorithm": algorithm or cfg.attack.objective}
    if grid is not None:
        record["grid"] = grid
    record.update(result.to_dict())
    return record


def _star(args):
    return run_trial(*args)


def parallel_map(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    """``map`` in a process pool, results in input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("WEIGHTLEAK_JOBS", "1")))
    except ValueError:
        return 1


def run_trials(cfg: RunConfig, jobs: int = 1) -> list[dict]:
    return parallel_map(_star, [(cfg.doc, i) for i in range(cfg.trials)], jobs)


# -- sweeps and comparisons --------------------------------------------------


def sweep_configs(cfg: RunConfig) -> list[tuple[object, RunConfig]]:
    """One derived config per grid point."""
    sweep = cfg.doc["sweep"]
    if not sweep["grid"]:
        raise ConfigError("sweep.grid must not be empty")
    out = []
    for value in sweep["grid"]:
        doc = cfg.to_dict()
        kind = sweep["kind"]
        if kind == "gamma":
            scale = 1.0 / cfg.client.learning_rate if sweep["gamma_scale"] == "inverse-lr" else 1.0
            doc["attack"].update(objective="dlm", gamma0=float(value) * scale)
        elif kind == "epochs":
            doc["client"]["local_epochs"] = int(value)
        elif kind == "tuning-k":
            doc["attack"].update(objective="dlg-k", k=float(value))
        else:
            defense = doc["defense"]
            if defense is None:
                raise ConfigError("a defense sweep needs a base 'defense' block")
            defense["sigma" if defense["kind"] == "dp" else "rate"] = float(value)
        out.append((value, from_dict(doc)))
    return out


def run_sweep(cfg: RunConfig, jobs: int = 1) -> list[dict]:
    kind = cfg.doc["sweep"]["kind"]
    tasks = [(sub.doc, i, f"{sub.attack.objective}:{kind}={value}", value)
             for value, sub in sweep_configs(cfg) for i in range(cfg.trials)]
    return parallel_map(_star, tasks, jobs)


def run_compare(cfg: RunConfig, jobs: int = 1) -> list[dict]:
    """Every algorithm on the same seeds; baselines see the gradient form of the same upload."""
    tasks = []
    for algo in cfg.doc["compare"]["algorithms"]:
        doc = cfg.to_dict()
        doc["attack"]["objective"] = algo
        tasks += [(from_dict(doc).doc, i, algo) for i in range(cfg.trials)]
    return parallel_map(_star, tasks, jobs)


def summarize(records: Iterable[dict], seed_base: int | None = None) -> list[dict]:
    """One row per algorithm label, in first-seen order."""
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(r["algorithm"], []).append(r)
    rows = []
    for algo, rs in groups.items():
        threshold = rs[0].get("success_threshold_db", 30.0)
        s = success_rate([r["final_psnr"] for r in rs], [r["final_ssim"] for r in rs], threshold)
        base = seed_base if seed_base is not None else min(r["seed"] - r["trial"] for r in rs)
        rows.append({"algorithm": algo, "acc": s.acc, "psnr": s.mean_psnr, "ssim": s.mean_ssim,
                     "n_trials": s.n_trials, "seed_base": base})
    return rows


def sweep_rows(records: Iterable[dict]) -> list[dict]:
    """Per (grid point, seed) rows for a sweep CSV."""
    return [{"algorithm": r["algorithm"], "grid": r["grid"], "seed": r["seed"], "psnr": r["final_psnr"],
             "ssim": r["final_ssim"], "success": r["success"]} for r in records]


def markdown_table(rows: Sequence[dict]) -> str:
    lines = ["| algorithm | acc | psnr | ssim | n |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['algorithm']} | {r['acc']:.2f} | {r['psnr']:.2f} | {r['ssim']:.3f} | {r['n_trials']} |")
    return "\n".join(lines) + "\n"


def mean_psnr_by_grid(records: Iterable[dict]) -> dict:
    by: dict = {}
    for r in records:
        by.setdefault(r["grid"], []).append(r["final_psnr"])
    return {k: float(np.mean(v)) for k, v in by.items()}
