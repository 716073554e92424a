"""Deterministic FedAvg / FedSGD simulation producing a wiretap log.

Each round, every client draws ``batch_size`` examples from its partition and
runs ``local_epochs`` passes of its optimiser over that batch. The update it
uploads (weights, or the pseudo-gradient ``(W_g - W_k) / lr`` in gradient
mode) is what the adversary sees.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._validation import check_choice, check_number, check_positive
from .dataio import Dataset
from .exceptions import ContractError, FormatError, SimulationError
from .models import ModelSpec, ModelWeights, check_compatible, forward, init_weights, preset

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")
TRANSMIT = ("weights", "gradients")


@dataclass(frozen=True)
class ClientConfig:
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    local_epochs: int = 1
    batch_size: int = 1

    def __post_init__(self):
        check_positive("learning_rate", self.learning_rate)
        check_choice("optimizer", self.optimizer, OPTIMIZERS)
        check_number("momentum", self.momentum, 0, 1, high_inclusive=False)
        check_number("beta1", self.beta1, 0, 1, high_inclusive=False)
        check_number("beta2", self.beta2, 0, 1, high_inclusive=False)
        check_positive("eps", self.eps)
        check_positive("local_epochs", self.local_epochs, integer=True)
        check_positive("batch_size", self.batch_size, integer=True)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 1
    fraction: float = 1.0
    transmit: str = "weights"
    rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        check_positive("num_clients", self.num_clients, integer=True)
        check_positive("rounds", self.rounds, integer=True)
        check_number("fraction", self.fraction, 0, 1, low_inclusive=False)
        check_choice("transmit", self.transmit, TRANSMIT)
        check_number("seed", self.seed, 0, integer=True)


@dataclass(frozen=True)
class AttackView:
    """Everything an eavesdropper observes for one upload."""

    global_before: ModelWeights
    payload: ModelWeights
    kind: str


@dataclass(frozen=True, eq=False)
class GroundTruth:
    sample_ref: tuple
    images: np.ndarray
    labels: np.ndarray


class TransmittedUpdate:
    """One wiretap record.

    The attack path reads :meth:`attack_view`; the private training batch is
    only reachable through :meth:`evaluation_view`.
    """

    __slots__ = ("_round", "_client", "_kind", "_global_before", "_payload", "_metadata", "_truth")

    def __init__(self, round: int, client: int, kind: str, global_before: ModelWeights,
                 payload: ModelWeights, truth: GroundTruth | None = None, metadata: dict | None = None):
        if kind not in TRANSMIT:
            raise ContractError(f"payload kind must be one of {TRANSMIT}, got {kind!r}")
        check_compatible(global_before, payload)
        self._round = int(round)
        self._client = int(client)
        self._kind = kind
        self._global_before = global_before
        self._payload = payload
        self._truth = truth
        self._metadata = dict(metadata or {})

    @property
    def round(self) -> int:
        return self._round

    @property
    def client(self) -> int:
        return self._client

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def metadata(self) -> dict:
        return dict(self._metadata)

    def attack_view(self) -> AttackView:
        return AttackView(self._global_before, self._payload, self._kind)

    def evaluation_view(self) -> GroundTruth:
        if self._truth is None:
            raise LookupError("this update carries no ground truth")
        return self._truth

    def __repr__(self) -> str:
        return f"TransmittedUpdate(round={self._round}, client={self._client}, kind={self._kind!r})"


# -- clients and server ------------------------------------------------------


def partition_iid(dataset: Dataset, num_clients: int, fraction: float, seed: int) -> list[Dataset]:
    """Disjoint uniform draws of floor(fraction * N / K) examples per client."""
    per_client = int(fraction * len(dataset)) // num_clients
    if per_client < 1:
        raise ValueError(
            f"{len(dataset)} samples at fraction {fraction} cannot give {num_clients} clients one example each"
        )
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset.subset(order[k * per_client:(k + 1) * per_client]) for k in range(num_clients)]


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[labels]


def weight_gradient(spec: ModelSpec, weights: ModelWeights, images, targets,
                    loss: Callable = ad.cross_entropy_probs) -> tuple[float, list[np.ndarray]]:
    """Loss value and its gradient w.r.t. every weight tensor."""
    params = [ad.variable(t) for t in weights]
    value = loss(forward(spec, params, images), targets)
    return value.item(), list(ad.gradients(value, params).grads)


def client_local_train(global_weights: ModelWeights, data: Dataset, cfg: ClientConfig, spec: ModelSpec,
                       loss: Callable = ad.cross_entropy_probs, context: str = "") -> ModelWeights:
    """Run ``cfg.local_epochs`` passes over ``data`` in order, in minibatches."""
    if len(data) == 0:
        raise ValueError("client has no data")
    w = [t.copy() for t in global_weights]
    m = [np.zeros_like(t) for t in w]
    v = [np.zeros_like(t) for t in w]
    targets = _one_hot(data.labels, data.num_classes)
    lr = cfg.learning_rate
    step = 0
    for epoch in range(cfg.local_epochs):
        for start in range(0, len(data), cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            value, grads = weight_gradient(spec, global_weights.like(w), data.images[sl], targets[sl], loss)
            step += 1
            if not np.isfinite(value):
                raise SimulationError(f"non-finite training loss {context} epoch {epoch} step {step}".strip())
            for i, g in enumerate(grads):
                if cfg.optimizer == "sgd":
                    w[i] = w[i] - lr * g
                elif cfg.optimizer == "sgd-momentum":
                    m[i] = cfg.momentum * m[i] + g
                    w[i] = w[i] - lr * m[i]
                else:
                    m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g
                    v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g
                    m_hat = m[i] / (1 - cfg.beta1 ** step)
                    v_hat = v[i] / (1 - cfg.beta2 ** step)
                    w[i] = w[i] - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return global_weights.like(w)


def server_aggregate(updates: Sequence[ModelWeights]) -> ModelWeights:
    """Unweighted mean, accumulated as a running mean in client order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    first = updates[0]
    mean = [t.copy() for t in first]
    for n, upd in enumerate(updates[1:], start=2):
        check_compatible(first, upd)
        for i, t in enumerate(upd):
            mean[i] = mean[i] + (t - mean[i]) / n
    return first.like(mean)


def run_simulation(fed: FederationConfig, client_cfg: ClientConfig, spec: ModelSpec, dataset: Dataset,
                   defense=None, initial_weights: ModelWeights | None = None) -> list[TransmittedUpdate]:
    """Simulate ``fed.rounds`` rounds; returns rounds x clients updates in order.

    ``defense`` is a transformer with a ``random_state`` parameter; a clone
    seeded per (round, client) is applied to each payload before upload.
    """
    if dataset.image_shape != spec.input_shape:
        raise ContractError(f"dataset images {dataset.image_shape} do not fit model input {spec.input_shape}")
    clients = partition_iid(dataset, fed.num_clients, fed.fraction, fed.seed)
    w_global = initial_weights if initial_weights is not None else init_weights(spec, fed.seed)
    lr = client_cfg.learning_rate
    log: list[TransmittedUpdate] = []
    for t in range(fed.rounds):
        payloads = []
        for k, local in enumerate(clients):
            rng = np.random.default_rng([fed.seed, t, k])
            take = min(client_cfg.batch_size, len(local))
            idx = np.sort(rng.choice(len(local), size=take, replace=False))
            batch = local.subset(idx)
            w_k = client_local_train(w_global, batch, client_cfg, spec, context=f"round {t} client {k}")
            if fed.transmit == "weights":
                payload = w_k
            else:
                payload = w_global.like([(a - b) / lr for a, b in zip(w_global, w_k)])
            metadata = {}
            if defense is not None:
                seeded = clone(defense).set_params(random_state=int(rng.integers(2**31)))
                payload = seeded.transform(payload)
                metadata["defense"] = repr(seeded)
            truth = GroundTruth(tuple(int(i) for i in idx), batch.images, batch.labels)
            log.append(TransmittedUpdate(t, k, fed.transmit, w_global, payload, truth, metadata))
            payloads.append(payload)
        mean = server_aggregate(payloads)
        if fed.transmit == "weights":
            w_global = mean
        else:
            w_global = w_global.like([w - lr * g for w, g in zip(w_global, mean)])
    return log


# -- serialisation -----------------------------------------------------------

MAGIC = b"WLKTAP\x00\x00"
FORMAT_VERSION = 1


def _records(log: Sequence[TransmittedUpdate]):
    header, arrays = [], []
    for upd in log:
        view = upd.attack_view()
        rec = {
            "round": upd.round,
            "client": upd.client,
            "kind": upd.kind,
            "fingerprint": view.payload.fingerprint,
            "metadata": upd.metadata,
            "global_before": [list(t.shape) for t in view.global_before],
            "payload": [list(t.shape) for t in view.payload],
        }
        arrays += list(view.global_before) + list(view.payload)
        try:
            truth = upd.evaluation_view()
        except LookupError:
            truth = None
        if truth is not None:
            rec["truth"] = {"sample_ref": list(truth.sample_ref), "images": list(truth.images.shape),
                            "labels": [int(l) for l in truth.labels]}
            arrays.append(truth.images)
        header.append(rec)
    return header, arrays


def _rebuild(header: list, arrays: list) -> list[TransmittedUpdate]:
    it = iter(arrays)
    log = []
    for rec in header:
        before = ModelWeights(tuple(next(it) for _ in rec["global_before"]), rec["fingerprint"])
        payload = ModelWeights(tuple(next(it) for _ in rec["payload"]), rec["fingerprint"])
        truth = None
        if "truth" in rec:
            t = rec["truth"]
            truth = GroundTruth(tuple(t["sample_ref"]), next(it), np.asarray(t["labels"], dtype=np.int64))
        log.append(TransmittedUpdate(rec["round"], rec["client"], rec["kind"], before, payload,
                                     truth, rec["metadata"]))
    return log


def _shapes(header: list) -> list:
    shapes = []
    for rec in header:
        shapes += rec["global_before"] + rec["payload"]
        if "truth" in rec:
            shapes.append(rec["truth"]["images"])
    return shapes


def dumps_wiretap(log: Sequence[TransmittedUpdate], meta: dict | None = None) -> bytes:
    """Binary container: magic, version, JSON header, then little-endian float64 arrays."""
    header, arrays = _records(log)
    doc = json.dumps({"meta": meta or {}, "records": header}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(doc)), doc]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def loads_wiretap(raw: bytes) -> tuple[list[TransmittedUpdate], dict]:
    if raw[:8] != MAGIC:
        raise FormatError("not a wiretap container (bad magic)", 0)
    if len(raw) < 20:
        raise FormatError("truncated wiretap header", len(raw))
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported wiretap version {version}", 8)
    doc = json.loads(raw[20:20 + n])
    pos = 20 + n
    arrays = []
    for shape in _shapes(doc["records"]):
        count = int(np.prod(shape))
        if pos + 8 * count > len(raw):
            raise FormatError("truncated wiretap payload", pos)
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * count
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", pos)
    return _rebuild(doc["records"], arrays), doc["meta"]


def save_wiretap(log, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_wiretap(log, meta))


def load_wiretap(path) -> tuple[list[TransmittedUpdate], dict]:
    return loads_wiretap(Path(path).read_bytes())


def wiretap_to_json(log: Sequence[TransmittedUpdate], meta: dict | None = None) -> str:
    """JSON form: weights as flat lists with shapes alongside."""
    header, arrays = _records(log)
    flat = [a.ravel().tolist() for a in arrays]
    return json.dumps({"format": "weightleak-wiretap", "version": FORMAT_VERSION, "meta": meta or {},
                       "records": header, "arrays": flat}, sort_keys=True)


def wiretap_from_json(text: str) -> tuple[list[TransmittedUpdate], dict]:
    doc = json.loads(text)
    if doc.get("format") != "weightleak-wiretap" or doc.get("version") != FORMAT_VERSION:
        raise FormatError("not a version-1 wiretap JSON document")
    arrays = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(doc["arrays"], _shapes(doc["records"]))]
    return _rebuild(doc["records"], arrays), doc["meta"]


class FedAvgSimulator(BaseEstimator):
    """Estimator wrapper around :func:`run_simulation`.

    ``fit(dataset)`` runs the federation and stores the wiretap in
    ``wiretap_``; ``transform`` returns it.
    """

    def __init__(self, model="tiny-mlp", num_clients=1, fraction=1.0, transmit="weights", rounds=1,
                 learning_rate=0.01, optimizer="sgd", momentum=0.0, local_epochs=1, batch_size=1,
                 defense=None, seed=0):
        self.model = model
        self.num_clients = num_clients
        self.fraction = fraction
        self.transmit = transmit
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.momentum = momentum
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.defense = defense
        self.seed = seed

    def fit(self, dataset: Dataset, y=None):
        self.spec_ = preset(self.model) if isinstance(self.model, str) else self.model
        fed = FederationConfig(self.num_clients, self.fraction, self.transmit, self.rounds, self.seed)
        client = ClientConfig(learning_rate=self.learning_rate, optimizer=self.optimizer,
                              momentum=self.momentum, local_epochs=self.local_epochs,
                              batch_size=self.batch_size)
        self.wiretap_ = run_simulation(fed, client, self.spec_, dataset, self.defense)
        return self

    def transform(self, dataset: Dataset | None = None) -> list[TransmittedUpdate]:
        if dataset is not None:
            self.fit(dataset)
        check_is_fitted(self, "wiretap_")
        return self.wiretap_
