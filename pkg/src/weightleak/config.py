"""Run configuration files: schema-versioned JSON with strict key checking.

A minimal document names a model preset and an attack objective::

    {"schema_version": 1, "model": "tiny-mlp", "attack": {"objective": "dlm-plus"}}

Every other field takes the default listed in ``DEFAULTS``.
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .attacks.core import AttackConfig
from .defenses import build_defense
from .exceptions import ConfigError
from .flsim import ClientConfig, FederationConfig
from .models import PRESETS

SCHEMA_VERSION = 1

SWEEP_KINDS = ("gamma", "epochs", "defense", "tuning-k")
COMPARE_ALGORITHMS = ("dlg", "cosine", "dlm", "dlm-plus")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "model": "tiny-mlp",
    "data": {"source": "synthetic", "n": 100, "seed": 0, "path": None, "labels_path": None, "channels": 1},
    "federation": {f.name: f.default for f in fields(FederationConfig)},
    "client": {f.name: f.default for f in fields(ClientConfig)},
    "defense": None,
    "attack": {f.name: f.default for f in fields(AttackConfig)},
    "target": {"round": 0, "client": 0},
    "trials": 20,
    "seed_base": 0,
    "sweep": {"kind": "gamma", "grid": [], "gamma_scale": "absolute"},
    "compare": {"algorithms": list(COMPARE_ALGORITHMS)},
}

# keys accepted inside a defense block, by kind
DEFENSE_KEYS = {
    "dp": {"kind", "clip", "sigma", "noise", "group_size"},
    "sparsify": {"kind", "rate", "scope"},
}
DATA_SOURCES = ("synthetic", "idx", "cifar10", "cifar100")


def _unknown(key: str, allowed, where: str) -> ConfigError:
    close = difflib.get_close_matches(key, sorted(allowed), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown key {key!r} in {where}{hint}")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise _unknown(key, defaults, where)
        if isinstance(defaults[key], dict) and key != "defense":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(defaults[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """A validated, defaults-filled configuration document."""

    doc: dict

    @property
    def model(self) -> str:
        return self.doc["model"]

    @property
    def federation(self) -> FederationConfig:
        return FederationConfig(**self.doc["federation"])

    @property
    def client(self) -> ClientConfig:
        return ClientConfig(**self.doc["client"])

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(**self.doc["attack"])

    @property
    def defense(self):
        return build_defense(self.doc["defense"])

    @property
    def trials(self) -> int:
        return self.doc["trials"]

    @property
    def seed_base(self) -> int:
        return self.doc["seed_base"]

    def override(self, **scalars) -> "RunConfig":
        """Copy with top-level or dotted scalar fields replaced (``attack.iterations=10``)."""
        doc = copy.deepcopy(self.doc)
        for dotted, value in scalars.items():
            if value is None:
                continue
            *path, last = dotted.split(".")
            node = doc
            for p in path:
                node = node[p]
            if isinstance(node.get(last), (dict, list)):
                raise ConfigError(f"{dotted} is not a scalar field")
            node[last] = value
        return from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if "schema_version" not in doc:
        raise ConfigError("missing 'schema_version'")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r} (expected {SCHEMA_VERSION})")
    merged = _merge(DEFAULTS, doc, "config")
    _validate(merged)
    return RunConfig(merged)


def _validate(doc: dict) -> None:
    if doc["model"] not in PRESETS:
        raise ConfigError(f"model must be one of {sorted(PRESETS)}, got {doc['model']!r}")
    if doc["data"]["source"] not in DATA_SOURCES:
        raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {doc['data']['source']!r}")
    defense = doc["defense"]
    if defense is not None:
        if not isinstance(defense, dict) or defense.get("kind") not in DEFENSE_KEYS:
            raise ConfigError(f"defense.kind must be one of {sorted(DEFENSE_KEYS)}")
        for key in defense:
            if key not in DEFENSE_KEYS[defense["kind"]]:
                raise _unknown(key, DEFENSE_KEYS[defense["kind"]], "defense")
    if doc["sweep"]["kind"] not in SWEEP_KINDS:
        raise ConfigError(f"sweep.kind must be one of {SWEEP_KINDS}, got {doc['sweep']['kind']!r}")
    if doc["sweep"]["gamma_scale"] not in ("absolute", "inverse-lr"):
        raise ConfigError("sweep.gamma_scale must be 'absolute' or 'inverse-lr'")
    for algo in doc["compare"]["algorithms"]:
        if algo not in COMPARE_ALGORITHMS:
            raise ConfigError(f"compare.algorithms: unknown algorithm {algo!r}")
    if not isinstance(doc["trials"], int) or doc["trials"] < 1:
        raise ConfigError("trials must be a positive integer")
    for section, cls in (("federation", FederationConfig), ("client", ClientConfig), ("attack", AttackConfig)):
        try:
            cls(**doc[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    try:
        build_defense(defense)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"defense: {exc}") from None


def read_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc)
