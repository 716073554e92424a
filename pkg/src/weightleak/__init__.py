"""Federated-learning leakage lab: simulate weight/gradient uploads, attack them, score the recoveries."""
from . import autodiff
from .attacks import AttackConfig, AttackResult, LeakageAttack, run_attack
from .config import RunConfig, read_config
from .dataio import Dataset, load_cifar_binary, load_idx, synthetic_dataset
from .defenses import DPDefense, Sparsifier, dp_apply, dp_clip, dp_noise, sparsify
from .exceptions import (
    AttackDiverged,
    ConfigError,
    ContractError,
    DegenerateUpdateError,
    DimensionError,
    FormatError,
    SimulationError,
)
from .flsim import (
    ClientConfig,
    FedAvgSimulator,
    FederationConfig,
    TransmittedUpdate,
    client_local_train,
    partition_iid,
    run_simulation,
    server_aggregate,
)
from .metrics import psnr, ssim, success_rate
from .models import ModelSpec, ModelWeights, build_lenet, build_mlp, forward, init_weights, preset

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackDiverged",
    "AttackResult",
    "ClientConfig",
    "ConfigError",
    "ContractError",
    "DPDefense",
    "Dataset",
    "DegenerateUpdateError",
    "DimensionError",
    "FedAvgSimulator",
    "FederationConfig",
    "FormatError",
    "LeakageAttack",
    "ModelSpec",
    "ModelWeights",
    "RunConfig",
    "SimulationError",
    "Sparsifier",
    "TransmittedUpdate",
    "autodiff",
    "build_lenet",
    "build_mlp",
    "client_local_train",
    "dp_apply",
    "dp_clip",
    "dp_noise",
    "forward",
    "init_weights",
    "load_cifar_binary",
    "load_idx",
    "partition_iid",
    "preset",
    "psnr",
    "read_config",
    "run_attack",
    "run_simulation",
    "server_aggregate",
    "sparsify",
    "ssim",
    "success_rate",
    "synthetic_dataset",
]
