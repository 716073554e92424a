"""Exception types shared across the package."""
from .autodiff import DimensionError


class ContractError(ValueError):
    """Arguments violate an interface contract (mismatched shapes, wrong payload kind)."""


class ConfigError(ValueError):
    """A run configuration is malformed."""


class FormatError(ValueError):
    """A dataset or container file does not match its binary format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SimulationError(RuntimeError):
    """Local training produced a non-finite loss."""


class DegenerateUpdateError(ValueError):
    """The observed update carries no signal (zero delta or zero gradient)."""


class AttackDiverged(RuntimeError):
    """The attack objective became non-finite."""

    def __init__(self, iteration: int, message: str = "attack objective is not finite"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


__all__ = [
    "AttackDiverged",
    "ConfigError",
    "ContractError",
    "DegenerateUpdateError",
    "DimensionError",
    "FormatError",
    "SimulationError",
]
