"""Batch-auction market laboratory: maker equilibrium, rebate contracts and fee search."""

__version__ = "0.1.0"

from .model import ALPHABET, APPLE, JumpKind, MarketState, ModelParams, ParameterError  # noqa: E402
from .equilibrium import (  # noqa: E402
    ControlPair,
    EquilibriumNotFound,
    NoPositiveRoot,
    nash_fixed_point,
    solve_symmetric_gamma,
    verify_nash,
)
from .simulation import PathBatch, simulate_batch  # noqa: E402
from .deep_bsde import PolicyNetwork, TrainConfig, TrainingDiverged, train  # noqa: E402
from .search import SweepResult, baseline_comparison, sweep_fee  # noqa: E402

__all__ = [
    "ALPHABET", "APPLE", "ControlPair", "EquilibriumNotFound", "JumpKind", "MarketState",
    "ModelParams", "NoPositiveRoot", "ParameterError", "PathBatch", "PolicyNetwork",
    "SweepResult", "TrainConfig", "TrainingDiverged", "__version__", "baseline_comparison",
    "nash_fixed_point", "simulate_batch", "solve_symmetric_gamma", "sweep_fee", "train",
    "verify_nash",
]
