"""Neural solver for the mean-field price formation game.

A control network and a price network play the market-clearing
saddle-point game; closed-form and finite-population benchmarks plus
a-posteriori optimality residuals certify what training produced.
"""

from .estimator import ResidualReport, adjoint_states, posterior_estimate, residuals
from .model import (
    CONSTANT_MEAN,
    OSCILLATING_MEAN,
    QUADRATIC,
    QUARTIC,
    CostSpec,
    DomainError,
    InitialDist,
    NonConvergenceError,
    SupplySpec,
    TimeGrid,
    sample_initial_positions,
    supply_on_grid,
)
from .networks import init_params, load_params, save_params
from .oracle import (
    GaussianPath,
    LQCoefficients,
    NPlayerSolution,
    WrongCostKind,
    hj_collocation_residual,
    lq_coefficients,
    lq_density,
    lq_feedback,
    lq_price,
    nplayer_solve,
)
from .rollout import NonFiniteError, TrajectoryBatch, batch_from_csv, batch_to_csv, rollout
from .training import EpochRecord, TrainConfig, Trainer, TrainLog, loss_eval, train

__version__ = "0.1.0"

__all__ = [
    "CONSTANT_MEAN",
    "OSCILLATING_MEAN",
    "QUADRATIC",
    "QUARTIC",
    "CostSpec",
    "DomainError",
    "EpochRecord",
    "GaussianPath",
    "InitialDist",
    "LQCoefficients",
    "NonConvergenceError",
    "NonFiniteError",
    "NPlayerSolution",
    "ResidualReport",
    "SupplySpec",
    "TimeGrid",
    "TrainConfig",
    "TrainLog",
    "Trainer",
    "TrajectoryBatch",
    "WrongCostKind",
    "adjoint_states",
    "batch_from_csv",
    "batch_to_csv",
    "hj_collocation_residual",
    "init_params",
    "load_params",
    "loss_eval",
    "lq_coefficients",
    "lq_density",
    "lq_feedback",
    "lq_price",
    "nplayer_solve",
    "posterior_estimate",
    "residuals",
    "rollout",
    "sample_initial_positions",
    "save_params",
    "supply_on_grid",
    "train",
]
