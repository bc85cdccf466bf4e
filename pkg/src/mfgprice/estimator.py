"""A-posteriori certification of a trained policy pair.

Any simulated batch, optimal or not, defines candidate costates

    P_k = -(l'(v_k) + price_k)

at every node.  If the batch actually solved the game these satisfy a
backward difference equation driven by the state cost, hit the terminal
gradient at the horizon, and the mean drift clears the supply.  The three
defect families below measure how far a given batch is from that; their
squared discrete norms add up to a computable certificate that decays as
the approximation converges, with no knowledge of the exact solution.

Norm conventions: time sums carry a dt weight (Riemann sums of L^2([0,T])
norms), agent sums do not (the defects are vectors over the population).
Interior nodes k = 1..M-1 enter the aggregate.  The k = 0 defects are
reported separately: the first backward step is not controlled by the
same constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CostSpec, hamiltonian_grads, lagrangian_grads, terminal_cost_and_grad
from .rollout import TrajectoryBatch


@dataclass
class ResidualReport:
    """Discrete optimality defects of one batch.

    eps_run has one row per agent and one column per interior node
    k = 1..M-1; eps_q has one entry per interior node; eps_t one entry
    per agent.  The *_sq fields are squared discrete norms and estimate
    is exactly their sum; the unsquared norms are properties.
    """

    eps_run: np.ndarray
    eps_run0: np.ndarray
    eps_t: np.ndarray
    eps_q: np.ndarray
    eps_q0: float
    eps_run_sq: float
    eps_t_sq: float
    eps_q_sq: float
    estimate: float

    @property
    def eps_run_norm(self) -> float:
        return float(np.sqrt(self.eps_run_sq))

    @property
    def eps_t_norm(self) -> float:
        return float(np.sqrt(self.eps_t_sq))

    @property
    def eps_q_norm(self) -> float:
        return float(np.sqrt(self.eps_q_sq))


def adjoint_states(batch: TrajectoryBatch, cost: CostSpec) -> np.ndarray:
    """Candidate costates P = -(l'(v) + price) at every node, (agents, M+1)."""
    _, lv = lagrangian_grads(cost, batch.X, batch.v)
    return -(lv + batch.price[None, :])


def residuals(batch: TrajectoryBatch, cost: CostSpec) -> ResidualReport:
    m = batch.grid.steps
    dt = batch.grid.dt

    p = adjoint_states(batch, cost)
    hx, hp = hamiltonian_grads(cost, batch.X[:, :m], p[:, :m] + batch.price[None, :m])
    run_all = (p[:, 1 : m + 1] - p[:, :m]) / dt - hx  # columns k = 0..M-1
    clear_all = (-hp).mean(axis=0) - batch.supply[:m]

    _, ut_grad = terminal_cost_and_grad(cost, batch.X[:, m])
    eps_t = ut_grad - p[:, m]

    eps_run = run_all[:, 1:]
    eps_q = clear_all[1:]
    eps_run_sq = float(dt * np.sum(eps_run**2))
    eps_t_sq = float(np.sum(eps_t**2))
    eps_q_sq = float(dt * np.sum(eps_q**2))
    return ResidualReport(
        eps_run=eps_run,
        eps_run0=run_all[:, 0],
        eps_t=eps_t,
        eps_q=eps_q,
        eps_q0=float(clear_all[0]),
        eps_run_sq=eps_run_sq,
        eps_t_sq=eps_t_sq,
        eps_q_sq=eps_q_sq,
        estimate=eps_run_sq + eps_t_sq + eps_q_sq,
    )


def posterior_estimate(report: ResidualReport) -> float:
    """The scalar certificate: the three squared defect norms, summed."""
    return report.estimate
