"""Adversarial training of the control and price networks.

The two networks play a saddle-point game: the sample loss

    (1/N) sum_i [ sum_{k<M} dt (L(X_ik, v_ik) + price_k (v_ik - Q_k))
                  + u_T(X_iM) ]

is minimized over the control weights and maximized over the price
weights.  Each iteration draws a fresh batch of initial positions, takes
one Adam descent step on the control network, re-simulates the same batch
under the updated controls, and takes one Adam ascent step on the price
network.  The price weights act as the multiplier of the market-clearing
constraint: on a balanced batch (controls matching supply at every node)
the loss does not depend on them at all.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .estimator import residuals
from .model import (
    QUADRATIC,
    CostSpec,
    InitialDist,
    SupplySpec,
    TimeGrid,
    supply_on_grid,
)
from .networks import (
    MLP_CONTROL,
    MLP_PRICE,
    RNN_CONTROL,
    RNN_PRICE,
    init_params,
)
from .optim import AdamState, adam_step
from .rollout import NonFiniteError, TrajectoryBatch, rollout

ARCH_FAMILIES = {
    "mlp": (MLP_CONTROL, MLP_PRICE),
    "rnn": (RNN_CONTROL, RNN_PRICE),
}


@dataclass
class TrainConfig:
    cost: CostSpec
    supply: SupplySpec
    init: InitialDist
    grid: TimeGrid
    arch: str = "mlp"
    iterations: int = 200_000
    sample_size: int = 10
    epoch_length: int = 500
    lr_control: float = 1e-3
    lr_price: float = 1e-3
    seed: int = 0
    input_scaling: bool = False
    # optional price path to report errors against; compared over its length
    reference_price: np.ndarray | None = None

    def __post_init__(self):
        if self.arch not in ARCH_FAMILIES:
            raise ValueError(f"unknown architecture family {self.arch!r}")
        if self.iterations < 1 or self.sample_size < 1 or self.epoch_length < 1:
            raise ValueError("iterations, sample_size, and epoch_length must be positive")


@dataclass
class EpochRecord:
    epoch: int
    iteration: int
    loss: float
    eps_run_norm: float
    eps_t_norm: float
    eps_q_norm: float
    estimate: float
    price_l2_err: float
    price_linf_err: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    aborted: bool = False


def _lagrangian_node(tape: Tape, cost: CostSpec, x: Node, v: Node) -> Node:
    state = ad.scale(tape, ad.square(tape, ad.sub(tape, x, cost.kappa)), 0.5 * cost.eta)
    if cost.kind == QUADRATIC:
        return ad.add(tape, state, ad.scale(tape, ad.square(tape, v), 0.5 * cost.c))
    quad = ad.scale(tape, ad.square(tape, v), 0.25 * cost.c)
    quart = ad.scale(
        tape, ad.square(tape, ad.square(tape, ad.sub(tape, v, 1.0))), 0.125 * cost.c
    )
    return ad.add(tape, state, ad.add(tape, quad, quart))


def loss_eval(batch: TrajectoryBatch, cost: CostSpec) -> Node:
    """The saddle-point loss of one batch, as a 0-d node.

    On a taped batch the node lives on the batch's tape and can be
    differentiated; a plain batch is wrapped in a throwaway tape so only
    .value is meaningful.
    """
    m = batch.grid.steps
    n = batch.n_agents
    dt = batch.grid.dt
    tape = batch.tape
    if tape is not None:
        x_nodes, v_nodes, p_nodes = batch.x_nodes, batch.v_nodes, batch.price_nodes
    else:
        tape = Tape()
        x_nodes = [tape.constant(batch.X[:, k][None, :]) for k in range(m + 1)]
        v_nodes = [tape.constant(batch.v[:, k][None, :]) for k in range(m + 1)]
        p_nodes = [tape.constant(batch.price[k : k + 1].reshape(1, 1)) for k in range(m + 1)]

    x_run = ad.vstack(tape, x_nodes[:m], width=n)
    v_run = ad.vstack(tape, v_nodes[:m], width=n)
    w_col = ad.vstack(tape, p_nodes[:m], width=1)
    q_col = batch.supply[:m][:, None]

    lag = _lagrangian_node(tape, cost, x_run, v_run)
    clearing = ad.mul(tape, w_col, ad.sub(tape, v_run, q_col))
    running = ad.sum_all(tape, ad.add(tape, lag, clearing))

    terminal = ad.sum_all(
        tape,
        ad.scale(
            tape,
            ad.square(tape, ad.sub(tape, x_nodes[m], cost.zeta)),
            0.5 * cost.gamma,
        ),
    )
    return ad.add(
        tape, ad.scale(tape, running, dt / n), ad.scale(tape, terminal, 1.0 / n)
    )


class Trainer:
    """Owns the parameters, optimizer states, and sampling stream."""

    def __init__(self, config: TrainConfig):
        self.config = config
        arch_v, arch_w = ARCH_FAMILIES[config.arch]
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.theta_v = init_params(arch_v, seeds[0])
        self.theta_w = init_params(arch_w, seeds[1])
        self.rng = np.random.default_rng(seeds[2])
        self.adam_v = AdamState.for_params(self.theta_v, lr=config.lr_control)
        self.adam_w = AdamState.for_params(self.theta_w, lr=config.lr_price)
        self.supply_nodes = supply_on_grid(config.supply, config.grid)
        self.iteration = 0
        self.last_loss = np.nan
        self.last_batch: TrajectoryBatch | None = None

    def _sample(self) -> np.ndarray:
        c = self.config
        return self.rng.normal(c.init.mean, c.init.std, size=c.sample_size)

    def step(self) -> float:
        """One adversarial iteration: descend controls, then ascend prices.

        Both rollouts of the iteration share one freshly drawn batch of
        initial positions.
        """
        c = self.config
        x0 = self._sample()

        tape = Tape()
        batch = rollout(
            self.theta_v, self.theta_w, x0, c.grid, self.supply_nodes, tape, c.input_scaling
        )
        loss = loss_eval(batch, c.cost)
        ad.backward(tape, loss)
        tv, _ = batch.taped_params
        adam_step(self.adam_v, self.theta_v, tv.grads(), "descent")

        tape = Tape()
        batch = rollout(
            self.theta_v, self.theta_w, x0, c.grid, self.supply_nodes, tape, c.input_scaling
        )
        loss = loss_eval(batch, c.cost)
        ad.backward(tape, loss)
        _, tw = batch.taped_params
        adam_step(self.adam_w, self.theta_w, tw.grads(), "ascent")

        self.iteration += 1
        self.last_loss = float(loss.value)
        self.last_batch = batch
        return self.last_loss

    def epoch_record(self, epoch: int, seconds: float) -> EpochRecord:
        """Residual norms and price errors on the current training batch."""
        c = self.config
        rep = residuals(self.last_batch, c.cost)
        l2 = linf = np.nan
        if c.reference_price is not None:
            ref = np.asarray(c.reference_price, dtype=float)
            nn = self.last_batch.price[: ref.size]
            diff = nn - ref
            linf = float(np.max(np.abs(diff)))
            l2 = float(np.sqrt(c.grid.dt * np.sum(diff**2)))
        return EpochRecord(
            epoch=epoch,
            iteration=self.iteration,
            loss=self.last_loss,
            eps_run_norm=rep.eps_run_norm,
            eps_t_norm=rep.eps_t_norm,
            eps_q_norm=rep.eps_q_norm,
            estimate=rep.estimate,
            price_l2_err=l2,
            price_linf_err=linf,
            seconds=seconds,
        )


def train_step(trainer: Trainer) -> Trainer:
    """Advance the trainer by one iteration; returns the same object."""
    trainer.step()
    return trainer


def run_loop(trainer: Trainer, on_epoch=None) -> TrainLog:
    """Drive a trainer to its configured iteration count.

    An epoch record is appended every `epoch_length` iterations and at the
    final iteration.  A diverged rollout stops the run and the partial log
    is re-raised attached to the error.
    """
    config = trainer.config
    log = TrainLog()
    t0 = time.perf_counter()
    try:
        for j in range(trainer.iteration + 1, config.iterations + 1):
            trainer.step()
            if j % config.epoch_length == 0 or j == config.iterations:
                epoch = (j + config.epoch_length - 1) // config.epoch_length
                rec = trainer.epoch_record(epoch, time.perf_counter() - t0)
                log.records.append(rec)
                if on_epoch is not None:
                    on_epoch(rec, trainer.theta_v, trainer.theta_w)
    except NonFiniteError as err:
        log.aborted = True
        err.partial_log = log
        err.partial_params = (trainer.theta_v, trainer.theta_w)
        raise
    return log


def train(config: TrainConfig, on_epoch=None):
    """Run the full loop; returns (theta_v, theta_w, TrainLog)."""
    trainer = Trainer(config)
    log = run_loop(trainer, on_epoch)
    return trainer.theta_v, trainer.theta_w, log
