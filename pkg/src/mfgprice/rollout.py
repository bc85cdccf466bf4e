"""Forward simulation of the agent population under the two networks.

A rollout evaluates the price network on the grid, steps every agent with
forward Euler, X_{k+1} = X_k + dt * v_k, and evaluates the control network
at each node including the final one (the terminal control only feeds the
optimality residuals, never the dynamics).  The same price path is shared
by all agents.  With a tape the whole simulation is recorded for
backpropagation; without one it runs on plain arrays, following the exact
same arithmetic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .model import SupplySpec, TimeGrid, supply_on_grid
from .networks import (
    MLP_CONTROL,
    MLP_PRICE,
    RNN_CONTROL,
    RNN_PRICE,
    ParamSet,
    TapedParams,
    mlp_eval,
    mlp_forward,
    rnn_hidden_step,
    rnn_hidden_step_eval,
    zero_hidden_state,
)

CSV_FIELDS = ("agent", "k", "t", "X", "v", "price", "Q")


class NonFiniteError(FloatingPointError):
    """A state, control, or price stopped being finite; the run diverged."""


@dataclass
class TrajectoryBatch:
    """States, controls, and prices for one population on one grid.

    Shapes: X and v are (agents, steps+1); price and supply are
    (steps+1,).  When produced on a tape, the per-node autodiff handles
    are kept so the loss can be assembled on the same tape.
    """

    grid: TimeGrid
    X: np.ndarray
    v: np.ndarray
    price: np.ndarray
    supply: np.ndarray
    tape: Tape | None = None
    x_nodes: list | None = field(default=None, repr=False)
    v_nodes: list | None = field(default=None, repr=False)
    price_nodes: list | None = field(default=None, repr=False)
    taped_params: tuple | None = field(default=None, repr=False)

    @property
    def n_agents(self) -> int:
        return self.X.shape[0]


def input_scales(grid: TimeGrid, q: np.ndarray, input_scaling: bool):
    if not input_scaling:
        return 1.0, 1.0
    return 1.0 / grid.horizon, 1.0 / max(1.0, float(np.max(np.abs(q))))


def _check_finite(a: np.ndarray, what: str, k: int | None = None):
    if not np.all(np.isfinite(a)):
        where = f" at step {k}" if k is not None else ""
        raise NonFiniteError(f"non-finite {what}{where}; aborting the rollout")


def _assemble(grid, supply_q, x_rows, v_rows, price_row, tape, price_cols):
    n = x_rows[0].shape[1] if hasattr(x_rows[0], "shape") else x_rows[0].value.shape[1]
    m1 = len(v_rows)
    X = np.empty((n, m1))
    V = np.empty((n, m1))
    for k in range(m1):
        xk = x_rows[k].value if tape is not None else x_rows[k]
        vk = v_rows[k].value if tape is not None else v_rows[k]
        X[:, k] = xk[0]
        V[:, k] = vk[0]
    return TrajectoryBatch(
        grid=grid,
        X=X,
        v=V,
        price=price_row.copy(),
        supply=supply_q.copy(),
        tape=tape,
        x_nodes=x_rows if tape is not None else None,
        v_nodes=v_rows if tape is not None else None,
        price_nodes=price_cols if tape is not None else None,
    )


def rollout_mlp(
    theta_v: ParamSet,
    theta_w: ParamSet,
    x0: np.ndarray,
    grid: TimeGrid,
    supply: SupplySpec | np.ndarray,
    tape: Tape | None = None,
    input_scaling: bool = False,
) -> TrajectoryBatch:
    """Simulate the population under the feedforward pair.

    Control input is (t_k, X_k, price_k); price input is (t_k, Q_k).
    Inputs are fed raw unless input_scaling is set, which divides t by the
    horizon and Q by its largest magnitude on the grid.
    """
    if theta_v.arch != MLP_CONTROL or theta_w.arch != MLP_PRICE:
        raise ValueError(f"expected ({MLP_CONTROL}, {MLP_PRICE}), got ({theta_v.arch}, {theta_w.arch})")
    q = supply if isinstance(supply, np.ndarray) else supply_on_grid(supply, grid)
    t = grid.nodes
    dt = grid.dt
    st, sq = input_scales(grid, q, input_scaling)
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    m = grid.steps
    price_in = np.vstack([t * st, q * sq])

    if tape is None:
        price = mlp_eval(theta_w, price_in)
        _check_finite(price, "price")
        x = x0[None, :].copy()
        x_rows, v_rows = [], []
        for k in range(m + 1):
            inp = np.concatenate(
                [np.full((1, n), t[k] * st), x, np.full((1, n), price[0, k])], axis=0
            )
            v = mlp_eval(theta_v, inp)
            x_rows.append(x)
            v_rows.append(v)
            if k < m:
                x = x + dt * v
                _check_finite(x, "state", k + 1)
        return _assemble(grid, q, x_rows, v_rows, price[0], None, None)

    tv = TapedParams(tape, theta_v)
    tw = TapedParams(tape, theta_w)
    price_node = mlp_forward(tw, price_in, tape)
    _check_finite(price_node.value, "price")
    price_cols = [ad.col(tape, price_node, k) for k in range(m + 1)]
    x = tape.constant(x0[None, :])
    x_rows, v_rows = [], []
    for k in range(m + 1):
        inp = ad.vstack(tape, [float(t[k] * st), x, price_cols[k]], width=n)
        v = mlp_forward(tv, inp, tape)
        x_rows.append(x)
        v_rows.append(v)
        if k < m:
            x = ad.axpy(tape, x, v, dt)
            _check_finite(x.value, "state", k + 1)
    batch = _assemble(grid, q, x_rows, v_rows, price_node.value[0], tape, price_cols)
    batch.taped_params = (tv, tw)
    return batch


def rollout_rnn(
    theta_v: ParamSet,
    theta_w: ParamSet,
    x0: np.ndarray,
    grid: TimeGrid,
    supply: SupplySpec | np.ndarray,
    tape: Tape | None = None,
    input_scaling: bool = False,
) -> TrajectoryBatch:
    """Simulate the population under the recurrent pair.

    Each network drives its own hidden-state chain over the supply
    sequence, starting from a zero state.  Control input is
    (t_k, X_k, price_k, a_k) and price input is (t_k, a_k), where a_k is
    the scalar summary of the respective chain.
    """
    if theta_v.arch != RNN_CONTROL or theta_w.arch != RNN_PRICE:
        raise ValueError(f"expected ({RNN_CONTROL}, {RNN_PRICE}), got ({theta_v.arch}, {theta_w.arch})")
    q = supply if isinstance(supply, np.ndarray) else supply_on_grid(supply, grid)
    t = grid.nodes
    dt = grid.dt
    st, sq = input_scales(grid, q, input_scaling)
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    m = grid.steps

    if tape is None:
        h = zero_hidden_state()
        a_w = np.empty(m + 1)
        for k in range(m + 1):
            a, h = rnn_hidden_step_eval(theta_w, q[k] * sq, h)
            a_w[k] = a[0, 0]
        price = mlp_eval(theta_w, np.vstack([t * st, a_w]))
        _check_finite(price, "price")
        x = x0[None, :].copy()
        h = zero_hidden_state()
        x_rows, v_rows = [], []
        for k in range(m + 1):
            a, h = rnn_hidden_step_eval(theta_v, q[k] * sq, h)
            inp = np.concatenate(
                [
                    np.full((1, n), t[k] * st),
                    x,
                    np.full((1, n), price[0, k]),
                    np.broadcast_to(a, (1, n)),
                ],
                axis=0,
            )
            v = mlp_eval(theta_v, inp)
            x_rows.append(x)
            v_rows.append(v)
            if k < m:
                x = x + dt * v
                _check_finite(x, "state", k + 1)
        return _assemble(grid, q, x_rows, v_rows, price[0], None, None)

    tv = TapedParams(tape, theta_v)
    tw = TapedParams(tape, theta_w)
    h = zero_hidden_state(tape)
    a_cols = []
    for k in range(m + 1):
        a, h = rnn_hidden_step(tw, q[k] * sq, h, tape)
        a_cols.append(a)
    a_row = ad.hstack(tape, a_cols)
    price_in = ad.vstack(tape, [np.asarray(t * st)[None, :], a_row], width=m + 1)
    price_node = mlp_forward(tw, price_in, tape)
    _check_finite(price_node.value, "price")
    price_cols = [ad.col(tape, price_node, k) for k in range(m + 1)]
    x = tape.constant(x0[None, :])
    h = zero_hidden_state(tape)
    x_rows, v_rows = [], []
    for k in range(m + 1):
        a, h = rnn_hidden_step(tv, q[k] * sq, h, tape)
        inp = ad.vstack(tape, [float(t[k] * st), x, price_cols[k], a], width=n)
        v = mlp_forward(tv, inp, tape)
        x_rows.append(x)
        v_rows.append(v)
        if k < m:
            x = ad.axpy(tape, x, v, dt)
            _check_finite(x.value, "state", k + 1)
    batch = _assemble(grid, q, x_rows, v_rows, price_node.value[0], tape, price_cols)
    batch.taped_params = (tv, tw)
    return batch


def rollout(theta_v, theta_w, x0, grid, supply, tape=None, input_scaling=False):
    """Dispatch on the control architecture."""
    if theta_v.arch == MLP_CONTROL:
        return rollout_mlp(theta_v, theta_w, x0, grid, supply, tape, input_scaling)
    return rollout_rnn(theta_v, theta_w, x0, grid, supply, tape, input_scaling)


def price_curve(
    theta_w: ParamSet,
    arch: str,
    grid: TimeGrid,
    supply: SupplySpec | np.ndarray,
    input_scaling: bool = False,
) -> np.ndarray:
    """Price at every node, without touching any agent state."""
    fam = {MLP_PRICE: MLP_PRICE, "mlp": MLP_PRICE, RNN_PRICE: RNN_PRICE, "rnn": RNN_PRICE}.get(arch)
    if fam is None or theta_w.arch != fam:
        raise ValueError(f"architecture {arch!r} does not match parameters {theta_w.arch!r}")
    q = supply if isinstance(supply, np.ndarray) else supply_on_grid(supply, grid)
    t = grid.nodes
    st, sq = input_scales(grid, q, input_scaling)
    if fam == MLP_PRICE:
        return mlp_eval(theta_w, np.vstack([t * st, q * sq]))[0].copy()
    h = zero_hidden_state()
    a_w = np.empty(grid.steps + 1)
    for k in range(grid.steps + 1):
        a, h = rnn_hidden_step_eval(theta_w, q[k] * sq, h)
        a_w[k] = a[0, 0]
    return mlp_eval(theta_w, np.vstack([t * st, a_w]))[0].copy()


# ---------------------------------------------------------------------------
# batch serialization: decimal CSV that round-trips float64 exactly


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def batch_to_csv(batch: TrajectoryBatch, path) -> None:
    t = batch.grid.nodes
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for i in range(batch.n_agents):
            for k in range(batch.grid.steps + 1):
                w.writerow(
                    [
                        i,
                        k,
                        _fmt(t[k]),
                        _fmt(batch.X[i, k]),
                        _fmt(batch.v[i, k]),
                        _fmt(batch.price[k]),
                        _fmt(batch.supply[k]),
                    ]
                )


def batch_from_csv(path) -> TrajectoryBatch:
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CSV_FIELDS:
            raise ValueError(f"unexpected header {header!r}")
        for row in r:
            rows.append((int(row[0]), int(row[1])) + tuple(float(x) for x in row[2:]))
    n = max(r[0] for r in rows) + 1
    m = max(r[1] for r in rows)
    horizon = next(r[2] for r in rows if r[1] == m)
    grid = TimeGrid(horizon=horizon, steps=m)
    X = np.empty((n, m + 1))
    V = np.empty((n, m + 1))
    price = np.empty(m + 1)
    supply = np.empty(m + 1)
    for agent, k, _t, xv, vv, pv, qv in rows:
        X[agent, k] = xv
        V[agent, k] = vv
        price[k] = pv
        supply[k] = qv
    return TrajectoryBatch(grid=grid, X=X, v=V, price=price, supply=supply)
