"""Ground truth to hold the networks against.

Two independent sources: the quadratic model's closed forms (explicit
price, value-function coefficients, linear feedback, Gaussian density)
and a finite-population convex solver that works for any admissible cost
by dual ascent on the market-clearing multiplier.  The two agree on
quadratic problems, which is itself a test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .model import (
    QUADRATIC,
    CostSpec,
    DomainError,
    InitialDist,
    NonConvergenceError,
    SupplySpec,
    TimeGrid,
    control_cost_curvature,
    control_from_costate,
    lagrangian_grads,
    supply_eval,
    supply_integral,
    supply_double_integral,
    supply_on_grid,
    terminal_cost_and_grad,
)


class WrongCostKind(ValueError):
    """A closed-form routine was handed a cost it has no formula for."""


def _require_quadratic(cost: CostSpec, what: str):
    if cost.kind != QUADRATIC:
        raise WrongCostKind(f"{what} exists in closed form only for quadratic costs")


# ---------------------------------------------------------------------------
# explicit price


def lq_price_fn(cost: CostSpec, supply: SupplySpec, grid: TimeGrid, mbar0: float):
    """The explicit quadratic-model price as a callable of time."""
    _require_quadratic(cost, "the explicit price")
    horizon = grid.horizon
    f_total = float(supply_integral(supply, np.array(horizon)))
    g_total = float(supply_double_integral(supply, np.array(horizon)))

    def price(t):
        t = np.asarray(t, dtype=float)
        q = supply_eval(supply, t)
        g = supply_double_integral(supply, t)
        return (
            cost.eta * (cost.kappa - mbar0) * (horizon - t)
            + cost.gamma * (cost.zeta - mbar0)
            - cost.eta * (g_total - g)
            - cost.gamma * f_total
            - cost.c * q
        )

    return price


def lq_price(cost: CostSpec, supply: SupplySpec, grid: TimeGrid, mbar0: float) -> np.ndarray:
    """The explicit price sampled at every grid node."""
    return lq_price_fn(cost, supply, grid, mbar0)(grid.nodes)


# ---------------------------------------------------------------------------
# value-function coefficients


@dataclass
class LQCoefficients:
    """Time samples of u(t,x) = a0(t) + a1(t)x + a2(t)x^2.

    Node arrays live on `grid`; the underscore splines interpolate the
    fine integration path and give dense access for collocation checks
    and density transport.
    """

    grid: TimeGrid
    cost: CostSpec
    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    _spl: tuple = field(repr=False, default=None)
    _price: object = field(repr=False, default=None)

    def coeffs_at(self, t):
        return self._spl[0](t), self._spl[1](t), self._spl[2](t)

    def u(self, t, x):
        a0, a1, a2 = self.coeffs_at(t)
        return a0 + a1 * x + a2 * x**2

    def u_x(self, t, x):
        _, a1, a2 = self.coeffs_at(t)
        return a1 + 2.0 * a2 * x

    def u_t(self, t, x):
        # spline derivatives of the integrated paths, on purpose: an
        # honest rate, not the ODE right-hand side echoed back
        d0, d1, d2 = (s.derivative() for s in self._spl)
        return d0(t) + d1(t) * x + d2(t) * x**2

    def price_at(self, t):
        return self._price(t)


def _as_price_fn(price, grid: TimeGrid):
    if callable(price):
        return price
    samples = np.asarray(price, dtype=float)
    if samples.shape != (grid.steps + 1,):
        raise DomainError(
            f"price samples have shape {samples.shape}, expected ({grid.steps + 1},)"
        )
    return CubicSpline(grid.nodes, samples)


def lq_coefficients(
    cost: CostSpec, price, grid: TimeGrid, substeps: int = 200
) -> LQCoefficients:
    """Backward integration of the coefficient system.

    Substituting the quadratic ansatz into the value equation and
    matching powers of x gives

        a2' = (2/c) a2^2 - eta/2
        a1' = (2/c) a2 (price + a1) + eta*kappa
        a0' = (price + a1)^2 / (2c) - eta*kappa^2 / 2

    with terminal values gamma/2, -gamma*zeta, gamma*zeta^2/2.  {price}
    is a node-sample array or a callable of time.  Integrated by RK4 from
    the horizon on a grid `substeps` times finer than the node grid.
    """
    _require_quadratic(cost, "the coefficient system")
    if substeps < 1:
        raise DomainError("substeps must be at least 1")
    price_fn = _as_price_fn(price, grid)
    c, eta, kappa = cost.c, cost.eta, cost.kappa

    def rhs(t, y):
        a0, a1, a2 = y
        pa = price_fn(t) + a1
        return np.array(
            [
                pa**2 / (2.0 * c) - eta * kappa**2 / 2.0,
                (2.0 / c) * a2 * pa + eta * kappa,
                (2.0 / c) * a2**2 - eta / 2.0,
            ]
        )

    n_fine = grid.steps * substeps
    t_fine = np.linspace(0.0, grid.horizon, n_fine + 1)
    h = grid.horizon / n_fine
    path = np.empty((n_fine + 1, 3))
    path[n_fine] = (
        cost.gamma * cost.zeta**2 / 2.0,
        -cost.gamma * cost.zeta,
        cost.gamma / 2.0,
    )
    for j in range(n_fine, 0, -1):
        path[j - 1] = _rk4_step(rhs, t_fine[j], path[j], -h)

    spl = tuple(CubicSpline(t_fine, path[:, i]) for i in range(3))
    nodes = path[::substeps]
    return LQCoefficients(
        grid=grid,
        cost=cost,
        a0=nodes[:, 0].copy(),
        a1=nodes[:, 1].copy(),
        a2=nodes[:, 2].copy(),
        _spl=spl,
        _price=price_fn,
    )


def _rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2.0, y + (h / 2.0) * k1)
    k3 = rhs(t + h / 2.0, y + (h / 2.0) * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def hj_collocation_residual(
    cost: CostSpec,
    coeffs: LQCoefficients,
    t_points: int = 20,
    x_points: int = 20,
    x_range: tuple = (-1.0, 1.0),
) -> float:
    """Largest defect of -u_t + H(x, price + u_x) over a (t, x) lattice."""
    _require_quadratic(cost, "the collocation residual")
    ts = np.linspace(0.0, coeffs.grid.horizon, t_points)
    xs = np.linspace(x_range[0], x_range[1], x_points)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    p = coeffs.price_at(tt) + coeffs.u_x(tt, xx)
    ham = p**2 / (2.0 * cost.c) - cost.eta / 2.0 * (xx - cost.kappa) ** 2
    return float(np.max(np.abs(-coeffs.u_t(tt, xx) + ham)))


# ---------------------------------------------------------------------------
# optimal feedback and density transport


def lq_feedback(coeffs: LQCoefficients, price: np.ndarray, k: int, x):
    """Optimal control -(price_k + a1_k + 2 a2_k x)/c at node k."""
    if not 0 <= k <= coeffs.grid.steps:
        raise DomainError(f"node {k} outside 0..{coeffs.grid.steps}")
    x = np.asarray(x, dtype=float)
    return -(price[k] + coeffs.a1[k] + 2.0 * coeffs.a2[k] * x) / coeffs.cost.c


def lq_feedback_dense(coeffs: LQCoefficients, t, x):
    """Optimal control at arbitrary (t, x) through the spline paths."""
    _, a1, a2 = coeffs.coeffs_at(t)
    return -(coeffs.price_at(t) + a1 + 2.0 * a2 * np.asarray(x, dtype=float)) / coeffs.cost.c


@dataclass
class GaussianPath:
    """Node samples of a Gaussian population: its mean and its spread."""

    mean: np.ndarray
    std: np.ndarray


def lq_density(
    dist: InitialDist, coeffs: LQCoefficients, price, grid: TimeGrid, substeps: int = 1
) -> GaussianPath:
    """Push the initial Gaussian through the linear feedback flow.

    The feedback is affine in x, so the population stays Gaussian:

        mean' = -(price + a1 + 2 a2 mean)/c      std' = -(2 a2 / c) std

    integrated by RK4.  At the closed-form price the mean drift equals
    the supply, so mean(T) lands on mean(0) plus the total supply.
    """
    _require_quadratic(coeffs.cost, "Gaussian transport")
    price_fn = _as_price_fn(price, grid)
    c = coeffs.cost.c

    def rhs(t, y):
        _, a1, a2 = coeffs.coeffs_at(t)
        return np.array(
            [
                -(price_fn(t) + a1 + 2.0 * a2 * y[0]) / c,
                -(2.0 * a2 / c) * y[1],
            ]
        )

    n_fine = grid.steps * substeps
    t_fine = np.linspace(0.0, grid.horizon, n_fine + 1)
    h = grid.horizon / n_fine
    path = np.empty((n_fine + 1, 2))
    path[0] = (dist.mean, dist.std)
    for j in range(n_fine):
        path[j + 1] = _rk4_step(rhs, t_fine[j], path[j], h)
    nodes = path[::substeps]
    return GaussianPath(mean=nodes[:, 0].copy(), std=nodes[:, 1].copy())


# ---------------------------------------------------------------------------
# finite-population benchmark


@dataclass
class NPlayerSolution:
    """Dual-ascent output: clearing price plus every player's best response.

    `certified` records whether the balance residual reached the requested
    tolerance; if not, the best iterate seen is returned with its residual.
    """

    grid: TimeGrid
    price: np.ndarray
    X: np.ndarray
    v: np.ndarray
    supply: np.ndarray
    balance_residual: float
    iterations: int
    certified: bool
    residual_history: list = field(repr=False, default_factory=list)

    def to_batch(self):
        from .rollout import TrajectoryBatch

        return TrajectoryBatch(
            grid=self.grid,
            X=self.X.copy(),
            v=self.v.copy(),
            price=self.price.copy(),
            supply=self.supply.copy(),
        )


def _supply_nodes(supply, grid: TimeGrid) -> np.ndarray:
    if isinstance(supply, SupplySpec):
        return supply_on_grid(supply, grid)
    q = np.asarray(supply, dtype=float)
    if q.shape != (grid.steps + 1,):
        raise DomainError(
            f"supply samples have shape {q.shape}, expected ({grid.steps + 1},)"
        )
    return q


def _response_quadratic(cost: CostSpec, x0, prices, grid: TimeGrid):
    """Exact best responses under a quadratic cost, one backward sweep.

    The first-order system is linear, so the costate is affine in the
    state: P_k = alpha_k X_k + beta_k with scalar recursions shared by
    the whole population.
    """
    m, dt, c = grid.steps, grid.dt, cost.c
    alpha = np.empty(m + 1)
    beta = np.empty(m + 1)
    alpha[m] = cost.gamma
    beta[m] = -cost.gamma * cost.zeta
    for k in range(m - 1, -1, -1):
        den = 1.0 + (dt / c) * alpha[k + 1]
        alpha[k] = (alpha[k + 1] + dt * cost.eta) / den
        beta[k] = (beta[k + 1] - (dt / c) * alpha[k + 1] * prices[k] - dt * cost.eta * cost.kappa) / den

    n = x0.size
    X = np.empty((n, m + 1))
    v = np.empty((n, m))
    X[:, 0] = x0
    for k in range(m):
        v[:, k] = -(alpha[k] * X[:, k] + beta[k] + prices[k]) / c
        X[:, k + 1] = X[:, k] + dt * v[:, k]
    return X, v


def _el_gap(cost: CostSpec, x0, prices, grid: TimeGrid, v):
    """Stationarity defect of the control paths, batched over players."""
    m, dt = grid.steps, grid.dt
    X = x0[:, None] + dt * np.concatenate(
        [np.zeros((v.shape[0], 1)), np.cumsum(v, axis=1)], axis=1
    )
    vprime = cost.eta * (X[:, :m] - cost.kappa)
    tail = np.flip(np.cumsum(np.flip(vprime, axis=1), axis=1), axis=1)
    _, ut_grad = terminal_cost_and_grad(cost, X[:, m])
    costate = ut_grad[:, None] + dt * tail
    _, lprime = lagrangian_grads(cost, X[:, :m], v)
    return lprime + prices[None, :] + costate, X


def _response_newton(cost, x0, prices, grid, v_start, tol, max_iter):
    """Damped Newton on the stationarity system, batched over players."""
    m, dt = grid.steps, grid.dt
    n = x0.size
    kk = np.arange(m)
    dense = cost.gamma * dt + cost.eta * dt**2 * np.maximum(
        0, m - np.maximum(kk[:, None], kk[None, :] + 1)
    ).astype(float)
    v = v_start.copy()
    gap, X = _el_gap(cost, x0, prices, grid, v)
    norm = np.max(np.abs(gap), axis=1)
    for _ in range(max_iter):
        if np.all(norm <= tol):
            return X, v
        jac = np.broadcast_to(dense, (n, m, m)).copy()
        jac[:, kk, kk] += control_cost_curvature(cost, v)
        step = np.linalg.solve(jac, -gap[:, :, None])[:, :, 0]

        scale = np.ones(n)
        for _ in range(40):
            trial = v + scale[:, None] * step
            gap_t, X_t = _el_gap(cost, x0, prices, grid, trial)
            norm_t = np.max(np.abs(gap_t), axis=1)
            good = (norm_t < norm) | (norm <= tol)
            if np.all(good):
                break
            scale[~good] /= 2.0
        v = v + scale[:, None] * step
        gap, X = _el_gap(cost, x0, prices, grid, v)
        norm = np.max(np.abs(gap), axis=1)
    if np.all(norm <= tol):
        return X, v
    raise NonConvergenceError(
        f"player subproblem stalled at gap {np.max(norm):.3e} (tol {tol:.1e})"
    )


def _terminal_price(cost: CostSpec, x_final: np.ndarray, q_final: float, guess: float):
    """Clearing multiplier at the horizon, where the costate is pinned."""
    _, p_final = terminal_cost_and_grad(cost, x_final)
    if cost.kind == QUADRATIC:
        w = -float(np.mean(p_final)) - cost.c * q_final
        return w, control_from_costate(cost, p_final + w)

    def excess(w):
        return float(np.mean(control_from_costate(cost, p_final + w))) - q_final

    lo, hi = guess - 1.0, guess + 1.0
    for _ in range(80):
        if excess(lo) > 0.0:
            break
        lo -= max(1.0, hi - lo)
    for _ in range(80):
        if excess(hi) < 0.0:
            break
        hi += max(1.0, hi - lo)
    w = brentq(excess, lo, hi, xtol=1e-14)
    return w, control_from_costate(cost, p_final + w)


def nplayer_solve(
    cost: CostSpec,
    x0,
    supply,
    grid: TimeGrid,
    tol: float = 1e-8,
    rho: float | None = None,
    max_outer: int = 500,
    inner_tol: float = 1e-12,
    inner_max: int = 50,
) -> NPlayerSolution:
    """Clearing price for a finite population by dual ascent.

    Inner step: every player best-responds to the current price (exact
    sweep for quadratic costs, damped Newton otherwise).  Outer step:
    the price moves along the balance defect, step size `rho` (default
    c/2, halved whenever the defect grows).  Supply may be a SupplySpec
    or a node-sample array.  Terminates once the defect's sup norm over
    nodes 0..M-1 is at most `tol`; if the iteration budget runs out the
    best iterate is returned with certified=False.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.ndim != 1 or x0.size < 1:
        raise DomainError("x0 must be a one-dimensional sample of positions")
    q = _supply_nodes(supply, grid)
    m = grid.steps
    if rho is None:
        rho = 0.5 * cost.c
    if rho <= 0.0 or tol <= 0.0:
        raise DomainError("rho and tol must be positive")

    prices = np.zeros(m)
    v = np.zeros((x0.size, m))
    history = []
    best = None
    prev_gap = np.inf
    certified = False
    iterations = 0

    for _ in range(max_outer):
        iterations += 1
        if cost.kind == QUADRATIC:
            X, v = _response_quadratic(cost, x0, prices, grid)
        else:
            X, v = _response_newton(cost, x0, prices, grid, v, inner_tol, inner_max)
        defect = v.mean(axis=0) - q[:m]
        gap = float(np.max(np.abs(defect)))
        history.append(gap)
        if best is None or gap < best[0]:
            best = (gap, prices.copy(), X.copy(), v.copy())
        if gap <= tol:
            certified = True
            break
        if gap > prev_gap:
            rho /= 2.0
        prev_gap = gap
        prices = prices + rho * defect

    gap, prices, X, v = best
    w_final, v_final = _terminal_price(cost, X[:, m], q[m], prices[m - 1])
    return NPlayerSolution(
        grid=grid,
        price=np.concatenate([prices, [w_final]]),
        X=X,
        v=np.concatenate([v, v_final[:, None]], axis=1),
        supply=q,
        balance_residual=gap,
        iterations=iterations,
        certified=certified,
        residual_history=history,
    )
