"""Cost structures, supply dynamics, and initial-position sampling.

Everything here is a pure function of its arguments; float64 throughout.
The running cost is separable, L(x, v) = V(x) + l(v), with a quadratic
state penalty V(x) = eta/2 (x - kappa)^2 in both cost families.  The
Hamiltonian is the Legendre transform H(x, p) = sup_v {-p v - L(x, v)},
so H(x, p) = Hc(p) - V(x) with Hc convex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUADRATIC = "quadratic"
QUARTIC = "quartic"

CONSTANT_MEAN = "constant-mean"
OSCILLATING_MEAN = "oscillating-mean"

# angular frequency of the oscillating mean-supply term
_OMEGA = 3.0 * np.pi


class DomainError(ValueError):
    """Argument outside the window where a closed form is valid."""


class NonConvergenceError(RuntimeError):
    """Safeguarded Newton ran out of iterations; indicates a bug, not data."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt over [0, horizon] with `steps` intervals."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 2:
            raise ValueError(f"steps must be at least 2, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        # linspace pins the last node to the horizon exactly
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class CostSpec:
    """Parameters of the running and terminal costs.

    kind 'quadratic':  L = eta/2 (x-kappa)^2 + c/2 v^2
    kind 'quartic':    L = eta/2 (x-kappa)^2 + c/4 v^2 + c/8 (v-1)^4
    terminal cost:     u_T(x) = gamma/2 (x-zeta)^2
    """

    kind: str
    eta: float
    kappa: float
    c: float
    gamma: float
    zeta: float

    def __post_init__(self):
        if self.kind not in (QUADRATIC, QUARTIC):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not self.c > 0.0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.eta < 0.0 or self.gamma < 0.0:
            raise ValueError("eta and gamma must be nonnegative")


@dataclass(frozen=True)
class SupplySpec:
    """Supply Q solves Q' = Qbar - Q, Q(0) = q0, with Qbar set by `kind`."""

    kind: str
    q0: float

    def __post_init__(self):
        if self.kind not in (CONSTANT_MEAN, OSCILLATING_MEAN):
            raise ValueError(f"unknown supply kind {self.kind!r}")


@dataclass(frozen=True)
class InitialDist:
    """Gaussian distribution of initial positions."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0.0:
            raise ValueError(f"std must be positive, got {self.std}")


# ---------------------------------------------------------------------------
# running cost


def lagrangian_eval(cost: CostSpec, x, v):
    """Running cost L(x, v); broadcasts over array arguments."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    state = 0.5 * cost.eta * (x - cost.kappa) ** 2
    if cost.kind == QUADRATIC:
        return state + 0.5 * cost.c * v**2
    return state + 0.25 * cost.c * v**2 + 0.125 * cost.c * (v - 1.0) ** 4


def lagrangian_grads(cost: CostSpec, x, v):
    """Partial derivatives (L_x, L_v); each keeps the shape of its argument."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    lx = cost.eta * (x - cost.kappa)
    if cost.kind == QUADRATIC:
        lv = cost.c * v
    else:
        lv = 0.5 * cost.c * v + 0.5 * cost.c * (v - 1.0) ** 3
    return lx, lv


def control_cost_curvature(cost: CostSpec, v):
    """Second derivative of the control part, l''(v) >= c/2 > 0."""
    v = np.asarray(v, dtype=float)
    if cost.kind == QUADRATIC:
        return np.full_like(v, cost.c)
    return 0.5 * cost.c + 1.5 * cost.c * (v - 1.0) ** 2


def terminal_cost_and_grad(cost: CostSpec, x):
    x = np.asarray(x, dtype=float)
    return 0.5 * cost.gamma * (x - cost.zeta) ** 2, cost.gamma * (x - cost.zeta)


# ---------------------------------------------------------------------------
# Legendre transform


def control_from_costate(cost: CostSpec, p):
    """The maximizer v*(p) of -p v - l(v), i.e. the root of l'(v) = -p.

    Quadratic costs invert in closed form.  The quartic slope is a strictly
    increasing cubic, solved by bracketed Newton to |l'(v) + p| <= 1e-12.
    """
    p = np.asarray(p, dtype=float)
    if cost.kind == QUADRATIC:
        return -p / cost.c
    # l'(v) = c/2 v + c/2 (v-1)^3 = -p  <=>  v + (v-1)^3 = s,  s = -2p/c
    s = -2.0 * p / cost.c
    return _solve_shifted_cubic(s, f_tol=2.0e-12 / cost.c)


def _solve_shifted_cubic(s, f_tol):
    """Root of v + (v-1)^3 = s, elementwise.  The left side has slope >= 1."""
    s = np.asarray(s, dtype=float)
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    if not np.all(np.isfinite(s)):
        raise NonConvergenceError("non-finite costate passed to the control inverse")
    lo = -np.abs(s) - 2.0
    hi = np.abs(s) + 2.0
    # the bracket is valid analytically; grow defensively if rounding bites
    for _ in range(60):
        bad = (lo + (lo - 1.0) ** 3 - s > 0) | (hi + (hi - 1.0) ** 3 - s < 0)
        if not bad.any():
            break
        lo = np.where(bad, 2.0 * lo - 2.0, lo)
        hi = np.where(bad, 2.0 * hi + 2.0, hi)
    v = 0.5 * (lo + hi)
    for _ in range(100):
        f = v + (v - 1.0) ** 3 - s
        if np.all(np.abs(f) <= f_tol):
            return float(v[0]) if scalar else v
        pos = f > 0.0
        hi = np.where(pos, v, hi)
        lo = np.where(pos, lo, v)
        step = f / (1.0 + 3.0 * (v - 1.0) ** 2)
        cand = v - step
        inside = (cand > lo) & (cand < hi)
        v = np.where(inside, cand, 0.5 * (lo + hi))
    raise NonConvergenceError("control inverse did not reach tolerance in 100 iterations")


def hamiltonian_grads(cost: CostSpec, x, p):
    """Gradients (H_x, H_p) of H(x, p) = sup_v {-p v - L(x, v)}.

    By the envelope theorem H_p = -v*(p) and H_x = -V'(x).
    """
    x = np.asarray(x, dtype=float)
    hx = -cost.eta * (x - cost.kappa)
    hp = -control_from_costate(cost, p)
    return hx, hp


def hamiltonian_eval(cost: CostSpec, x, p):
    """H(x, p), evaluated through the maximizer."""
    v = control_from_costate(cost, p)
    return -p * v - lagrangian_eval(cost, x, v)


# ---------------------------------------------------------------------------
# supply


def supply_qbar(supply: SupplySpec, t):
    """Mean supply Qbar driving Q' = Qbar - Q."""
    t = np.asarray(t, dtype=float)
    if supply.kind == CONSTANT_MEAN:
        return np.ones_like(t)
    return 7.0 * np.exp(-t) * np.sin(_OMEGA * t)


def supply_eval(supply: SupplySpec, t, horizon: float | None = None):
    """Closed-form solution Q(t) of Q' = Qbar - Q, Q(0) = q0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12):
        raise DomainError("supply is defined for t >= 0")
    if horizon is not None and np.any(t > horizon + 1e-12):
        raise DomainError(f"supply requested beyond the horizon {horizon}")
    if supply.kind == CONSTANT_MEAN:
        return 1.0 + (supply.q0 - 1.0) * np.exp(-t)
    w = _OMEGA
    return np.exp(-t) * (supply.q0 + 7.0 * (1.0 - np.cos(w * t)) / w)


def supply_integral(supply: SupplySpec, t):
    """F(t) = integral of Q over [0, t], in closed form."""
    t = np.asarray(t, dtype=float)
    if supply.kind == CONSTANT_MEAN:
        return t + (supply.q0 - 1.0) * (1.0 - np.exp(-t))
    w = _OMEGA
    a = supply.q0 + 7.0 / w
    b = 7.0 / (w * (1.0 + w * w))
    return a * (1.0 - np.exp(-t)) - b * (np.exp(-t) * (w * np.sin(w * t) - np.cos(w * t)) + 1.0)


def supply_double_integral(supply: SupplySpec, t):
    """G(t) = integral of F over [0, t], so that int_t^T F = G(T) - G(t)."""
    t = np.asarray(t, dtype=float)
    if supply.kind == CONSTANT_MEAN:
        return 0.5 * t**2 + (supply.q0 - 1.0) * (t - 1.0 + np.exp(-t))
    w = _OMEGA
    a = supply.q0 + 7.0 / w
    b = 7.0 / (w * (1.0 + w * w))
    # I(t) = int_0^t e^{-r} (w sin wr - cos wr) dr
    i_t = (w * w - 1.0 - np.exp(-t) * (2.0 * w * np.sin(w * t) + (w * w - 1.0) * np.cos(w * t))) / (1.0 + w * w)
    return a * (t - 1.0 + np.exp(-t)) - b * (t + i_t)


def supply_on_grid(supply: SupplySpec, grid: TimeGrid) -> np.ndarray:
    return supply_eval(supply, grid.nodes, horizon=grid.horizon)


# ---------------------------------------------------------------------------
# initial positions


def sample_initial_positions(dist: InitialDist, n: int, seed) -> np.ndarray:
    """Draw n starting positions; a fixed seed fixes the sample."""
    if n < 1:
        raise ValueError(f"need at least one agent, got n={n}")
    rng = np.random.default_rng(seed)
    return rng.normal(dist.mean, dist.std, size=n)
