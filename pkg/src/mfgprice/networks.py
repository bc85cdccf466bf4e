"""Parameter containers and forward passes for the control and price networks.

Four fixed architectures.  Feedforward variants are three-layer
perceptrons, sigmoid on the two hidden layers and identity on the output:

    mlp_control : 64x3 -> 64x64 -> 1x64,   input (t, X, price)
    mlp_price   : 32x2 -> 32x32 -> 1x32,   input (t, Q)

Recurrent variants keep the same trunk but append a hidden-state block
driven by the supply sequence.  The block maps (Q_k, h_{k-1}) in R^33 to
h_k in R^32 through a sigmoid layer, and summarizes h_k into a scalar
a_k = sigmoid(W_h2 h_k + b_h2) that joins the trunk input:

    rnn_control : trunk 64x4 ..., input (t, X, price, a)
    rnn_price   : trunk 32x2 ..., input (t, a)

The initial hidden state is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import Node, Tape, dense, vstack

HIDDEN_WIDTH = 32

MLP_CONTROL = "mlp_control"
MLP_PRICE = "mlp_price"
RNN_CONTROL = "rnn_control"
RNN_PRICE = "rnn_price"

LAYER_SHAPES = {
    MLP_CONTROL: ((64, 3), (64, 64), (1, 64)),
    MLP_PRICE: ((32, 2), (32, 32), (1, 32)),
    RNN_CONTROL: ((64, 4), (64, 64), (1, 64)),
    RNN_PRICE: ((32, 2), (32, 32), (1, 32)),
}

HIDDEN_SHAPES = ((HIDDEN_WIDTH, HIDDEN_WIDTH + 1), (1, HIDDEN_WIDTH))

_RECURRENT = (RNN_CONTROL, RNN_PRICE)


@dataclass
class HiddenBlock:
    w1: np.ndarray  # (32, 33), acts on (Q_k, h_{k-1})
    b1: np.ndarray  # (32,)
    w2: np.ndarray  # (1, 32)
    b2: np.ndarray  # (1,)


@dataclass
class ParamSet:
    """All weights of one network, in layer order then hidden block."""

    arch: str
    layers: list  # [(W, b), ...]
    hidden: HiddenBlock | None = None

    def items(self):
        """(name, array) pairs in the canonical order."""
        for i, (w, b) in enumerate(self.layers):
            yield f"layer{i}.w", w
            yield f"layer{i}.b", b
        if self.hidden is not None:
            yield "hidden.w1", self.hidden.w1
            yield "hidden.b1", self.hidden.b1
            yield "hidden.w2", self.hidden.w2
            yield "hidden.b2", self.hidden.b2

    def copy(self) -> "ParamSet":
        layers = [(w.copy(), b.copy()) for w, b in self.layers]
        hidden = None
        if self.hidden is not None:
            hidden = HiddenBlock(
                self.hidden.w1.copy(),
                self.hidden.b1.copy(),
                self.hidden.w2.copy(),
                self.hidden.b2.copy(),
            )
        return ParamSet(self.arch, layers, hidden)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.items()])

    def from_vector(self, vec: np.ndarray) -> None:
        """Overwrite all arrays from a flat vector (inverse of to_vector)."""
        off = 0
        for _, a in self.items():
            a.flat[:] = vec[off : off + a.size]
            off += a.size
        if off != vec.size:
            raise ValueError(f"vector of size {vec.size}, parameters need {off}")


def init_params(arch: str, seed) -> ParamSet:
    """Glorot-uniform weights, zero biases; the seed fixes every entry."""
    if arch not in LAYER_SHAPES:
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)

    def glorot(rows, cols):
        lim = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-lim, lim, size=(rows, cols))

    layers = [(glorot(r, c), np.zeros(r)) for r, c in LAYER_SHAPES[arch]]
    hidden = None
    if arch in _RECURRENT:
        (r1, c1), (r2, c2) = HIDDEN_SHAPES
        hidden = HiddenBlock(glorot(r1, c1), np.zeros(r1), glorot(r2, c2), np.zeros(r2))
    return ParamSet(arch, layers, hidden)


class TapedParams:
    """Leaf nodes for one ParamSet on one tape.

    Reusing the same TapedParams for every evaluation inside a rollout is
    what makes adjoints from all time steps sum into one gradient.
    """

    def __init__(self, tape: Tape, params: ParamSet):
        self.params = params
        self.nodes = {name: tape.leaf(a) for name, a in params.items()}

    def node(self, name: str) -> Node:
        return self.nodes[name]

    def grads(self) -> dict:
        """Gradient arrays keyed like ParamSet.items(); zeros where unused."""
        out = {}
        for name, a in self.params.items():
            g = self.nodes[name].grad
            out[name] = np.zeros_like(a) if g is None else g
        return out


def _as_taped(params, tape):
    return params if isinstance(params, TapedParams) else TapedParams(tape, params)


def mlp_forward(params, x, tape: Tape) -> Node:
    """Trunk evaluation on the tape; x is (in_dim, batch)."""
    tp = _as_taped(params, tape)
    n = len(tp.params.layers)
    h = x if isinstance(x, Node) else tape.constant(x)
    for i in range(n):
        act = "identity" if i == n - 1 else "sigmoid"
        h = dense(tape, tp.node(f"layer{i}.w"), h, tp.node(f"layer{i}.b"), act)
    return h


def rnn_hidden_step(params, q, h_prev, tape: Tape):
    """One hidden-state update; returns (a_k, h_k), shapes (1,1) and (32,1)."""
    tp = _as_taped(params, tape)
    y = vstack(tape, [np.full((1, 1), float(q)), h_prev], width=1)
    h = dense(tape, tp.node("hidden.w1"), y, tp.node("hidden.b1"), "sigmoid")
    a = dense(tape, tp.node("hidden.w2"), h, tp.node("hidden.b2"), "sigmoid")
    return a, h


def rnn_cell_forward(params, q, h_prev, trunk_rest, tape: Tape):
    """Full recurrent cell: hidden update, then the trunk on (rest, a).

    trunk_rest is a (in_dim - 1, batch) node or array; the scalar a is
    broadcast across the batch as the last input row.
    """
    tp = _as_taped(params, tape)
    a, h = rnn_hidden_step(tp, q, h_prev, tape)
    rest = trunk_rest if isinstance(trunk_rest, Node) else tape.constant(trunk_rest)
    width = rest.value.shape[1]
    x = vstack(tape, [rest, a], width=width)
    return mlp_forward(tp, x, tape), h


def zero_hidden_state(tape: Tape | None = None):
    h0 = np.zeros((HIDDEN_WIDTH, 1))
    return h0 if tape is None else tape.constant(h0)


# ---------------------------------------------------------------------------
# plain (tape-free) evaluation, used by price curves and as a test oracle


def mlp_eval(params: ParamSet, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=float)
    n = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        z = w @ h + b[:, None]
        h = z if i == n - 1 else expit(z)
    return h


def rnn_hidden_step_eval(params: ParamSet, q: float, h_prev: np.ndarray):
    hb = params.hidden
    y = np.concatenate([np.full((1, 1), float(q)), h_prev], axis=0)
    h = expit(hb.w1 @ y + hb.b1[:, None])
    a = expit(hb.w2 @ h + hb.b2[:, None])
    return a, h


# ---------------------------------------------------------------------------
# serialization


def params_to_dict(params: ParamSet, seed=None) -> dict:
    d = {
        "arch": params.arch,
        "seed": seed,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in params.layers],
        "hidden": None,
    }
    if params.hidden is not None:
        hb = params.hidden
        d["hidden"] = {
            "w1": hb.w1.tolist(),
            "b1": hb.b1.tolist(),
            "w2": hb.w2.tolist(),
            "b2": hb.b2.tolist(),
        }
    return d


def params_from_dict(d: dict) -> ParamSet:
    layers = [
        (np.asarray(e["w"], dtype=float), np.asarray(e["b"], dtype=float))
        for e in d["layers"]
    ]
    hidden = None
    if d.get("hidden") is not None:
        h = d["hidden"]
        hidden = HiddenBlock(
            np.asarray(h["w1"], dtype=float),
            np.asarray(h["b1"], dtype=float),
            np.asarray(h["w2"], dtype=float),
            np.asarray(h["b2"], dtype=float),
        )
    ps = ParamSet(d["arch"], layers, hidden)
    _check_shapes(ps)
    return ps


def _check_shapes(params: ParamSet) -> None:
    want = LAYER_SHAPES.get(params.arch)
    if want is None:
        raise ValueError(f"unknown architecture {params.arch!r}")
    got = tuple(w.shape for w, _ in params.layers)
    if got != want:
        raise ValueError(f"{params.arch}: layer shapes {got}, expected {want}")
    if (params.arch in _RECURRENT) != (params.hidden is not None):
        raise ValueError(f"{params.arch}: hidden block mismatch")


def save_params(params: ParamSet, path, seed=None) -> None:
    with open(path, "w") as f:
        json.dump(params_to_dict(params, seed), f)


def load_params(path) -> ParamSet:
    with open(path) as f:
        return params_from_dict(json.load(f))


def fold_constant_hidden_output(params: ParamSet) -> ParamSet:
    """Collapse a recurrent net whose hidden block is weight-free.

    Valid when w1, b1, w2 are all zero: then a_k = sigmoid(b2) at every
    step, and the net equals a feedforward one with the constant input
    column absorbed into the first-layer bias.  Used to check that the
    recurrent architectures contain the feedforward ones.
    """
    hb = params.hidden
    if hb is None:
        raise ValueError("parameters have no hidden block to fold")
    if np.any(hb.w1) or np.any(hb.b1) or np.any(hb.w2):
        raise ValueError("fold requires zeroed recurrent weights")
    a0 = float(expit(hb.b2)[0])
    w0, b0 = params.layers[0]
    if params.arch == RNN_CONTROL:
        # drop the trailing 'a' column
        w_new = w0[:, :-1].copy()
        b_new = b0 + w0[:, -1] * a0
        arch = MLP_CONTROL
    elif params.arch == RNN_PRICE:
        # the price trunk reads (t, a); its feedforward twin reads (t, Q)
        w_new = w0.copy()
        w_new[:, 1] = 0.0
        b_new = b0 + w0[:, 1] * a0
        arch = MLP_PRICE
    else:
        raise ValueError(f"cannot fold architecture {params.arch!r}")
    layers = [(w_new, b_new)] + [(w.copy(), b.copy()) for w, b in params.layers[1:]]
    return ParamSet(arch, layers, None)
