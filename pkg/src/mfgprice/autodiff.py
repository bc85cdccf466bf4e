"""Reverse-mode automatic differentiation on a flat operation tape.

Sized for small dense networks rolled out over a few dozen time steps:
values are 2-d float64 arrays (rows x batch), scalar reductions are 0-d.
Each primitive records one backward closure; `backward` replays them in
reverse.  A tape is built, differentiated once, and discarded.  Distinct
tapes share no state, so independent rollouts may run concurrently; a
single tape is not thread safe.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeMismatchError(ValueError):
    """Operands do not conform."""


class EmptyTapeError(RuntimeError):
    """backward() called on a tape with no recorded operations."""


class Node:
    """A value on the tape plus its adjoint slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)
        self.grad = None


class Tape:
    """Records operations in execution order."""

    def __init__(self):
        self._ops: list = []

    def leaf(self, value) -> Node:
        """Wrap an array as a differentiable input; shares its memory."""
        return Node(value)

    def constant(self, value) -> Node:
        """Wrap an array whose adjoint nobody will read."""
        return Node(value)

    def __len__(self):
        return len(self._ops)


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _acc(node, g):
    if not isinstance(node, Node):
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=float)
    else:
        node.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate adjoints of every node reachable from `loss`.

    Seeds d(loss)/d(loss) = 1 and replays the tape in reverse; leaf
    gradients are read off the leaves' .grad afterwards (None means the
    leaf did not influence the loss).
    """
    if len(tape) == 0:
        raise EmptyTapeError("backward on a tape with no recorded operations")
    loss.grad = np.ones_like(loss.value)
    for op in reversed(tape._ops):
        op()


# ---------------------------------------------------------------------------
# primitives


def dense(tape: Tape, w: Node, x, b: Node, activation: str = "sigmoid") -> Node:
    """activation(W @ x + b) with b broadcast across the batch."""
    xv = _val(x)
    wv, bv = w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[0] != wv.shape[1]:
        raise ShapeMismatchError(
            f"dense: weight {wv.shape} against input {xv.shape}"
        )
    z = wv @ xv + bv[:, None]
    if activation == "sigmoid":
        y = expit(z)
    elif activation == "identity":
        y = z
    else:
        raise ValueError(f"unknown activation {activation!r}")
    out = Node(y)

    def back():
        g = out.grad
        if g is None:
            return
        gz = g * (y * (1.0 - y)) if activation == "sigmoid" else g
        _acc(w, gz @ xv.T)
        _acc(b, gz.sum(axis=1))
        _acc(x, wv.T @ gz)

    tape._ops.append(back)
    return out


def add(tape: Tape, a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = Node(av + bv)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g, av.shape))
        _acc(b, _unbroadcast(g, bv.shape))

    tape._ops.append(back)
    return out


def sub(tape: Tape, a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = Node(av - bv)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g, av.shape))
        _acc(b, _unbroadcast(-g, bv.shape))

    tape._ops.append(back)
    return out


def mul(tape: Tape, a, b) -> Node:
    av, bv = _val(a), _val(b)
    out = Node(av * bv)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(a, _unbroadcast(g * bv, av.shape))
        _acc(b, _unbroadcast(g * av, bv.shape))

    tape._ops.append(back)
    return out


def scale(tape: Tape, x, a: float) -> Node:
    xv = _val(x)
    out = Node(xv * a)

    def back():
        g = out.grad
        if g is not None:
            _acc(x, g * a)

    tape._ops.append(back)
    return out


def square(tape: Tape, x) -> Node:
    xv = _val(x)
    out = Node(xv * xv)

    def back():
        g = out.grad
        if g is not None:
            _acc(x, 2.0 * xv * g)

    tape._ops.append(back)
    return out


def axpy(tape: Tape, x, v, a: float) -> Node:
    """x + a*v, same shapes; one fused op for the Euler update."""
    xv, vv = _val(x), _val(v)
    if xv.shape != vv.shape:
        raise ShapeMismatchError(f"axpy: {xv.shape} against {vv.shape}")
    out = Node(xv + a * vv)

    def back():
        g = out.grad
        if g is None:
            return
        _acc(x, g)
        _acc(v, a * g)

    tape._ops.append(back)
    return out


def sum_all(tape: Tape, x) -> Node:
    xv = _val(x)
    out = Node(xv.sum())

    def back():
        g = out.grad
        if g is not None:
            _acc(x, np.full(xv.shape, float(g)))

    tape._ops.append(back)
    return out


def vstack(tape: Tape, parts, width: int) -> Node:
    """Stack parts into a (sum rows, width) block.

    Parts may be Nodes, arrays, or python floats (a float becomes one
    constant row).  A part with a single column is broadcast across the
    width; its adjoint is summed back.
    """
    blocks = []
    metas = []  # (part, row0, rows, was_broadcast)
    r = 0
    for p in parts:
        pv = _val(p)
        if pv.ndim == 0:
            pv = np.full((1, width), float(pv))
        if pv.ndim != 2:
            raise ShapeMismatchError(f"vstack: part with ndim {pv.ndim}")
        if pv.shape[1] == width:
            blocks.append(pv)
            metas.append((p, r, pv.shape[0], False))
        elif pv.shape[1] == 1:
            blocks.append(np.broadcast_to(pv, (pv.shape[0], width)))
            metas.append((p, r, pv.shape[0], True))
        else:
            raise ShapeMismatchError(f"vstack: {pv.shape[1]} columns, want {width} or 1")
        r += pv.shape[0]
    out = Node(np.concatenate(blocks, axis=0))

    def back():
        g = out.grad
        if g is None:
            return
        for p, r0, rows, bcast in metas:
            if not isinstance(p, Node):
                continue
            gp = g[r0 : r0 + rows]
            if bcast and width > 1:
                gp = gp.sum(axis=1, keepdims=True)
            _acc(p, gp)

    tape._ops.append(back)
    return out


def hstack(tape: Tape, parts) -> Node:
    """Concatenate parts along the batch axis."""
    vals = [_val(p) for p in parts]
    rows = vals[0].shape[0]
    if any(v.ndim != 2 or v.shape[0] != rows for v in vals):
        raise ShapeMismatchError("hstack: parts must share their row count")
    offs = np.cumsum([0] + [v.shape[1] for v in vals])
    out = Node(np.concatenate(vals, axis=1))

    def back():
        g = out.grad
        if g is None:
            return
        for p, c0, c1 in zip(parts, offs[:-1], offs[1:]):
            _acc(p, g[:, c0:c1])

    tape._ops.append(back)
    return out


def col(tape: Tape, x: Node, j: int) -> Node:
    """Column j of x as an (rows, 1) node."""
    xv = x.value
    out = Node(xv[:, j : j + 1].copy())

    def back():
        g = out.grad
        if g is None:
            return
        full = np.zeros_like(xv)
        full[:, j : j + 1] = g
        _acc(x, full)

    tape._ops.append(back)
    return out
