"""Dense float64 tensors with taped reverse-mode differentiation.

Everything the forecaster computes is expressed through the ops in this
module. Each op validates operand shapes, checks its result for NaN/Inf
(a non-finite value raises immediately instead of propagating), and, when
a Tape is active and an input requires gradients, appends a node holding
the closure that replays the chain rule. ``backward`` walks the tape in
reverse; because nodes are appended in execution order the record is
topologically sorted by construction and each node is visited exactly once.

Design constraints honored throughout:

* float64 only; inputs are converted on Tensor construction.
* binary elementwise ops demand identical shapes. The only broadcasts are
  the explicitly named helpers: ``scale`` (scalar), ``bias_add`` (row
  vector over rows), ``scale_rows`` (column vector over columns).
* relu uses subgradient 0 at exactly 0; softmax subtracts the row max
  before exponentiation; dropout is inverted (scaling by 1/(1-rate) at
  train time) and the identity in eval mode.
* gradients accumulate: repeated use of a leaf sums contributions, and
  consecutive ``backward`` calls keep adding until ``zero_grad``.
* gradient buffers are never mutated in place during backward, so a
  pass-through gradient may alias another tensor's buffer safely.
"""

from __future__ import annotations

import math

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """Trainable leaf: requires_grad set and a zeroed gradient buffer."""
    t = Tensor(data, requires_grad=True)
    t.grad = np.zeros_like(t.data)
    return t


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of ops from one forward computation."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False


def _record(op: str, inputs, out_data, bwd) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    if _TAPE_STACK:
        for t in inputs:
            if t.requires_grad:
                tape = _TAPE_STACK[-1]
                out.requires_grad = True
                out.node_id = len(tape.nodes)
                tape.nodes.append(_Node(op, inputs, out, bwd))
                break
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul shapes {ad.shape} x {bd.shape}")

    def bwd(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record("matmul", (a, b), ad @ bd, bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.data.shape}")

    def bwd(g):
        return (g.T,)

    return _record("transpose", (a,), a.data.T, bwd)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T (+ b). Weights are stored out_dim x in_dim."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"affine shapes {xd.shape} x {wd.shape}")
    out = xd @ wd.T
    if b is None:
        def bwd(g):
            return (g @ wd if x.requires_grad else None,
                    g.T @ xd if w.requires_grad else None)

        return _record("affine", (x, w), out, bwd)

    bd = b.data
    if bd.shape != (wd.shape[0],):
        raise DimensionError(f"affine bias shape {bd.shape} for weight {wd.shape}")

    def bwd(g):
        return (g @ wd if x.requires_grad else None,
                g.T @ xd if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _record("affine", (x, w, b), out + bd, bwd)


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op} shapes {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bwd(g):
        return (g, g)

    return _record("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bwd(g):
        return (g, -g)

    return _record("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (g * bd, g * ad)

    return _record("mul", (a, b), ad * bd, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar; the one permitted scalar broadcast."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record("scale", (x,), x.data * c, bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D row vector to every row of a (B, D) tensor."""
    xd, bd = x.data, b.data
    if xd.ndim != 2 or bd.shape != (xd.shape[1],):
        raise DimensionError(f"bias_add shapes {xd.shape} + {bd.shape}")

    def bwd(g):
        return (g, g.sum(axis=0))

    return _record("bias_add", (x, b), xd + bd, bwd)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of a (B, D) tensor by the scalar s[i, 0]."""
    xd, sd = x.data, s.data
    if xd.ndim != 2 or sd.shape != (xd.shape[0], 1):
        raise DimensionError(f"scale_rows shapes {xd.shape} * {sd.shape}")

    def bwd(g):
        return (g * sd, (g * xd).sum(axis=1, keepdims=True))

    return _record("scale_rows", (x, s), xd * sd, bwd)


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / x.data

    def bwd(g):
        return (-g * out * out,)

    return _record("reciprocal", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # exp only sees non-positive arguments, so it cannot overflow
    t = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0.0  # subgradient 0 at exactly 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, d, 0.0), bwd)


def huber(x: Tensor, beta: float = 1.0, literal: bool = False) -> Tensor:
    """Elementwise smooth-L1 value of a residual tensor.

    Default: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside,
    which is continuous in value and derivative at the knee. With
    ``literal`` the quadratic branch is 0.5 x^2 with threshold 0.5 and
    no 1/beta scaling, kept for comparison runs; its value jumps at the
    threshold and the derivative is taken branch-wise.
    """
    d = x.data
    a = np.abs(d)
    if literal:
        quad = a < 0.5
        out = np.where(quad, 0.5 * d * d, a - 0.5)
        deriv = np.where(quad, d, np.sign(d))
    else:
        beta = float(beta)
        if beta <= 0:
            raise ValueError("huber beta must be positive")
        quad = a < beta
        out = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
        deriv = np.where(quad, d / beta, np.sign(d))

    def bwd(g):
        return (g * deriv,)

    return _record("huber", (x,), out, bwd)


# ---------------------------------------------------------------------------
# shape ops


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim:
        raise DimensionError(f"concat ranks {ad.ndim} vs {bd.ndim}")
    if axis >= ad.ndim or axis < -ad.ndim:
        raise DimensionError(f"concat axis {axis} out of range for rank {ad.ndim}")
    ax = axis % ad.ndim
    for k in range(ad.ndim):
        if k != ax and ad.shape[k] != bd.shape[k]:
            raise DimensionError(f"concat shapes {ad.shape} vs {bd.shape} on axis {axis}")
    na = ad.shape[ax]

    def bwd(g):
        ga, gb = np.split(g, [na], axis=ax)
        return (ga if a.requires_grad else None,
                gb if b.requires_grad else None)

    return _record("concat", (a, b), np.concatenate([ad, bd], axis=ax), bwd)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    xd = x.data
    if axis >= xd.ndim or axis < -xd.ndim:
        raise DimensionError(f"slice axis {axis} out of range for rank {xd.ndim}")
    ax = axis % xd.ndim
    n = xd.shape[ax]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice [{start}:{stop}] outside axis of length {n}")
    idx = tuple(slice(start, stop) if k == ax else slice(None) for k in range(xd.ndim))

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[idx] = g
        return (gx,)

    return _record("slice", (x,), xd[idx], bwd)


def split(x: Tensor, sizes, axis: int = 0) -> list[Tensor]:
    """Partition along an axis; inverse of chained concat."""
    if sum(sizes) != x.data.shape[axis % x.data.ndim]:
        raise DimensionError(f"split sizes {sizes} do not cover axis {axis} of {x.data.shape}")
    parts, at = [], 0
    for s in sizes:
        parts.append(slice_axis(x, at, at + s, axis))
        at += s
    return parts


# ---------------------------------------------------------------------------
# normalization, reductions, regularization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if d.size == 0 or d.shape[axis] == 0:
        raise DimensionError("softmax of an empty axis")
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax", (x,), out, bwd)


def row_sum(x: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor, keeping the column shape."""
    xd = x.data
    if xd.ndim != 2:
        raise DimensionError(f"row_sum needs a 2-D tensor, got {xd.shape}")

    def bwd(g):
        return (np.broadcast_to(g, xd.shape),)

    return _record("row_sum", (x,), xd.sum(axis=1, keepdims=True), bwd)


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    xd = x.data

    def bwd(g):
        return (np.full(xd.shape, float(g)),)

    return _record("total", (x,), np.asarray(xd.sum()), bwd)


def mean(x: Tensor) -> Tensor:
    xd = x.data
    if xd.size == 0:
        raise DimensionError("mean of an empty tensor")
    inv = 1.0 / xd.size

    def bwd(g):
        return (np.full(xd.shape, float(g) * inv),)

    return _record("mean", (x,), np.asarray(xd.mean()), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout. Identity when eval or rate == 0."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * mask,)

    return _record("dropout", (x,), x.data * mask, bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; blocks all gradient flow into x."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d loss / d leaf into .grad for every leaf on the tape.

    The loss must be scalar. Leaves touched by no path keep their zero
    buffer; repeated leaves sum contributions. Backward over a fresh tape
    keeps accumulating into existing leaf grads, per the contract that
    grads are only cleared by zero_grad. Replaying the same tape twice is
    not supported: intermediate grads would be stale.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.bwd(g)):
            if gi is None or not t.requires_grad:
                continue
            # never mutate in place: gi may alias another grad buffer
            t.grad = gi if t.grad is None else t.grad + gi


def zero_grad(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# finite-difference verification


class FdReport:
    """Worst-case relative disagreement between autodiff and central differences."""

    __slots__ = ("max_rel_err", "worst_param", "worst_index", "checked")

    def __init__(self, max_rel_err, worst_param, worst_index, checked):
        self.max_rel_err = max_rel_err
        self.worst_param = worst_param
        self.worst_index = worst_index
        self.checked = checked

    def __repr__(self):
        return (f"FdReport(max_rel_err={self.max_rel_err:.3e}, "
                f"worst={self.worst_param}[{self.worst_index}], checked={self.checked})")


def finite_diff_check(f, params, eps: float = 1e-5, denom_floor: float = 1e-4) -> FdReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed
    from the current values of ``params``, an iterable of (name, Tensor)
    pairs. Each entry is perturbed by +/- eps in place (and restored);
    relative error is |fd - ad| / max(|fd| + |ad|, denom_floor), and the
    worst entry over all parameters is reported.

    Functions containing stop_gradient deliberately decouple autodiff
    from the true derivative, so check them with the barrier disabled.
    """
    params = list(params)
    zero_grad(p for _, p in params)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    grads = {name: p.grad.copy() for name, p in params}

    worst = FdReport(0.0, None, None, 0)
    for name, p in params:
        flat = p.data.reshape(-1)
        ad_flat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            ad = ad_flat[i]
            rel = abs(fd - ad) / max(abs(fd) + abs(ad), denom_floor)
            worst.checked += 1
            if rel > worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_param = name
                worst.worst_index = i
    return worst
