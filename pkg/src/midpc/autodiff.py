"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are plain numpy arrays (row-major, 64-bit); the :class:`Tape` records
every primitive applied to tracked values and replays local backward rules in
strict reverse recording order.  Recording order is a topological order by
construction, so a single reversed sweep accumulates exact gradients with
additive fan-out.

The one non-standard primitive is :func:`custom_grad`: its forward value may
come from a non-differentiable map (rounding, argmax) while its backward pass
applies a caller-supplied surrogate rule.  All straight-through estimators in
:mod:`midpc.rounding` are built on it.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_CHECK_FINITE = bool(os.environ.get("MIDPC_CHECK_FINITE"))


def _as_array(value) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float64))


class Var:
    """Handle to a value recorded on a tape (or a bare value in eval mode)."""

    __slots__ = ("tape", "nid", "value")

    def __init__(self, tape: "Tape | None", nid: int, value: np.ndarray):
        self.tape = tape
        self.nid = nid
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.value.shape})"


class _Node:
    __slots__ = ("op", "input_ids", "value", "backward")

    def __init__(self, op, input_ids, value, backward):
        self.op = op
        self.input_ids = input_ids
        self.value = value
        self.backward = backward


class Tape:
    """Append-only record of operations, replayed in reverse for gradients.

    A tape with ``grad_enabled=False`` computes forward values only; this is
    the evaluation mode used for closed-loop inference.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self._nodes: list[_Node] = []
        self._leaf_ids: list[int] = []

    def __len__(self):
        return len(self._nodes)

    def record(self, op: str, inputs: Sequence[Var],
               value: np.ndarray,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None) -> Var:
        """Append one operation with an eagerly computed forward value."""
        if _CHECK_FINITE and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite forward value in op '{op}'")
        if not self.grad_enabled:
            return Var(None, -1, value)
        input_ids = tuple(v.nid for v in inputs)
        self._nodes.append(_Node(op, input_ids, value, backward))
        return Var(self, len(self._nodes) - 1, value)

    def leaf(self, value) -> Var:
        """Register an input/parameter value as a differentiable leaf."""
        var = self.record("leaf", (), _as_array(value), None)
        if self.grad_enabled:
            self._leaf_ids.append(var.nid)
        return var

    def constant(self, value) -> Var:
        """Register a value that participates in ops but gets no gradient."""
        return self.record("const", (), _as_array(value), None)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every node that influences it.

        Every leaf appears in the returned map; leaves the loss does not
        depend on get zero gradients.
        """
        if not self.grad_enabled:
            raise ContractError("backward() on a tape recorded with grad_enabled=False")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.value.shape}")

        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.nid] = np.ones_like(loss.value)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            for input_id, gi in zip(node.input_ids, node.backward(g)):
                if gi is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = gi
                else:
                    # out-of-place: gi may alias g or another node's gradient
                    grads[input_id] = grads[input_id] + gi
        out = {nid: g for nid, g in enumerate(grads) if g is not None}
        for nid in self._leaf_ids:
            if nid not in out:
                out[nid] = np.zeros_like(self._nodes[nid].value)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(None, -1, _as_array(x))


def _is_tracked(v: Var) -> bool:
    return v.tape is not None and v.nid >= 0


def _binary_elementwise(op: str, tape: Tape, a, b, fwd, da, db) -> Var:
    a, b = _coerce(tape, a), _coerce(tape, b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.value.shape} and "
                         f"{b.value.shape}") from exc
    a_tracked, b_tracked = _is_tracked(a), _is_tracked(b)
    if not (a_tracked or b_tracked):
        return Var(None, -1, value)

    inputs, slots = [], []
    if a_tracked:
        inputs.append(a)
        slots.append(0)
    if b_tracked:
        inputs.append(b)
        slots.append(1)

    def backward(g):
        full = (
            _unbroadcast(da(g, a.value, b.value), a.value.shape),
            _unbroadcast(db(g, a.value, b.value), b.value.shape),
        )
        return [full[s] for s in slots]

    return tape.record(op, inputs, value, backward)


def add(tape: Tape, a, b) -> Var:
    return _binary_elementwise("add", tape, a, b, np.add,
                               lambda g, av, bv: g, lambda g, av, bv: g)


def sub(tape: Tape, a, b) -> Var:
    return _binary_elementwise("sub", tape, a, b, np.subtract,
                               lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(tape: Tape, a, b) -> Var:
    return _binary_elementwise("mul", tape, a, b, np.multiply,
                               lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def matmul(tape: Tape, a, b) -> Var:
    """Matrix product for 1-D and 2-D operands (numpy @ semantics)."""
    a, b = _coerce(tape, a), _coerce(tape, b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {av.ndim}-D and {bv.ndim}-D")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
    value = av @ bv
    a_tracked, b_tracked = _is_tracked(a), _is_tracked(b)
    if not (a_tracked or b_tracked):
        return Var(None, -1, value)

    def grad_a(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:            # (k,) @ (k,n) -> (n,)
            return bv @ g
        if bv.ndim == 1:            # (m,k) @ (k,) -> (m,)
            return np.outer(g, bv)
        return g @ bv.T

    def grad_b(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    inputs, slots = [], []
    if a_tracked:
        inputs.append(a)
        slots.append(grad_a)
    if b_tracked:
        inputs.append(b)
        slots.append(grad_b)

    return tape.record("matmul", inputs, value, lambda g: [fn(g) for fn in slots])


def affine(tape: Tape, x, W, b) -> Var:
    """x @ W.T + b for batched rows, or W @ x + b for a single vector."""
    x, W, b = _coerce(tape, x), _coerce(tape, W), _coerce(tape, b)
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or bv.ndim != 1 or Wv.shape[0] != bv.shape[0]:
        raise ShapeError(f"affine: W {Wv.shape} and b {bv.shape} are inconsistent")
    if xv.shape[-1] != Wv.shape[1]:
        raise ShapeError(f"affine: input width {xv.shape} does not match W {Wv.shape}")
    batched = xv.ndim == 2
    value = (xv @ Wv.T + bv) if batched else (Wv @ xv + bv)

    inputs, slots = [], []
    if _is_tracked(x):
        inputs.append(x)
        slots.append(lambda g: g @ Wv if batched else Wv.T @ g)
    if _is_tracked(W):
        inputs.append(W)
        slots.append(lambda g: g.T @ xv if batched else np.outer(g, xv))
    if _is_tracked(b):
        inputs.append(b)
        slots.append(lambda g: g.sum(axis=0) if batched else g)
    if not inputs:
        return Var(None, -1, value)
    return tape.record("affine", inputs, value, lambda g: [fn(g) for fn in slots])


def _unary(op, tape, x, fwd, bwd) -> Var:
    x = _coerce(tape, x)
    value = fwd(x.value)
    if not _is_tracked(x):
        return Var(None, -1, value)
    return tape.record(op, (x,), value, lambda g: [bwd(g, x.value, value)])


def tanh(tape: Tape, x) -> Var:
    return _unary("tanh", tape, x, np.tanh, lambda g, xv, y: g * (1.0 - y * y))


def sigmoid(tape: Tape, x) -> Var:
    return _unary("sigmoid", tape, x,
                  lambda xv: 1.0 / (1.0 + np.exp(-xv)),
                  lambda g, xv, y: g * y * (1.0 - y))


SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


def selu(tape: Tape, x) -> Var:
    def fwd(xv):
        return SELU_LAMBDA * np.where(xv > 0, xv, SELU_ALPHA * np.expm1(xv))

    def bwd(g, xv, y):
        return g * SELU_LAMBDA * np.where(xv > 0, 1.0, SELU_ALPHA * np.exp(xv))

    return _unary("selu", tape, x, fwd, bwd)


def exp(tape: Tape, x) -> Var:
    return _unary("exp", tape, x, np.exp, lambda g, xv, y: g * y)


def log(tape: Tape, x) -> Var:
    return _unary("log", tape, x, np.log, lambda g, xv, y: g / xv)


def softmax(tape: Tape, x) -> Var:
    """Row-wise softmax with max subtraction for numerical stability."""
    def fwd(xv):
        shifted = xv - xv.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(g, xv, y):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _unary("softmax", tape, x, fwd, bwd)


def layer_norm(tape: Tape, x, gain, offset, eps: float = 1e-5) -> Var:
    """Normalize over the feature (last) axis, then scale and shift."""
    x, gain, offset = _coerce(tape, x), _coerce(tape, gain), _coerce(tape, offset)
    xv = x.value
    if xv.shape[-1] != gain.value.shape[-1] or xv.shape[-1] != offset.value.shape[-1]:
        raise ShapeError(f"layer_norm: width {xv.shape[-1]} does not match "
                         f"gain/offset {gain.value.shape}/{offset.value.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    value = xhat * gain.value + offset.value

    inputs, slots = [], []
    if _is_tracked(x):
        def grad_x(g):
            gh = g * gain.value
            return (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv
        inputs.append(x)
        slots.append(grad_x)
    if _is_tracked(gain):
        inputs.append(gain)
        slots.append(lambda g: _unbroadcast(g * xhat, gain.value.shape))
    if _is_tracked(offset):
        inputs.append(offset)
        slots.append(lambda g: _unbroadcast(g, offset.value.shape))
    if not inputs:
        return Var(None, -1, value)
    return tape.record("layer_norm", inputs, value, lambda g: [fn(g) for fn in slots])


def apply_mask(tape: Tape, x, mask: np.ndarray) -> Var:
    """Multiply by a fixed (non-differentiated) mask; used by dropout."""
    x = _coerce(tape, x)
    if mask.shape != x.value.shape:
        raise ShapeError(f"apply_mask: mask {mask.shape} does not match x {x.value.shape}")
    value = x.value * mask
    if not _is_tracked(x):
        return Var(None, -1, value)
    return tape.record("apply_mask", (x,), value, lambda g: [g * mask])


def tsum(tape: Tape, x) -> Var:
    """Sum of all entries (returns a scalar-shaped array)."""
    x = _coerce(tape, x)
    value = np.asarray(x.value.sum())
    if not _is_tracked(x):
        return Var(None, -1, value)
    return tape.record("sum", (x,), value,
                       lambda g: [np.broadcast_to(g, x.value.shape)])


def squared_norm(tape: Tape, x) -> Var:
    """Sum of squared entries (scalar)."""
    x = _coerce(tape, x)
    value = np.asarray((x.value * x.value).sum())
    if not _is_tracked(x):
        return Var(None, -1, value)
    return tape.record("squared_norm", (x,), value, lambda g: [2.0 * g * x.value])


def clip(tape: Tape, x, lo: float | None, hi: float | None) -> Var:
    """Clamp values; backward passes gradients through inside [lo, hi] only."""
    x = _coerce(tape, x)
    value = np.clip(x.value, lo, hi)
    if not _is_tracked(x):
        return Var(None, -1, value)
    inside = np.ones_like(x.value)
    if lo is not None:
        inside = inside * (x.value >= lo)
    if hi is not None:
        inside = inside * (x.value <= hi)
    return tape.record("clip", (x,), value, lambda g: [g * inside])


def scale(tape: Tape, x, c: float) -> Var:
    """Multiply by a python scalar constant."""
    return mul(tape, x, np.float64(c))


def custom_grad(tape: Tape, inputs: Sequence[Var], value: np.ndarray,
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                op: str = "custom_grad") -> Var:
    """Record a node whose forward value is given (possibly from a discrete
    map) and whose backward pass applies a surrogate rule to the inputs."""
    tracked = [v for v in inputs if _is_tracked(v)]
    if len(tracked) != len(inputs):
        raise ContractError(f"{op}: all surrogate inputs must be tracked on the tape")
    return tape.record(op, inputs, _as_array(value), backward)


def ste(tape: Tape, value: np.ndarray, surrogate: Var, op: str = "ste") -> Var:
    """Forward the discrete `value`; route gradients to `surrogate` unchanged."""
    if not _is_tracked(surrogate):
        return Var(None, -1, _as_array(value))
    if np.shape(value) != surrogate.value.shape:
        raise ShapeError(f"{op}: value shape {np.shape(value)} does not match "
                         f"surrogate {surrogate.value.shape}")
    return custom_grad(tape, (surrogate,), value, lambda g: [g], op=op)
