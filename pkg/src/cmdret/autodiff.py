"""Dense float64 tensors with tape-based reverse-mode differentiation.

All forward functions evaluate eagerly on numpy arrays. While a Tape is
active (entered as a context manager) every differentiable operation also
records a backward rule; ``Tape.backward`` replays the rules in reverse
order and accumulates gradients into each participating leaf tensor.
Without an active tape the same functions run value-only, which is what
inference and finite-difference probing use.

Tensors are immutable values once created. A Tape is single-owner: it must
not be shared across concurrent tasks. The active tape is tracked
per-thread, so independent threads may run forward passes on disjoint
tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, ShapeError, StateError

# Common convention; every normalization site shares this constant.
LAYER_NORM_EPS = 1e-5

# Additive attention-mask value; exp(-1e30 - max) underflows to exactly 0.0,
# so masked keys contribute no probability mass and no gradient.
MASK_FILL = -1e30


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    """Wrap an array-like as a constant Tensor; Tensors pass through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = []
        _TLS.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so inputs always precede the
    operations that consume them; replaying in reverse is a valid reverse
    topological walk. One backward pass per tape; reset() or a fresh tape
    is required before the next.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape context exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self._records.append((out, inputs, rule))
        self._produced.add(id(out))

    def reset(self) -> None:
        self._records.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every requires_grad ancestor of ``loss``."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise StateError("tape already consumed by backward; reset() or build a new tape")
        self._consumed = True

        # Intermediate gradients keyed by node identity; leaves accumulate
        # directly into Tensor.grad.
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in self._produced and loss.requires_grad:
            loss._accumulate(pending[id(loss)])
        for out, inputs, rule in reversed(self._records):
            g_out = pending.pop(id(out), None)
            if g_out is None:
                continue
            grads = rule(g_out)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    if id(t) in pending:
                        pending[id(t)] += g
                    else:
                        pending[id(t)] = np.array(g, dtype=np.float64, copy=True)
                else:
                    t._accumulate(g)


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    tape = active_tape()
    if tape is not None and req:
        tape.record(out, inputs, rule)
    return out


# ---------------------------------------------------------------------------
# elementwise and arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of x by the single-element tensor s."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar: scalar operand has shape {s.data.shape}")
    xd = x.data
    sval = float(s.data.reshape(()))
    sshape = s.data.shape

    def rule(g):
        return (g * sval, np.sum(g * xd).reshape(sshape))

    return _emit(xd * sval, (x, s), rule)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def gelu(x: Tensor) -> Tensor:
    """Smooth gaussian-error activation (tanh form)."""
    xd = x.data
    c = 0.7978845608028654  # sqrt(2/pi)
    u = c * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def rule(g):
        du = c * (1.0 + 3 * 0.044715 * xd**2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
        return (g * dy,)

    return _emit(y, (x,), rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    xshape = x.data.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, xshape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``, computed with max subtraction."""
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    y = (m + np.log(s)).squeeze(axis=axis)
    sm = e / s

    def rule(g):
        return (np.expand_dims(g, axis) * sm,)

    return _emit(y, (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree for {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {x.data.shape}")
    return _emit(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b, broadcast over any leading dims of x."""
    din = x.data.shape[-1] if x.data.ndim else -1
    if w.data.ndim != 2 or din != w.data.shape[0]:
        raise ShapeError(f"linear: input {x.data.shape} incompatible with weight {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} incompatible with weight {w.data.shape}")
    xshape = x.data.shape
    x2 = x.data.reshape(-1, din)
    wd = w.data
    y = x2 @ wd + b.data

    def rule(g):
        g2 = g.reshape(-1, wd.shape[1])
        return (g2 @ wd.T).reshape(xshape), x2.T @ g2, g2.sum(axis=0)

    return _emit(y.reshape(xshape[:-1] + (wd.shape[1],)), (x, w, b), rule)


def weighted_sum(weights: Tensor, stack: Tensor) -> Tensor:
    """sum_l weights[l] * stack[l] for a (L, ...) stack; output drops the first axis."""
    if weights.data.ndim != 1 or weights.data.shape[0] != stack.data.shape[0]:
        raise ShapeError(
            f"weighted_sum: {weights.data.shape[0] if weights.data.ndim == 1 else weights.data.shape} "
            f"weights vs {stack.data.shape[0]} stacked slices"
        )
    wd, sd = weights.data, stack.data
    y = np.tensordot(wd, sd, axes=(0, 0))

    def rule(g):
        axes = tuple(range(g.ndim))
        dw = np.tensordot(g, sd, axes=(axes, tuple(a + 1 for a in axes)))
        ds = wd.reshape((-1,) + (1,) * g.ndim) * g[None, ...]
        return dw, ds

    return _emit(y, (weights, stack), rule)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Rows along ``axis`` sum to 1; computed with max subtraction."""
    xd = x.data
    if xd.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis {axis} of shape {xd.shape}")
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _emit(y, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    xd = x.data
    d = xd.shape[-1] if xd.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over a zero-width last axis")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} vs width {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * gamma.data + beta.data
    gd = gamma.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g.copy()
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _emit(y, (x, gamma, beta), rule)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D operand, got {x.data.shape}")
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    if np.any(n < 1e-30):
        raise DataError("norm underflow: cannot normalize a (near-)zero row")
    y = xd / n

    def rule(g):
        return (g / n - xd * ((g * xd).sum(axis=1, keepdims=True)) / n**3,)

    return _emit(y, (x,), rule)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    cols = {p.data.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[p.data.shape for p in parts]}")
    counts = [p.data.shape[0] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=0)
    edges = np.cumsum(counts)[:-1]

    def rule(g):
        return tuple(np.split(g, edges, axis=0))

    return _emit(y, parts, rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_rows needs a 2-D operand, got {x.data.shape}")
    xshape = x.data.shape
    y = x.data[start:stop].copy()

    def rule(g):
        full = np.zeros(xshape)
        full[start:stop] = g
        return (full,)

    return _emit(y, (x,), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D operand, got {x.data.shape}")
    xshape = x.data.shape
    y = np.ascontiguousarray(x.data[:, start:stop])

    def rule(g):
        full = np.zeros(xshape)
        full[:, start:stop] = g
        return (full,)

    return _emit(y, (x,), rule)
