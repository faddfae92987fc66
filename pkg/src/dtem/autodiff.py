"""Dense arrays with tape-based reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires gradients records a
:class:`TapeNode` holding its inputs and a backward rule. :func:`backward`
replays the recorded graph in reverse topological order, visiting each node
exactly once.

Broadcasting follows numpy; gradients of broadcast operands are summed back
to the operand's shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-6
# longdouble is only used by finite-difference oracles
_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64), np.dtype(np.longdouble))


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(ValueError):
    """Raised for malformed backward requests."""


@dataclass
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A dense row-major array, optionally tracked on the tape."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        _check_finite(arr, "leaf")

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a1: int, a2: int):
        return swapaxes(self, a1, a2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def detach(self):
        return stop_gradient(self)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the other operand's precision via numpy rules
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = TapeNode(op, inputs, rule) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _scalar_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _scalar_operand(b, a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _scalar_operand(a, b), b
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, c)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below first."""
    if floor is not None:
        x = clamp_min(x, floor)
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (x,), rule)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= lo
    out = np.where(keep, x.data, np.asarray(lo, dtype=x.dtype))
    return _make("clamp_min", out, (x,), lambda g: (g * keep,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b``."""
    a, b = _binary_operands(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def rule(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        )

    return _make("where", out, (a, b), rule)


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no tape edge: contributes exactly zero gradient."""
    x = as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.node = None
    return out


# -- linear algebra and shape ---------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def rule(g):
        # frozen operands get no gradient work
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: one GEMM over the flattened leading axes
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), rule)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(
        "swapaxes", np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),)
    )


def reshape(x: Tensor, shape) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def rule(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make("getitem", np.array(out, copy=True), (x,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


# -- token-axis gather/scatter (axis 1 of [B, N, ...]) ---------------------
def _batch_rows(idx: np.ndarray) -> np.ndarray:
    return np.arange(idx.shape[0])[:, None]


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b, k] = x[b, idx[b, k]]`` for ``x`` of shape [B, N, ...]."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = _batch_rows(idx)
    out = x.data[rows, idx]

    def rule(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, idx), g)
        return (grad,)

    return _make("gather_rows", out, (x,), rule)


def scatter_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (distinct per batch) replaced by ``values``."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = _batch_rows(idx)
    out = base.data.copy()
    out[rows, idx] = values.data

    def rule(g):
        gb = g.copy()
        gb[rows, idx] = 0.0
        return gb, g[rows, idx]

    return _make("scatter_rows", out, (base, values), rule)


def index_add_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """``base`` plus ``values`` accumulated into rows ``idx`` (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = _batch_rows(idx)
    out = base.data.copy()
    np.add.at(out, (rows, idx), values.data)
    return _make("index_add_rows", out, (base, values), lambda g: (g, g[rows, idx]))


# -- normalisations ----------------------------------------------------------
def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def softmax(x: Tensor, axis=-1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over ``axis`` (an int or tuple, e.g. ``(-2, -1)`` for global).

    ``mask`` marks entries that participate (True); masked-out entries are
    exactly zero and excluded from normalisation.
    """
    axes = _normalize_axes(axis, x.ndim)
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        v = np.where(mask, v, -np.inf)
    peak = v.max(axis=axes, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(v - peak)
    total = e.sum(axis=axes, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def rule(g):
        inner = (g * out).sum(axis=axes, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx_hat = g * gain.data
        n = v.shape[-1]
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make("layer_norm", out, (x, gain, bias), rule)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Rows scaled to unit norm; norms are floored at ``eps``."""
    sq = sum_(x * x, axis=-1, keepdims=True)
    return x / sqrt(clamp_min(sq, eps * eps))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` [..., P, k] and ``b`` [..., Q, k]."""
    return l2_normalize(a, eps) @ swapaxes(l2_normalize(b, eps), -1, -2)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B, C] against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return -mean(picked)


# -- reverse pass ------------------------------------------------------------
def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(
    loss: Tensor,
    wrt: Iterable[Tensor] | None = None,
    allow_unused: bool = False,
) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to trainable leaves.

    Returns a mapping from leaf tensor to gradient array. With ``wrt`` only
    those tensors are returned; a requested tensor that the loss does not
    depend on raises :class:`GraphError` unless ``allow_unused`` is set, in
    which case its gradient is zero.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for t in reversed(_topological(loss)):
            g = grads.get(id(t))
            if g is None:
                continue
            if t.node is None:
                leaves[id(t)] = t
                continue
            del grads[id(t)]
            for parent, pg in zip(t.node.inputs, t.node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if wrt is None:
        return {t: grads[i] for i, t in leaves.items()}
    result = {}
    for t in wrt:
        if id(t) in leaves:
            result[t] = grads[id(t)]
        elif allow_unused:
            result[t] = np.zeros_like(t.data)
        else:
            raise GraphError("requested tensor is not on the tape of this loss")
    return result


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    floor: float = 1e-12,
    oracle_dtype=np.float64,
) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. The analytic gradient is taken
    in 64-bit; the perturbed evaluations run in ``oracle_dtype`` (pass
    ``np.longdouble`` to push round-off below very small gradients). The
    error per coordinate is ``|analytic - numeric| / max(floor, |analytic|
    + |numeric|)``.
    """
    x0 = np.array(np.asarray(x.data if isinstance(x, Tensor) else x), dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f returned a non-finite value")
    analytic = backward(out, [leaf], allow_unused=True)[leaf]
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1).astype(oracle_dtype)
    h = np.asarray(step, dtype=oracle_dtype)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = f(Tensor(plus.reshape(x0.shape), dtype=oracle_dtype)).data
        fm = f(Tensor(minus.reshape(x0.shape), dtype=oracle_dtype)).data
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NonFiniteError("f returned a non-finite value")
        numeric.reshape(-1)[i] = float((fp - fm) / (2 * h))
    err = np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
