"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array plus an optional gradient slot. Operations
build a computation graph when any input has ``requires_grad``; calling
``backward()`` on a scalar output runs one reverse sweep and accumulates
gradients into every reachable tensor that requires them. Gradients
accumulate across calls; callers reset with ``zero_grad()`` between steps.

Everything is float64 and row-major. Broadcasting is deliberately limited
to scalar multiplication and bias addition over the last axis.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tensor",
    "tensor",
    "no_grad",
    "apply_op",
    "OP_KINDS",
    "matmul",
    "add",
    "mul",
    "mul_scalar",
    "embedding_gather",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "reduce_sum",
    "reduce_mean",
    "cross_entropy",
    "gather_rows",
    "attention_scores",
    "attention_context",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AutodiffError(Exception):
    """Base error for tensor construction and graph operations."""


class ShapeError(AutodiffError):
    """Inputs are shape-incompatible for the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/decoding)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None,
                 _op="leaf", _validate=True):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if _validate and not np.all(np.isfinite(arr)):
            raise AutodiffError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = _op

    # -- construction ------------------------------------------------------

    @classmethod
    def from_flat(cls, shape, values, requires_grad=False):
        """Build a tensor from an explicit shape and flat row-major values."""
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"dimensions must be positive, got {shape}")
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        expected = int(np.prod(shape))
        if values.size != expected:
            raise ShapeError(
                f"got {values.size} values for shape {shape} (expected {expected})")
        return cls(values.reshape(shape), requires_grad=requires_grad)

    # -- basic accessors ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self, requires_grad=False):
        """Copy the values into a fresh leaf tensor outside the graph."""
        return Tensor(self.data.copy(), requires_grad=requires_grad, _validate=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators (thin sugar over the op functions) -----------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reverse sweep -----------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(tensor) into every reachable requires_grad tensor.

        The root must be a scalar produced by a recorded operation. Repeated
        calls without ``zero_grad`` accumulate, matching per-batch training
        semantics where the caller zeroes parameter gradients explicitly.
        """
        if self.data.size != 1:
            raise AutodiffError(f"backward root must be scalar, shape is {self.shape}")
        if self._backward is None:
            raise AutodiffError("backward root is detached from any computation graph")

        order = _topological_order(self)
        buffers = {id(self): np.ones_like(self.data)}
        for node in order:
            fn = node._backward
            out_grad = buffers.get(id(node))
            if out_grad is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = out_grad.copy()
                else:
                    node.grad += out_grad
            if fn is None:
                continue
            for parent, contribution in zip(node._parents, fn(out_grad)):
                if contribution is None or not parent.requires_grad:
                    continue
                held = buffers.get(id(parent))
                if held is None:
                    buffers[id(parent)] = contribution
                else:
                    buffers[id(parent)] = held + contribution


def _topological_order(root):
    """Reverse topological order from root, iterative to spare the call stack."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def tensor(shape, values, requires_grad=False):
    """Spec-shaped constructor: explicit shape plus flat values."""
    return Tensor.from_flat(shape, values, requires_grad=requires_grad)


def _result(data, parents, backward_fn, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, _op=op, _validate=False)
    return Tensor(data, _validate=False, _op=op)


def _as_index_array(ids):
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1:
        raise ShapeError(f"index list must be one-dimensional, got shape {arr.shape}")
    return arr


# -- individual operations --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias broadcast over the last axis."""
    if a.shape == b.shape:
        def backward_fn(g):
            return g, g
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward_fn(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes) if axes else g
    else:
        raise ShapeError(f"add needs matching shapes or a last-axis bias, "
                         f"got {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), backward_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs matching shapes, got {a.shape} * {b.shape}")

    def backward_fn(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def mul_scalar(a: Tensor, scalar: float) -> Tensor:
    s = float(scalar)
    if not math.isfinite(s):
        raise AutodiffError("scalar factor must be finite")

    def backward_fn(g):
        return (g * s,)

    return _result(a.data * s, (a,), backward_fn, "mul_scalar")


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = _as_index_array(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size == 0:
        raise ShapeError("embedding_gather needs at least one id")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise AutodiffError(
            f"token id out of range [0, {table.shape[0]}): {ids.tolist()}")
    out = table.data[ids]

    def backward_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _result(out, (table,), backward_fn, "embedding_gather")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    norm = (x.data - mean) * inv_std
    out = norm * gain.data + bias.data

    def backward_fn(g):
        dnorm = g * gain.data
        dx = inv_std * (dnorm - dnorm.mean(axis=-1, keepdims=True)
                        - norm * (dnorm * norm).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgain = (g * norm).sum(axis=axes) if axes else g * norm
        dbias = g.sum(axis=axes) if axes else g
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), backward_fn, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), backward_fn, "gelu")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    in_shape = x.shape

    def backward_fn(g):
        return (g.reshape(in_shape),)

    return _result(x.data.reshape(shape), (x,), backward_fn, "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")

    def backward_fn(g):
        return (g.T,)

    return _result(x.data.T, (x,), backward_fn, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward_fn, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of bounds "
                         f"for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return _result(x.data[index].copy(), (x,), backward_fn, "narrow")


def reduce_sum(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return _result(np.array(x.data.sum()), (x,), backward_fn, "sum")


def reduce_mean(x: Tensor) -> Tensor:
    size = x.data.size

    def backward_fn(g):
        return (np.full_like(x.data, g.reshape(-1)[0] / size),)

    return _result(np.array(x.data.mean()), (x,), backward_fn, "mean")


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean token-level cross-entropy over non-ignored target positions."""
    targets = _as_index_array(targets)
    if logits.data.ndim != 2 or targets.size != logits.shape[0]:
        raise ShapeError(f"cross_entropy needs (m,V) logits and m targets, "
                         f"got {logits.shape} with {targets.size} targets")
    vocab = logits.shape[1]
    active = np.ones(targets.size, dtype=bool) if ignore_index is None \
        else targets != ignore_index
    count = int(active.sum())
    if count == 0:
        raise AutodiffError("cross_entropy batch has no non-ignored targets")
    checked = targets[active]
    if checked.min() < 0 or checked.max() >= vocab:
        raise AutodiffError(f"target id out of range [0, {vocab})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.where(active)[0]
    loss = -log_probs[rows, targets[rows]].sum() / count

    def backward_fn(g):
        scale = g.reshape(-1)[0] / count
        dl = np.exp(log_probs)
        dl[~active] = 0.0
        dl[rows, targets[rows]] -= 1.0
        return (dl * scale,)

    return _result(np.array(loss), (logits,), backward_fn, "cross_entropy")


def gather_rows(x: Tensor, ids) -> Tensor:
    """Pick one column per row: out[j] = x[j, ids[j]]."""
    ids = _as_index_array(ids)
    if x.data.ndim != 2 or ids.size != x.shape[0]:
        raise ShapeError(f"gather_rows needs (m,V) input and m ids, "
                         f"got {x.shape} with {ids.size} ids")
    if ids.min() < 0 or ids.max() >= x.shape[1]:
        raise AutodiffError(f"column id out of range [0, {x.shape[1]})")
    rows = np.arange(ids.size)
    out = x.data[rows, ids].copy()

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[rows, ids] = g
        return (dx,)

    return _result(out, (x,), backward_fn, "gather_rows")


def attention_scores(q: Tensor, k: Tensor, n_heads: int,
                     mask: np.ndarray | None = None) -> Tensor:
    """Per-head scaled dot-product scores: (n,d),(m,d) -> (heads,n,m).

    ``mask`` is an additive constant of shape (n, m) applied to every head;
    it carries no gradient.
    """
    n, d = q.shape
    m, dk_total = k.shape
    if d != dk_total or d % n_heads != 0:
        raise ShapeError(f"attention_scores with {n_heads} heads needs matching "
                         f"model dims divisible by heads, got {q.shape}, {k.shape}")
    dk = d // n_heads
    scale = 1.0 / math.sqrt(dk)
    qh = q.data.reshape(n, n_heads, dk)
    kh = k.data.reshape(m, n_heads, dk)
    out = np.einsum("nhd,mhd->hnm", qh, kh) * scale
    if mask is not None:
        out = out + mask

    def backward_fn(g):
        dq = np.einsum("hnm,mhd->nhd", g, kh).reshape(n, d) * scale
        dkx = np.einsum("hnm,nhd->mhd", g, qh).reshape(m, d) * scale
        return dq, dkx

    return _result(out, (q, k), backward_fn, "attention_scores")


def attention_context(p: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Mix values with per-head weights: (heads,n,m),(m,d) -> (n,d)."""
    h, n, m = p.shape
    mv, d = v.shape
    if h != n_heads or mv != m or d % n_heads != 0:
        raise ShapeError(f"attention_context shapes mismatch: {p.shape}, {v.shape} "
                         f"with {n_heads} heads")
    dk = d // n_heads
    vh = v.data.reshape(m, n_heads, dk)
    out = np.einsum("hnm,mhd->nhd", p.data, vh).reshape(n, d)

    def backward_fn(g):
        gh = g.reshape(n, n_heads, dk)
        dp = np.einsum("nhd,mhd->hnm", gh, vh)
        dv = np.einsum("hnm,nhd->mhd", p.data, gh).reshape(m, d)
        return dp, dv

    return _result(out, (p, v), backward_fn, "attention_context")


# -- uniform kind dispatch ---------------------------------------------------

_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "embedding_gather": embedding_gather,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "narrow": narrow,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "cross_entropy": cross_entropy,
    "gather_rows": gather_rows,
    "attention_scores": attention_scores,
    "attention_context": attention_context,
}

OP_KINDS = tuple(_OPS)


def apply_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch an operation by kind name; inputs precede keyword attrs."""
    if kind not in _OPS:
        raise AutodiffError(f"unknown op kind {kind!r}")
    fn = _OPS[kind]
    attrs = attrs or {}
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# -- finite-difference verification ------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the leaf tensor ``x`` to a scalar Tensor and must be
    deterministic; two differing evaluations raise. ``coords`` optionally
    restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise AutodiffError("eps must be positive")
    first = f(x).item()
    second = f(x).item()
    if first != second:
        raise AutodiffError("function is not deterministic; grad_check aborted")

    x.zero_grad()
    out = f(x)
    if out._backward is not None:
        out.backward()
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        up = f(x).item()
        flat[i] = original - eps
        down = f(x).item()
        flat[i] = original
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
