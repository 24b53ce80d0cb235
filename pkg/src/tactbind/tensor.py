"""Dense tensors with reverse-mode autodiff on top of numpy.

Every primitive builds a node that remembers its inputs and a closure
mapping the output gradient to input gradients. ``backward`` walks the
nodes reachable from a scalar loss in reverse topological order.

Shape rules are strict. The only implicit broadcasts are:

* ``add(x, b)`` with ``b`` a 1-D bias whose length equals ``x``'s last axis;
* ``matmul(x, w)`` with ``x`` of shape ``(..., m, k)`` and a 2-D ``w``;
* ``multiply(x, s)`` with ``s`` a single-element tensor (a scalar gate).

Everything else must be spelled out (``expand``, ``reshape``, ``transpose``).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
RMS_EPS = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's rule."""


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, dtype={self.dtype})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``(m, k) @ (k, n)``, batched ``(..., m, k) @ (..., k, n)`` with identical
    leading dims, or ``(..., m, k) @ (k, n)`` (a shared weight matrix).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if shared and A.ndim > 2:
        # one 2-D product is much faster than numpy's broadcast loop
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + B.shape[-1:])
    else:
        out = A @ B

    def backward(g):
        if not a.requires_grad:
            ga = None
        elif shared and A.ndim > 2:
            ga = (g.reshape(-1, g.shape[-1]) @ B.T).reshape(A.shape)
        else:
            ga = g @ np.swapaxes(B, -1, -2)
        if not b.requires_grad:
            gb = None
        elif shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a bias vector over ``a``'s last axis."""
    a, b = as_tensor(a), as_tensor(b)
    bias = b.data.ndim == 1 and a.data.ndim > 1
    if bias:
        if b.shape[0] != a.shape[-1]:
            raise ShapeError(f"add: bias length {b.shape} does not match {a.shape}")
    else:
        _check_same_shape("add", a, b)
    out = a.data + b.data

    def backward(g):
        if bias:
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g, g

    return _node(out, (a, b), backward, "add")


def multiply(a, b) -> Tensor:
    """Elementwise product; either operand may hold a single element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.size == 1 and b.size != 1:
        a, b = b, a
        swapped = True
    else:
        swapped = False
    scalar = b.size == 1 and a.size != 1
    if not scalar:
        _check_same_shape("multiply", a, b)
    A, B = a.data, b.data
    Bv = B.reshape(()) if scalar else B
    out = A * Bv

    def backward(g):
        ga = g * Bv
        gb = np.sum(g * A).reshape(B.shape) if scalar else g * A
        return (gb, ga) if swapped else (ga, gb)

    parents = (b, a) if swapped else (a, b)
    return _node(out, parents, backward, "multiply")


def scale(x, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient for ``c``)."""
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _node(out, ts, backward, "concat")


def slice_(x, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous range ``[start, stop)`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis of size {n} in {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(out, (x,), backward, "slice")


def select(x, index: int, axis: int = 0) -> Tensor:
    """Pick one position along ``axis``, dropping that axis."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    if not 0 <= index < x.shape[ax]:
        raise ShapeError(f"select: index {index} out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[ax] = index
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(x.data[idx], (x,), backward, "select")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for {x.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``size`` times along it."""
    x = as_tensor(x)
    ax = axis % (x.data.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), size, axis=ax)
    return _node(out, (x,), lambda g: (g.sum(axis=ax),), "expand")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    d2 = d * d
    t = d2 * d
    t *= 0.044715
    t += d
    t *= GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= d
    y *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 a x^2)
        du = d2 * (3 * 0.044715)
        du += 1.0
        du *= GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= d
        s *= du
        s += t
        s += 1.0
        s *= 0.5
        s *= g
        return (s,)

    return _node(y, (x,), backward, "gelu")


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def softmax_rows(x, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    With ``causal=True`` the last two axes must be square and entry ``(i, j)``
    with ``j > i`` is excluded (its probability is exactly zero).
    """
    x = as_tensor(x)
    d = x.data
    if causal:
        if d.ndim < 2 or d.shape[-1] != d.shape[-2]:
            raise ShapeError(f"softmax_rows: causal mask needs square trailing dims, got {x.shape}")
        mask = _causal_mask(d.shape[-1])
        d = np.where(mask, -np.inf, d)
    m = np.max(d, axis=-1, keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (x,), backward, "softmax_rows")


def rms_norm(x, weight=None, eps: float = RMS_EPS) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis, optionally times ``weight``."""
    x = as_tensor(x)
    d = x.data
    n = d.shape[-1]
    r = 1.0 / np.sqrt(np.mean(d * d, axis=-1, keepdims=True) + eps)
    y = d * r

    def backward(g):
        return (r * (g - y * np.sum(g * y, axis=-1, keepdims=True) / n),)

    out = _node(y, (x,), backward, "rms_norm")
    if weight is None:
        return out
    weight = as_tensor(weight)
    if weight.shape != (n,):
        raise ShapeError(f"rms_norm: weight shape {weight.shape} does not match width {n}")
    W = weight.data

    def wbackward(g):
        return g * W, (g * y).reshape(-1, n).sum(axis=0)

    return _node(y * W, (out, weight), wbackward, "rms_scale")


def embedding_lookup(table, indices) -> Tensor:
    """Rows of a ``(V, D)`` table for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding_lookup: indices must be integers, got {idx.dtype}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise ShapeError(f"embedding_lookup: index out of range [0, {V}) in indices of shape {idx.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[idx], (table,), backward, "embedding_lookup")


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``(N, K)`` logits.

    Rows whose target equals ``ignore_index`` are skipped.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, K), got {logits.shape}")
    N, K = logits.shape
    if t.shape != (N,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} does not match logits {logits.shape}")
    keep = t != ignore_index
    bad = keep & ((t < 0) | (t >= K))
    if bad.any():
        raise ValueError(f"cross_entropy: target {int(t[bad][0])} out of range [0, {K})")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target is ignored")
    d = logits.data
    m = d.max(axis=1, keepdims=True)
    z = d - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def backward(g):
        p = np.exp(logp)
        p[rows, t[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / count),)

    return _node(np.asarray(loss, dtype=d.dtype), (logits,), backward, "cross_entropy")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),), "mean")


def sum_(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),), "sum")


PRIMITIVES = (
    "matmul", "add", "multiply", "concat", "slice", "tanh", "sigmoid", "gelu",
    "softmax_rows", "rms_norm", "embedding_lookup", "cross_entropy", "mean",
)


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate ``dloss/dleaf`` into ``.grad`` of every trainable leaf.

    If ``wrt`` is given, returns one gradient array per entry (zeros for
    leaves the loss does not depend on). Values of the graph are untouched.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    if wrt is None:
        return None
    return [grads[id(p)] if id(p) in grads else np.zeros_like(p.data) for p in wrt]


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.0e}"


def grad_check(
    fn: Callable[..., Tensor],
    point,
    tolerance: float = 1e-5,
    step: float = 1e-6,
    floor: float = 1e-4,
    name: str = "fn",
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn`` against central differences.

    ``point`` is a Tensor or a list of Tensors passed positionally to ``fn``.
    Per element the error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps near-zero gradients from turning round-off into huge ratios.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    leaves = [Tensor(np.array(p.data, dtype=np.float64), requires_grad=True) for p in points]
    analytic = backward(fn(*leaves), wrt=leaves)
    worst = 0.0
    with no_grad():
        for leaf, ga in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = fn(*leaves).item()
                flat[i] = orig - step
                fm = fn(*leaves).item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
                worst = max(worst, err)
    return GradCheckReport(name, worst, tolerance)
