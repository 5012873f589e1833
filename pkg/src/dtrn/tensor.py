"""Dense tensors with tape-based reverse-mode autodiff and Adam.

Every op takes and returns :class:`Tensor` objects wrapping a numpy array.
When a :class:`Tape` is active (``with Tape() as tape:``) and at least one
input requires a gradient, the op appends a node to the tape; ``backward``
then walks the tape in reverse execution order.  Outside a tape nothing is
recorded, which is how evaluation runs.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, or one operand being a 1-D vector whose length equals the other's
trailing dimension (a trailing vector broadcast over rows).  Anything else
must go through :func:`expand`, which is explicit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class DegenerateRowError(ValueError):
    """Raised when a softmax row has every position masked."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """Trainable leaf carrying its gradient and Adam moments."""

    __slots__ = ("grad", "adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def constant(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def records(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.nodes.append(_Node(out, tuple(inputs), backward_fn, op))
    tape._outputs.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.records(loss):
        raise TapeError("loss was not produced under this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if isinstance(inp, Parameter):
                params[key] = inp
    for key, p in params.items():
        p.grad += grads[key].astype(p.grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise


def _binary_layout(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_vec"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_vec"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, layout: str, which: str) -> np.ndarray:
    if layout == "same" or (layout == "b_vec" and which == "a") or (layout == "a_vec" and which == "b"):
        return g
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    layout = _binary_layout(a, b, "add")

    def bw(g):
        return _reduce_to(g, layout, "a"), _reduce_to(g, layout, "b")

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    layout = _binary_layout(a, b, "sub")

    def bw(g):
        return _reduce_to(g, layout, "a"), -_reduce_to(g, layout, "b")

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    layout = _binary_layout(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, layout, "a"), _reduce_to(g * ad, layout, "b")

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * pos,), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch by name over {add, mul, relu, sigmoid}."""
    table = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix (k, n) shared across all leading axes of
    ``a``, or has exactly ``a``'s leading axes (batched product).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and (b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if shared:
        # One 2-D product per leading slice: a slice's result then does not
        # depend on how many slices are stacked beside it (BLAS kernels may
        # round differently for different row counts).
        n_out = bd.shape[-1]
        if ad.ndim >= 3:
            out = np.stack([(s.reshape(-1, s.shape[-1]) @ bd).reshape(s.shape[:-1] + (n_out,)) for s in ad])
        else:
            out = ad @ bd
    else:
        out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def layer_norm_stats(x, eps: float = LN_EPS):
    """Per-row mean and ``sqrt(population variance + eps)`` over the last axis."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    mu = arr.mean(axis=-1, keepdims=True)
    var = ((arr - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + arr.dtype.type(eps))
    return mu, sigma


def normalize(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """(x - mu) / sigma over the last axis; the affine part lives in the caller."""
    mu, sigma = layer_norm_stats(x, eps)
    xhat = (x.data - mu) / sigma

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) / sigma,)

    return _make(xhat, (x,), bw, "normalize")


def softmax_masked(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; positions where ``mask`` is False get exactly 0.

    ``mask`` is a boolean array broadcastable to ``x``; None means no masking.
    """
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not m.any(axis=-1).all():
            raise DegenerateRowError("softmax_masked: a row has every position masked")
        filled = np.where(m, xd, -np.inf)
        z = filled - filled.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, z, 0)), 0).astype(xd.dtype)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# indexing and layout


def gather_rows(table: Tensor, indices) -> Tensor:
    """table[indices] for an integer index array of any shape; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    k = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        bad = idx[(idx < 0) | (idx >= k)].reshape(-1)[0]
        raise IndexError(f"gather_rows: index {int(bad)} out of range for table with {k} rows")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), bw, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of no tensors")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes differ {shape} vs {t.shape}")
    ax = axis % (len(shape) + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=ax), ts, bw, "stack")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes (same rank) to ``shape``."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bw, "expand")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice / integer) indexing."""
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(np.array(out), (x,), bw, "index")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Sum over columns of the batch-mean binary cross-entropy, from logits.

    Uses max(o, 0) - o*y + log(1 + exp(-|o|)), which never overflows.
    """
    y = np.asarray(labels)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: labels {y.shape} vs logits {logits.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    o = logits.data
    y = y.astype(o.dtype)
    per = np.maximum(o, 0) - o * y + np.log1p(np.exp(-np.abs(o)))
    n = o.shape[0]
    loss = np.asarray(per.sum(axis=0).sum() / n, dtype=o.dtype) if o.ndim > 1 else np.asarray(per.sum() / n, dtype=o.dtype)

    def bw(g):
        return (g * (_stable_sigmoid(o) - y) / n,)

    return _make(loss, (logits,), bw, "bce_with_logits")


# ---------------------------------------------------------------------------
# optimisation


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from the accumulated gradients."""
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1 - beta2 ** p.step_count)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
