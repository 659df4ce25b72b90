"""Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its forward value eagerly with numpy and, when
gradient recording is on and some input requires a gradient, attaches a
closure mapping the output gradient to input gradients. ``backward`` walks
the recorded graph in reverse topological order.

Broadcasting is deliberately narrow: two operands must either have equal
shapes or one shape must be a trailing suffix of the other (a bias row
added to a batch, a positional table added to every sequence).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from unigrf.errors import ContractError, DomainError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def set_default_dtype(dtype) -> None:
    """Select the float width used for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording backward rules."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come out of primitives and
    carry ``op`` (the primitive tag) plus references to their inputs.
    """

    __slots__ = ("values", "grad", "op", "inputs", "requires_grad", "name", "_backward", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(values, dtype=dtype or _DEFAULT_DTYPE)
        if arr is values and isinstance(values, np.ndarray):
            arr = arr.copy()
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = None
        self.inputs: tuple[Tensor, ...] = ()
        self.name = name
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        tag = self.op or ("param" if self.requires_grad else "const")
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({tag}{label}, shape={self.shape})"

    # operator sugar; all of these route through the primitives below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return elementwise_mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, kind: str, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.name = None
    out.op = None
    out.inputs = ()
    out._backward = None
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.op = kind
        out.inputs = inputs
        out._backward = backward
    return out


def _suffix_compatible(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    if len(a) < len(b):
        a, b = b, a
    return a[len(a) - len(b):] == b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if not (a.ndim == 2 or b.ndim == 2 or a.shape[:-2] == b.shape[:-2]):
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(av @ bv, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"add operands not suffix-compatible: {a.shape} + {b.shape}")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.values + b.values, "add", (a, b), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"elementwise_mul operands not suffix-compatible: {a.shape} * {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (
            _unbroadcast(g * bv, a.shape) if a.requires_grad else None,
            _unbroadcast(g * av, b.shape) if b.requires_grad else None,
        )

    return _make(av * bv, "elementwise_mul", (a, b), backward)


def row_sum(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    if x.ndim < 1:
        raise ShapeError("row_sum needs rank >= 1, got a scalar")
    n = x.shape[-1]

    def backward(g):
        return (np.repeat(np.expand_dims(g, -1), n, axis=-1),)

    return _make(x.values.sum(axis=-1), "row_sum", (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, "sigmoid", (x,), backward)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)

    def backward(g):
        return (g * e,)

    return _make(e, "exp", (x,), backward)


def log(x: Tensor) -> Tensor:
    xv = x.values
    if np.any(xv <= 0):
        bad = np.argwhere(xv <= 0)[0]
        raise DomainError(f"log of non-positive value {xv[tuple(bad)]!r} at index {tuple(int(i) for i in bad)}")

    def backward(g):
        return (g / xv,)

    return _make(np.log(xv), "log", (x,), backward)


def log_sum_exp_row(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, shifted by the row max."""
    if x.ndim < 1:
        raise ShapeError("log_sum_exp_row needs rank >= 1")
    xv = x.values
    m = xv.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xv - m)
    z = e.sum(axis=-1, keepdims=True)
    out = (np.log(z) + m)[..., 0]

    def backward(g):
        return (np.expand_dims(g, -1) * (e / z),)

    return _make(out, "log_sum_exp_row", (x,), backward)


def softmax_row(x: Tensor) -> Tensor:
    xv = x.values
    m = xv.max(axis=-1, keepdims=True)
    e = np.exp(xv - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax_row", (x,), backward)


def _check_indices(idx: np.ndarray, extent: int, kind: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ContractError(f"{kind} indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise ContractError(f"{kind} index out of range [0, {extent}): min={idx.min()}, max={idx.max()}")
    return idx


def gather_rows(table: Tensor, idx, axis: int = 0) -> Tensor:
    """Select slices of ``table`` along ``axis`` (row lookup for axis 0)."""
    axis = axis % table.ndim
    idx = _check_indices(idx, table.shape[axis], "gather_rows")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, (slice(None),) * axis + (idx,), g)
        return (gt,)

    return _make(np.take(table.values, idx, axis=axis), "gather_rows", (table,), backward)


def scatter_add_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Return a copy of ``base`` with ``rows[k]`` added into row ``idx[k]``."""
    idx = _check_indices(idx, base.shape[0], "scatter_add_rows")
    if rows.shape != idx.shape + base.shape[1:]:
        raise ShapeError(f"scatter_add_rows: rows {rows.shape} do not match indices {idx.shape} into {base.shape}")
    out = base.values.copy()
    np.add.at(out, idx, rows.values)

    def backward(g):
        return (g if base.requires_grad else None, g[idx] if rows.requires_grad else None)

    return _make(out, "scatter_add_rows", (base, rows), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gv + bias.values, "layer_norm", (x, gain, bias), backward)


def silu(x: Tensor) -> Tensor:
    xv = x.values
    s = _sigmoid(xv)

    def backward(g):
        return (g * (s + xv * s * (1.0 - s)),)

    return _make(xv * s, "silu", (x,), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.values * c, "scale", (x,), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.values, -1, -2), "transpose", (x,), backward)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if not _suffix_compatible(x.shape, mask.shape) or mask.ndim > x.ndim:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not fit input {x.shape}")

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _make(np.where(mask, value, x.values), "masked_fill", (x,), backward)


def concat_rows(inputs: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (rows by default)."""
    inputs = tuple(inputs)
    if not inputs:
        raise ShapeError("concat_rows needs at least one input")
    ndim = inputs[0].ndim
    axis = axis % ndim
    for t in inputs:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != inputs[0].shape[:axis] + inputs[0].shape[axis + 1:]:
            raise ShapeError(f"concat_rows: shapes {[t.shape for t in inputs]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.values for t in inputs], axis=axis), "concat_rows", inputs, backward)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "elementwise_mul": elementwise_mul,
    "row_sum": row_sum,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "log_sum_exp_row": log_sum_exp_row,
    "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
    "layer_norm": layer_norm,
    "silu": silu,
    "scale": scale,
    "transpose": transpose,
    "masked_fill": masked_fill,
    "softmax_row": softmax_row,
    "concat_rows": concat_rows,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch by tag. Non-tensor arguments (indices, masks, constants) go in ``attrs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if kind == "concat_rows":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Leaf gradients add onto whatever is already stored, so two calls without
    ``zero_grads`` in between sum their contributions. Returns the leaves
    that received a gradient, mapped to their (accumulated) gradient arrays.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
