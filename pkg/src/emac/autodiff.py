"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable primitive is a :class:`Function` subclass with a
``forward`` and a ``backward`` static method. Calling ``Fn.apply`` runs the
forward pass on raw arrays and, when any input requires a gradient, appends a
record to the active :class:`Tape`. :func:`backward` replays the tape in
reverse and clears it.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape

class Tape:
    """Ordered record of executed operations for one backward sweep."""

    def __init__(self):
        self.records: list[tuple[type, "Context", tuple[Tensor, ...], Tensor]] = []

    def record(self, fn, ctx, inputs, output):
        self.records.append((fn, ctx, inputs, output))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("emac_tape", default=None)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("emac_grad", default=True)


def current_tape() -> Tape:
    tape = _TAPE.get()
    if tape is None:
        tape = Tape()
        _TAPE.set(tape)
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape | None = None):
    tape = tape if tape is not None else Tape()
    token = _TAPE.set(tape)
    try:
        yield tape
    finally:
        _TAPE.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Context:
    __slots__ = ("saved", "__dict__")

    def __init__(self):
        self.saved = ()

    def save(self, *arrays):
        self.saved = arrays


class Function:
    @staticmethod
    def forward(ctx, *args, **kwargs):  # pragma: no cover - interface
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):  # pragma: no cover - interface
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        needs = grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=needs)
        if needs:
            ctx.needs_input_grad = tuple(t.requires_grad for t in tensors)
            current_tape().record(cls, ctx, tensors, result)
        return result


def backward(loss: Tensor, params: Iterable[Tensor] = (), tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every leaf on the tape (and of ``params``).

    Leaves that do not influence ``loss`` receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(rec[3]) for rec in tape.records}
    leaves: dict[int, Tensor] = {id(p): p for p in params}
    for fn, ctx, inputs, output in reversed(tape.records):
        for t in inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)
        g = grads.pop(id(output), None)
        if g is None:
            continue
        in_grads = fn.backward(ctx, g)
        if not isinstance(in_grads, tuple):
            in_grads = (in_grads,)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = _unbroadcast(gi, t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=DTYPE)
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, g):
        return g, -g


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return g * b, g * a


class Scale(Function):
    @staticmethod
    def forward(ctx, a, c):
        ctx.c = c
        return a * c

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.c,)


class AddScalar(Function):
    @staticmethod
    def forward(ctx, a, c):
        return a + c

    @staticmethod
    def backward(ctx, g):
        return (g,)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    @staticmethod
    def forward(ctx, x):
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        ctx.save(x, cdf)
        return x * cdf

    @staticmethod
    def backward(ctx, g):
        x, cdf = ctx.saved
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return AddScalar.apply(a, c=float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return AddScalar.apply(b, c=float(a))
    _check_broadcast(a, b, "add")
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return AddScalar.apply(a, c=-float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return AddScalar.apply(Scale.apply(b, c=-1.0), c=float(a))
    _check_broadcast(a, b, "sub")
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return Scale.apply(a, c=float(b))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return Scale.apply(b, c=float(a))
    _check_broadcast(a, b, "mul")
    return Mul.apply(a, b)


def scale(a, c: float) -> Tensor:
    return Scale.apply(a, c=float(c))


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def _check_broadcast(a, b, op):
    sa, sb = np.shape(as_tensor(a).data), np.shape(as_tensor(b).data)
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}") from None


# ---------------------------------------------------------------- linear algebra

class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    return MatMul.apply(a, b)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes):
        ctx.axes = axes
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx.axes)),)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    return Transpose.apply(a, axes=tuple(axes))


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.in_shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.in_shape),)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return Reshape.apply(a, shape=shape)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.axis = axis
        ctx.sizes = [x.shape[axis] for x in arrays]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=ctx.axis))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    return Concat.apply(*tensors, axis=ax)


class Index(Function):
    @staticmethod
    def forward(ctx, a, key):
        ctx.key = key
        ctx.in_shape = a.shape
        return np.array(a[key])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.in_shape, dtype=DTYPE)
        np.add.at(out, ctx.key, g)
        return (out,)


def index(a, key) -> Tensor:
    return Index.apply(a, key=key)


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    parts, start = [], 0
    for n in sizes:
        key = (slice(None),) * ax + (slice(start, start + n),)
        parts.append(index(a, key))
        start += n
    return parts


class Gather(Function):
    """Row gather along the token axis (-2) with a flat row index."""

    @staticmethod
    def forward(ctx, a, rows, out_shape):
        ctx.in_shape = a.shape
        ctx.rows = rows
        flat = a.reshape(-1, a.shape[-1])
        return flat[rows].reshape(out_shape)

    @staticmethod
    def backward(ctx, g):
        c = ctx.in_shape[-1]
        out = np.zeros((int(np.prod(ctx.in_shape[:-1])), c), dtype=DTYPE)
        np.add.at(out, ctx.rows, g.reshape(-1, c))
        return (out.reshape(ctx.in_shape),)


class ScatterRows(Function):
    """Copy of ``base`` whose rows ``dest`` are replaced by rows ``src`` of ``values``."""

    @staticmethod
    def forward(ctx, base, values, dest, src):
        ctx.dest, ctx.src = dest, src
        ctx.v_shape = values.shape
        c = base.shape[-1]
        out = base.reshape(-1, c).copy()
        out[dest] = values.reshape(-1, c)[src]
        return out.reshape(base.shape)

    @staticmethod
    def backward(ctx, g):
        c = g.shape[-1]
        g2 = g.reshape(-1, c)
        gb = g2.copy()
        gb[ctx.dest] = 0.0
        gv = np.zeros((int(np.prod(ctx.v_shape[:-1])), c), dtype=DTYPE)
        np.add.at(gv, ctx.src, g2[ctx.dest])
        return gb.reshape(g.shape), gv.reshape(ctx.v_shape)


def _flat_rows(shape: tuple[int, ...], idx: np.ndarray) -> np.ndarray:
    """Flatten a per-batch row index (..., R) into rows of a (..., L, C) array."""
    idx = np.asarray(idx, dtype=np.int64)
    lead = shape[:-2]
    n_rows = shape[-2]
    if idx.ndim == 1 and lead:
        idx = np.broadcast_to(idx, lead + idx.shape)
    if idx.shape[:-1] != lead:
        raise ShapeError(f"index batch dims {idx.shape[:-1]} do not match tensor {shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ContractError(f"row index out of range for {n_rows} rows")
    offsets = (np.arange(int(np.prod(lead)), dtype=np.int64) * n_rows).reshape(lead + (1,))
    return (idx + offsets).reshape(-1)


def gather(a, idx) -> Tensor:
    """Select rows ``idx`` (shape (..., R)) along the token axis of ``a`` (..., L, C)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = _flat_rows(a.shape, idx)
    lead = a.shape[:-2]
    out_shape = lead + (idx.shape[-1], a.shape[-1])
    return Gather.apply(a, rows=rows, out_shape=out_shape)


def scatter(base, idx, values) -> Tensor:
    """Write rows of ``values`` (..., R, C) into ``base`` (..., L, C) at positions ``idx``."""
    base, values = as_tensor(base), as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    dest = _flat_rows(base.shape, idx)
    src = np.arange(dest.size, dtype=np.int64)
    if values.data.size // values.shape[-1] != dest.size:
        raise ShapeError(f"scatter: {values.shape} rows do not match index {idx.shape}")
    return ScatterRows.apply(base, values, dest=dest, src=src)


def scatter_rows(base, values, dest: np.ndarray, src: np.ndarray) -> Tensor:
    """Low-level ragged row copy on flattened row indices."""
    return ScatterRows.apply(base, values, dest=np.asarray(dest, np.int64), src=np.asarray(src, np.int64))


def gather_flat(a, rows: np.ndarray, out_shape) -> Tensor:
    return Gather.apply(a, rows=np.asarray(rows, np.int64), out_shape=tuple(out_shape))


# ---------------------------------------------------------------- reductions

class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx.in_shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.in_shape).copy(),)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation

class Softmax(Function):
    @staticmethod
    def forward(ctx, x):
        z = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / np.sum(e, axis=-1, keepdims=True)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    return Softmax.apply(x)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps):
        mu = np.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        ctx.save(xhat, rstd, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gamma = ctx.saved
        lead = tuple(range(g.ndim - 1))
        g_gamma = np.sum(g * xhat, axis=lead)
        g_beta = np.sum(g, axis=lead)
        gx_hat = g * gamma
        gx = rstd * (
            gx_hat
            - np.mean(gx_hat, axis=-1, keepdims=True)
            - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    return LayerNorm.apply(x, gamma, beta, eps=float(eps))


PRIMITIVES = {
    "add": Add,
    "sub": Sub,
    "mul": Mul,
    "scale": Scale,
    "add_scalar": AddScalar,
    "gelu": Gelu,
    "matmul": MatMul,
    "transpose": Transpose,
    "reshape": Reshape,
    "concat": Concat,
    "index": Index,
    "gather": Gather,
    "scatter": ScatterRows,
    "sum": Sum,
    "softmax": Softmax,
    "layer_norm": LayerNorm,
}
