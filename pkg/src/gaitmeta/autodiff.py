"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations on tensors that belong to a :class:`Trace` are appended to that
trace as records. :func:`backward` walks the records in reverse. Every
vector-Jacobian product is itself written in terms of the primitives below, so
running the backward pass with ``create_graph=True`` records it on the same
trace and a second backward pass yields exact second derivatives.

Example::

    tr = Trace()
    x = tr.leaf(2.0)
    (g,) = grad(x * x * x, [x], create_graph=True)   # 3x^2 = 12
    (h,) = grad(g, [x])                               # 6x = 12
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Trace", "Record", "ShapeError", "PRIMITIVES",
    "eval_primitive", "backward", "grad_with_graph", "grad", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "conv1d", "batch_norm",
    "relu", "concat", "softmax", "log_softmax", "log", "exp", "mean", "sum",
    "square", "sqrt", "reshape", "transpose", "broadcast_to", "sum_to",
    "slice_axis", "pad_axis", "unfold", "fold",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally bound to a node of a trace."""

    __slots__ = ("value", "node", "trace")
    __array_priority__ = 100  # so ndarray <op> Tensor defers to Tensor

    def __init__(self, value: Any, *, _node: int | None = None,
                 _trace: "Trace | None" = None, _owned: bool = False):
        if _owned and isinstance(value, np.ndarray) and value.dtype == np.float64:
            arr = value
        else:
            arr = np.array(value, dtype=np.float64)
        self.value = _readonly(arr)
        self.node = _node
        self.trace = _trace

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value, _owned=True)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return neg(self)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(slots=True)
class Record:
    """One executed primitive: operator, operand tensors, output, attributes."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict

    @property
    def input_ids(self) -> tuple[int | None, ...]:
        return tuple(t.node if t.trace is self.output.trace else None for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.node


@dataclass
class Trace:
    """Ordered log of primitive applications on tracked tensors.

    A trace is single-threaded. Independent traces share no mutable state.
    """

    records: list[Record] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    recording: bool = True
    _next: int = 0
    _producer: dict[int, int] = field(default_factory=dict)

    def _new_node(self) -> int:
        n = self._next
        self._next += 1
        return n

    def leaf(self, value: Any) -> Tensor:
        """Register a differentiable input."""
        arr = np.array(value.value if isinstance(value, Tensor) else value, dtype=np.float64)
        t = Tensor(arr, _node=self._new_node(), _trace=self, _owned=True)
        self.leaves[t.node] = t
        return t

    def _record(self, kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, attrs: dict) -> Tensor:
        out = Tensor(value, _node=self._new_node(), _trace=self, _owned=True)
        self._producer[out.node] = len(self.records)
        self.records.append(Record(kind, inputs, out, attrs))
        return out

    @contextlib.contextmanager
    def paused(self) -> Iterator[None]:
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    def replay(self, leaf_values: Mapping[int, Any] | None = None) -> dict[int, np.ndarray]:
        """Re-evaluate every record; returns node id -> value."""
        vals: dict[int, np.ndarray] = {n: t.value for n, t in self.leaves.items()}
        for n, v in (leaf_values or {}).items():
            if n not in self.leaves:
                raise KeyError(f"node {n} is not a leaf of this trace")
            vals[n] = np.asarray(v, dtype=np.float64)
        for rec in self.records:
            args = [vals[t.node] if t.trace is self and t.node is not None else t.value
                    for t in rec.inputs]
            vals[rec.output.node] = PRIMITIVES[rec.kind].forward(*args, **rec.attrs)
        return vals


# ---------------------------------------------------------------------------
# primitive registry

VJP = Callable[..., Sequence["Tensor | None"]]


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: VJP
    check: Callable[..., None] | None = None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward, vjp, check=None) -> None:
    PRIMITIVES[name] = Primitive(name, forward, vjp, check)


def _owning_trace(tensors: Sequence[Tensor]) -> "Trace | None":
    trace = None
    for t in tensors:
        if t.trace is not None:
            if trace is None:
                trace = t.trace
            elif t.trace is not trace:
                raise ValueError("operands belong to different traces")
    return trace


def eval_primitive(kind: str, *inputs: Any, **attrs: Any) -> Tensor:
    """Apply primitive ``kind``; records it when an operand is being traced."""
    prim = PRIMITIVES[kind]
    tensors = tuple(as_tensor(x) for x in inputs)
    if prim.check is not None:
        prim.check(*(t.shape for t in tensors), **attrs)
    value = prim.forward(*(t.value for t in tensors), **attrs)
    trace = _owning_trace(tensors)
    if trace is not None and trace.recording:
        return trace._record(kind, tensors, value, attrs)
    return Tensor(value, _owned=True)


def _shape_error(kind: str, *shapes) -> ShapeError:
    return ShapeError(f"{kind}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def _check_broadcast(kind):
    def check(a, b):
        try:
            np.broadcast_shapes(a, b)
        except ValueError:
            raise _shape_error(kind, a, b) from None
    return check


# -- elementwise binary ------------------------------------------------------

def _vjp_add(g, ins, out, needs):
    a, b = ins
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None)


def _vjp_sub(g, ins, out, needs):
    a, b = ins
    return (sum_to(g, a.shape) if needs[0] else None,
            neg(sum_to(g, b.shape)) if needs[1] else None)


def _vjp_mul(g, ins, out, needs):
    a, b = ins
    return (sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None)


def _vjp_div(g, ins, out, needs):
    a, b = ins
    ga = sum_to(div(g, b), a.shape) if needs[0] else None
    # d(a/b)/db = -(a/b)/b
    gb = neg(sum_to(div(mul(g, out), b), b.shape)) if needs[1] else None
    return ga, gb


_register("add", np.add, _vjp_add, _check_broadcast("add"))
_register("sub", np.subtract, _vjp_sub, _check_broadcast("sub"))
_register("mul", np.multiply, _vjp_mul, _check_broadcast("mul"))
_register("div", np.divide, _vjp_div, _check_broadcast("div"))


# -- elementwise unary -------------------------------------------------------

_register("neg", np.negative, lambda g, ins, out, needs: (neg(g),))
_register("square", np.square,
          lambda g, ins, out, needs: (mul(g, mul(ins[0], 2.0)),))
_register("log", np.log, lambda g, ins, out, needs: (div(g, ins[0]),))
_register("exp", np.exp, lambda g, ins, out, needs: (mul(g, out),))


def _vjp_relu(g, ins, out, needs):
    # piecewise linear: the mask is a constant, second derivative is zero
    return (mul(g, (ins[0].value > 0).astype(np.float64)),)


_register("relu", lambda x: np.maximum(x, 0.0), _vjp_relu)


def _vjp_sqrt(g, ins, out, needs):
    # gradient defined as 0 where the radicand is exactly 0
    zero = out.value == 0.0
    denom = add(mul(out, 2.0), zero.astype(np.float64))
    return (mul(div(g, denom), (~zero).astype(np.float64)),)


_register("sqrt", np.sqrt, _vjp_sqrt)


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _fwd_sum(x, axis=None, keepdims=False):
    return np.asarray(np.sum(x, axis=axis, keepdims=keepdims), dtype=np.float64)


def _fwd_mean(x, axis=None, keepdims=False):
    return np.asarray(np.mean(x, axis=axis, keepdims=keepdims), dtype=np.float64)


def _vjp_sum(g, ins, out, needs, axis=None, keepdims=False):
    x = ins[0]
    axes = _norm_axes(axis, x.ndim)
    return (broadcast_to(reshape(g, _keep_shape(x.shape, axes)), x.shape),)


def _vjp_mean(g, ins, out, needs, axis=None, keepdims=False):
    x = ins[0]
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return (mul(broadcast_to(reshape(g, _keep_shape(x.shape, axes)), x.shape), 1.0 / count),)


_register("sum", _fwd_sum, _vjp_sum)
_register("mean", _fwd_mean, _vjp_mean)


def _check_reshape(a, shape):
    if int(np.prod(a)) != int(np.prod(shape)):
        raise _shape_error("reshape", a, shape)


_register("reshape", lambda x, shape: np.reshape(x, shape),
          lambda g, ins, out, needs, shape: (reshape(g, ins[0].shape),), _check_reshape)
_register("transpose", lambda x, axes: np.transpose(x, axes),
          lambda g, ins, out, needs, axes: (transpose(g, tuple(np.argsort(axes))),))


def _check_broadcast_to(a, shape):
    try:
        if np.broadcast_shapes(a, shape) != tuple(shape):
            raise ValueError
    except ValueError:
        raise _shape_error("broadcast_to", a, shape) from None


def _fwd_sum_to(x, shape):
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape)
                                      if s == 1 and x.shape[i + lead] != 1)
    out = np.sum(x, axis=axes, keepdims=True) if axes else x
    return np.asarray(out.reshape(shape), dtype=np.float64)


def _check_sum_to(a, shape):
    _check_broadcast_to(shape, a)


_register("broadcast_to", lambda x, shape: np.ascontiguousarray(np.broadcast_to(x, shape)),
          lambda g, ins, out, needs, shape: (sum_to(g, ins[0].shape),), _check_broadcast_to)
_register("sum_to", _fwd_sum_to,
          lambda g, ins, out, needs, shape: (broadcast_to(g, ins[0].shape),), _check_sum_to)


def _fwd_slice(x, axis, start, stop):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(idx)])


def _fwd_pad(x, axis, before, after):
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    return np.pad(x, widths)


_register("slice_axis", _fwd_slice,
          lambda g, ins, out, needs, axis, start, stop:
          (pad_axis(g, axis, start, ins[0].shape[axis] - stop),))
_register("pad_axis", _fwd_pad,
          lambda g, ins, out, needs, axis, before, after:
          (slice_axis(g, axis, before, before + ins[0].shape[axis]),))


def _check_concat(*shapes, axis):
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref))
                                     if i != axis % len(ref)):
            raise _shape_error("concat", ref, s)


def _vjp_concat(g, ins, out, needs, axis):
    grads, start = [], 0
    for t, need in zip(ins, needs):
        stop = start + t.shape[axis]
        grads.append(slice_axis(g, axis, start, stop) if need else None)
        start = stop
    return grads


_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _vjp_concat, _check_concat)


# -- matmul --------------------------------------------------------------------

def _check_matmul(a, b):
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise _shape_error("matmul", a, b)


def _vjp_matmul(g, ins, out, needs):
    a, b = ins
    return (matmul(g, transpose(b, (1, 0))) if needs[0] else None,
            matmul(transpose(a, (1, 0)), g) if needs[1] else None)


_register("matmul", np.matmul, _vjp_matmul, _check_matmul)


# -- convolution ---------------------------------------------------------------

def _fwd_unfold(x, width):
    # [B, C, L] -> [B, L - width + 1, C * width]
    b, c, _ = x.shape
    win = sliding_window_view(x, width, axis=2)        # [B, C, L', width]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b, -1, c * width)


def _fwd_fold(u, width, length):
    # adjoint of unfold: scatter-add windows back onto a length-`length` axis
    b, lo, cw = u.shape
    c = cw // width
    u4 = u.reshape(b, lo, c, width)
    out = np.zeros((b, c, length))
    for j in range(width):
        out[:, :, j:j + lo] += u4[:, :, :, j].transpose(0, 2, 1)
    return out


def _check_unfold(a, width):
    if len(a) != 3 or not 1 <= width <= a[2]:
        raise _shape_error("unfold", a, (width,))


_register("unfold", _fwd_unfold,
          lambda g, ins, out, needs, width: (fold(g, width, ins[0].shape[2]),), _check_unfold)
def _check_fold(a, width, length):
    if len(a) != 3 or width < 1 or a[2] % width or a[1] != length - width + 1:
        raise _shape_error("fold", a, (width, length))


_register("fold", _fwd_fold,
          lambda g, ins, out, needs, width, length: (unfold(g, width),), _check_fold)


def _same_padding(width: int) -> tuple[int, int]:
    return (width - 1) // 2, width // 2


def _pads(width, padding):
    if padding == "same":
        return _same_padding(width)
    return int(padding), int(padding)


def _fwd_conv1d(x, w, padding="same"):
    o, c, width = w.shape
    left, right = _pads(width, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right))) if left or right else x
    u = _fwd_unfold(xp, width)                         # [B, L, C*width]
    y = u.reshape(-1, c * width) @ w.reshape(o, -1).T  # [B*L, O]
    return np.ascontiguousarray(y.reshape(x.shape[0], -1, o).transpose(0, 2, 1))


def _check_conv1d(a, w, padding="same"):
    if len(a) != 3 or len(w) != 3 or a[1] != w[1]:
        raise _shape_error("conv1d", a, w)
    left, right = _pads(w[2], padding)
    if a[2] + left + right < w[2]:
        raise _shape_error("conv1d", a, w)


def _vjp_conv1d(g, ins, out, needs, padding="same"):
    x, w = ins
    o, c, width = w.shape
    bsz, _, length = x.shape
    left, right = _pads(width, padding)
    lout = g.shape[2]
    g2 = reshape(transpose(g, (0, 2, 1)), (bsz * lout, o))
    gx = gw = None
    if needs[1]:
        xp = pad_axis(x, 2, left, right) if left or right else x
        u = reshape(unfold(xp, width), (bsz * lout, c * width))
        gw = reshape(matmul(transpose(g2, (1, 0)), u), w.shape)
    if needs[0]:
        gu = reshape(matmul(g2, reshape(w, (o, c * width))), (bsz, lout, c * width))
        gxp = fold(gu, width, length + left + right)
        gx = slice_axis(gxp, 2, left, left + length) if left or right else gxp
    return gx, gw


_register("conv1d", _fwd_conv1d, _vjp_conv1d, _check_conv1d)


# -- batch normalisation ---------------------------------------------------------

BN_EPS = 1e-5


def _bn_shape(ndim):
    return (1, -1) + (1,) * (ndim - 2)


def _fwd_batch_norm(x, gamma, beta, eps=BN_EPS):
    axes = (0,) + tuple(range(2, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma.reshape(_bn_shape(x.ndim)) + beta.reshape(_bn_shape(x.ndim))


def _check_batch_norm(a, gamma, beta, eps=BN_EPS):
    if len(a) < 2 or gamma != (a[1],) or beta != (a[1],):
        raise _shape_error("batch_norm", a, gamma)


def _vjp_batch_norm(g, ins, out, needs, eps=BN_EPS):
    x, gamma, beta = ins
    axes = (0,) + tuple(range(2, x.ndim))
    c = x.shape[1]
    xc = sub(x, mean(x, axes, keepdims=True))
    inv = div(1.0, sqrt(add(mean(square(xc), axes, keepdims=True), eps)))
    xhat = mul(xc, inv)
    gx = ggamma = gbeta = None
    if needs[0]:
        gh = mul(g, reshape(gamma, (1, c) + (1,) * (x.ndim - 2)))
        inner = sub(sub(gh, mean(gh, axes, keepdims=True)),
                    mul(xhat, mean(mul(gh, xhat), axes, keepdims=True)))
        gx = mul(inner, inv)
    if needs[1]:
        ggamma = reshape(sum(mul(g, xhat), axes), (c,))
    if needs[2]:
        gbeta = reshape(sum(g, axes), (c,))
    return gx, ggamma, gbeta


_register("batch_norm", _fwd_batch_norm, _vjp_batch_norm, _check_batch_norm)


# -- softmax family ----------------------------------------------------------------

def _fwd_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _fwd_log_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _vjp_softmax(g, ins, out, needs, axis=-1):
    return (mul(out, sub(g, sum(mul(g, out), axis, keepdims=True))),)


def _vjp_log_softmax(g, ins, out, needs, axis=-1):
    return (sub(g, mul(exp(out), sum(g, axis, keepdims=True))),)


_register("softmax", _fwd_softmax, _vjp_softmax)
_register("log_softmax", _fwd_log_softmax, _vjp_log_softmax)


# ---------------------------------------------------------------------------
# public op wrappers

def add(a, b): return eval_primitive("add", a, b)
def sub(a, b): return eval_primitive("sub", a, b)
def mul(a, b): return eval_primitive("mul", a, b)
def div(a, b): return eval_primitive("div", a, b)
def neg(a): return eval_primitive("neg", a)
def square(a): return eval_primitive("square", a)
def sqrt(a): return eval_primitive("sqrt", a)
def log(a): return eval_primitive("log", a)
def exp(a): return eval_primitive("exp", a)
def relu(a): return eval_primitive("relu", a)
def matmul(a, b): return eval_primitive("matmul", a, b)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return eval_primitive("sum", a, axis=_axis_attr(axis), keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return eval_primitive("mean", a, axis=_axis_attr(axis), keepdims=keepdims)


def _axis_attr(axis):
    return tuple(axis) if isinstance(axis, (list, tuple)) else axis


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    return a if a.shape == shape else eval_primitive("reshape", a, shape=shape)


def transpose(a, axes):
    axes = tuple(int(i) for i in axes)
    return a if axes == tuple(range(len(axes))) else eval_primitive("transpose", a, axes=axes)


def broadcast_to(a, shape):
    a = as_tensor(a)
    return a if a.shape == tuple(shape) else eval_primitive("broadcast_to", a, shape=tuple(shape))


def sum_to(a, shape):
    a = as_tensor(a)
    return a if a.shape == tuple(shape) else eval_primitive("sum_to", a, shape=tuple(shape))


def slice_axis(a, axis, start, stop):
    return eval_primitive("slice_axis", a, axis=axis, start=start, stop=stop)


def pad_axis(a, axis, before, after):
    return eval_primitive("pad_axis", a, axis=axis, before=before, after=after)


def unfold(a, width):
    return eval_primitive("unfold", a, width=width)


def fold(a, width, length):
    return eval_primitive("fold", a, width=width, length=length)


def conv1d(x, w, padding: str | int = "same"):
    """Stride-1 cross-correlation. ``x``: [B, C, L]; ``w``: [O, C, width]."""
    return eval_primitive("conv1d", x, w, padding=padding)


def batch_norm(x, gamma, beta, eps: float = BN_EPS):
    """Normalise channel axis 1 with statistics of the current batch."""
    return eval_primitive("batch_norm", x, gamma, beta, eps=eps)


def concat(tensors: Sequence, axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    return eval_primitive("concat", *tensors, axis=axis % tensors[0].ndim)


def softmax(a, axis: int = -1):
    return eval_primitive("softmax", a, axis=axis)


def log_softmax(a, axis: int = -1):
    return eval_primitive("log_softmax", a, axis=axis)


# ---------------------------------------------------------------------------
# differentiation

GradientMap = dict[int, Tensor]


def backward(scalar: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> GradientMap:
    """Gradients of a one-element tensor w.r.t. ``leaves``, keyed by node id.

    Leaves the scalar does not depend on get a zero gradient. With
    ``create_graph`` the returned gradients are nodes of the same trace.
    """
    if scalar.size != 1:
        raise ShapeError(f"backward: expected a one-element tensor, got shape {scalar.shape}")
    leaves = list(leaves)
    trace = scalar.trace
    for leaf in leaves:
        if leaf.node is None:
            raise ValueError("backward: leaf is not tracked by any trace")
        if trace is not None and leaf.trace is not trace:
            raise ValueError("backward: leaf belongs to a different trace")
    grads: dict[int, Tensor] = {}
    if trace is not None and scalar.node is not None:
        wanted = {leaf.node for leaf in leaves}
        end = trace._producer.get(scalar.node)
        if end is not None:
            records = trace.records[:end + 1]
            # nodes that depend on at least one requested leaf
            reach = set(wanted)
            for rec in records:
                if any(t.trace is trace and t.node in reach for t in rec.inputs):
                    reach.add(rec.output.node)
            if scalar.node in reach:
                grads[scalar.node] = Tensor(np.ones(scalar.shape), _owned=True)
                ctx = contextlib.nullcontext() if create_graph else trace.paused()
                with ctx:
                    _accumulate(records, grads, reach, wanted, trace)
        elif scalar.node in wanted:
            grads[scalar.node] = Tensor(np.ones(scalar.shape), _owned=True)
    out: GradientMap = {}
    for leaf in leaves:
        g = grads.get(leaf.node)
        out[leaf.node] = g if g is not None else Tensor(np.zeros(leaf.shape), _owned=True)
    return out


def _accumulate(records, grads, reach, wanted, trace):
    for rec in reversed(records):
        node = rec.output.node
        g = grads.get(node) if node in wanted else grads.pop(node, None)
        if g is None:
            continue
        needs = tuple(t.trace is trace and t.node in reach for t in rec.inputs)
        if not any(needs):
            continue
        in_grads = PRIMITIVES[rec.kind].vjp(g, rec.inputs, rec.output, needs, **rec.attrs)
        for t, gi, need in zip(rec.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            prev = grads.get(t.node)
            grads[t.node] = gi if prev is None else add(prev, gi)


def grad_with_graph(scalar: Tensor, leaves: Sequence[Tensor]) -> GradientMap:
    """Like :func:`backward`, but the gradients stay differentiable."""
    return backward(scalar, leaves, create_graph=True)


def grad(scalar: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    gm = backward(scalar, leaves, create_graph=create_graph)
    return [gm[leaf.node] for leaf in leaves]
