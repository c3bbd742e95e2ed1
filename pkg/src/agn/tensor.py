"""Dense tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient, the result remembers its parents together with a closure that maps
the output gradient to one gradient per parent.  :func:`backward` walks that
graph in reverse topological order (the tape) and accumulates gradients on
the leaves.

Binary operations broadcast only over size-1 axes of tensors with the same
rank; there is no implicit rank extension.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

COSINE_EPS = 1e-8
NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        dtype = np.float32
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# broadcasting helpers


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast shapes {a} and {b}: rank differs")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(np.full((1,) * ref.ndim, a, dtype=ref.dtype))
    b = b if isinstance(b, Tensor) else Tensor(np.full((1,) * ref.ndim, b, dtype=ref.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    out = a.data - b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    broadcast_shape(a.shape, b.shape)
    out = a.data * b.data

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), _bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid, scale."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "sigmoid":
        return sigmoid(a)
    if op_kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))
    shape = x.shape

    def _bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, _norm_axes(axes, len(shape)))
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), _bw)


def mean_over(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / count)


def mean(x: Tensor) -> Tensor:
    return mean_over(x, tuple(range(x.ndim)))


def _norm_axes(axes, ndim: int) -> tuple:
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"invalid transpose axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    old = x.shape
    return _make(out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    axis %= ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(
                f"concat shapes {[u.shape for u in tensors]} disagree off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tensors, _bw)


def index_select(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = x.data[index]
    shape, dtype = x.shape, x.dtype

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] += g
        return (full,)

    return _make(np.array(out), (x,), _bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return index_select(x, tuple(idx))


def broadcast_sub(x: Tensor, y: Tensor) -> Tensor:
    """``x - y`` where ``y`` has size 1 along the axes it is broadcast over."""
    return sub(x, y)


def structural(op_kind: str, x, *args, **kwargs) -> Tensor:
    """Dispatch by name: transpose, concat, slice, reshape, mean_over, broadcast_sub."""
    table = {
        "transpose": transpose,
        "concat": concat,
        "slice": slice_axis,
        "reshape": reshape,
        "mean_over": mean_over,
        "broadcast_sub": broadcast_sub,
    }
    if op_kind not in table:
        raise ValueError(f"unknown structural op {op_kind!r}")
    return table[op_kind](x, *args, **kwargs)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _make(out, (a, b), _bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), _bw)


def cosine_rows(x: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarity between the rows of ``x[..., N, D]``.

    Rows with norm below ``eps`` have similarity 0 with everything,
    including themselves.
    """
    data = x.data
    norms = np.sqrt((data * data).sum(axis=-1, keepdims=True))
    valid = norms >= eps
    safe = np.where(valid, norms, 1)
    u = np.where(valid, data / safe, 0)
    raw = np.matmul(u, np.swapaxes(u, -1, -2))
    raw = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    out = np.clip(raw, -1, 1)
    inside = (raw >= -1) & (raw <= 1)

    def _bw(g):
        g = g * inside
        du = np.matmul(g + np.swapaxes(g, -1, -2), u)
        radial = (u * du).sum(axis=-1, keepdims=True)
        return (np.where(valid, (du - u * radial) / safe, 0),)

    return _make(out, (x,), _bw)


def norm_last(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Euclidean norm over the last axis; the gradient at the origin is 0."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def _bw(g):
        return (g[..., None] * x.data / np.maximum(n, eps)[..., None],)

    return _make(n, (x,), _bw)


# ---------------------------------------------------------------------------
# convolutions (channels-last, "same" zero padding)


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"convolution input must be [N,T,C] or [B,N,T,C], got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D convolution over the (joint, time) axes of ``x[(B,) N, T, C_in]``.

    ``weight`` has shape ``[kn, kt, C_in, C_out]`` with odd kernel sizes; the
    input is zero padded so the spatial size is preserved.
    """
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be [kn,kt,Cin,Cout], got {weight.shape}")
    kn, kt, cin, cout = weight.shape
    if kn % 2 == 0 or kt % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {kn}x{kt}")
    xb, squeeze = _as_batched(x)
    if xb.shape[-1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, input has shape {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv bias must have shape ({cout},), got {bias.shape}")
    B, N, T, _ = xb.shape
    pn, pt = kn // 2, kt // 2
    xp = np.pad(xb, ((0, 0), (pn, pn), (pt, pt), (0, 0))) if (pn or pt) else xb
    w = weight.data
    out = np.zeros((B, N, T, cout), dtype=np.result_type(xb, w))
    for i in range(kn):
        for j in range(kt):
            out += xp[:, i:i + N, j:j + T, :] @ w[i, j]
    if bias is not None:
        out += bias.data
    if squeeze:
        out = out[0]

    def _bw(g):
        gb = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(kn):
            for j in range(kt):
                dxp[:, i:i + N, j:j + T, :] += gb @ w[i, j].T
                dw[i, j] = np.tensordot(xp[:, i:i + N, j:j + T, :], gb, axes=([0, 1, 2], [0, 1, 2]))
        dx = dxp[:, pn:pn + N, pt:pt + T, :]
        if squeeze:
            dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _bw)


def conv_temporal(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-joint temporal convolution with ``weight[k, C_in, C_out]``; joints never mix."""
    if weight.ndim != 3:
        raise ShapeError(f"temporal conv weight must be [k,Cin,Cout], got {weight.shape}")
    return conv2d(x, reshape(weight, (1,) + weight.shape), bias)


def conv_spatial_temporal(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Convolution over joints and time; ``weight`` is ``[kn, kt, C_in, C_out]``.

    A ``[3, 3, ...]`` kernel mixes neighbouring joints and frames; ``[1, 3, ...]``
    is the purely temporal 1x3 variant.
    """
    return conv2d(x, weight, bias)


def conv_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Channel mixing ``x[..., C_in] @ weight[C_in, C_out] + bias`` at every location."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"1x1 conv: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"1x1 conv bias must have shape ({weight.shape[1]},), got {bias.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(x.ndim - 1))

    def _bw(g):
        dx = g @ weight.data.T
        dw = np.tensordot(x.data, g, axes=(lead, lead))
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=lead)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _bw)


# ---------------------------------------------------------------------------
# reverse pass


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of the graph nodes reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, tape: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = list(tape) if tape is not None else build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
