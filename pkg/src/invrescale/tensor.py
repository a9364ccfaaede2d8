"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Only the handful of operations the rescaling network needs are provided.
Image-shaped operations accept either a single ``(C, H, W)`` tensor or a
batch ``(N, C, H, W)``; the channel axis is always ``ndim - 3``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32
_CHECK_FINITE = True


class InvalidArgument(ValueError):
    """Raised when an operation receives inputs violating its shape contract."""


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the storage precision of newly created tensors.

    Used by gradient checks, which need float64 to make finite differences
    meaningful. Everything else runs in float32.
    """
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise InvalidArgument(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        """Wrap the result of a primitive.

        ``backward`` maps the output gradient to one gradient per parent
        (``None`` for parents that need none).
        """
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError("operation produced a non-finite value")
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=data.dtype if data.dtype.kind == "f" else _DTYPE)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its own Adam moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _channel_axis(x: Tensor, op: str) -> int:
    if x.ndim not in (3, 4):
        raise InvalidArgument(f"{op}: expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x.ndim - 3


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return Tensor.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def absolute(a: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    two = a.data.dtype.type(2)
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (g * two * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise InvalidArgument(f"leaky_relu slope must lie in (0,1), got {slope}")
    s = a.data.dtype.type(slope)
    mask = a.data >= 0
    out = np.where(mask, a.data, a.data * s)
    return Tensor.from_op(out, (a,), lambda g: (np.where(mask, g, g * s),))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``exp`` or ``neg``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"exp": exp, "neg": neg}
    if op in binary:
        if b is None:
            raise InvalidArgument(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise InvalidArgument(f"unknown elementwise op {op!r}")


# -- reductions ------------------------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise InvalidArgument("sum of empty tensor")
    shape = a.shape
    return Tensor.from_op(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype), (a,),
                          lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    if a.data.size == 0:
        raise InvalidArgument("mean of empty tensor")
    shape, n = a.shape, a.data.size
    return Tensor.from_op(np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype), (a,),
                          lambda g: (np.broadcast_to(g / n, shape).astype(a.data.dtype),))


def channel_sum(x: Tensor) -> Tensor:
    """Sum over the channel axis, keeping it as a single channel."""
    ax = _channel_axis(x, "channel_sum")
    shape = x.shape
    return Tensor.from_op(x.data.sum(axis=ax, keepdims=True), (x,),
                          lambda g: (np.broadcast_to(g, shape).copy(),))


def channel_mean(x: Tensor) -> Tensor:
    return scale(channel_sum(x), 1.0 / x.shape[_channel_axis(x, "channel_mean")])


def reduce(op: str, a: Tensor) -> Tensor:
    if op == "sum":
        return sum_(a)
    if op == "mean":
        return mean(a)
    raise InvalidArgument(f"unknown reduction {op!r}")


# -- structural ------------------------------------------------------------------

def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    out = np.array(a.data[index])

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor.from_op(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise InvalidArgument("concat of an empty list")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise InvalidArgument(f"concat: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return Tensor.from_op(out, tuple(tensors), lambda g: np.split(g, bounds, axis=axis))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, _channel_axis(tensors[0], "concat_channels"))


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel range ``[start, stop)`` of an image tensor."""
    _channel_axis(x, "channels")
    return take(x, (Ellipsis, slice(start, stop), slice(None), slice(None)))


def num_channels(x: Tensor) -> int:
    return x.shape[_channel_axis(x, "num_channels")]


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- convolution and resampling ----------------------------------------------------

def _as_batch(x: np.ndarray) -> np.ndarray:
    return x if x.ndim == 4 else x[None]


def _conv_raw(x: np.ndarray, w: np.ndarray, padding: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k == 1 and padding == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n,c,h,w,k,k
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with a square odd kernel."""
    _channel_axis(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise InvalidArgument(f"conv2d: weight must be (O,C,k,k), got {weight.shape}")
    o, c, k, _ = weight.shape
    if k % 2 == 0:
        raise InvalidArgument(f"conv2d: kernel size must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise InvalidArgument(f"conv2d: padding must be {(k - 1) // 2} for k={k}")
    if x.shape[-3] != c:
        raise InvalidArgument(f"conv2d: input has {x.shape[-3]} channels, weight expects {c}")
    if bias.shape != (o,):
        raise InvalidArgument(f"conv2d: bias must be ({o},), got {bias.shape}")

    batched = x.ndim == 4
    xb = _as_batch(x.data)
    out, cols = _conv_raw(xb, weight.data, padding)
    out = out + bias.data[None, :, None, None]
    n, _, h, wd = xb.shape

    def back(g):
        gb = _as_batch(g)
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            w_t = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_raw(gb, w_t, padding)
            if not batched:
                gx = gx[0]
        return gx, gw, gbias

    result = out if batched else out[0]
    return Tensor.from_op(np.ascontiguousarray(result), (x, weight, bias), back)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max; ties go to the first element in row-major order."""
    _channel_axis(x, "maxpool2")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise InvalidArgument(f"maxpool2 needs even extents, got {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return Tensor.from_op(out, (x,), back)


def upsample_nearest2(x: Tensor) -> Tensor:
    _channel_axis(x, "upsample_nearest2")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = x.shape[-2:]

    def back(g):
        return (g.reshape(*x.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    return Tensor.from_op(out, (x,), back)


def _unshuffle_np(x: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = x.shape
    y = x.reshape(*lead, c, h // r, r, w // r, r)
    nl = len(lead)
    perm = list(range(nl)) + [nl, nl + 2, nl + 4, nl + 1, nl + 3]
    return y.transpose(perm).reshape(*lead, c * r * r, h // r, w // r)


def _shuffle_np(x: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = x.shape
    y = x.reshape(*lead, c // (r * r), r, r, h, w)
    nl = len(lead)
    perm = list(range(nl)) + [nl, nl + 3, nl + 1, nl + 4, nl + 2]
    return y.transpose(perm).reshape(*lead, c // (r * r), h * r, w * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth: (C,H,W) -> (C*r*r, H/r, W/r)."""
    _channel_axis(x, "pixel_unshuffle")
    h, w = x.shape[-2:]
    if r < 1 or h % r or w % r:
        raise InvalidArgument(f"pixel_unshuffle: {h}x{w} not divisible by r={r}")
    out = np.ascontiguousarray(_unshuffle_np(x.data, r))
    return Tensor.from_op(out, (x,), lambda g: (_shuffle_np(g, r),))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle`."""
    c = x.shape[_channel_axis(x, "pixel_shuffle")]
    if r < 1 or c % (r * r):
        raise InvalidArgument(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    out = np.ascontiguousarray(_shuffle_np(x.data, r))
    return Tensor.from_op(out, (x,), lambda g: (_unshuffle_np(g, r),))


def straight_through(a: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply ``fn`` in the forward pass and pass gradients through unchanged."""
    out = np.asarray(fn(a.data), dtype=a.data.dtype)
    if out.shape != a.shape:
        raise InvalidArgument(f"straight_through: fn changed shape {a.shape} -> {out.shape}")
    return Tensor.from_op(out, (a,), lambda g: (g,))


# -- differentiation -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-enabled leaf.

    The tape below ``loss`` is released afterwards.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# -- optimisation ------------------------------------------------------------------

def adam_step(params: Iterable[Parameter], lr: float = 2e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place; gradients are cleared."""
    b1, b2 = betas
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * (g * g)
        m_hat = p.m / (1 - b1 ** p.step)
        v_hat = p.v / (1 - b2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
