"""Dense-grid numerics with define-by-run reverse-mode differentiation.

Values are :class:`Grid` objects wrapping float64 numpy arrays. Image-like
grids use the ``(channels, height, width)`` layout; intermediate values built
by the losses (Parzen weight matrices, histograms) may take any shape.

Operations run eagerly. When a :class:`Tape` is active (``with Tape() as t``)
and at least one input requires a gradient, the operation is recorded together
with its vector-Jacobian product. ``t.backward(root)`` then fills adjoints that
can be read back with ``t.grad(x)``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_LEAKY_SLOPE = 0.2


class DomainError(ValueError):
    """An operand lies outside the domain of the requested operation."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Grid:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @classmethod
    def zeros(cls, *shape: int) -> "Grid":
        return cls(np.zeros(shape))

    @classmethod
    def ones(cls, *shape: int) -> "Grid":
        return cls(np.ones(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0] if self.data.ndim == 3 else 1

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = ", requires_grad" if self.requires_grad else ""
        return f"Grid(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; every method routes through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_grid(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_grid(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


Operand = "Grid | np.ndarray | float"


def as_grid(x) -> Grid:
    return x if isinstance(x, Grid) else Grid(x)


@dataclass
class _Node:
    out: Grid
    inputs: tuple[Grid, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the
    operations that consume them. Adjoints are allocated lazily during
    :meth:`backward` and keyed by the identity of the recorded grids.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._adjoints: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Grid] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def record(self, out: Grid, inputs: Sequence[Grid], vjp) -> None:
        for g in inputs:
            if g.requires_grad and id(g) not in self._leaves:
                self._leaves[id(g)] = g
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def reset(self) -> None:
        self.nodes.clear()
        self._adjoints.clear()
        self._leaves.clear()
        self._done = False

    def backward(self, root: Grid) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if self._done:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        self._done = True
        adj = self._adjoints
        adj[id(root)] = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = adj.get(id(node.out))
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = adj.get(key)
                adj[key] = gi if prev is None else prev + gi

    def grad(self, x: Grid) -> np.ndarray:
        """Adjoint of ``x``; zeros when ``x`` does not reach the root."""
        g = self._adjoints.get(id(x))
        if g is None:
            return np.zeros_like(x.data)
        return np.broadcast_to(g, x.shape).copy() if g.shape != x.shape else g


def backward(tape: Tape, root: Grid) -> Tape:
    """Populate adjoints of every node reachable from the scalar ``root``."""
    tape.backward(root)
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Grid], vjp) -> Grid:
    tape = _active_tape()
    needs = tape is not None and any(g.requires_grad for g in inputs)
    out = Grid(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a.data, b.data)
    x, y = a.data, b.data
    return _emit(x * y, (a, b),
                 lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    _check_broadcast(a.data, b.data)
    x, y = a.data, b.data
    if np.any(y == 0):
        raise DomainError("division by zero")
    out = x / y

    def vjp(g):
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)

    return _emit(out, (a, b), vjp)


def power(a, exponent: float) -> Grid:
    a = as_grid(a)
    x = a.data
    p = float(exponent)
    if not float(p).is_integer() and np.any(x < 0):
        raise DomainError("fractional power of a negative value")
    if p < 0 and np.any(x == 0):
        raise DomainError("negative power of zero")
    out = x ** p
    return _emit(out, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a) -> Grid:
    a = as_grid(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Grid:
    a = as_grid(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Grid:
    return power(a, 0.5)


def relu(a) -> Grid:
    a = as_grid(a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = DEFAULT_LEAKY_SLOPE) -> Grid:
    a = as_grid(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _emit(a.data * scale, (a,), lambda g: (g * scale,))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}
_UNARY = {"exp": exp, "log": log, "relu": relu, "leaky_relu": leaky_relu}


def elementwise(op_kind: str, a, b=None) -> Grid:
    """Dispatch an elementwise operation by name.

    Binary kinds (add, sub, mul, div, pow) take ``b`` as a grid or a scalar;
    for ``leaky_relu`` an optional ``b`` overrides the slope.
    """
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs a second operand")
        return _BINARY[op_kind](a, b)
    if op_kind == "leaky_relu":
        return leaky_relu(a, DEFAULT_LEAKY_SLOPE if b is None else b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def clip(a, lo: float, hi: float) -> Grid:
    a = as_grid(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions

def _window_sum(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x, pad)
    rows = sliding_window_view(xp, k, axis=-2).sum(axis=-1)
    return sliding_window_view(rows, k, axis=-1).sum(axis=-1)


def total(a, axis=None, keepdims: bool = False) -> Grid:
    a = as_grid(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Grid:
    a = as_grid(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(total(a, axis=axis, keepdims=keepdims), 1.0 / n)


def window_sum(a, k: int) -> Grid:
    """k-by-k sliding sum over the last two axes with zero padding."""
    a = as_grid(a)
    if k % 2 == 0 or k < 1:
        raise ValueError(f"window size must be odd, got {k}")
    # zero-padded odd window sum is a symmetric linear map: its adjoint is itself
    return _emit(_window_sum(a.data, k), (a,), lambda g: (_window_sum(g, k),))


def amax(a) -> Grid:
    a = as_grid(a)
    idx = int(np.argmax(a.data))

    def vjp(g):
        out = np.zeros(a.data.size)
        out[idx] = g
        return (out.reshape(a.shape),)

    return _emit(np.asarray(a.data.flat[idx]), (a,), vjp)


def amin(a) -> Grid:
    return mul(amax(mul(a, -1.0)), -1.0)


def reduce(op_kind: str, a, region: str = "all", k: int | None = None) -> Grid:
    """Sum or mean over every element, or over a k-by-k window per pixel."""
    a = as_grid(a)
    if a.data.size == 0:
        raise ShapeError("reduction over an empty grid")
    if op_kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    if region == "all":
        return total(a) if op_kind == "sum" else mean(a)
    if region == "window":
        if k is None:
            raise ValueError("window reduction needs k")
        s = window_sum(a, k)
        return s if op_kind == "sum" else mul(s, 1.0 / (k * k))
    raise ValueError(f"unknown region {region!r}")


# ------------------------------------------------------------ structural ops

def reshape(a, shape) -> Grid:
    a = as_grid(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Grid:
    a = as_grid(a)
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def take(a, index) -> Grid:
    a = as_grid(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit(a.data[index], (a,), vjp)


def concat(grids: Sequence[Grid], axis: int = 0) -> Grid:
    grids = [as_grid(g) for g in grids]
    sizes = np.cumsum([g.shape[axis] for g in grids])[:-1]
    try:
        out = np.concatenate([g.data for g in grids], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit(out, grids, lambda g: np.split(g, sizes, axis=axis))


def matmul(a, b) -> Grid:
    a, b = as_grid(a), as_grid(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    return _emit(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


# -------------------------------------------------------------- network ops

def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    p = k // 2
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    cols = cols.reshape(c, k, k, ho, wo)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += cols[:, dy, dx]
    return out[:, p:p + h, p:p + w]


def conv2d(x, kernel, bias=None, stride: int = 1) -> Grid:
    """Same-padded 2D cross-correlation.

    ``x`` is ``(C, H, W)``, ``kernel`` is ``(O, C, k, k)`` with odd ``k`` and
    ``bias`` is ``(O,)``. Output spatial size is ``ceil(H / stride)``.
    Kernel and bias may be given as :class:`Param` objects.
    """
    x = as_grid(x)
    kernel = kernel.grid if isinstance(kernel, Param) else as_grid(kernel)
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    o, c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.data.ndim != 3 or x.shape[0] != c:
        raise ShapeError(f"input {x.shape} does not match kernel channels {c}")
    cols, ho, wo = _im2col(x.data, k, stride)
    wmat = kernel.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, ho, wo)
    inputs: list[Grid] = [x, kernel]
    if bias is not None:
        bias = bias.grid if isinstance(bias, Param) else as_grid(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)
    xshape, kshape = x.shape, kernel.shape

    def vjp(g):
        gm = g.reshape(o, -1)
        gk = (gm @ cols.T).reshape(kshape)
        gx = _col2im(wmat.T @ gm, xshape, k, stride, ho, wo) if x.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return grads

    return _emit(out, inputs, vjp)


def _upsample_matrix(n: int) -> np.ndarray:
    # half-pixel-centre bilinear interpolation with edge clamping
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def upsample2x(x) -> Grid:
    """Bilinear 2x upsampling of the last two axes."""
    x = as_grid(x)
    uh = _upsample_matrix(x.shape[-2])
    uw = _upsample_matrix(x.shape[-1])
    out = uh @ x.data @ uw.T
    return _emit(out, (x,), lambda g: (uh.T @ g @ uw,))


def bilinear_sample(img, coords) -> Grid:
    """Sample ``img`` (C, H, W) at fractional positions with border clamping.

    ``coords`` has shape ``(2, *S)`` holding (y, x) pixel positions; the result
    has shape ``(C, *S)``. Positions outside the image are clamped to the edge,
    so their coordinate gradient is zero.
    """
    img, coords = as_grid(img), as_grid(coords)
    data = img.data
    if data.ndim != 3:
        raise ShapeError(f"image must be (C, H, W), got {data.shape}")
    if coords.shape[0] != 2:
        raise ShapeError(f"coords must lead with 2, got {coords.shape}")
    c, h, w = data.shape
    y = coords.data[0]
    x = coords.data[1]
    yc = np.clip(y, 0.0, h - 1.0)
    xc = np.clip(x, 0.0, w - 1.0)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = yc - y0
    tx = xc - x0
    v00 = data[:, y0, x0]
    v01 = data[:, y0, x1]
    v10 = data[:, y1, x0]
    v11 = data[:, y1, x1]
    w00 = (1 - ty) * (1 - tx)
    w01 = (1 - ty) * tx
    w10 = ty * (1 - tx)
    w11 = ty * tx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    in_y = (y >= 0) & (y <= h - 1)
    in_x = (x >= 0) & (x <= w - 1)

    def vjp(g):
        gimg = None
        if img.requires_grad:
            flat = g.reshape(c, -1)
            gimg = np.zeros((c, h * w))
            for idx, wt in ((y0 * w + x0, w00), (y0 * w + x1, w01),
                            (y1 * w + x0, w10), (y1 * w + x1, w11)):
                ii = idx.ravel()
                ww = wt.ravel()
                for ch in range(c):
                    gimg[ch] += np.bincount(ii, weights=flat[ch] * ww, minlength=h * w)
            gimg = gimg.reshape(c, h, w)
        dy = ((1 - tx) * (v10 - v00) + tx * (v11 - v01))
        dx = ((1 - ty) * (v01 - v00) + ty * (v11 - v10))
        gy = (g * dy).sum(axis=0) * in_y
        gx = (g * dx).sum(axis=0) * in_x
        return gimg, np.stack([gy, gx])

    return _emit(out, (img, coords), vjp)


# ------------------------------------------------------------------ optimizer

@dataclass
class Param:
    """A trainable grid with Adam moment buffers."""

    grid: Grid
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if not isinstance(self.grid, Grid):
            self.grid = Grid(self.grid)
        self.grid.requires_grad = True
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.grid.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.grid.data)

    @property
    def data(self) -> np.ndarray:
        return self.grid.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grid.shape


def adam_update(p: Param, grad: np.ndarray, lr: float = 1e-4, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> Param:
    """One bias-corrected Adam step, applied to ``p`` in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.grid.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {p.grid.shape}")
    p.step_count += 1
    t = p.step_count
    p.adam_m = beta1 * p.adam_m + (1 - beta1) * grad
    p.adam_v = beta2 * p.adam_v + (1 - beta2) * grad * grad
    m_hat = p.adam_m / (1 - beta1 ** t)
    v_hat = p.adam_v / (1 - beta2 ** t)
    # fresh array: closures captured by finished tapes keep the old values
    p.grid.data = p.grid.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p
