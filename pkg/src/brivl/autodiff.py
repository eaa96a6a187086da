"""Dense tensors with reverse-mode automatic differentiation.

Tensors hold float32 data by default (float64 is preserved when supplied,
which the finite-difference checker uses to run the same graph at higher
precision).  Shapes are explicit and row-major; the only broadcasting
allowed is a python scalar against a tensor, everything else must match
exactly or go through a named primitive with a documented rule.

Every operation records its inputs on the output tensor when gradients
are required, forming an acyclic graph.  ``Tensor.backward`` walks that
graph in reverse topological order and accumulates gradients additively,
so a tensor consumed by several branches receives the sum of all branch
gradients.
"""

import threading
from contextlib import contextmanager

import numpy as np

_FLOATS = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


def _shape_err(op: str, *shapes) -> ShapeError:
    pretty = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {pretty}")


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are treated as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division supports python scalars only")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(
            f"gradient shape {g.shape} does not match tensor shape {t.data.shape}"
        )
    t.grad = g if t.grad is None else t.grad + g


def _as_const(x) -> float:
    if isinstance(x, (int, float, np.floating)):
        return float(x)
    raise TypeError(f"expected Tensor or python scalar, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const(b)
        out = _result(a.data + c, (a,), None)

        def bw():
            _accumulate(a, out.grad)

        out._backward = bw if out.requires_grad else None
        return out
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)
    out = _result(a.data + b.data, (a, b), None)

    def bw():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out._backward = bw if out.requires_grad else None
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -_as_const(b))
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    out = _result(a.data - b.data, (a, b), None)

    def bw():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    out._backward = bw if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), None)

    def bw():
        _accumulate(a, -out.grad)

    out._backward = bw if out.requires_grad else None
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const(b)
        out = _result(a.data * c, (a,), None)

        def bw():
            _accumulate(a, out.grad * c)

        out._backward = bw if out.requires_grad else None
        return out
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    out = _result(a.data * b.data, (a, b), None)

    def bw():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out._backward = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; both operands 2-D, or stacked with equal leading dims."""
    ok = (a.ndim == 2 and b.ndim == 2) or (
        a.ndim == b.ndim and a.ndim > 2 and a.shape[:-2] == b.shape[:-2]
    )
    if not ok or a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = _result(np.matmul(a.data, b.data), (a, b), None)

    def bw():
        g = out.grad
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    out._backward = bw if out.requires_grad else None
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full contraction of two same-shape tensors to a scalar."""
    if a.shape != b.shape:
        raise _shape_err("dot", a.shape, b.shape)
    out = _result(np.sum(a.data * b.data), (a, b), None)

    def bw():
        g = out.grad
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    out._backward = bw if out.requires_grad else None
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a trailing-shape tensor across leading axes.

    ``b.shape`` must equal ``x.shape[k:]`` for some k >= 1; the gradient of
    ``b`` sums over the leading axes.  Covers channel biases and positional
    tables without general broadcasting.
    """
    k = x.ndim - b.ndim
    if k < 1 or x.shape[k:] != b.shape:
        raise _shape_err("add_bias", x.shape, b.shape)
    out = _result(x.data + b.data, (x, b), None)

    def bw():
        _accumulate(x, out.grad)
        _accumulate(b, out.grad.sum(axis=tuple(range(k))))

    out._backward = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise _shape_err("reshape", x.shape, shape)
    out = _result(x.data.reshape(shape), (x,), None)

    def bw():
        _accumulate(x, out.grad.reshape(x.shape))

    out._backward = bw if out.requires_grad else None
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise _shape_err("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    out = _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), None)

    def bw():
        _accumulate(x, np.ascontiguousarray(out.grad.transpose(inverse)))

    out._backward = bw if out.requires_grad else None
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise _shape_err("concat", tensors[0].shape, t.shape)
    out = _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None
    )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accumulate(t, out.grad[tuple(idx)])

    out._backward = bw if out.requires_grad else None
    return out


def take(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); the gradient scatters back."""
    data = x.data[key]
    out = _result(np.ascontiguousarray(data), (x,), None)

    def bw():
        g = np.zeros_like(x.data)
        g[key] = out.grad
        _accumulate(x, g)

    out._backward = bw if out.requires_grad else None
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    if table.ndim != 2:
        raise _shape_err("embedding", table.shape)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )
    out = _result(table.data[ids], (table,), None)

    def bw():
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        _accumulate(table, g)

    out._backward = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), None)

    def bw():
        _accumulate(x, _expand_reduced(out.grad, x.shape, axis, keepdims))

    out._backward = bw if out.requires_grad else None
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), None)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
    )

    def bw():
        g = _expand_reduced(out.grad, x.shape, axis, keepdims)
        _accumulate(x, g / count)

    out._backward = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,), None)

    def bw():
        _accumulate(x, out.grad * (x.data > 0))

    out._backward = bw if out.requires_grad else None
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = _result(y, (x,), None)

    def bw():
        _accumulate(x, out.grad * y * (1.0 - y))

    out._backward = bw if out.requires_grad else None
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,), None)

    def bw():
        g = out.grad
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = bw if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise _shape_err("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gamma.data + beta.data, (x, gamma, beta), None)

    def bw():
        g = out.grad
        lead = tuple(range(x.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (
            (gx * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, inv * term)

    out._backward = bw if out.requires_grad else None
    return out


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    y = x.data / n
    out = _result(y, (x,), None)

    def bw():
        g = out.grad
        _accumulate(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / n)

    out._backward = bw if out.requires_grad else None
    return out


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between matching rows (contracting the last axis)."""
    if a.shape != b.shape:
        raise _shape_err("cosine_similarity", a.shape, b.shape)
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True)), eps)
    prod = (a.data * b.data).sum(axis=-1, keepdims=True)
    c = prod / (na * nb)
    out = _result(c.reshape(a.shape[:-1]), (a, b), None)

    def bw():
        g = out.grad.reshape(c.shape)
        _accumulate(a, g * (b.data / (na * nb) - a.data * (c / (na * na))))
        _accumulate(b, g * (a.data / (na * nb) - b.data * (c / (nb * nb))))

    out._backward = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# spatial primitives (NCHW layout, stride-1 correlation)


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw) view over the input.
    w = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return w


def conv2d(x: Tensor, w: Tensor, b=None, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, symmetric zero padding.

    ``x`` is (B, Cin, H, W), ``w`` is (Cout, Cin, kh, kw), optional ``b``
    is (Cout,).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_err("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2], w.shape[3]
    if padding < 0 or padding > min(kh, kw) - 1:
        raise ValueError(f"conv2d: padding {padding} outside [0, kernel-1]")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise _shape_err("conv2d", x.shape, w.shape)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw)
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise _shape_err("conv2d bias", y.shape, b.shape)
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y, parents, None)

    def bw():
        g = out.grad
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        _accumulate(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        pgh, pgw = kh - 1 - padding, kw - 1 - padding
        gp = g
        if pgh or pgw:
            gp = np.pad(g, ((0, 0), (0, 0), (pgh, pgh), (pgw, pgw)))
        wr = w.data[:, :, ::-1, ::-1]
        gwin = _windows(gp, kh, kw)
        dx = np.tensordot(gwin, wr, axes=([1, 4, 5], [0, 2, 3]))
        _accumulate(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))

    out._backward = bw if out.requires_grad else None
    return out


def avg_pool2d(x: Tensor, window: tuple) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide evenly."""
    kh, kw = window
    if x.ndim != 4 or x.shape[2] % kh or x.shape[3] % kw:
        raise _shape_err("avg_pool2d", x.shape, (kh, kw))
    B, C, H, W = x.shape
    y = x.data.reshape(B, C, H // kh, kh, W // kw, kw).mean(axis=(3, 5))
    out = _result(y, (x,), None)

    def bw():
        g = np.repeat(np.repeat(out.grad, kh, axis=2), kw, axis=3)
        _accumulate(x, g / (kh * kw))

    out._backward = bw if out.requires_grad else None
    return out


def dilate2d(x: Tensor, stride: int) -> Tensor:
    """Insert ``stride - 1`` zeros between spatial elements (for upsampling)."""
    if x.ndim != 4 or stride < 1:
        raise _shape_err("dilate2d", x.shape, (stride,))
    if stride == 1:
        return reshape(x, x.shape)
    B, C, H, W = x.shape
    y = np.zeros((B, C, (H - 1) * stride + 1, (W - 1) * stride + 1), x.data.dtype)
    y[:, :, ::stride, ::stride] = x.data
    out = _result(y, (x,), None)

    def bw():
        _accumulate(x, np.ascontiguousarray(out.grad[:, :, ::stride, ::stride]))

    out._backward = bw if out.requires_grad else None
    return out


def flip_spatial(x: Tensor) -> Tensor:
    """Reverse the last two axes (kernel rotation for transposed conv)."""
    if x.ndim < 2:
        raise _shape_err("flip_spatial", x.shape)
    out = _result(np.ascontiguousarray(x.data[..., ::-1, ::-1]), (x,), None)

    def bw():
        _accumulate(x, np.ascontiguousarray(out.grad[..., ::-1, ::-1]))

    out._backward = bw if out.requires_grad else None
    return out
