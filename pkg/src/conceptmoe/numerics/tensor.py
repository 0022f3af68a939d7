"""Dense float64 tensors with reverse-mode differentiation.

Every op records a closure that maps the output gradient onto its inputs.
The graph lives only until ``backward`` runs; afterwards interior nodes drop
their parents so the arrays can be collected.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from conceptmoe.errors import EmptyAxisError, LabelError, NonScalarLossError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the real work lives in the module-level functions.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires it."""
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise NonScalarLossError("loss is not attached to a recorded graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    # Interior grads are scratch space for this pass only.
    for node in topo:
        if node._backward is not None:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def fn(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), fn)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * x.data * g))


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: _accum(x, g * np.sign(x.data)))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out))


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first.

    Clamped entries pass no gradient.
    """
    x = as_tensor(x)
    if floor is None:
        safe = x.data
        live = None
    else:
        live = x.data > floor
        safe = np.where(live, x.data, floor)

    def fn(g):
        d = g / safe
        _accum(x, d if live is None else np.where(live, d, 0.0))

    return _make(np.log(safe), (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad transpose axes {tuple(axes)} for shape {x.shape}")
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)))


def stack(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("stack of zero tensors")
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError(f"stack: mismatched shapes {[x.shape for x in xs]}")
    out = np.stack([x.data for x in xs], axis=axis)

    def fn(g):
        for i, x in enumerate(xs):
            _accum(x, np.take(g, i, axis=axis))

    return _make(out, xs, fn)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise EmptyAxisError("mean over an empty axis")
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (subgradient 0 at the origin)."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def fn(g):
        safe = np.where(n > 0, n, 1.0)
        _accum(x, np.expand_dims(g, axis) * np.where(n > 0, x.data / safe, 0.0))

    return _make(np.squeeze(n, axis=axis), (x,), fn)


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale slices along ``axis`` to unit norm; slices with norm < eps become 0.

    The zeroed slices carry zero gradient.
    """
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    live = n >= eps
    safe = np.where(live, n, 1.0)
    u = np.where(live, x.data / safe, 0.0)

    def fn(g):
        proj = (g * u).sum(axis=axis, keepdims=True)
        _accum(x, np.where(live, (g - u * proj) / safe, 0.0))

    return _make(u, (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax of a 0-d tensor")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise EmptyAxisError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise EmptyAxisError(f"log_softmax over empty axis {axis}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), fn)


def global_max(x: Tensor) -> Tensor:
    """Max over the last two (spatial) axes; ties route gradient to the first hit."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] * x.shape[-2] == 0:
        raise ShapeError(f"global_max needs non-empty trailing spatial axes, got {x.shape}")
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        d = np.zeros_like(flat)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        _accum(x, d.reshape(x.shape))

    return _make(out, (x,), fn)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.shape[:-2] != b.shape[:-2] and a.ndim > 2 and b.ndim > 2:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation over NCHW input with OIkk weights.

    ``padding="same"`` zero-pads (k-1)//2 on every side; an int pads that many.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and as_tensor(bias).shape != (o,):
        raise ShapeError(f"conv2d: bias shape {as_tensor(bias).shape} != ({o},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be positive")
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        ph = pw = int(padding)
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, stride, oh, ow)  # n c oh ow kh kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + as_tensor(bias).data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def fn(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        if weight.requires_grad:
            _accum(weight, (gflat.T @ cols).reshape(weight.shape))
        if bias is not None:
            _accum(parents[2], g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gflat @ wmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            _accum(x, dxp[:, :, ph : ph + h, pw : pw + w])

    return _make(out, parents, fn)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size x size max pooling; ties go to the first element."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    blocks = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        d = d.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accum(x, d)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must be integers in [0, {num_classes})")
    return labels.astype(np.int64)


def pick(x: Tensor, labels) -> Tensor:
    """x[i, labels[i]] for a 2-d tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"pick expects a 2-d tensor, got {x.shape}")
    labels = _check_labels(labels, x.shape[0], x.shape[1])
    rows = np.arange(x.shape[0])

    def fn(g):
        d = np.zeros_like(x.data)
        d[rows, labels] = g
        _accum(x, d)

    return _make(x.data[rows, labels], (x,), fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer labels."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
        labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    if logits.shape[1] == 0:
        raise EmptyAxisError("cross_entropy over zero classes")
    _check_labels(labels, logits.shape[0], logits.shape[1])
    return mean(-pick(log_softmax(logits, axis=1), labels))


def nll(probs: Tensor, labels, floor: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of (N, C) probabilities, log floored at ``floor``."""
    probs = as_tensor(probs)
    return mean(-log(pick(probs, labels), floor=floor))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """The slice at ``index`` along ``axis`` (that axis is dropped)."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim or not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeError(f"take: index {index} on axis {axis} out of range for {x.shape}")

    def fn(g):
        d = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        d[tuple(sl)] = g
        _accum(x, d)

    return _make(np.take(x.data, index, axis=axis), (x,), fn)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) elementwise; clamped entries pass no gradient."""
    x = as_tensor(x)
    live = x.data >= lo
    return _make(np.where(live, x.data, lo), (x,), lambda g: _accum(x, g * live))
