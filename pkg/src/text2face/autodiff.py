"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op in this module records a closure that maps the output gradient to the
gradients of its inputs. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates gradients into every tensor that
requires them. Graphs are single-use: they are released after ``backward``
unless ``retain_graph=True``.

Images and feature maps use the NCHW layout.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor", "Graph", "GradCheckReport", "no_grad", "is_grad_enabled",
    "tensor", "matmul", "conv2d", "add", "sub", "multiply", "divide", "scale",
    "leaky_relu", "relu", "tanh", "bilinear_resize", "nearest_upsample",
    "average_pool", "global_average_pool", "sum", "mean", "square",
    "sqrt_elementwise", "l2_norm", "concat", "pixel_norm", "reshape",
    "transpose", "grad_check", "bilinear_matrix",
]

DEFAULT_EPS = 1e-8

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # No copy: op outputs own freshly allocated arrays.
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t.op = "leaf"
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, retain_graph: bool = False) -> "Graph":
        """Accumulate d(self)/d(t) into ``t.grad`` for every tracked ``t``.

        Returns the executed graph in topological order.
        """
        if self.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", self.shape)
        graph = Graph.from_output(self)
        if not self.requires_grad:
            return graph
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            graph.release()
        return graph


class Graph:
    """Executed operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
        return cls(order)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(position[id(p)] < position[id(n)]
                   for n in self.nodes for p in n._parents)

    def release(self) -> None:
        for n in self.nodes:
            n._parents = ()
            n._backward = None

    def __len__(self) -> int:
        return len(self.nodes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def multiply(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward, "multiply")


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("divide", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward, "divide")


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt_elementwise(x, eps: float = DEFAULT_EPS) -> Tensor:
    """sqrt(max(x, eps)); the gradient is zero where the guard is active."""
    if eps <= 0:
        raise ValueError("sqrt_elementwise: eps must be positive")
    x = _as_tensor(x)
    active = x.data >= eps
    out = np.sqrt(np.where(active, x.data, eps))

    def backward(g):
        return (np.where(active, g * 0.5 / out, 0.0),)

    return _record(out, (x,), backward, "sqrt")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    """Leaky ReLU. The subgradient at exactly zero is taken as zero."""
    x = _as_tensor(x)
    pos = x.data > 0
    neg = x.data < 0
    out = np.where(pos, x.data, slope * x.data)
    factor = pos.astype(np.float64) + slope * neg

    return _record(out, (x,), lambda g: (g * factor,), "leaky_relu")


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# reductions and shape ops

def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(out, (x,), backward, "mean")


def l2_norm(x, axis=-1, keepdims: bool = False, eps: float = DEFAULT_EPS) -> Tensor:
    return sqrt_elementwise(sum(square(x), axis=axis, keepdims=keepdims), eps)


def pixel_norm(x, axis: int = 1, eps: float = DEFAULT_EPS) -> Tensor:
    """Scale every vector along ``axis`` to unit root-mean-square."""
    x = _as_tensor(x)
    rms = sqrt_elementwise(mean(square(x), axis=axis, keepdims=True), eps)
    out = divide(x, rms)
    out.op = "pixel_norm"
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward, "matmul")


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def _fold_pad_grad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    if mode == "replicate":
        gp = gp.copy()
        gp[:, :, p, :] += gp[:, :, :p, :].sum(axis=2)
        gp[:, :, -p - 1, :] += gp[:, :, -p:, :].sum(axis=2)
        gp[:, :, :, p] += gp[:, :, :, :p].sum(axis=3)
        gp[:, :, :, -p - 1] += gp[:, :, :, -p:].sum(axis=3)
    return gp[:, :, p:-p, p:-p]


def conv2d(x, weight, padding: str = "zeros") -> Tensor:
    """Stride-1 "same" convolution (cross-correlation) with 1x1 or 3x3 kernels.

    Args:
        x: input of shape (N, C, H, W).
        weight: shared kernel (O, C, k, k) or per-sample kernels (N, O, C, k, k).
        padding: "zeros" or "replicate" border handling.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if padding not in ("zeros", "replicate"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if x.ndim != 4 or weight.ndim not in (4, 5):
        raise ShapeError("conv2d", x.shape, weight.shape)
    per_sample = weight.ndim == 5
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape[-4:]
    if wc != c or kh != kw or kh not in (1, 3) or (per_sample and weight.shape[0] != n):
        raise ShapeError("conv2d", x.shape, weight.shape)
    k = kh
    p = k // 2
    kdim = c * k * k

    if k == 1:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = _pad(x.data, p, padding)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # win: (n, c, h, w, k, k) -> (n, c, k, k, h, w)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, kdim, h * w)
    wmat = weight.data.reshape(weight.shape[:-4] + (o, kdim))
    out = np.matmul(wmat, cols).reshape(n, o, h, w)

    def backward(g):
        g2 = g.reshape(n, o, h * w)
        gx = gw = None
        if weight.requires_grad:
            gwm = np.matmul(g2, cols.transpose(0, 2, 1))
            if not per_sample:
                gwm = gwm.sum(axis=0)
            gw = gwm.reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wmat, -1, -2), g2)
            if k == 1:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, c, k, k, h, w)
                gp = np.zeros((n, c, h + 2 * p, w + 2 * p))
                for di in range(k):
                    for dj in range(k):
                        gp[:, :, di:di + h, dj:dj + w] += gcols[:, :, di, dj]
                gx = _fold_pad_grad(gp, p, padding)
        return gx, gw

    return _record(out, (x, weight), backward, "conv2d")


# ---------------------------------------------------------------------------
# resampling

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres.

    Sample positions are clamped to the valid range, matching the usual
    ``align_corners=False`` convention.
    """
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_resize(x, size: tuple[int, int]) -> Tensor:
    """Resize the last two axes of ``x`` to ``size`` by bilinear interpolation."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize", x.shape, tuple(size))
    th, tw = size
    h, w = x.shape[-2:]
    if (th, tw) == (h, w):
        return _record(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    rh = bilinear_matrix(h, th)
    rw = bilinear_matrix(w, tw)
    out = rh @ x.data @ rw.T

    def backward(g):
        return (rh.T @ g @ rw,)

    return _record(out, (x,), backward, "bilinear_resize")


def nearest_upsample(x) -> Tensor:
    """Double both spatial axes by pixel repetition."""
    x = _as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _record(out, (x,), backward, "nearest_upsample")


def average_pool(x, window: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    hh, ww = h // window, w // window
    if hh == 0 or ww == 0:
        raise ShapeError("average_pool", x.shape, (window, window))
    lead = x.shape[:-2]
    crop = x.data[..., :hh * window, :ww * window]
    out = crop.reshape(lead + (hh, window, ww, window)).mean(axis=(-3, -1))

    def backward(g):
        gfull = np.zeros(x.shape)
        up = g.repeat(window, axis=-2).repeat(window, axis=-1) / (window * window)
        gfull[..., :hh * window, :ww * window] = up
        return (gfull,)

    return _record(out, (x,), backward, "average_pool")


def global_average_pool(x) -> Tensor:
    out = mean(x, axis=(-2, -1))
    out.op = "global_average_pool"
    return out


# ---------------------------------------------------------------------------
# finite-difference checking

class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""

    def __init__(self, max_rel_error, tol, checked, skipped):
        self.max_rel_error = float(max_rel_error)
        self.tol = float(tol)
        self.checked = checked
        self.skipped = skipped

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, tol={self.tol:g}, "
                f"checked={len(self.checked)}, skipped={len(self.skipped)}, passed={self.passed})")


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tol: float = 1e-4,
               indices: Sequence[int] | None = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    A coordinate is treated as a kink (non-differentiable sample) and skipped
    when the forward and backward one-sided slopes disagree, or when the
    central difference at ``step`` and at ``step / 2`` disagree by more than
    ``tol / 4``. The second test catches a ReLU boundary lying inside the
    stencil; it compares two numerical estimates only, so a wrong analytic
    gradient in a smooth region is never excused. The relative error of
    coordinate i is ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * scale)`` where
    ``scale`` is the largest gradient magnitude seen; this keeps negligible
    components from dominating through round-off.

    Args:
        f: maps a Tensor shaped like ``x`` to a scalar Tensor.
        x: the evaluation point.
        indices: flat coordinates to check (all of them by default).
    """
    x0 = np.array(_as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    f(xt).backward()
    analytic = (np.zeros_like(x0) if xt.grad is None else xt.grad.reshape(x0.shape)).reshape(-1)

    def value(arr):
        with no_grad():
            return float(f(Tensor._wrap(arr)).data.reshape(()))

    def shifted(i, delta):
        arr = x0.copy().reshape(-1)
        arr[i] += delta
        return value(arr.reshape(x0.shape))

    f0 = value(x0.copy())
    flat_idx = range(x0.size) if indices is None else indices
    kink_tol = np.sqrt(step)
    candidates, skipped = [], []
    for i in flat_idx:
        fp, fm = shifted(i, step), shifted(i, -step)
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        central = (fp - fm) / (2 * step)
        if abs(fwd - bwd) > kink_tol * (1.0 + abs(central)):
            skipped.append(i)
            continue
        half = (shifted(i, step / 2) - shifted(i, -step / 2)) / step
        candidates.append((i, central, half))
    if not candidates:
        return GradCheckReport(0.0, tol, [], skipped)
    idx = [c[0] for c in candidates]
    n_arr = np.array([c[1] for c in candidates])
    h_arr = np.array([c[2] for c in candidates])
    a_arr = analytic[idx]
    floor = 1e-3 * max(np.abs(a_arr).max(), np.abs(n_arr).max(), 1e-300)
    unstable = np.abs(n_arr - h_arr) / np.maximum(np.maximum(np.abs(n_arr), np.abs(h_arr)), floor) > tol / 4
    skipped = sorted(skipped + [i for i, u in zip(idx, unstable) if u])
    keep = ~unstable
    checked = [i for i, k in zip(idx, keep) if k]
    if not checked:
        return GradCheckReport(0.0, tol, checked, skipped)
    denom = np.maximum(np.maximum(np.abs(a_arr[keep]), np.abs(n_arr[keep])), floor)
    rel = np.abs(a_arr[keep] - n_arr[keep]) / denom
    return GradCheckReport(rel.max(), tol, checked, skipped)
