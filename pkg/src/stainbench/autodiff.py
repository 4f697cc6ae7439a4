"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Small and self-contained: enough ops for the training objectives and the
convolutional backbone. Every op records vector-Jacobian closures on the
parents; `Var.backward()` walks the tape in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    """A node in the computation graph: a float64 array plus its tape entry."""

    __slots__ = ("value", "grad", "requires_grad", "_edges")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        # list of (parent, vjp) pairs; vjp maps d(out) -> d(parent) contribution
        self._edges: list[tuple["Var", Callable[[np.ndarray], np.ndarray]]] = []

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Var":
        return Var(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ShapeMismatchError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.value)
        topo: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._edges:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in node._edges:
                contrib = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + contrib

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_var(other), -1.0))

    def __rsub__(self, other):
        return add(_as_var(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_var(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _track(out: Var, *pairs: tuple[Var, Callable]) -> Var:
    if _GRAD_ENABLED:
        for parent, vjp in pairs:
            if parent.requires_grad or parent._edges:
                out.requires_grad = True
                out._edges.append((parent, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- arithmetic ---

def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value + b.value)
    return _track(
        out,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    )


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value * b.value)
    return _track(
        out,
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    )


def div(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value / b.value)
    return _track(
        out,
        (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value ** 2), b.value.shape)),
    )


def power(a, exponent: float) -> Var:
    a = _as_var(a)
    exponent = float(exponent)
    out = Var(a.value ** exponent)
    return _track(out, (a, lambda g: g * exponent * a.value ** (exponent - 1.0)))


def exp(a) -> Var:
    a = _as_var(a)
    out = Var(np.exp(a.value))
    return _track(out, (a, lambda g: g * out.value))


def log(a) -> Var:
    a = _as_var(a)
    out = Var(np.log(a.value))
    return _track(out, (a, lambda g: g / a.value))


def sqrt(a) -> Var:
    a = _as_var(a)
    out = Var(np.sqrt(a.value))
    return _track(out, (a, lambda g: g * 0.5 / out.value))


def abs_(a) -> Var:
    a = _as_var(a)
    out = Var(np.abs(a.value))
    return _track(out, (a, lambda g: g * np.sign(a.value)))


def sigmoid(a) -> Var:
    a = _as_var(a)
    s = 1.0 / (1.0 + np.exp(-np.abs(a.value)))
    s = np.where(a.value >= 0, s, 1.0 - s)
    out = Var(s)
    return _track(out, (a, lambda g: g * s * (1.0 - s)))


def tanh(a) -> Var:
    a = _as_var(a)
    out = Var(np.tanh(a.value))
    return _track(out, (a, lambda g: g * (1.0 - out.value ** 2)))


def softplus(a) -> Var:
    """log(1 + e^x), computed stably."""
    a = _as_var(a)
    out = Var(np.logaddexp(0.0, a.value))
    sig = 1.0 / (1.0 + np.exp(-np.abs(a.value)))
    sig = np.where(a.value >= 0, sig, 1.0 - sig)
    return _track(out, (a, lambda g: g * sig))


def relu(a) -> Var:
    a = _as_var(a)
    out = Var(np.maximum(a.value, 0.0))
    return _track(out, (a, lambda g: g * (a.value > 0)))


def leaky_relu(a, slope: float = 0.2) -> Var:
    a = _as_var(a)
    out = Var(np.where(a.value > 0, a.value, slope * a.value))
    return _track(out, (a, lambda g: g * np.where(a.value > 0, 1.0, slope)))


def silu(a) -> Var:
    return mul(a, sigmoid(a))


def logsumexp(a, axis: int, keepdims: bool = False) -> Var:
    a = _as_var(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = a.value - m
    s = np.sum(np.exp(shifted), axis=axis, keepdims=True)
    val = m + np.log(s)
    if not keepdims:
        val = np.squeeze(val, axis=axis)
    out = Var(val)
    softmax = np.exp(shifted) / s

    def vjp(g):
        gg = np.expand_dims(g, axis) if not keepdims else g
        return gg * softmax

    return _track(out, (a, vjp))


# --- reductions / shape ---

def sum_(a, axis=None, keepdims: bool = False) -> Var:
    a = _as_var(a)
    out = Var(np.sum(a.value, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return _track(out, (a, vjp))


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = _as_var(a)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Var:
    a = _as_var(a)
    out = Var(a.value.reshape(shape))
    return _track(out, (a, lambda g: g.reshape(a.value.shape)))


def transpose(a, axes) -> Var:
    a = _as_var(a)
    out = Var(a.value.transpose(axes))
    inverse = np.argsort(axes)
    return _track(out, (a, lambda g: g.transpose(inverse)))


def getitem(a, idx) -> Var:
    a = _as_var(a)
    out = Var(a.value[idx])

    def vjp(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, idx, g)
        return grad

    return _track(out, (a, vjp))


def concat(parts: Iterable[Var], axis: int = 0) -> Var:
    parts = [_as_var(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis))
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.value.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _track(out, *[(p, make_vjp(i)) for i, p in enumerate(parts)])


def maximum(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = Var(np.maximum(a.value, b.value))
    a_wins = a.value >= b.value
    return _track(
        out,
        (a, lambda g: _unbroadcast(g * a_wins, a.value.shape)),
        (b, lambda g: _unbroadcast(g * ~a_wins, b.value.shape)),
    )


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    out = Var(a.value @ b.value)

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)

    return _track(out, (a, vjp_a), (b, vjp_b))


# --- padding / resampling ---

def pad_zero(a, pad: tuple[int, int]) -> Var:
    """Zero-pad the last two axes by (py, px) on each side."""
    a = _as_var(a)
    py, px = pad
    width = [(0, 0)] * (a.value.ndim - 2) + [(py, py), (px, px)]
    out = Var(np.pad(a.value, width))
    sl = tuple([slice(None)] * (a.value.ndim - 2)
               + [slice(py, py + a.value.shape[-2]), slice(px, px + a.value.shape[-1])])
    return _track(out, (a, lambda g: g[sl]))


def pad_edge(a, pad: tuple[int, int]) -> Var:
    """Replicate-pad the last two axes; preserves constant images exactly."""
    a = _as_var(a)
    py, px = pad
    h, w = a.value.shape[-2:]
    iy = np.clip(np.arange(-py, h + py), 0, h - 1)
    ix = np.clip(np.arange(-px, w + px), 0, w - 1)
    out = Var(a.value[..., iy[:, None], ix[None, :]])

    def vjp(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, (..., iy[:, None], ix[None, :]), g)
        return grad

    return _track(out, (a, vjp))


def upsample_nearest2x(a) -> Var:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    a = _as_var(a)
    h, w = a.value.shape[-2:]
    iy = np.repeat(np.arange(h), 2)
    ix = np.repeat(np.arange(w), 2)
    out = Var(a.value[..., iy[:, None], ix[None, :]])

    def vjp(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, (..., iy[:, None], ix[None, :]), g)
        return grad

    return _track(out, (a, vjp))


def avg_pool2x2(a) -> Var:
    """2x2 box-mean pooling; spatial dims must be even."""
    a = _as_var(a)
    h, w = a.value.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"avg_pool2x2 needs even spatial dims, got {(h, w)}")
    lead = a.value.shape[:-2]
    pooled = a.value.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    out = Var(pooled)

    def vjp(g):
        g4 = np.broadcast_to(
            g.reshape(*lead, h // 2, 1, w // 2, 1), (*lead, h // 2, 2, w // 2, 2)
        )
        return (g4 / 4.0).reshape(a.value.shape)

    return _track(out, (a, vjp))


# --- convolution ---

def _sliding_cols(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N,C,H,W) -> (N, OH, OW, C, kh, kw) window view (copied)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]           # (N, C, OH, OW, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
           pad_mode: str = "zero") -> Var:
    """NCHW convolution (cross-correlation) with square stride and padding."""
    x = _as_var(x)
    weight = _as_var(weight)
    if x.value.ndim != 4 or weight.value.ndim != 4:
        raise ShapeMismatchError("conv2d expects x (N,C,H,W) and weight (O,C,kh,kw)")
    if x.value.shape[1] != weight.value.shape[1]:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: x has {x.value.shape[1]}, weight {weight.value.shape[1]}"
        )
    if padding:
        x = pad_edge(x, (padding, padding)) if pad_mode == "edge" else pad_zero(x, (padding, padding))

    xv = x.value
    n, c, h, w = xv.shape
    o, _, kh, kw = weight.value.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = _sliding_cols(xv, kh, kw, stride)                    # (N, OH, OW, C, kh, kw)
    cols2 = cols.reshape(n, oh * ow, c * kh * kw)
    wmat = weight.value.reshape(o, c * kh * kw)
    outv = (cols2 @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = _as_var(bias)
        outv = outv + bias.value[None, :, None, None]
    out = Var(np.ascontiguousarray(outv))

    def vjp_x(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, o)     # (N, OH*OW, O)
        gcols = (gf @ wmat).reshape(n, oh, ow, c, kh, kw)
        gx = np.zeros_like(xv)
        for dy in range(kh):
            for dx in range(kw):
                gx[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride] += \
                    gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
        return gx

    def vjp_w(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        return (gf.T @ cols2.reshape(n * oh * ow, c * kh * kw)).reshape(weight.value.shape)

    pairs = [(x, vjp_x), (weight, vjp_w)]
    if bias is not None:
        pairs.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return _track(out, *pairs)


# --- verification ---

def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_gradient(f: Callable[[Var], Var], x: np.ndarray,
                   eps: float = 1e-3, atol_floor: float = 1e-8) -> float:
    """Compare reverse-mode and central-difference gradients of f at x.

    Returns the norm-relative error |g - g_fd| / max(|g_fd|, floor) (the
    scipy.optimize.check_grad convention); raises NonFiniteError if the
    analytic gradient is not finite.
    """
    var = Var(np.asarray(x, dtype=np.float64).copy(), requires_grad=True)
    out = f(var)
    out.backward()
    analytic = var.grad if var.grad is not None else np.zeros_like(var.value)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("analytic gradient contains non-finite values")
    numeric = finite_difference_grad(lambda arr: f(Var(arr)).item(), var.value.copy(), eps=eps)
    denom = max(float(np.linalg.norm(numeric)), atol_floor)
    return float(np.linalg.norm(analytic - numeric) / denom)
