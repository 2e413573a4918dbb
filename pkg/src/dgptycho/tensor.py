"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Only the primitives needed by the ptychographic forward model and the U-Net
priors are provided. Arrays may be real or complex.

Conventions
-----------
FFT
    ``fft2`` is unnormalized, ``ifft2`` divides by the number of elements in
    the last two axes (numpy's default "backward" norm).
Complex gradients
    For a real scalar loss ``L`` and a complex tensor ``z = x + iy`` the stored
    gradient is ``dL/dx + i dL/dy`` (twice the Wirtinger derivative with
    respect to ``conj(z)``). A plain step ``z <- z - lr * z.grad`` therefore
    decreases ``L``. For a holomorphic primitive ``w = f(z)`` the chain rule
    reads ``grad_z = grad_w * conj(f'(z))``; when the input is real the real
    part is taken.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from numbers import Number
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DTypeError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "fft2",
    "ifft2",
    "fftshift",
    "conv2d",
    "upsample2x",
    "relu",
    "softplus",
    "identity",
    "exp",
    "expi",
    "abs2",
    "sqrt",
    "log",
    "clamp_min",
    "concat",
    "pad",
    "extract_patches",
    "l1",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Array node in a gradient graph.

    Parameters
    ----------
    data : array_like
        Values. Stored as a contiguous numpy array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` for this leaf.
    """

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._is_leaf = True

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Backpropagate from this node.

        Without ``grad`` the node must be a real 0-d tensor (a loss). An
        explicit ``grad`` of matching shape seeds a vector-Jacobian product.
        """
        if grad is None:
            if self.ndim != 0 or self.is_complex:
                raise ContractError("backward() without a seed needs a real 0-d loss tensor")
            seed = np.ones((), dtype=self.dtype)
        else:
            seed = np.asarray(grad)
            if seed.shape != self.shape:
                raise ShapeError(f"seed shape {seed.shape} != tensor shape {self.shape}")
        _run_backward(self, seed)

    # -- operators --------------------------------------------------------
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
        return _record(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def conj(self):
        return conj(self)

    @property
    def real(self):
        return real(self)

    @property
    def imag(self):
        return imag(self)

    def abs(self):
        return tabs(self)

    def abs2(self):
        return abs2(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(data, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._is_leaf = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _fit(g: np.ndarray, p: Tensor) -> np.ndarray:
    g = np.asarray(g)
    if g.shape != p.shape:
        g = _unbroadcast(g, p.shape)
    if not p.is_complex and np.iscomplexobj(g):
        g = g.real
    return g.astype(p.dtype, copy=False)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray):
    if not root.requires_grad:
        raise ContractError("tensor does not require grad")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): _fit(seed, root)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = _fit(pg, p)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # the tape is consumed; intermediate nodes release their inputs
        node._parents = ()
        node._backward = None
        node.requires_grad = False


def backward(loss: Tensor):
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``."""
    loss.backward()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _scalar(x) -> bool:
    return isinstance(x, Number) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _scalar(b):
        return _record(a.data + b, (a,), lambda g: (g,))
    if _scalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _scalar(b):
        return _record(a.data - b, (a,), lambda g: (g,))
    if _scalar(a):
        return _record(a - b.data, (b,), lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _scalar(a):
        a, b = b, a
    if _scalar(b):
        c = np.conj(b)
        return _record(a.data * b, (a,), lambda g: (g * c,))
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = g * np.conj(bd) if a.requires_grad else None
        gb = g * np.conj(ad) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    if _scalar(b):
        return mul(a, 1.0 / b)
    if _scalar(a):
        b = _as_tensor(b)
        out = a / b.data
        return _record(out, (b,), lambda g: (-g * np.conj(out / b.data),))
    a, b = _as_tensor(a), _as_tensor(b)
    bd = b.data
    out = a.data / bd

    def fn(g):
        ga = g / np.conj(bd)
        return ga, (-ga * np.conj(out) if b.requires_grad else None)

    return _record(out, (a, b), fn)


def conj(x: Tensor) -> Tensor:
    return _record(np.conj(x.data), (x,), lambda g: (np.conj(g),))


def real(x: Tensor) -> Tensor:
    return _record(x.data.real, (x,), lambda g: (g.astype(x.dtype),))


def imag(x: Tensor) -> Tensor:
    if not x.is_complex:
        return Tensor(np.zeros_like(x.data))
    return _record(x.data.imag, (x,), lambda g: (1j * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * np.conj(out),))


def expi(theta: Tensor) -> Tensor:
    """``exp(i * theta)`` for real ``theta``."""
    if theta.is_complex:
        raise DTypeError("expi expects a real tensor")
    cdt = np.result_type(theta.dtype, np.complex64)
    out = np.exp(1j * theta.data).astype(cdt, copy=False)
    # d/dtheta = i*out; grad = Re(g * conj(i*out))
    return _record(out, (theta,), lambda g: ((g * np.conj(out)).imag,))


def abs2(x: Tensor) -> Tensor:
    d = x.data
    if np.iscomplexobj(d):
        out = d.real**2 + d.imag**2
    else:
        out = d * d
    return _record(out, (x,), lambda g: (2 * g * d,))


def tabs(x: Tensor) -> Tensor:
    d = x.data
    out = np.abs(d)
    if np.iscomplexobj(d):
        def fn(g):
            with np.errstate(invalid="ignore", divide="ignore"):
                u = np.where(out > 0, d / np.where(out > 0, out, 1), 0)
            return (g * u,)
    else:
        def fn(g):
            return (g * np.sign(d),)
    return _record(out, (x,), fn)


def angle(x: Tensor) -> Tensor:
    d = x.data
    out = np.angle(d)

    def fn(g):
        r2 = d.real**2 + d.imag**2
        safe = np.where(r2 > 0, r2, 1)
        return (np.where(r2 > 0, g * 1j * d / safe, 0),)

    return _record(out, (x,), fn)


def sqrt(x: Tensor) -> Tensor:
    if x.is_complex:
        raise DTypeError("sqrt is defined here for real tensors only")
    out = np.sqrt(x.data)

    def fn(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0),)

    return _record(out, (x,), fn)


def log(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.log(d), (x,), lambda g: (g / np.conj(d),))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return _record(np.where(mask, x.data, lo).astype(x.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# activations (complex inputs: real and imaginary parts handled independently)
# ---------------------------------------------------------------------------


def _split(fn_val, fn_der, x: Tensor) -> Tensor:
    d = x.data
    if np.iscomplexobj(d):
        out = fn_val(d.real) + 1j * fn_val(d.imag)
        dr, di = fn_der(d.real), fn_der(d.imag)
        return _record(out.astype(d.dtype), (x,), lambda g: (g.real * dr + 1j * (g.imag * di),))
    der = fn_der(d)
    return _record(fn_val(d), (x,), lambda g: (g * der,))


def relu(x: Tensor) -> Tensor:
    return _split(lambda v: np.maximum(v, 0), lambda v: (v > 0).astype(v.dtype), x)


def _softplus(v):
    return np.where(v > 20, v, np.log1p(np.exp(np.minimum(v, 20))))


def _sigmoid(v):
    return 0.5 * (1 + np.tanh(0.5 * v))


def softplus(x: Tensor) -> Tensor:
    """``ln(1 + e^x)``, returning ``x`` itself for ``x > 20``."""
    return _split(_softplus, _sigmoid, x)


def identity(x: Tensor) -> Tensor:
    return x


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def l1(x: Tensor) -> Tensor:
    """Sum of absolute values."""
    return tsum(tabs(x))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.asarray(x.data[idx])
    basic = _is_basic(idx)

    def fn(g):
        z = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _record(out, (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding, ``pad_width`` as in :func:`numpy.pad`."""
    pw = np.broadcast_to(np.asarray(pad_width, dtype=int), (x.ndim, 2)) if np.ndim(pad_width) < 2 else np.asarray(pad_width)
    out = np.pad(x.data, pw)
    sl = tuple(slice(int(lo), out.shape[i] - int(hi)) for i, (lo, hi) in enumerate(pw))
    return _record(out, (x,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------


def _need_complex(x: Tensor, name: str):
    if not x.is_complex:
        raise DTypeError(f"{name} expects a complex tensor, got {x.dtype}")
    if x.ndim < 2:
        raise ShapeError(f"{name} needs at least 2 dimensions")


def fft2(x: Tensor) -> Tensor:
    """Unnormalized 2-D FFT over the last two axes."""
    _need_complex(x, "fft2")
    n = x.shape[-1] * x.shape[-2]
    return _record(np.fft.fft2(x.data), (x,), lambda g: (np.fft.ifft2(g) * n,))


def ifft2(x: Tensor) -> Tensor:
    """Inverse 2-D FFT over the last two axes, divided by the element count."""
    _need_complex(x, "ifft2")
    n = x.shape[-1] * x.shape[-2]
    return _record(np.fft.ifft2(x.data), (x,), lambda g: (np.fft.fft2(g) / n,))


def fftshift(x: Tensor) -> Tensor:
    ax = (-2, -1)
    return _record(np.fft.fftshift(x.data, axes=ax), (x,), lambda g: (np.fft.ifftshift(g, axes=ax),))


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``out[o, i, j] = sum_{c, u, v} kernel[o, c, u, v] * xpad[c, s*i + u, s*j + v]``
    with ``xpad`` the input zero-padded by ``padding`` on each spatial side.
    No kernel flip. Complex kernels and inputs use complex multiply-accumulate.

    Parameters
    ----------
    x : Tensor
        Input of shape ``[C_in, H, W]``.
    kernel : Tensor
        Weights of shape ``[C_out, C_in, kh, kw]``.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError("conv2d expects x [C,H,W] and kernel [O,C,kh,kw]")
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    p, s = int(padding), int(stride)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[1:]
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    # [C, kh, kw, Ho, Wo] -> [C*kh*kw, Ho*Wo]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * kh * kw, ho * wo)
    kmat = kernel.data.reshape(cout, -1)
    out = (kmat @ cols).reshape(cout, ho, wo)

    def fn(g):
        g2 = g.reshape(cout, ho * wo)
        gk = (g2 @ np.conj(cols).T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (np.conj(kmat).T @ g2).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros((cin, hp, wp), dtype=gcols.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s] += gcols[:, u, v]
            gx = gxp[:, p : hp - p, p : wp - p] if p else gxp
        return gx, gk

    return _record(out, (x, kernel), fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def fn(g):
        sh = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        return (g.reshape(sh).sum(axis=(-3, -1)),)

    return _record(out, (x,), fn)


def extract_patches(x: Tensor, rows, cols, size: tuple[int, int]) -> Tensor:
    """Gather windows ``x[..., r:r+ry, c:c+rx]`` for each (r, c) pair.

    ``x`` has shape ``[..., Y, X]``; output ``[B, ..., ry, rx]``. Gradients
    from overlapping windows are summed back in order.
    """
    ry, rx = size
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    Y, X = x.shape[-2:]
    if rows.min(initial=0) < 0 or cols.min(initial=0) < 0 or rows.max(initial=0) + ry > Y or cols.max(initial=0) + rx > X:
        raise ShapeError("patch outside the array")
    win = sliding_window_view(x.data, (ry, rx), axis=(-2, -1))
    out = np.moveaxis(win[..., rows, cols, :, :], -3, 0)

    def fn(g):
        z = np.zeros(x.shape, dtype=g.dtype)
        for b in range(len(rows)):
            r, c = rows[b], cols[b]
            z[..., r : r + ry, c : c + rx] += g[b]
        return (z,)

    return _record(out, (x,), fn)
