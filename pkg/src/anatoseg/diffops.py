"""Small reverse-mode autodiff engine over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  The graph hanging
off a scalar is the tape; :meth:`Tensor.backward` replays it in reverse
topological order and then drops it.

Arrays are float32 by default.  Operations keep whatever float dtype they
are given, which lets :func:`grad_check` run both the analytic and the
finite-difference passes in float64.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class ShapeError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basics -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad`` and free the tape."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        self.grad = np.asarray(grad, dtype=self.dtype)
        for node in reversed(order):
            g = node.grad
            if node._backward is None or g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    pg = _unbroadcast(pg, p.shape)
                p.grad = pg.astype(p.dtype, copy=False) if p.grad is None else p.grad + pg
        for node in order:
            if node._backward is not None:
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=DTYPE):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(k for k, s in enumerate(shape) if s == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# -- elementwise ----------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = _lift(x), _lift(y, x if isinstance(x, Tensor) else None)
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x, y) -> Tensor:
    x, y = _lift(x), _lift(y, x if isinstance(x, Tensor) else None)
    return _result(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x, y) -> Tensor:
    x, y = _lift(x), _lift(y, x if isinstance(x, Tensor) else None)
    a, b = x.data, y.data
    return _result(a * b, (x, y), lambda g: (g * b, g * a))


def div(x, y) -> Tensor:
    x, y = _lift(x), _lift(y, x if isinstance(x, Tensor) else None)
    a, b = x.data, y.data
    out = a / b
    return _result(out, (x, y), lambda g: (g / b, -g * out / b))


def log(x: Tensor) -> Tensor:
    a = x.data
    if np.any(a <= 0):
        raise FloatingPointError("log of non-positive value")
    return _result(np.log(a), (x,), lambda g: (g / a,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    a = x.data
    inside = (a >= lo) & (a <= hi)
    return _result(np.clip(a, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    a = x.data
    mask = a > 0
    return _result(a * mask, (x,), lambda g: (g * mask,))


# -- shape ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), back)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    return concat([x, y], axis=1)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_lift(t) for t in xs]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- linear algebra --------------------------------------------------------

def matmul(x: Tensor, y: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting semantics (rank >= 2)."""
    a, b = x.data, y.data
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)

    return _result(np.matmul(a, b), (x, y), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape (N, d_in) and w of shape (d_in, d_out)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


# -- convolution and pooling ---------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; x (N, C, H, W), w (O, C, kh, kw), b (O,)."""
    xa, wa = x.data, w.data
    if xa.ndim != 4 or wa.ndim != 4 or xa.shape[1] != wa.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {xa.shape}, weight {wa.shape}")
    n, c, h, wd = xa.shape
    o, _, kh, kw = wa.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {xa.shape}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        col = xa.reshape(n, c, h * wd)
    else:
        xp = np.pad(xa, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xa
        col = _im2col(xp, kh, kw, stride, ho, wo)

    wmat = wa.reshape(o, -1)
    out = np.matmul(wmat, col).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data.reshape(1, o, 1, 1)

    def back(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0).reshape(wa.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcol = np.matmul(wmat.T, g2)
            if kh == kw == 1 and stride == 1 and padding == 0:
                gx = dcol.reshape(xa.shape)
            else:
                dcol = dcol.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dcol.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcol[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    a = x.data
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {a.shape}")
    win = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(a.shape),)

    return _result(out, (x,), back)


def upsample_nearest2(x: Tensor) -> Tensor:
    a = x.data
    n, c, h, w = a.shape
    out = np.broadcast_to(a[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over H x W: (N, C, H, W) -> (N, C)."""
    return tmean(x, axis=(2, 3))


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (C/groups, H, W) blocks, then scale and shift per channel."""
    a = x.data
    n, c, h, w = a.shape
    if c % groups:
        raise ShapeError(f"{c} channels do not split into {groups} groups")
    ga, be = gamma.data, beta.data
    if ga.shape != (c,) or be.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},)")
    ag = a.reshape(n, groups, -1)
    mu = ag.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(ag.var(axis=2, keepdims=True) + eps)
    xhat = ((ag - mu) * inv).reshape(n, c, h, w)
    out = xhat * ga[None, :, None, None] + be[None, :, None, None]

    def back(g):
        gg = g * ga[None, :, None, None]
        gh = gg.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(a.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out.astype(a.dtype, copy=False), (x, gamma, beta), back)


def softmax_channels(x: Tensor) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


# -- gradient checking -----------------------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-3,
               floor: float = 1e-6) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` at ``x``
    and a central finite difference with step ``h``.

    Both passes run in float64, so ``f`` should not force float32 internally.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("non-finite function value")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f(Tensor(base, dtype=np.float64)).data)
            flat[k] = orig - h
            fm = float(f(Tensor(base, dtype=np.float64)).data)
            flat[k] = orig
            numeric.reshape(-1)[k] = (fp - fm) / (2 * h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise GradCheckError("non-finite gradient")
    return _rel_err(analytic, numeric, floor)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-3,
                      floor: float = 1e-6, max_entries: int | None = None,
                      seed: int = 0) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` w.r.t. each parameter (perturbed in place).

    Parameters should hold float64 data.  With ``max_entries`` only a seeded
    random subset of each tensor's entries is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = loss_fn()
    out.backward()
    rng = np.random.default_rng(seed)
    report = {}
    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for t, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + h
                fp = float(loss_fn().data)
                flat[k] = orig - h
                fm = float(loss_fn().data)
                flat[k] = orig
                numeric[t] = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[idx]
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
                raise GradCheckError(f"non-finite gradient for {p.name}")
            report[p.name] = _rel_err(a, numeric, floor)
    return report
