"""Array-valued reverse-mode automatic differentiation on a recorded tape.

Double precision only. Ops execute eagerly on numpy arrays and, when a
Tape is active, append a node holding a backward closure. The tape's
append order is an execution order, so the reverse walk is already a
valid topological order and no graph search is needed.

Usage:

    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        y = linear(x, w)
        loss = mean(y * y)
    tape.backward(loss, params=[w])
    # w.grad now holds dloss/dw

Ops called with no active tape run as plain numpy (inference mode).
NaN/Inf checking is off the hot path: enable `set_debug_nan(True)` to
make every op output raise NumericalError on non-finite values.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError, ContractError, NumericalError

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED = True
_DEBUG_NAN = False


def set_debug_nan(enabled: bool) -> None:
    """Toggle per-op finiteness checks (slow, for debugging)."""
    global _DEBUG_NAN
    _DEBUG_NAN = enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block, even if a tape is active."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy float64 array plus a gradient slot and optional tape node."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; all defer to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powi(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(powi(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powi(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


class Tape:
    """Ordered record of op nodes for one backward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, params=None) -> None:
        """Accumulate dloss/dx into .grad for everything reachable from loss.

        loss must be scalar. Trainable leaves passed in `params` that did
        not participate in the computation get explicit zero gradients.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not np.isfinite(loss.data):
            raise NumericalError("loss is not finite")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)


def backward(tape: Tape, loss: Tensor, params=None) -> None:
    """Functional spelling of Tape.backward."""
    tape.backward(loss, params=params)


def _active_tape() -> Tape | None:
    if _GRAD_ENABLED and _TAPE_STACK:
        return _TAPE_STACK[-1]
    return None


def record(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Create a result tensor, appending a node if a tape is recording.

    Shared by every op here and by the fused kernels in other modules.
    """
    if _DEBUG_NAN and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value in op output")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        out._parents = parents
        out._backward = backward_fn
        tape._nodes.append(out)
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add g into t.grad, allocating on first touch.

    First touch copies (g may be broadcast or a view into another node's
    buffer; += into it later would corrupt that node).
    """
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting in forward."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    pinch = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if pinch:
        g = g.sum(axis=pinch, keepdims=True)
    return g.reshape(shape)


def _as_const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else _as_const(a)
    bd = b.data if tb else _as_const(b)
    out_data = ad + bd

    def back(g):
        if ta:
            accumulate(a, _unbroadcast(g, ad.shape))
        if tb:
            accumulate(b, _unbroadcast(g, bd.shape))

    parents = tuple(t for t, flag in ((a, ta), (b, tb)) if flag)
    return record(out_data, parents, back)


def mul(a, b) -> Tensor:
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else _as_const(a)
    bd = b.data if tb else _as_const(b)
    out_data = ad * bd

    def back(g):
        if ta:
            accumulate(a, _unbroadcast(g * bd, ad.shape))
        if tb:
            accumulate(b, _unbroadcast(g * ad, bd.shape))

    parents = tuple(t for t, flag in ((a, ta), (b, tb)) if flag)
    return record(out_data, parents, back)


def powi(x: Tensor, p) -> Tensor:
    """x ** p for a constant scalar exponent."""
    pd = float(p)
    xd = x.data
    out_data = xd ** pd

    def back(g):
        accumulate(x, g * pd * xd ** (pd - 1.0))

    return record(out_data, (x,), back)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def back(g):
        accumulate(x, g * out_data)

    return record(out_data, (x,), back)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)
    xd = x.data

    def back(g):
        accumulate(x, g / xd)

    return record(out_data, (x,), back)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def back(g):
        accumulate(x, g * 0.5 / out_data)

    return record(out_data, (x,), back)


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.abs(xd)

    def back(g):
        accumulate(x, g * np.sign(xd))

    return record(out_data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def back(g):
        accumulate(x, g * s * (1.0 - s))

    return record(s, (x,), back)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x). silu(0) = 0, silu(1) ~ 0.731059."""
    s = expit(x.data)
    xd = x.data
    out_data = xd * s

    def back(g):
        accumulate(x, g * (s + xd * s * (1.0 - s)))

    return record(out_data, (x,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; softplus(40) == 40 to 1e-12."""
    xd = x.data
    out_data = np.logaddexp(0.0, xd)

    def back(g):
        accumulate(x, g * expit(xd))

    return record(out_data, (x,), back)


def where(cond, a, b) -> Tensor:
    """Select elementwise on a boolean constant mask. Gradient follows the taken branch."""
    cd = np.asarray(cond, dtype=bool)
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if ta else _as_const(a)
    bd = b.data if tb else _as_const(b)
    out_data = np.where(cd, ad, bd)

    def back(g):
        if ta:
            accumulate(a, _unbroadcast(np.where(cd, g, 0.0), ad.shape))
        if tb:
            accumulate(b, _unbroadcast(np.where(cd, 0.0, g), bd.shape))

    parents = tuple(t for t, flag in ((a, ta), (b, tb)) if flag)
    return record(out_data, parents, back)


def clip(x: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp engaged."""
    xd = x.data
    out_data = np.clip(xd, lo, hi)
    inside = np.ones_like(xd, dtype=bool)
    if lo is not None:
        inside &= xd > lo
    if hi is not None:
        inside &= xd < hi

    def back(g):
        accumulate(x, np.where(inside, g, 0.0))

    return record(out_data, (x,), back)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out_data = xd.sum(axis=axis, keepdims=keepdims)

    def back(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        accumulate(x, np.broadcast_to(gg, xd.shape).copy())

    return record(out_data, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out_data = xd.mean(axis=axis, keepdims=keepdims)
    denom = xd.size / max(out_data.size, 1)

    def back(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        accumulate(x, np.broadcast_to(gg, xd.shape) / denom)

    return record(out_data, (x,), back)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp along one axis; the max shift is treated as constant."""
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    ex = np.exp(xd - m)
    s = ex.sum(axis=axis, keepdims=True)
    out_full = m + np.log(s)
    out_data = out_full if keepdims else np.squeeze(out_full, axis=axis)
    soft = ex / s

    def back(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        accumulate(x, gg * soft)

    return record(out_data, (x,), back)


# ------------------------------------------------------------- shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    xd = x.data
    out_data = xd.reshape(shape)

    def back(g):
        accumulate(x, g.reshape(xd.shape))

    return record(out_data, (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    out_data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def back(g):
        accumulate(x, g.transpose(inv))

    return record(out_data, (x,), back)


def take(x: Tensor, idx) -> Tensor:
    """Indexing / slicing. Backward scatters with np.add.at for fancy indices."""
    xd = x.data
    out_data = xd[idx]
    fancy = not isinstance(idx, (int, slice)) and not (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in idx)
    )

    def back(g):
        buf = np.zeros_like(xd)
        if fancy:
            np.add.at(buf, idx, g)
        else:
            buf[idx] += g
        accumulate(x, buf)

    return record(out_data, (x,), back)


def concat(parts: list, axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            accumulate(p, g[tuple(sl)])

    return record(out_data, tuple(parts), back)


def stack(parts: list, axis: int = 0) -> Tensor:
    out_data = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        for i, p in enumerate(parts):
            accumulate(p, np.take(g, i, axis=axis))

    return record(out_data, tuple(parts), back)


def pad_end(x: Tensor, amount: int, axis: int) -> Tensor:
    """Zero-pad `amount` positions at the end of one axis."""
    if amount < 0:
        raise DimensionError("pad amount must be >= 0")
    xd = x.data
    width = [(0, 0)] * xd.ndim
    width[axis] = (0, amount)
    out_data = np.pad(xd, width)
    n = xd.shape[axis]

    def back(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(0, n)
        accumulate(x, g[tuple(sl)])

    return record(out_data, (x,), back)


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    out_data = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        accumulate(a, _unbroadcast(ga, ad.shape))
        accumulate(b, _unbroadcast(gb, bd.shape))

    return record(out_data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with x of shape (..., In), w (In, Out), b (Out,)."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear: input width {xd.shape[-1]} vs weight rows {wd.shape[0]}")
    out_data = xd @ wd
    if b is not None:
        out_data = out_data + b.data

    def back(g):
        accumulate(x, g @ wd.T)
        accumulate(w, xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None:
            accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w, b) if b is not None else (x, w)
    return record(out_data, parents, back)


def conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise causal 1-d convolution along the second-to-last axis.

    x: (..., M, E), kernel: (k, E). y[..., m, e] = sum_j kernel[j, e] * x[..., m - j, e]
    with implicit zero left-padding, so output length equals input length.
    No bias term.
    """
    xd, kd = x.data, kernel.data
    if kd.ndim != 2:
        raise DimensionError(f"conv1d kernel must be (k, E), got {kd.shape}")
    k, ek = kd.shape
    m, e = xd.shape[-2], xd.shape[-1]
    if ek != e:
        raise DimensionError(f"conv1d channels disagree: kernel {ek} vs input {e}")
    if k > m:
        raise DimensionError(f"conv1d kernel width {k} exceeds sequence length {m}")
    out_data = np.zeros_like(xd)
    for j in range(k):
        if j == 0:
            out_data += kd[0] * xd
        else:
            out_data[..., j:, :] += kd[j] * xd[..., :-j, :]

    def back(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        lead = (-1, m, e) if xd.ndim > 2 else (1, m, e)
        xr = xd.reshape(lead)
        gr = g.reshape(lead)
        for j in range(k):
            if j == 0:
                gx += kd[0] * g
                gk[0] = np.einsum("bme,bme->e", gr, xr)
            else:
                gx[..., :-j, :] += kd[j] * g[..., j:, :]
                gk[j] = np.einsum("bme,bme->e", gr[:, j:, :], xr[:, :-j, :])
        accumulate(x, gx)
        accumulate(kernel, gk)

    return record(out_data, (x, kernel), back)


def heaviside_ste(u: Tensor, threshold: float = 1.0, window: float = 0.5) -> Tensor:
    """Binary step with a rectangular surrogate gradient.

    Forward: 1 where u >= threshold, else 0 (ties count as firing).
    Backward: dS/du = 1/(2*window) inside |u - threshold| < window, 0 outside.
    """
    if window <= 0.0:
        raise DomainError(f"surrogate window must be > 0, got {window}")
    ud = u.data
    out_data = (ud >= threshold).astype(np.float64)
    scale = 1.0 / (2.0 * window)

    def back(g):
        accumulate(u, g * np.where(np.abs(ud - threshold) < window, scale, 0.0))

    return record(out_data, (u,), back)


# ------------------------------------------------------------------ composites


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square norm over the last axis, scaled by a learned gain."""
    ms = mean(mul(x, x), axis=-1, keepdims=True)
    inv = powi(add(ms, eps), -0.5)
    return mul(mul(x, inv), gain)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalization over the last axis."""
    sq = sum_(mul(x, x), axis=-1, keepdims=True)
    return mul(x, powi(add(sq, eps), -0.5))


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style penalty: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    small = np.abs(x.data) < 1.0
    return where(small, mul(mul(x, x), 0.5), add(absolute(x), -0.5))
