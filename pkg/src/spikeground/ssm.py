"""State-space scans on diagonal systems.

Covers the LTI toolkit (exact ZOH discretization, recurrent evaluation,
convolutional evaluation, parallel prefix evaluation) and the batched
input-dependent selective scan used by the model blocks. The recurrent
and convolutional routes must agree for LTI parameters; the test suite
holds them to each other as mutual oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, record, accumulate
from .errors import DimensionError, DomainError, ContractError


@dataclass(frozen=True)
class ContinuousSSM:
    """Diagonal continuous-time system h' = A h + B x, y = C h.

    a, b, c are length-N vectors (a holds the diagonal of A). Stability
    requires every entry of a to be strictly negative.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if not (a.ndim == b.ndim == c.ndim == 1 and a.shape == b.shape == c.shape):
            raise DimensionError(f"a, b, c must be equal-length vectors, got {a.shape}, {b.shape}, {c.shape}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class DiscreteSSM:
    """Per-position discretized system: h_m = abar_m * h_{m-1} + bbar_m * x_m.

    abar, bbar, c: (M, N) arrays; delta: (M,) positive step sizes kept for
    bookkeeping. Rows may vary with position (the selective case) or be
    constant (the LTI case, which admits a convolutional form).
    """

    abar: np.ndarray
    bbar: np.ndarray
    c: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        abar = np.asarray(self.abar, dtype=np.float64)
        bbar = np.asarray(self.bbar, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        if abar.ndim != 2 or abar.shape != bbar.shape or abar.shape != c.shape:
            raise DimensionError(f"abar, bbar, c must share shape (M, N), got {abar.shape}, {bbar.shape}, {c.shape}")
        if delta.shape != (abar.shape[0],):
            raise DimensionError(f"delta must have shape (M,), got {delta.shape}")
        if np.any(delta <= 0.0):
            raise DomainError("delta entries must be strictly positive")
        object.__setattr__(self, "abar", abar)
        object.__setattr__(self, "bbar", bbar)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "delta", delta)

    @property
    def m(self) -> int:
        return self.abar.shape[0]

    @property
    def n(self) -> int:
        return self.abar.shape[1]

    def is_lti(self, tol: float = 0.0) -> bool:
        """True when every row repeats the first (position-independent params)."""
        return (
            np.allclose(self.abar, self.abar[0], atol=tol, rtol=0.0)
            and np.allclose(self.bbar, self.bbar[0], atol=tol, rtol=0.0)
            and np.allclose(self.c, self.c[0], atol=tol, rtol=0.0)
        )

    @classmethod
    def from_lti(cls, sys: ContinuousSSM, delta: float, m: int) -> "DiscreteSSM":
        abar, bbar = zoh_discretize(sys.a, sys.b, delta)
        ones = np.ones((m, 1))
        return cls(ones * abar, ones * bbar, ones * sys.c, np.full(m, float(delta)))


@dataclass(frozen=True)
class ConvKernel:
    """Truncated impulse response of an LTI diagonal system.

    weights[j] = sum_n c_n * abar_n**j * bbar_n, one tap per lag.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise DimensionError(f"kernel weights must be 1-d, got {w.shape}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_lti(cls, sys: ContinuousSSM, delta: float, m: int) -> "ConvKernel":
        abar, bbar = zoh_discretize(sys.a, sys.b, delta)
        powers = abar[None, :] ** np.arange(m)[:, None]
        return cls(powers * bbar @ sys.c)

    @classmethod
    def from_discrete(cls, ssm: DiscreteSSM) -> "ConvKernel":
        """LTI parameters only; position-dependent rows have no conv form."""
        if not ssm.is_lti():
            raise ContractError("convolutional form requires position-independent parameters")
        powers = ssm.abar[0][None, :] ** np.arange(ssm.m)[:, None]
        return cls(np.sum(powers * ssm.bbar[0] * ssm.c[0], axis=1))


def zoh_discretize(a, b, delta: float):
    """Exact zero-order-hold discretization of a diagonal system.

    abar = exp(delta * a); bbar = b * expm1(delta * a) / a, with the
    analytic limit bbar = delta * b where a == 0. expm1 keeps the ratio
    accurate for tiny delta * a, so only a == 0 exactly needs the limit
    branch. delta must be positive.
    """
    if delta <= 0.0:
        raise DomainError(f"delta must be > 0, got {delta}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"a and b must share a shape, got {a.shape} vs {b.shape}")
    da = delta * a
    abar = np.exp(da)
    with np.errstate(divide="ignore", invalid="ignore"):
        bbar = np.where(a == 0.0, delta * b,
                        b * np.expm1(da) / np.where(a == 0.0, 1.0, a))
    return abar, bbar


def recurrent_scan(ssm: DiscreteSSM, x: np.ndarray) -> np.ndarray:
    """Sequential evaluation, O(M * N * E) work, O(N * E) state.

    x: (M, E) input sequence (use E = 1 for a scalar channel). The same
    per-position parameters drive every channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    if x.shape[0] != ssm.m:
        raise DimensionError(f"input length {x.shape[0]} vs parameter rows {ssm.m}")
    h = np.zeros((x.shape[1], ssm.n))
    y = np.empty_like(x)
    for m in range(ssm.m):
        h = ssm.abar[m] * h + ssm.bbar[m] * x[m][:, None]
        y[m] = h @ ssm.c[m]
    return y[:, 0] if squeeze else y


def conv_scan(kernel: ConvKernel, x: np.ndarray) -> np.ndarray:
    """Causal convolution y_m = sum_j K[j] * x_{m-j} over a single channel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"conv_scan expects a 1-d sequence, got {x.shape}")
    full = np.convolve(x, kernel.weights)
    return full[: x.shape[0]]


def prefix_scan(coeff_a: np.ndarray, coeff_b: np.ndarray) -> np.ndarray:
    """Parallel-style evaluation of h_m = a_m * h_{m-1} + b_m, h_{-1} = 0.

    Doubling over the last axis: log2(M) passes of elementwise work. Used
    as a third route to cross-check the sequential scan (forward only).
    """
    a = np.array(coeff_a, dtype=np.float64)
    b = np.array(coeff_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"coefficient shapes disagree: {a.shape} vs {b.shape}")
    m = a.shape[-1]
    shift = 1
    while shift < m:
        a_next = a.copy()
        b_next = b.copy()
        b_next[..., shift:] = a[..., shift:] * b[..., :-shift] + b[..., shift:]
        a_next[..., shift:] = a[..., :-shift] * a[..., shift:]
        a, b = a_next, b_next
        shift *= 2
    return b


def selective_scan(x: Tensor, delta: Tensor, bcoef: Tensor, ccoef: Tensor, a: Tensor) -> Tensor:
    """Input-dependent scan with fused per-position ZOH discretization.

    Shapes: x, delta (B, M, E); bcoef, ccoef (B, M, N); a (N,) shared
    diagonal. Returns y (B, M, E). Differentiable in all five arguments;
    the backward pass recomputes hidden states from sqrt(M) checkpoints.
    Unbatched (M, E) inputs are accepted and squeezed back.
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    dd = delta.data[None] if squeeze else delta.data
    bd = bcoef.data[None] if squeeze else bcoef.data
    cd = ccoef.data[None] if squeeze else ccoef.data
    ad = a.data
    nb, m_len, e_len = xd.shape
    n_len = ad.shape[0]
    if dd.shape != xd.shape:
        raise DimensionError(f"delta shape {dd.shape} must match x shape {xd.shape}")
    if bd.shape != (nb, m_len, n_len) or cd.shape != (nb, m_len, n_len):
        raise DimensionError(f"b/c coefficients must be (B, M, N)=({nb}, {m_len}, {n_len}), got {bd.shape}, {cd.shape}")
    if np.any(dd <= 0.0):
        raise DomainError("selective_scan requires strictly positive delta")

    xd = np.ascontiguousarray(xd)
    dd = np.ascontiguousarray(dd)
    bd = np.ascontiguousarray(bd)
    cd = np.ascontiguousarray(cd)
    ad = np.ascontiguousarray(ad)
    cp = kernels.checkpoint_stride(m_len)
    n_ckpt = (m_len + cp - 1) // cp
    y = np.empty((nb, m_len, e_len))
    ckpt = np.empty((n_ckpt, nb, e_len, n_len))
    kernels.scan_fwd(xd, dd, bd, cd, ad, y, ckpt, cp)

    def back(g):
        gy = np.ascontiguousarray(g[None] if squeeze else g)
        dx = np.zeros_like(xd)
        ddl = np.zeros_like(dd)
        dbm = np.zeros_like(bd)
        dcm = np.zeros_like(cd)
        da = np.zeros_like(ad)
        kernels.scan_bwd(xd, dd, bd, cd, ad, gy, ckpt, cp, dx, ddl, dbm, dcm, da)
        accumulate(x, dx[0] if squeeze else dx)
        accumulate(delta, ddl[0] if squeeze else ddl)
        accumulate(bcoef, dbm[0] if squeeze else dbm)
        accumulate(ccoef, dcm[0] if squeeze else dcm)
        accumulate(a, da)

    return record(y[0] if squeeze else y, (x, delta, bcoef, ccoef, a), back)
