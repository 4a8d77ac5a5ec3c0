"""Micro-benchmarks for the three hot kernels plus log-log scaling fits.

The selective scan should time out linearly in sequence length; the
convolutional LTI route with a full-length kernel is the quadratic
contrast case (direct convolution, no FFT).
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .errors import ContractError
from .ssm import ContinuousSSM, ConvKernel, conv_scan

SCAN_E = 16
SCAN_N = 8
LIF_T = 8


def _scan_once(m: int, rng: np.random.Generator):
    x = rng.standard_normal((1, m, SCAN_E))
    delta = 0.05 + 0.2 * rng.random((1, m, SCAN_E))
    bm = rng.standard_normal((1, m, SCAN_N))
    cm = rng.standard_normal((1, m, SCAN_N))
    a = -np.exp(rng.standard_normal(SCAN_N) * 0.3)
    y = np.empty_like(x)
    cp = kernels.checkpoint_stride(m)
    ckpt = np.empty(((m + cp - 1) // cp, 1, SCAN_E, SCAN_N))
    return lambda: kernels.scan_fwd(x, delta, bm, cm, a, y, ckpt, cp)


def _conv_once(m: int, rng: np.random.Generator):
    n = 4
    sys = ContinuousSSM(a=-np.linspace(0.5, 2.0, n), b=np.ones(n), c=rng.standard_normal(n))
    kern = ConvKernel.from_lti(sys, delta=0.1, m=m)
    x = rng.standard_normal(m)
    return lambda: conv_scan(kern, x)


def _lif_once(m: int, rng: np.random.Generator):
    cur = np.ascontiguousarray(rng.standard_normal((LIF_T, m)) * 0.8)
    u = np.empty_like(cur)
    s = np.empty_like(cur)
    return lambda: kernels.lif_fwd(cur, 0.5, 1.0, 0.0, u, s)


_SETUPS = {"scan": _scan_once, "conv": _conv_once, "lif": _lif_once}


def time_kernel(kind: str, sizes, repeats: int = 5, seed: int = 0) -> list[tuple[int, float]]:
    """Best-of-`repeats` wall time per size, compile warmup excluded."""
    if kind not in _SETUPS:
        raise ContractError(f"unknown kernel {kind!r}; choose from {sorted(_SETUPS)}")
    rng = np.random.default_rng(seed)
    _SETUPS[kind](32, rng)()  # trigger jit compile outside the timed region
    rows = []
    for m in sizes:
        fn = _SETUPS[kind](int(m), rng)
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        rows.append((int(m), best))
    return rows


def fitted_exponent(rows: list[tuple[int, float]]) -> float:
    """Slope of log(time) against log(size)."""
    if len(rows) < 2:
        raise ContractError("need at least two sizes to fit an exponent")
    logm = np.log([r[0] for r in rows])
    logt = np.log([max(r[1], 1e-9) for r in rows])
    slope, _ = np.polyfit(logm, logt, 1)
    return float(slope)
