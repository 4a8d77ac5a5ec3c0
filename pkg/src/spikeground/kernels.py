"""Compiled hot loops: fused selective scan and LIF dynamics.

Each kernel has a plain-numpy reference twin (suffix `_ref`) used by the
test suite as an independent oracle; the compiled versions must agree to
tight tolerance. The scan backward recomputes hidden states from sqrt(M)
checkpoints instead of materializing the full (B, M, E, N) state history.

Discretization inside the scan is zero-order hold on a diagonal system:

    abar = exp(delta * A)
    bbar = B * expm1(delta * A) / A     (-> delta * B as A -> 0)

expm1 keeps the ratio accurate down to tiny delta * A; only A == 0
exactly takes the limit branch.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def scan_fwd(x, delta, bm, cm, a, y, ckpt, cp):
    """Fused ZOH discretization + diagonal recurrence + output contraction.

    x, delta: (B, M, E); bm, cm: (B, M, N); a: (N,)
    y out: (B, M, E); ckpt out: (n_ckpt, B, E, N) holding the hidden state
    at entry to every cp-th step.
    """
    nb, m_len, e_len = x.shape
    n_len = a.shape[0]
    h = np.zeros((nb, e_len, n_len))
    for m in range(m_len):
        if m % cp == 0:
            ckpt[m // cp] = h
        for b in range(nb):
            for e in range(e_len):
                d = delta[b, m, e]
                xv = x[b, m, e]
                acc = 0.0
                for n in range(n_len):
                    da = d * a[n]
                    ea = np.exp(da)
                    if a[n] == 0.0:
                        bbar = d * bm[b, m, n]
                    else:
                        bbar = bm[b, m, n] * np.expm1(da) / a[n]
                    hv = ea * h[b, e, n] + bbar * xv
                    h[b, e, n] = hv
                    acc += cm[b, m, n] * hv
                y[b, m, e] = acc


@njit(cache=True)
def scan_bwd(x, delta, bm, cm, a, gy, ckpt, cp, dx, ddelta, dbm, dcm, da_out):
    """Adjoint of scan_fwd. Outputs must be zero-initialized by the caller.

    Walks checkpointed segments in reverse, recomputing the per-step hidden
    states for one batch sample at a time (scratch is (cp+1, E, N)).
    """
    nb, m_len, e_len = x.shape
    n_len = a.shape[0]
    n_seg = (m_len + cp - 1) // cp
    for b in range(nb):
        lam = np.zeros((e_len, n_len))
        hseg = np.empty((cp + 1, e_len, n_len))
        for s in range(n_seg - 1, -1, -1):
            lo = s * cp
            hi = min(m_len, lo + cp)
            hseg[0] = ckpt[s, b]
            # forward replay through the segment
            for m in range(lo, hi):
                k = m - lo
                for e in range(e_len):
                    d = delta[b, m, e]
                    xv = x[b, m, e]
                    for n in range(n_len):
                        da = d * a[n]
                        ea = np.exp(da)
                        if a[n] == 0.0:
                            bbar = d * bm[b, m, n]
                        else:
                            bbar = bm[b, m, n] * np.expm1(da) / a[n]
                        hseg[k + 1, e, n] = ea * hseg[k, e, n] + bbar * xv
            # reverse sweep
            for m in range(hi - 1, lo - 1, -1):
                k = m - lo
                for e in range(e_len):
                    d = delta[b, m, e]
                    xv = x[b, m, e]
                    gyv = gy[b, m, e]
                    dxv = 0.0
                    ddv = 0.0
                    for n in range(n_len):
                        an = a[n]
                        bn = bm[b, m, n]
                        da = d * an
                        ea = np.exp(da)
                        if an == 0.0:
                            phi = d
                            dphi_da = 0.5 * d * d
                        else:
                            phi = np.expm1(da) / an
                            dphi_da = (d * ea * an - np.expm1(da)) / (an * an)
                        bbar = bn * phi
                        hprev = hseg[k, e, n]
                        hcur = hseg[k + 1, e, n]
                        lamv = lam[e, n] + gyv * cm[b, m, n]
                        dcm[b, m, n] += gyv * hcur
                        dabar = lamv * hprev
                        dbbar = lamv * xv
                        dxv += lamv * bbar
                        ddv += dabar * an * ea + dbbar * bn * ea
                        dbm[b, m, n] += dbbar * phi
                        da_out[n] += dabar * d * ea + dbbar * bn * dphi_da
                        lam[e, n] = lamv * ea
                    dx[b, m, e] += dxv
                    ddelta[b, m, e] += ddv


@njit(cache=True)
def lif_fwd(cur, beta, u_th, v_reset, u_out, s_out):
    """Leaky integrate-and-fire over the leading time axis.

    cur: (T, R) input current. Membrane potential U[t] = H[t-1] + cur[t],
    spike S[t] = 1 if U[t] >= u_th, post-spike state
    H[t] = v_reset * S[t] + beta * U[t] * (1 - S[t]), H[-1] = 0.
    """
    t_len, r_len = cur.shape
    for r in range(r_len):
        h = 0.0
        for t in range(t_len):
            u = h + cur[t, r]
            if u >= u_th:
                s = 1.0
                h = v_reset
            else:
                s = 0.0
                h = beta * u
            u_out[t, r] = u
            s_out[t, r] = s


@njit(cache=True)
def lif_bwd(u, s, gs, beta, u_th, v_reset, window, dcur):
    """Backprop-through-time for lif_fwd with a rectangular surrogate.

    dS/dU = 1/(2*window) where |U - u_th| < window, else 0. gs is the
    incoming gradient on the spike outputs.
    """
    t_len, r_len = u.shape
    scale = 1.0 / (2.0 * window)
    for r in range(r_len):
        gh = 0.0
        for t in range(t_len - 1, -1, -1):
            uv = u[t, r]
            sv = s[t, r]
            sur = scale if abs(uv - u_th) < window else 0.0
            ds = gs[t, r] + gh * (v_reset - beta * uv)
            du = ds * sur + gh * beta * (1.0 - sv)
            dcur[t, r] = du
            gh = du


# ----------------------------------------------------------- numpy references


def scan_fwd_ref(x, delta, bm, cm, a):
    """Step-by-step numpy version of scan_fwd. Returns (y, h_all).

    h_all has shape (B, M, E, N): the full state history, fine at test sizes.
    """
    nb, m_len, e_len = x.shape
    n_len = a.shape[0]
    h = np.zeros((nb, e_len, n_len))
    y = np.empty((nb, m_len, e_len))
    h_all = np.empty((nb, m_len, e_len, n_len))
    safe_a = np.where(a == 0.0, 1.0, a)
    for m in range(m_len):
        da = delta[:, m, :, None] * a
        ea = np.exp(da)
        phi = np.where(a == 0.0, delta[:, m, :, None], np.expm1(da) / safe_a)
        bbar = bm[:, m, None, :] * phi
        h = ea * h + bbar * x[:, m, :, None]
        h_all[:, m] = h
        y[:, m] = np.einsum("ben,bn->be", h, cm[:, m])
    return y, h_all


def lif_fwd_ref(cur, beta, u_th, v_reset):
    """Vectorized-over-units numpy LIF; returns (U, S)."""
    t_len = cur.shape[0]
    u = np.empty_like(cur)
    s = np.empty_like(cur)
    h = np.zeros(cur.shape[1:])
    for t in range(t_len):
        u[t] = h + cur[t]
        s[t] = (u[t] >= u_th).astype(np.float64)
        h = v_reset * s[t] + beta * u[t] * (1.0 - s[t])
    return u, s


def checkpoint_stride(m_len: int) -> int:
    """sqrt(M) spacing keeps replay work and checkpoint memory balanced."""
    return max(1, int(np.sqrt(m_len)))
