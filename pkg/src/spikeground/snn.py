"""Spiking components: LIF neurons, spike-based attention, proposal decoding.

Spikes are binary {0, 1} float64 arrays with a leading time axis. The
step nonlinearity fires on U >= threshold (ties fire) and trains through
a rectangular surrogate window around the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor, record, accumulate
from .errors import DimensionError, DomainError
from .nn import Module, Linear, BatchNorm


@dataclass(frozen=True)
class LIFConfig:
    """Leaky integrate-and-fire cell constants.

    threshold: firing level U_th, must be positive. reset: membrane
    value after a spike. decay: leak factor in (0, 1] applied to a
    sub-threshold membrane (1 means a perfect integrator). steps:
    simulation length T. surrogate_window: half-width of the
    rectangular surrogate used in the backward pass.
    """

    threshold: float = 1.0
    reset: float = 0.0
    decay: float = 0.5
    steps: int = 8
    surrogate_window: float = 0.5

    def __post_init__(self):
        if self.threshold <= 0.0:
            raise DomainError(f"threshold must be > 0, got {self.threshold}")
        if not (0.0 < self.decay <= 1.0):
            raise DomainError(f"decay must lie in (0, 1], got {self.decay}")
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.surrogate_window <= 0.0:
            raise DomainError(f"surrogate_window must be > 0, got {self.surrogate_window}")
        if self.reset >= self.threshold:
            raise DomainError("reset must sit below threshold")


@dataclass(frozen=True)
class SpikeTrain:
    """Binary (T, M) matrix: row per time step, column per sequence position."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise DimensionError(f"spike train must be (T, M), got {d.shape}")
        if not np.all((d == 0.0) | (d == 1.0)):
            raise DomainError("spike train entries must be binary")
        object.__setattr__(self, "data", d)

    @property
    def steps(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class MomentProposal:
    """Inclusive clip interval [b, e] with a saliency score."""

    b: int
    e: int
    score: float
    source_step: int = -1

    def __post_init__(self):
        if self.b < 0 or self.e < self.b:
            raise DomainError(f"need 0 <= b <= e, got b={self.b}, e={self.e}")


def lif_forward(current: Tensor, cfg: LIFConfig) -> Tensor:
    """Run LIF dynamics along the leading time axis of the input current.

    current: (T, ...) tensor. Returns binary spikes of the same shape.
    Gradients flow through the surrogate and through the sub-threshold
    membrane recursion (full backprop through time).
    """
    cur = current.data
    if cur.ndim < 1 or cur.shape[0] != cfg.steps:
        raise DimensionError(f"current must have leading time axis of {cfg.steps}, got {cur.shape}")
    flat = np.ascontiguousarray(cur.reshape(cfg.steps, -1))
    u = np.empty_like(flat)
    s = np.empty_like(flat)
    kernels.lif_fwd(flat, cfg.decay, cfg.threshold, cfg.reset, u, s)

    def back(g):
        gs = np.ascontiguousarray(g.reshape(cfg.steps, -1))
        dcur = np.empty_like(flat)
        kernels.lif_bwd(u, s, gs, cfg.decay, cfg.threshold, cfg.reset, cfg.surrogate_window, dcur)
        accumulate(current, dcur.reshape(cur.shape))

    return record(s.reshape(cur.shape), (current,), back)


def encode_constant(x: Tensor, steps: int) -> Tensor:
    """Replicate a feature tensor across a new leading time axis."""
    data = np.broadcast_to(x.data, (steps,) + x.data.shape).copy()

    def back(g):
        accumulate(x, g.sum(axis=0))

    return record(data, (x,), back)


def firing_rate(x: float, cfg: LIFConfig) -> float:
    """Mean spike count of one neuron fed constant current x for cfg.steps."""
    h = 0.0
    fired = 0
    for _ in range(cfg.steps):
        u = h + x
        if u >= cfg.threshold:
            fired += 1
            h = cfg.reset
        else:
            h = cfg.decay * u
    return fired / cfg.steps


def saliency_spike_train(saliency: np.ndarray, cfg: LIFConfig) -> SpikeTrain:
    """LIF spike train driven by per-clip saliency as constant current.

    saliency: (M,) real scores. Each clip's score feeds one neuron for
    cfg.steps steps; the binary emissions form the proposal train, so
    clips the saliency head rates highly are the ones that fire.
    """
    sal = np.ascontiguousarray(np.asarray(saliency, dtype=np.float64).reshape(1, -1))
    cur = np.repeat(sal, cfg.steps, axis=0)
    u = np.empty_like(cur)
    s = np.empty_like(cur)
    kernels.lif_fwd(cur, cfg.decay, cfg.threshold, cfg.reset, u, s)
    return SpikeTrain(s)


def decode_proposals(train: SpikeTrain, saliency: np.ndarray) -> list[MomentProposal]:
    """Turn per-step spike runs into scored candidate intervals.

    Each maximal run of consecutive ones within a time step becomes an
    inclusive interval [b, e] scored by the mean saliency over its clips.
    Proposals are pooled over steps, deduplicated on (b, e) keeping the
    max score (earliest source step), and sorted by descending score with
    (b, e) as the tiebreak.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != (train.length,):
        raise DimensionError(f"saliency must have shape ({train.length},), got {saliency.shape}")
    seen: dict[tuple[int, int], MomentProposal] = {}
    for t in range(train.steps):
        row = train.data[t]
        b = None
        for m in range(train.length + 1):
            on = m < train.length and row[m] == 1.0
            if on and b is None:
                b = m
            elif not on and b is not None:
                e = m - 1
                key = (b, e)
                if key not in seen:
                    score = float(saliency[b : e + 1].mean())
                    seen[key] = MomentProposal(b=b, e=e, score=score, source_step=t)
                b = None
    out = sorted(seen.values(), key=lambda p: (-p.score, p.b, p.e))
    return out


class SpikingAttention(Module):
    """Spike-domain attention over one feature stream.

    Q, K, V are LIF spike trains of linear projections driven by a
    constant-current encoding of the input. Per step, the raw product
    Q K^T V is formed first and scaled by 1/sqrt(d_attn) afterwards;
    the result is projected back up, batch-normalized, and passed
    through an output LIF stage. The continuous output is the mean of
    the output spikes over time; the raw per-step trains are also
    returned for inspection (proposal_train collapses channels by
    majority vote when a single train per position is wanted).
    """

    def __init__(self, rng: np.random.Generator, c_model: int, d_attn: int, cfg: LIFConfig):
        super().__init__()
        self.cfg = cfg
        self.d_attn = d_attn
        self.wq = self.child("wq", Linear(rng, c_model, d_attn, bias=False))
        self.wk = self.child("wk", Linear(rng, c_model, d_attn, bias=False))
        self.wv = self.child("wv", Linear(rng, c_model, d_attn, bias=False))
        self.wo = self.child("wo", Linear(rng, d_attn, c_model, bias=False))
        self.bn = self.child("bn", BatchNorm(c_model))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: (B, M, C). Returns (mean output (B, M, C), spike train (T, B, M, C))."""
        steps = self.cfg.steps
        xt = encode_constant(x, steps)
        q = lif_forward(self.wq(xt), self.cfg)
        k = lif_forward(self.wk(xt), self.cfg)
        v = lif_forward(self.wv(xt), self.cfg)
        # (T, B, M, M) attention map in the spike domain, then (T, B, M, d)
        att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        g = ad.mul(ad.matmul(att, v), 1.0 / np.sqrt(self.d_attn))
        o = self.bn(self.wo(g))
        spikes = lif_forward(o, self.cfg)
        out = ad.mean(spikes, axis=0)
        return out, spikes

    @staticmethod
    def proposal_train(spikes: np.ndarray, sample: int) -> SpikeTrain:
        """Reduce (T, B, M, C) output spikes to a (T, M) train for one sample."""
        s = spikes[:, sample]
        vote = (s.mean(axis=-1) >= 0.5).astype(np.float64)
        return SpikeTrain(vote)
