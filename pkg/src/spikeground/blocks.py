"""Scan blocks, slot handling, and the full grounding model.

A layer group is fuse -> attend -> gate: a cross-modal scan block mixes
the visual stream with the (constant) text stream, spiking attention
produces a saliency stream plus spike trains, and a spike-gated scan
block folds that stream back into the visual one through a residual.
Learnable context slots are appended to both sequences before the stack
and stripped before the prediction heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, DomainError, ContractError
from .nn import Module, Linear, RMSNorm
from .snn import (LIFConfig, SpikingAttention, SpikeTrain, MomentProposal,
                  decode_proposals, encode_constant, lif_forward,
                  saliency_spike_train)
from .ssm import selective_scan


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and switches of the grounding model."""

    feat_dim: int = 32
    c_model: int = 32
    e_inner: int = 64
    p_inner: int = 64
    n_state: int = 8
    d_attn: int = 16
    n_slots: int = 4
    n_layers: int = 6
    conv_width: int = 4
    max_video_len: int = 64
    max_query_len: int = 16
    fuse_residual: bool = True
    use_attention: bool = True
    lif: LIFConfig = field(default_factory=LIFConfig)

    def __post_init__(self):
        for name in ("feat_dim", "c_model", "e_inner", "p_inner", "n_state",
                     "d_attn", "n_layers", "conv_width", "max_video_len", "max_query_len"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.n_slots < 0:
            raise DomainError("n_slots must be >= 0")
        if self.conv_width > self.max_video_len:
            raise DomainError("conv_width cannot exceed max_video_len")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown model config keys: {sorted(extra)}")
        d = dict(d)
        if "lif" in d and isinstance(d["lif"], dict):
            d["lif"] = LIFConfig(**d["lif"])
        return cls(**d)


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


class SelectiveScanUnit(Module):
    """Causal conv + SiLU, input-dependent (delta, B, C), diagonal scan.

    The state matrix diagonal is parameterized as -exp(a_log) so it stays
    strictly negative under any gradient update. The step-size projection
    bias is initialized so softplus(bias) lands log-uniformly in
    [dt_min, dt_max].
    """

    def __init__(self, rng: np.random.Generator, e_inner: int, n_state: int,
                 conv_width: int, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        bound = 1.0 / np.sqrt(conv_width)
        self.conv_kernel = self.param("conv_kernel", rng.uniform(-bound, bound, (conv_width, e_inner)))
        self.wb = self.child("wb", Linear(rng, e_inner, n_state, bias=False))
        self.wc = self.child("wc", Linear(rng, e_inner, n_state, bias=False))
        self.wdelta = self.child("wdelta", Linear(rng, e_inner, e_inner, bias=True))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), e_inner))
        self.wdelta.b.data[:] = _inverse_softplus(dt)
        self.a_log = self.param("a_log", np.log(np.arange(1, n_state + 1, dtype=np.float64)))

    def __call__(self, x: Tensor) -> Tensor:
        xc = ad.silu(ad.conv1d(x, self.conv_kernel))
        bcoef = self.wb(xc)
        ccoef = self.wc(xc)
        delta = ad.softplus(self.wdelta(xc))
        a = ad.mul(ad.exp(self.a_log), -1.0)
        return selective_scan(xc, delta, bcoef, ccoef, a)


class CrossModalScanBlock(Module):
    """Scans the visual and text streams and fuses them under a shared gate.

    Both modality branches are gated by SiLU(z) with z projected from the
    normalized visual stream; the fusion linear is zero-initialized. With
    `residual` the block starts as an identity map on the visual stream,
    without it the initial output is the zero sequence.
    """

    def __init__(self, rng: np.random.Generator, c_model: int, e_inner: int,
                 n_state: int, conv_width: int, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.norm_vis = self.child("norm_vis", RMSNorm(c_model))
        self.norm_tex = self.child("norm_tex", RMSNorm(c_model))
        self.in_vis = self.child("in_vis", Linear(rng, c_model, e_inner, bias=False))
        self.in_tex = self.child("in_tex", Linear(rng, c_model, e_inner, bias=False))
        self.wz = self.child("wz", Linear(rng, c_model, e_inner, bias=False))
        self.scan_vis = self.child("scan_vis", SelectiveScanUnit(rng, e_inner, n_state, conv_width))
        self.scan_tex = self.child("scan_tex", SelectiveScanUnit(rng, e_inner, n_state, conv_width))
        self.out = self.child("out", Linear(rng, e_inner, c_model, bias=False, zero_init=True))

    def __call__(self, t_vis: Tensor, t_tex: Tensor) -> Tensor:
        if t_vis.shape != t_tex.shape:
            raise DimensionError(f"modality streams must align, got {t_vis.shape} vs {t_tex.shape}")
        nv = self.norm_vis(t_vis)
        nt = self.norm_tex(t_tex)
        gate = ad.silu(self.wz(nv))
        y_vis = self.scan_vis(self.in_vis(nv))
        y_tex = self.scan_tex(self.in_tex(nt))
        fused = self.out(y_vis * gate + y_tex * gate)
        if self.residual:
            return fused + t_vis
        return fused


class SpikeGatedScanBlock(Module):
    """Refines the token stream, gated elementwise by the saliency stream.

    x comes from the normalized token stream, the gate z from the
    normalized saliency stream; a zero-initialized output linear plus the
    residual make the block an identity map at initialization.
    """

    def __init__(self, rng: np.random.Generator, c_model: int, p_inner: int,
                 n_state: int, conv_width: int):
        super().__init__()
        self.norm_t = self.child("norm_t", RMSNorm(c_model))
        self.norm_s = self.child("norm_s", RMSNorm(c_model))
        self.in_t = self.child("in_t", Linear(rng, c_model, p_inner, bias=False))
        self.in_s = self.child("in_s", Linear(rng, c_model, p_inner, bias=False))
        self.scan = self.child("scan", SelectiveScanUnit(rng, p_inner, n_state, conv_width))
        self.out = self.child("out", Linear(rng, p_inner, c_model, bias=False, zero_init=True))

    def __call__(self, t: Tensor, s: Tensor) -> Tensor:
        if t.shape != s.shape:
            raise DimensionError(f"token/saliency streams must align, got {t.shape} vs {s.shape}")
        x = self.in_t(self.norm_t(t))
        z = self.in_s(self.norm_s(s))
        y = self.scan(x)
        return self.out(y * ad.silu(z)) + t


def concat_slots(o_vis: Tensor, o_tex: Tensor, slots_vis: Tensor, slots_tex: Tensor):
    """Prepend the learnable slot rows to both sequences.

    o_vis: (B, M_v, C), o_tex: (B, M_t, C), slots: (N_r, C) each. Slot
    rows appear verbatim at positions 0 .. N_r - 1 and the real tokens
    shift right by N_r. Leading placement matters: the scan and the
    convolution are causal, so context rows can only reach the tokens
    from the left.
    """
    if o_vis.shape[-1] != slots_vis.shape[-1] or o_tex.shape[-1] != slots_tex.shape[-1]:
        raise DimensionError("slot channel width must match the streams")
    if slots_vis.shape[0] == 0:
        return o_vis, o_tex
    b = o_vis.shape[0]
    sv = encode_constant(slots_vis, b)
    st = encode_constant(slots_tex, b)
    return ad.concat([sv, o_vis], axis=1), ad.concat([st, o_tex], axis=1)


@dataclass
class ModelOutput:
    """Forward results for one batch."""

    saliency: Tensor          # (B, M_v)
    clip_feats: Tensor        # (B, M_v, C)
    query_emb: Tensor         # (B, C) pooled query content embedding
    out_spikes: np.ndarray    # (T, B, M_v, C) binary, final-layer attention output
    lengths: list[int]        # true clip counts per sample


class GroundingModel(Module):
    """Full temporal grounding network over feature sequences."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.c_model
        self.vis_in = self.child("vis_in", Linear(rng, cfg.feat_dim, c))
        self.tex_in = self.child("tex_in", Linear(rng, cfg.feat_dim, c))
        self.pos_vis = self.param("pos_vis", 0.02 * rng.standard_normal((cfg.max_video_len, c)))
        self.pos_tex = self.param("pos_tex", 0.02 * rng.standard_normal((cfg.max_query_len, c)))
        # slots start at token scale so the prior they carry is visible
        # to the scans from the first epoch
        self.slots_vis = self.param("slots_vis", 0.3 * rng.standard_normal((cfg.n_slots, c)))
        self.slots_tex = self.param("slots_tex", 0.3 * rng.standard_normal((cfg.n_slots, c)))
        self.fuse_blocks: list[CrossModalScanBlock] = []
        self.attn_blocks: list[SpikingAttention] = []
        self.gate_blocks: list[SpikeGatedScanBlock] = []
        for l in range(cfg.n_layers):
            self.fuse_blocks.append(self.child(
                f"fuse{l}", CrossModalScanBlock(rng, c, cfg.e_inner, cfg.n_state,
                                                cfg.conv_width, residual=cfg.fuse_residual)))
            self.attn_blocks.append(self.child(
                f"attn{l}", SpikingAttention(rng, c, cfg.d_attn, cfg.lif)))
            self.gate_blocks.append(self.child(
                f"gate{l}", SpikeGatedScanBlock(rng, c, cfg.p_inner, cfg.n_state, cfg.conv_width)))
        self.final_norm = self.child("final_norm", RMSNorm(c))
        self.saliency_head = self.child("saliency_head", Linear(rng, c, 1))
        self.bnd_hidden = self.child("bnd_hidden", Linear(rng, c + 3, c))
        self.bnd_out = self.child("bnd_out", Linear(rng, c, 2, zero_init=True))

    # ------------------------------------------------------------- forward

    def forward(self, video: np.ndarray, query: np.ndarray,
                video_mask: np.ndarray | None = None,
                query_mask: np.ndarray | None = None) -> ModelOutput:
        """video: (B, M_v, F), query: (B, M_q, F); masks are 1 for real positions.

        Batches are padded to a common M_v; the mask zeroes padded clips at
        every layer boundary so state never leaks through them into scores.
        """
        video = np.asarray(video, dtype=np.float64)
        query = np.asarray(query, dtype=np.float64)
        if video.ndim == 2:
            video = video[None]
            query = query[None]
        nb, mv, f = video.shape
        mq = query.shape[1]
        if mv < 1:
            raise DomainError("empty video")
        if mq < 1:
            raise DomainError("empty query")
        if f != self.cfg.feat_dim or query.shape[-1] != self.cfg.feat_dim:
            raise DimensionError(f"feature width must be {self.cfg.feat_dim}")
        if mv > self.cfg.max_video_len:
            raise DimensionError(f"video length {mv} exceeds max_video_len {self.cfg.max_video_len}")
        if mq > self.cfg.max_query_len:
            query = query[:, : self.cfg.max_query_len]
            mq = query.shape[1]
        if video_mask is None:
            video_mask = np.ones((nb, mv))
        if query_mask is None:
            query_mask = np.ones((nb, mq))
        video_mask = np.asarray(video_mask, dtype=np.float64)
        query_mask = np.asarray(query_mask, dtype=np.float64)
        lengths = [int(video_mask[i].sum()) for i in range(nb)]

        v = self.vis_in(Tensor(video)) + self.pos_vis[:mv]
        v = v * video_mask[:, :, None]
        qtok = self.tex_in(Tensor(query)) * query_mask[:, :, None]
        # content embedding for alignment losses: masked mean, no positions
        query_emb = ad.sum_(qtok, axis=1) * (1.0 / query_mask.sum(axis=1))[:, None]
        q = qtok + self.pos_tex[:mq] * query_mask[:, :, None]
        if mq > mv:
            q = q[:, :mv]
        elif mq < mv:
            q = ad.pad_end(q, mv - mq, axis=1)

        t_vis, t_tex = concat_slots(v, q, self.slots_vis, self.slots_tex)
        ns = self.cfg.n_slots
        full_mask = np.concatenate([np.ones((nb, ns)), video_mask], axis=1)[:, :, None]

        spikes = None
        for fuse, attn, gate in zip(self.fuse_blocks, self.attn_blocks, self.gate_blocks):
            t_vis = fuse(t_vis, t_tex) * full_mask
            if self.cfg.use_attention:
                s_stream, spikes = attn(t_vis)
            else:
                # ablation: no spiking stage means no saliency stream at
                # all, so the gate sees a silent input
                s_stream = Tensor(np.zeros(t_vis.data.shape))
            t_vis = gate(t_vis, s_stream) * full_mask

        feats = self.final_norm(t_vis)
        clip_feats = feats[:, ns : ns + mv]
        saliency = ad.reshape(self.saliency_head(clip_feats), (nb, mv))
        if spikes is not None:
            out_spikes = spikes.data[:, :, ns : ns + mv, :]
        else:
            out_spikes = np.zeros((self.cfg.lif.steps, nb, mv, 1))
        return ModelOutput(saliency=saliency, clip_feats=clip_feats,
                           query_emb=query_emb, out_spikes=out_spikes, lengths=lengths)

    # ------------------------------------------------------------- decoding

    def decode(self, out: ModelOutput) -> list[list[MomentProposal]]:
        """Saliency-driven spike runs -> scored proposals per sample.

        Per-clip saliency scores, standardized within the sample, feed
        integrate-and-fire units as constant current over T steps. Two
        readouts of the train yield candidate intervals: runs of spikes
        in each step row, and runs of the cumulative fired-by-step-t
        rows (first-spike-time coding; clips of unequal drive rarely
        share an exact step, but the fired-by-now set grows into the
        whole salient island). Both readouts are prefix-monotone in the
        step count. The standardization matters: the saliency contrast
        objective only shapes score differences, so the raw scale
        floats and a fixed firing threshold would be arbitrary against
        it. Falls back to the argmax clip when nothing fires. Proposals
        are ordered by total salience (score times run width), the
        ranking the prediction path uses.
        """
        results = []
        for i, nv in enumerate(out.lengths):
            sal = out.saliency.data[i, :nv]
            spread = sal.std()
            zed = (sal - sal.mean()) / spread if spread > 1e-9 else np.zeros_like(sal)
            train = saliency_spike_train(zed, self.cfg.lif)
            fired = (np.cumsum(train.data, axis=0) > 0).astype(np.float64)
            props = decode_proposals(train, sal)
            seen = {(p.b, p.e) for p in props}
            props += [p for p in decode_proposals(SpikeTrain(fired), sal)
                      if (p.b, p.e) not in seen]
            if not props:
                m = int(np.argmax(sal))
                props = [MomentProposal(b=m, e=m, score=float(sal[m]), source_step=-1)]
            props.sort(key=lambda p: (-p.score * (p.e - p.b + 1), p.b, p.e))
            results.append(props)
        return results

    def refine_spans(self, clip_feats: Tensor, items: list[tuple[int, int, int, int]]):
        """Boundary head over pooled proposal features.

        items: (sample_index, b, e, n_video) per proposal. Returns center
        and width tensors of shape (K,), differentiable, unclamped:
        center = (b + e)/2 + offset, width = (e - b + 1) * exp(scale).
        """
        pooled = []
        extras = np.empty((len(items), 3))
        for row, (i, b, e, nv) in enumerate(items):
            pooled.append(ad.mean(clip_feats[i, b : e + 1], axis=0))
            extras[row] = (b / nv, e / nv, (e - b + 1) / nv)
        x = ad.concat([ad.stack(pooled, axis=0), Tensor(extras)], axis=1)
        off = self.bnd_out(ad.silu(self.bnd_hidden(x)))
        base_c = np.array([(b + e) / 2.0 for _, b, e, _ in items])
        base_w = np.array([e - b + 1.0 for _, b, e, _ in items])
        center = off[:, 0] + base_c
        width = ad.exp(off[:, 1]) * base_w
        return center, width

    def predict_moments(self, out: ModelOutput) -> list[list[tuple[float, float, float]]]:
        """Decoded proposals refined to (span_lo, span_hi, score) per sample.

        Center and width are clamped to [0, n_video] before the span
        mapping; this is the metrics-facing path. The emitted score is
        the total salience of the source run (mean saliency times run
        width): ranking by per-clip mean alone always crowns a one-clip
        peak, while the integral rewards covering the whole salient
        island.
        """
        proposals = self.decode(out)
        items = []
        for i, props in enumerate(proposals):
            nv = out.lengths[i]
            for p in props:
                items.append((i, p.b, p.e, nv))
        if not items:
            return [[] for _ in out.lengths]
        with ad.no_grad():
            center, width = self.refine_spans(out.clip_feats, items)
        moments: list[list[tuple[float, float, float]]] = [[] for _ in out.lengths]
        row = 0
        for i, props in enumerate(proposals):
            nv = out.lengths[i]
            for p in props:
                c = float(np.clip(center.data[row], 0.0, nv))
                w = float(np.clip(width.data[row], 0.0, nv))
                moments[i].append((c - 0.5 * w, c + 0.5 * w, p.score * (p.e - p.b + 1)))
                row += 1
        return moments
