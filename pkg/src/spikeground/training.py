"""Adam training loop, batching, and evaluation for the grounding model.

The loss couples three terms per batch: contrastive alignment between
pooled ground-truth-moment features and pooled query embeddings,
smooth-L1 regression of refined boundaries against labels for the
highest-IoU-matched proposal of each sample, and the in-moment saliency
contrast. Samples whose decode produced no proposal at all contribute a
constant full-extent span penalty instead of a regression term.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .blocks import GroundingModel, ModelConfig, ModelOutput
from .checkpoint import save_checkpoint
from .errors import ContractError, DomainError, NumericalError
from .losses import (LossWeights, contrastive_alignment_loss, saliency_contrast_loss,
                     span_regression_loss, total_loss)
from .metrics import grounding_report, span_from_clips, temporal_iou
from .snn import LIFConfig
from .synth import GroundingSample


@dataclass(frozen=True)
class RunConfig:
    """Flat experiment configuration: model dims, LIF, losses, optimizer.

    Mirrors a flat JSON config file one-to-one; unknown keys are rejected
    so typos fail loudly. Where the source architecture publishes values
    (6 blocks, 8 spiking steps, Adam at lr 2e-4 with weight decay 1e-4,
    batch 64) the defaults follow them; the width-like dims are sized for
    single-core CPU training.
    """

    # model dims
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
    # LIF
    lif_steps: int = 8
    lif_threshold: float = 1.0
    lif_reset: float = 0.0
    lif_decay: float = 0.5
    surrogate_window: float = 0.5
    # losses
    alpha_contrastive: float = 1.0
    alpha_span: float = 1.0
    alpha_saliency: float = 1.0
    temp_contrastive: float = 0.07
    temp_saliency: float = 0.07
    contrastive_mode: str = "one-minus"
    contrastive_clamp: float | None = 1e-7
    # optimizer / loop
    lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    # 10 epochs keeps the reference run (2000 samples) under ten minutes
    # on one desktop core; the task saturates around epoch 8
    epochs: int = 10
    patience: int = 6
    max_seconds: float | None = None
    val_fraction: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feat_dim=self.feat_dim, c_model=self.c_model, e_inner=self.e_inner,
            p_inner=self.p_inner, n_state=self.n_state, d_attn=self.d_attn,
            n_slots=self.n_slots, n_layers=self.n_layers, conv_width=self.conv_width,
            max_video_len=self.max_video_len, max_query_len=self.max_query_len,
            fuse_residual=self.fuse_residual, use_attention=self.use_attention,
            lif=LIFConfig(threshold=self.lif_threshold, reset=self.lif_reset,
                          decay=self.lif_decay, steps=self.lif_steps,
                          surrogate_window=self.surrogate_window),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            contrastive=self.alpha_contrastive, span=self.alpha_span,
            saliency=self.alpha_saliency, temp_contrastive=self.temp_contrastive,
            temp_saliency=self.temp_saliency,
        )


class Adam(object):
    """Adam with additive (coupled) weight decay on the gradients."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class Batch:
    video: np.ndarray        # (B, Mv, F) zero-padded
    query: np.ndarray        # (B, Mq, F) zero-padded
    video_mask: np.ndarray   # (B, Mv)
    query_mask: np.ndarray   # (B, Mq)
    gt: list[tuple[int, int]]
    sample_ids: list[str]
    saliency_pos: list[np.ndarray]  # bool mask of in-moment clips per sample


def collate(samples: list[GroundingSample]) -> Batch:
    nb = len(samples)
    mv = max(s.n_video for s in samples)
    mq = max(s.query.shape[0] for s in samples)
    f = samples[0].video.shape[1]
    video = np.zeros((nb, mv, f))
    query = np.zeros((nb, mq, f))
    vmask = np.zeros((nb, mv))
    qmask = np.zeros((nb, mq))
    gt = []
    pos = []
    for i, s in enumerate(samples):
        nv = s.n_video
        nq = s.query.shape[0]
        video[i, :nv] = s.video
        query[i, :nq] = s.query
        vmask[i, :nv] = 1.0
        qmask[i, :nq] = 1.0
        m = s.moments[0]
        gt.append((m.b, m.e))
        pos.append(m.positives(nv))
    return Batch(video, query, vmask, qmask, gt, [s.sample_id for s in samples], pos)


def _match_proposals(proposals, gt):
    """Highest-IoU proposal per sample; None when the list is empty."""
    best, best_iou = None, -1.0
    gspan = span_from_clips(*gt)
    for p in proposals:
        iou = temporal_iou(span_from_clips(p.b, p.e), gspan)
        if iou > best_iou:
            best, best_iou = p, iou
    return best


def batch_losses(model: GroundingModel, batch: Batch, weights: LossWeights,
                 mode: str = "one-minus", clamp: float | None = 1e-7):
    """Forward one batch and assemble the three loss terms (differentiable)."""
    out = model.forward(batch.video, batch.query, batch.video_mask, batch.query_mask)
    proposals = model.decode(out)
    nb = len(batch.gt)

    # --- span regression on matched proposals, full-extent penalty otherwise
    items, gb, ge = [], [], []
    penalty_terms = []
    for i, (props, gt) in enumerate(zip(proposals, batch.gt)):
        nv = out.lengths[i]
        top = _match_proposals(props, gt)
        if top is None:
            # a proposal-less sample is charged as if it predicted the full extent
            penalty_terms.append(span_regression_loss(
                Tensor(np.array([0.0])), Tensor(np.array([float(nv - 1)])),
                np.array([float(gt[0])]), np.array([float(gt[1])])))
            continue
        items.append((i, top.b, top.e, nv))
        gb.append(float(gt[0]))
        ge.append(float(gt[1]))
    span_parts = []
    if items:
        center, width = model.refine_spans(out.clip_feats, items)
        pred_b = center - (width - 1.0) * 0.5
        pred_e = center + (width - 1.0) * 0.5
        span_parts.append(ad.mul(
            span_regression_loss(pred_b, pred_e, np.array(gb), np.array(ge)), float(len(items))))
    span_parts.extend(penalty_terms)
    l_span = ad.mul(sum(span_parts[1:], span_parts[0]), 1.0 / nb)

    # --- contrastive alignment: ground-truth moment pool vs query embedding
    pool_gt = []
    for i in range(nb):
        pool_gt.append(ad.mean(out.clip_feats[i, batch.gt[i][0] : batch.gt[i][1] + 1], axis=0))
    l_con = contrastive_alignment_loss(
        ad.stack(pool_gt, axis=0), out.query_emb,
        temperature=weights.temp_contrastive, mode=mode, clamp=clamp)

    # --- saliency contrast inside each sample
    sal_parts = []
    for i in range(nb):
        nv = out.lengths[i]
        sal_parts.append(saliency_contrast_loss(
            out.saliency[i, :nv], batch.saliency_pos[i], temperature=weights.temp_saliency))
    l_sal = ad.mul(sum(sal_parts[1:], sal_parts[0]), 1.0 / nb)

    return out, l_con, l_span, l_sal


def evaluate(model: GroundingModel, samples: list[GroundingSample], batch_size: int = 64):
    """Metric report plus per-query prediction rows (spans are continuous)."""
    model.set_training(False)
    preds, gts, qids = [], [], []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        batch = collate(chunk)
        with ad.no_grad():
            out = model.forward(batch.video, batch.query, batch.video_mask, batch.query_mask)
        moments = model.predict_moments(out)
        for i, s in enumerate(chunk):
            preds.append(moments[i])
            gts.append([span_from_clips(m.b, m.e) for m in s.moments])
            qids.append(s.sample_id)
    model.set_training(True)
    return grounding_report(preds, gts), qids, preds, gts


@dataclass
class TrainResult:
    model: GroundingModel
    history: list[dict]
    best_val_r1: float
    stopped_early: bool


def train(config: RunConfig, train_samples: list[GroundingSample],
          val_samples: list[GroundingSample], out_dir=None,
          log_fn=None) -> TrainResult:
    """Full training run. Deterministic in (config, data).

    Writes train_log.jsonl and checkpoint.bin under out_dir when given.
    Raises NumericalError (with the batch id in the message) on a
    non-finite loss after dumping diagnostics.
    """
    if not train_samples:
        raise DomainError("no training samples")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model = GroundingModel(config.model_config(), seed=config.seed)
    weights = config.loss_weights()
    opt = Adam(model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2,
               eps=config.eps, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng(config.seed ^ 0x5EED)
    history: list[dict] = []
    best_val = -1.0
    best_state = None
    since_best = 0
    stopped = False
    t0 = time.monotonic()
    log_path = out_dir / "train_log.jsonl" if out_dir is not None else None
    if log_path is not None:
        log_path.write_text("")

    for epoch in range(config.epochs):
        idx = order_rng.permutation(len(train_samples))
        sums = {"l_con": 0.0, "l_span": 0.0, "l_sal": 0.0, "l_all": 0.0}
        n_batches = 0
        for lo in range(0, len(idx), config.batch_size):
            chunk = [train_samples[j] for j in idx[lo : lo + config.batch_size]]
            if len(chunk) < 2:
                continue  # contrastive term needs at least a pair
            batch_id = f"epoch{epoch}:batch{lo // config.batch_size}"
            with Tape() as tape:
                out, l_con, l_span, l_sal = batch_losses(
                    model, collate(chunk), weights,
                    config.contrastive_mode, config.contrastive_clamp)
                l_all = total_loss(l_con, l_span, l_sal, weights)
            if not np.isfinite(l_all.data):
                if out_dir is not None:
                    dump = {"batch_id": batch_id,
                            "losses": {k: float(v.data) for k, v in
                                       (("l_con", l_con), ("l_span", l_span), ("l_sal", l_sal))},
                            "sample_ids": [train_samples[j].sample_id for j in idx[lo : lo + config.batch_size]]}
                    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2) + "\n")
                raise NumericalError(f"non-finite loss at {batch_id}")
            tape.backward(l_all, params=model.parameters())
            opt.step()
            opt.zero_grad()
            sums["l_con"] += float(l_con.data)
            sums["l_span"] += float(l_span.data)
            sums["l_sal"] += float(l_sal.data)
            sums["l_all"] += float(l_all.data)
            n_batches += 1

        report, _, _, _ = evaluate(model, val_samples, config.batch_size) if val_samples else ({"r1_05": 0.0}, [], [], [])
        row = {
            "epoch": epoch,
            "l_con": sums["l_con"] / max(n_batches, 1),
            "l_span": sums["l_span"] / max(n_batches, 1),
            "l_sal": sums["l_sal"] / max(n_batches, 1),
            "l_all": sums["l_all"] / max(n_batches, 1),
            "val_r1_05": report["r1_05"],
        }
        history.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if log_fn is not None:
            log_fn(row)

        if row["val_r1_05"] > best_val + 1e-9:
            best_val = row["val_r1_05"]
            # snapshot buffers too: batch-norm running stats keep moving
            # after the best epoch, and eval runs off them
            best_state = [(t.data if is_p else t).copy()
                          for _, t, is_p in model.named_states()]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped = True
                break
        if config.max_seconds is not None and time.monotonic() - t0 > config.max_seconds:
            stopped = True
            break

    if best_state is not None:
        for (_, t, is_p), saved in zip(model.named_states(), best_state):
            (t.data if is_p else t)[...] = saved
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.bin")
    return TrainResult(model=model, history=history, best_val_r1=best_val, stopped_early=stopped)
