"""Training objectives for temporal grounding.

Three terms: a cross-modal contrastive term on pooled moment/query
features, a smooth-L1 span regression term on matched proposal
boundaries, and a saliency-contrast term pushing in-moment clip scores
above out-of-moment ones. Weighted sum via LossWeights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, DomainError


@dataclass(frozen=True)
class LossWeights:
    """Scales for the three loss terms plus the two softmax temperatures."""

    contrastive: float = 1.0
    span: float = 1.0
    saliency: float = 1.0
    temp_contrastive: float = 0.07
    temp_saliency: float = 0.07

    def __post_init__(self):
        if self.temp_contrastive <= 0.0 or self.temp_saliency <= 0.0:
            raise DomainError("temperatures must be strictly positive")
        if min(self.contrastive, self.span, self.saliency) < 0.0:
            raise DomainError("loss weights must be non-negative")


def contrastive_alignment_loss(
    moment_feats: Tensor,
    query_feats: Tensor,
    temperature: float = 0.07,
    mode: str = "one-minus",
    clamp: float | None = 1e-7,
) -> Tensor:
    """Batch-contrastive alignment of pooled moment features to query features.

    Rows are L2-normalized; sim[i, j] is the scaled inner product of moment
    i with query j and p_i the softmax weight of the matched pair within
    row i. Two modes:

      "one-minus": mean_i -log(1 - p_i). With a single sample p_i == 1 and
                   the log diverges; that raises ContractError unless an
                   epsilon clamp is configured (the default).
      "infonce":   mean_i -log(p_i), the standard form.
    """
    if moment_feats.ndim != 2 or moment_feats.shape != query_feats.shape:
        raise DimensionError(
            f"expected matching (B, D) feature blocks, got {moment_feats.shape} vs {query_feats.shape}"
        )
    n = moment_feats.shape[0]
    if n == 1 and mode == "one-minus" and clamp is None:
        raise ContractError("one-minus contrastive loss is undefined for batch size 1 without a clamp")
    s = ad.l2_normalize(moment_feats)
    t = ad.l2_normalize(query_feats)
    sims = ad.mul(ad.matmul(s, ad.transpose(t, (1, 0))), 1.0 / temperature)
    lse = ad.logsumexp(sims, axis=1)
    diag = ad.take(sims, (np.arange(n), np.arange(n)))
    logp = diag - lse
    if mode == "infonce":
        return ad.mean(ad.mul(logp, -1.0))
    if mode != "one-minus":
        raise ContractError(f"unknown contrastive mode {mode!r}")
    p = ad.exp(logp)
    rest = 1.0 - p
    if clamp is not None:
        rest = ad.where(rest.data > clamp, rest, Tensor(np.full(n, clamp)))
    elif np.any(rest.data <= 0.0):
        raise ContractError("contrastive fraction reached 1; configure a clamp or grow the batch")
    return ad.mean(ad.mul(ad.log(rest), -1.0))


def span_regression_loss(pred_begin: Tensor, pred_end: Tensor, gt_begin, gt_end) -> Tensor:
    """Smooth-L1 penalty on matched (begin, end) pairs, averaged over pairs.

    smooth_l1(0.5) = 0.125 and smooth_l1(2.0) = 1.5 per coordinate.
    Ground-truth arguments are constants.
    """
    gb = np.asarray(gt_begin, dtype=np.float64)
    ge = np.asarray(gt_end, dtype=np.float64)
    if pred_begin.shape != gb.shape or pred_end.shape != ge.shape:
        raise DimensionError("prediction/target spans must align")
    term = ad.smooth_l1(ad.add(ad.mul(pred_begin, -1.0), gb)) + ad.smooth_l1(ad.add(ad.mul(pred_end, -1.0), ge))
    return ad.mean(term)


def saliency_contrast_loss(saliency: Tensor, pos_mask: np.ndarray, temperature: float = 0.07) -> Tensor:
    """-log of the in-moment share of the exp-scaled saliency mass.

    saliency: (M,) clip scores for one sample; pos_mask marks the clips
    inside one labeled moment. All-positive masks contribute exactly zero
    (nothing to contrast against); an empty positive set is a caller bug.
    """
    pos_mask = np.asarray(pos_mask, dtype=bool)
    if saliency.ndim != 1 or pos_mask.shape != saliency.shape:
        raise DimensionError(f"mask shape {pos_mask.shape} must match saliency {saliency.shape}")
    if not pos_mask.any():
        raise DomainError("saliency contrast needs at least one positive clip")
    if pos_mask.all():
        return Tensor(0.0)
    scaled = ad.mul(saliency, 1.0 / temperature)
    lse_all = ad.logsumexp(scaled, axis=0)
    lse_pos = ad.logsumexp(ad.take(scaled, np.where(pos_mask)[0]), axis=0)
    return lse_all - lse_pos


def total_loss(l_con: Tensor, l_span: Tensor, l_sal: Tensor, w: LossWeights) -> Tensor:
    return ad.mul(l_con, w.contrastive) + ad.mul(l_span, w.span) + ad.mul(l_sal, w.saliency)
