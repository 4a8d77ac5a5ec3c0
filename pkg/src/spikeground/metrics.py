"""Grounding evaluation: IoU, recall@1, interpolated AP, report writers.

Spans are continuous [lo, hi] endpoint pairs. Discrete clip intervals
[b, e] (inclusive indices) map to spans through their center (b + e) / 2
and width e - b + 1, so clips [2, 6] cover the span [1.5, 6.5].
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError

IOU_GRID = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def span_from_clips(b: float, e: float) -> tuple[float, float]:
    """Continuous span of the inclusive clip interval [b, e]."""
    if e < b:
        raise DomainError(f"clip interval reversed: b={b} > e={e}")
    center = 0.5 * (b + e)
    width = e - b + 1.0
    return center - 0.5 * width, center + 0.5 * width


def span_from_center(center: float, width: float) -> tuple[float, float]:
    return center - 0.5 * width, center + 0.5 * width


def temporal_iou(span_a, span_b) -> float:
    """Intersection over union of two continuous spans.

    Degenerate pairs (zero-length on both sides, or no overlap at all)
    score 0. temporal_iou((2, 6), (4, 8)) == 1/3.
    """
    lo_a, hi_a = float(span_a[0]), float(span_a[1])
    lo_b, hi_b = float(span_b[0]), float(span_b[1])
    inter = max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
    union = (hi_a - lo_a) + (hi_b - lo_b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def recall_at_1(predictions: list[list[tuple]], ground_truths: list[list[tuple]], threshold: float) -> float:
    """Fraction of queries whose top-scored prediction hits any GT at IoU >= threshold.

    predictions[q] is a list of (lo, hi, score); ground_truths[q] a list of
    (lo, hi). Queries with no predictions count as misses.
    """
    if not predictions:
        return 0.0
    hits = 0
    for preds, gts in zip(predictions, ground_truths):
        if not preds or not gts:
            continue
        top = max(preds, key=lambda p: p[2])
        if max(temporal_iou(top[:2], gt) for gt in gts) >= threshold:
            hits += 1
    return hits / len(predictions)


def mean_top1_iou(predictions, ground_truths) -> float:
    """Mean over queries of the top-1 prediction's best IoU (0 when empty)."""
    if not predictions:
        return 0.0
    total = 0.0
    for preds, gts in zip(predictions, ground_truths):
        if not preds or not gts:
            continue
        top = max(preds, key=lambda p: p[2])
        total += max(temporal_iou(top[:2], gt) for gt in gts)
    return total / len(predictions)


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (VOC-style)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds: list[tuple], gts: list[tuple], threshold: float) -> float:
    """AP for one query at one IoU threshold with greedy best-IoU matching.

    A single correct prediction ranked second of two gives AP = 0.5.
    """
    if not gts:
        return 0.0
    if not preds:
        return 0.0
    order = sorted(preds, key=lambda p: -p[2])
    matched = [False] * len(gts)
    tp = np.zeros(len(order))
    for i, p in enumerate(order):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = temporal_iou(p[:2], gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            matched[best_j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(order) + 1)
    recall = cum_tp / len(gts)
    return _interpolated_ap(recall, precision)


def mean_average_precision(predictions, ground_truths, thresholds=IOU_GRID) -> dict[float, float]:
    """Per-threshold mAP over queries; queries without GT are skipped."""
    out = {}
    for thr in thresholds:
        vals = [
            average_precision(p, g, thr)
            for p, g in zip(predictions, ground_truths)
            if g
        ]
        out[float(thr)] = float(np.mean(vals)) if vals else 0.0
    return out


def grounding_report(predictions, ground_truths) -> dict:
    """The headline metric dict: r1_05, r1_07, map_075, map_avg, miou."""
    if len(predictions) != len(ground_truths):
        raise DimensionError(
            f"{len(predictions)} prediction lists vs {len(ground_truths)} ground-truth lists"
        )
    ap = mean_average_precision(predictions, ground_truths)
    return {
        "r1_05": recall_at_1(predictions, ground_truths, 0.5),
        "r1_07": recall_at_1(predictions, ground_truths, 0.7),
        "map_075": ap[0.75],
        "map_avg": float(np.mean(list(ap.values()))),
        "miou": mean_top1_iou(predictions, ground_truths),
    }


def write_metrics_json(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def write_per_query_csv(path, query_ids, predictions, ground_truths) -> None:
    """One row per query: its top prediction span, score and best IoU."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "pred_b", "pred_e", "score", "best_iou"])
        for qid, preds, gts in zip(query_ids, predictions, ground_truths):
            if preds:
                top = max(preds, key=lambda p: p[2])
                best = max((temporal_iou(top[:2], gt) for gt in gts), default=0.0)
                w.writerow([qid, f"{top[0]:.6f}", f"{top[1]:.6f}", f"{top[2]:.6f}", f"{best:.6f}"])
            else:
                w.writerow([qid, "", "", "", "0.000000"])
