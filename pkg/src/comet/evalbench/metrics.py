"""One-pass evaluation: precision / success curves, AUC and per-attribute tables.

Precision counts frames with centre error ``<= tau`` pixels for ``tau = 0..50``.
Success counts frames with overlap ``>= tau`` for ``tau = 0, 0.02, ..., 1``
(ties count as success). AUC is the plain mean of the 51 success samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from comet.boxgeom import iou_many

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.arange(51, dtype=np.float64) / 50


@dataclass
class EvalResult:
    center_errors: np.ndarray
    overlaps: np.ndarray
    precision_curve: np.ndarray
    success_curve: np.ndarray

    @property
    def auc(self) -> float:
        return float(np.mean(self.success_curve))

    @property
    def precision_at_20(self) -> float:
        return float(self.precision_curve[20])

    @property
    def success_at_0_5(self) -> float:
        return float(self.success_curve[25])

    def to_dict(self) -> dict:
        return {
            "precision_curve": self.precision_curve.tolist(),
            "success_curve": self.success_curve.tolist(),
            "auc": self.auc,
            "precision_at_20": self.precision_at_20,
            "success_at_0_5": self.success_at_0_5,
        }


def center_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pc = pred[:, :2] + pred[:, 2:] / 2
    gc = gt[:, :2] + gt[:, 2:] / 2
    return np.hypot(*(pc - gc).T)


def curves_from(errors: np.ndarray, overlaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    precision = (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (overlaps[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return precision, success


def ope_metrics(pred_boxes, gt_boxes) -> EvalResult:
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground-truth boxes")
    if not len(gt):
        raise ValueError("ope_metrics needs at least one frame")
    errors = center_errors(pred, gt)
    overlaps = iou_many(pred, gt)
    return EvalResult(errors, overlaps, *curves_from(errors, overlaps))


def aggregate(results: dict[str, EvalResult]) -> EvalResult:
    """Mean of per-sequence curves, folded in sequence-name order."""
    if not results:
        raise ValueError("no results to aggregate")
    names = sorted(results)
    precision = np.mean([results[n].precision_curve for n in names], axis=0)
    success = np.mean([results[n].success_curve for n in names], axis=0)
    errors = np.concatenate([results[n].center_errors for n in names])
    overlaps = np.concatenate([results[n].overlaps for n in names])
    return EvalResult(errors, overlaps, precision, success)


def attribute_breakdown(results: dict[str, EvalResult], records) -> dict[str, tuple[float, float]]:
    """Attribute code -> (mean precision_at_20, mean auc); ``Overall`` covers every sequence."""
    attrs = {r.name: r.attributes for r in records}
    missing = set(results) - set(attrs)
    if missing:
        raise ValueError(f"no sequence record for results {sorted(missing)}")
    names = sorted(results)
    table = {"Overall": (float(np.mean([results[n].precision_at_20 for n in names])),
                         float(np.mean([results[n].auc for n in names])))}
    for code in sorted(set().union(*(attrs[n] for n in names))):
        members = [n for n in names if code in attrs[n]]
        table[code] = (float(np.mean([results[n].precision_at_20 for n in members])),
                       float(np.mean([results[n].auc for n in members])))
    return table
