"""Overlap metrics and the batch Dice loss with class-presence averaging.

The per-case Dice coefficient is 2|y ∩ ŷ| / (|y| + |ŷ|). The aggregated
variant pools voxel counts over a whole set of cases into one global
ratio, which stays informative when individual ground truths are empty.
The training loss is one minus the soft aggregated Dice per class,
averaged over only the classes present in the batch ground truth
(background included); its analytic gradient is provided for optimizer
integrations. Undefined metric values (empty denominator) are reported
as NaN.
"""

import math
from dataclasses import dataclass

import numpy as np

from .volume import LabelMask

CLASS_NAMES = {1: "GTVp", 2: "GTVn"}
FOREGROUND_CLASSES = (1, 2)


def _check_pair(truth: np.ndarray, pred: np.ndarray):
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {truth.shape} vs {pred.shape}")
    return truth != 0, pred != 0


def dsc(truth: np.ndarray, pred: np.ndarray) -> float:
    """Dice similarity coefficient of one binary pair; 1.0 when both are empty."""
    t, p = _check_pair(truth, pred)
    denom = int(t.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((t & p).sum()) / denom


def dsc_agg(pairs) -> float:
    """Aggregated Dice over (truth, pred) pairs: one ratio of pooled counts."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("dsc_agg needs at least one pair")
    inter = 0
    denom = 0
    for truth, pred in pairs:
        t, p = _check_pair(truth, pred)
        inter += int((t & p).sum())
        denom += int(t.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def precision(truth: np.ndarray, pred: np.ndarray) -> float:
    """TP / (TP + FP); NaN when the prediction is empty."""
    t, p = _check_pair(truth, pred)
    predicted = int(p.sum())
    if predicted == 0:
        return math.nan
    return int((t & p).sum()) / predicted


def recall(truth: np.ndarray, pred: np.ndarray) -> float:
    """TP / (TP + FN); NaN when the ground truth is empty."""
    t, p = _check_pair(truth, pred)
    actual = int(t.sum())
    if actual == 0:
        return math.nan
    return int((t & p).sum()) / actual


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

def _check_batch(batch_truth: np.ndarray, batch_prob: np.ndarray):
    batch_truth = np.asarray(batch_truth, dtype=np.float64)
    batch_prob = np.asarray(batch_prob, dtype=np.float64)
    if batch_truth.shape != batch_prob.shape or batch_truth.ndim != 5:
        raise ValueError(
            f"expected matching (N, C, X, Y, Z) tensors, got {batch_truth.shape} and {batch_prob.shape}"
        )
    return batch_truth, batch_prob


def _class_sums(batch_truth, batch_prob):
    axes = (0, 2, 3, 4)
    s_y = batch_truth.sum(axis=axes)
    s_p = batch_prob.sum(axis=axes)
    inter = (batch_truth * batch_prob).sum(axis=axes)
    present = s_y > 0
    return s_y, s_p, inter, present


def dice_loss(batch_truth: np.ndarray, batch_prob: np.ndarray) -> float:
    """Batch Dice loss averaged over the classes present in the truth."""
    batch_truth, batch_prob = _check_batch(batch_truth, batch_prob)
    s_y, s_p, inter, present = _class_sums(batch_truth, batch_prob)
    if not present.any():
        raise ValueError("no class present in the batch ground truth")
    losses = 1.0 - 2.0 * inter[present] / (s_y[present] + s_p[present])
    return float(losses.mean())


def dice_loss_grad(batch_truth: np.ndarray, batch_prob: np.ndarray) -> np.ndarray:
    """d(dice_loss)/d(batch_prob), zero on channels of absent classes."""
    batch_truth, batch_prob = _check_batch(batch_truth, batch_prob)
    s_y, s_p, inter, present = _class_sums(batch_truth, batch_prob)
    if not present.any():
        raise ValueError("no class present in the batch ground truth")
    n_present = int(present.sum())
    grad = np.zeros_like(batch_prob)
    for c in np.nonzero(present)[0]:
        denom = s_y[c] + s_p[c]
        grad[:, c] = -2.0 * (batch_truth[:, c] * denom - inter[c]) / denom**2 / n_present
    return grad


# ---------------------------------------------------------------------------
# evaluation over a case set
# ---------------------------------------------------------------------------

@dataclass
class EvaluationRecord:
    patient_id: str
    class_id: int
    dsc: float        # NaN when undefined (both masks empty never occurs here)
    precision: float  # NaN when the prediction is empty
    recall: float     # NaN when the ground truth is empty
    truth_empty: bool


@dataclass
class EvaluationResult:
    per_class_agg: dict[int, float]  # class id -> aggregated Dice
    mean_agg: float
    all_empty: dict[int, bool]       # flags classes where every mask was empty
    records: list[EvaluationRecord]


def evaluate_set(truths, preds, ids=None) -> EvaluationResult:
    """Aggregated Dice per foreground class plus per-case records."""
    truths = list(truths)
    preds = list(preds)
    if len(truths) != len(preds) or not truths:
        raise ValueError(f"need equal non-empty lists, got {len(truths)} truths and {len(preds)} preds")
    if ids is None:
        ids = [f"case{i:03d}" for i in range(len(truths))]
    elif len(ids) != len(truths):
        raise ValueError("ids list does not match the number of cases")

    def binary(mask, c):
        labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
        return labels == c

    per_class = {}
    all_empty = {}
    records = []
    for c in FOREGROUND_CLASSES:
        pairs = [(binary(t, c), binary(p, c)) for t, p in zip(truths, preds)]
        per_class[c] = dsc_agg(pairs)
        all_empty[c] = all(not t.any() and not p.any() for t, p in pairs)
        for pid, (t, p) in zip(ids, pairs):
            records.append(EvaluationRecord(
                patient_id=pid,
                class_id=c,
                dsc=dsc(t, p),
                precision=precision(t, p),
                recall=recall(t, p),
                truth_empty=not t.any(),
            ))
    mean_agg = float(np.mean([per_class[c] for c in FOREGROUND_CLASSES]))
    return EvaluationResult(per_class, mean_agg, all_empty, records)
