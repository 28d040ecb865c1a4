"""Classification metrics: accuracy, binary F1, Matthews correlation.

F1 and MCC treat class 1 as the positive class and return 0 on the usual
zero-denominator corner cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, gold) -> ConfusionCounts:
    """Count binary outcomes with class 1 as positive (other classes negative)."""
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape or pred.ndim != 1 or pred.size == 0:
        raise ContractError(f"confusion: {pred.shape} predictions vs {gold.shape} gold labels")
    pp = pred == 1
    gp = gold == 1
    return ConfusionCounts(
        tp=int(np.sum(pp & gp)), fp=int(np.sum(pp & ~gp)),
        tn=int(np.sum(~pp & ~gp)), fn=int(np.sum(~pp & gp)))


def accuracy(pred, gold) -> float:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape or pred.ndim != 1 or pred.size == 0:
        raise ContractError(f"accuracy: {pred.shape} predictions vs {gold.shape} gold labels")
    return float(np.mean(pred == gold))


def f1_binary(counts: ConfusionCounts) -> float:
    denom_p = counts.tp + counts.fp
    denom_r = counts.tp + counts.fn
    if counts.tp == 0 or denom_p == 0 or denom_r == 0:
        return 0.0
    precision = counts.tp / denom_p
    recall = counts.tp / denom_r
    return 2.0 * precision * recall / (precision + recall)


def mcc(counts: ConfusionCounts) -> float:
    factors = [counts.tp + counts.fp, counts.tp + counts.fn,
               counts.tn + counts.fp, counts.tn + counts.fn]
    if 0 in factors:
        return 0.0
    num = counts.tp * counts.tn - counts.fp * counts.fn
    return num / math.sqrt(math.prod(float(f) for f in factors))


def evaluate_predictions(pred, gold) -> dict:
    """The metric bundle reported by evaluation runs."""
    counts = confusion(pred, gold)
    return {
        "accuracy": accuracy(pred, gold),
        "f1": f1_binary(counts),
        "mcc": mcc(counts),
        "n": counts.total,
    }
