"""Evaluation metrics: character error rate, accuracy, and equal error rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np


@dataclass
class EvalReport:
    task: str
    metric: str  # one of cer | accuracy | eer
    value: float
    n_items: int
    seed: int

    def __post_init__(self):
        if self.metric not in ("cer", "accuracy", "eer"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.metric in ("accuracy", "eer") and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} must lie in [0,1], got {self.value}")
        if self.metric == "cer" and self.value < 0:
            raise ValueError(f"cer must be nonnegative, got {self.value}")

    def csv_row(self) -> str:
        return f"{self.task},{self.metric},{self.value:.6f},{self.n_items},{self.seed}"


REPORT_CSV_HEADER = "task,metric,value,n_items,seed"


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, sym_a in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, sym_b in enumerate(b, start=1):
            cost = 0 if sym_a == sym_b else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def cer(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    """Corpus error rate: total edit distance over total reference length."""
    if len(hyps) != len(refs):
        raise ValueError(f"cer: {len(hyps)} hypotheses vs {len(refs)} references")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("cer: reference corpus is empty")
    total_dist = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return total_dist / total_ref


def accuracy(preds: Sequence, labels: Sequence) -> float:
    if len(preds) != len(labels):
        raise ValueError(f"accuracy: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("accuracy: empty input")
    return sum(1 for p, l in zip(preds, labels) if p == l) / len(preds)


def eer(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Equal error rate of accept-if-score>=threshold decisions.

    Sweeps the union of scores as candidate thresholds and linearly
    interpolates the FAR/FRR crossing; exact ties resolve at the lowest
    crossing threshold.
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("eer: need nonempty positive and negative score lists")

    thresholds = np.unique(np.concatenate([pos, neg]))
    far = (neg[None, :] >= thresholds[:, None]).mean(axis=1)
    frr = (pos[None, :] < thresholds[:, None]).mean(axis=1)

    diff = far - frr  # starts >= 0, decreases as the threshold rises
    for i in range(len(thresholds)):
        if diff[i] == 0.0:
            return float(far[i])
        if diff[i] < 0.0:
            if i == 0:
                return float((far[0] + frr[0]) / 2.0)
            f1, r1, f2, r2 = far[i - 1], frr[i - 1], far[i], frr[i]
            denom = (f2 - f1) - (r2 - r1)
            if denom == 0.0:
                return float((f1 + r1) / 2.0)
            alpha = (r1 - f1) / denom
            return float(f1 + alpha * (f2 - f1))
    return float((far[-1] + frr[-1]) / 2.0)


def write_reports_csv(reports: List[EvalReport], path) -> None:
    lines = [REPORT_CSV_HEADER] + [r.csv_row() for r in reports]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
