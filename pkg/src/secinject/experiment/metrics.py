from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..errors import LengthMismatch


@dataclass(frozen=True)
class Confusion:
    labels: tuple[str, ...]
    counts: np.ndarray  # rows = true label, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


def confusion_matrix(truth: Sequence[str], predicted: Sequence[str],
                     labels: Sequence[str] | None = None) -> Confusion:
    if len(truth) != len(predicted):
        raise LengthMismatch(f"{len(truth)} truths vs {len(predicted)} predictions")
    labs = tuple(sorted(set(labels) if labels is not None else set(truth) | set(predicted)))
    pos = {lab: i for i, lab in enumerate(labs)}
    counts = np.zeros((len(labs), len(labs)), dtype=np.int64)
    for t, p in zip(truth, predicted):
        counts[pos[t], pos[p]] += 1
    return Confusion(labs, counts)


@dataclass(frozen=True)
class PrCurve:
    family: str
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    average_precision: float


def pr_curve(scores: Sequence[float], positive: Sequence[bool], ids: Sequence[str],
             family: str = "") -> PrCurve:
    """One-vs-rest curve. Ranked by score descending, ties by sample id.

    AP is the step sum of (R_k - R_{k-1}) * P_k over every rank k.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    n_pos = sum(bool(p) for p in positive)
    if n_pos == 0:
        return PrCurve(family, (), (), float("nan"))
    tp = 0
    prev_r = 0.0
    ap = 0.0
    recall, precision = [], []
    for k, i in enumerate(order, start=1):
        tp += bool(positive[i])
        p = tp / k
        r = tp / n_pos
        ap += (r - prev_r) * p
        prev_r = r
        recall.append(r)
        precision.append(p)
    return PrCurve(family, tuple(recall), tuple(precision), ap)


def precision_recall(scores: Sequence[Mapping[str, float]], truth: Sequence[str],
                     ids: Sequence[str] | None = None,
                     labels: Sequence[str] | None = None) -> tuple[dict[str, PrCurve], float]:
    """Per-family curves plus macro AP (unweighted mean over families that
    have at least one positive)."""
    if len(scores) != len(truth):
        raise LengthMismatch("scores and truth differ in length")
    if ids is None:
        ids = [f"{i:08d}" for i in range(len(truth))]
    labs = sorted(set(labels) if labels is not None else set(truth))
    curves = {}
    for lab in labs:
        s = [float(sc.get(lab, 0.0)) for sc in scores]
        curves[lab] = pr_curve(s, [t == lab for t in truth], ids, lab)
    aps = [c.average_precision for c in curves.values() if not np.isnan(c.average_precision)]
    macro = float(np.mean(aps)) if aps else float("nan")
    return curves, macro
