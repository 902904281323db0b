"""Classification metrics and cross-method comparison statistics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    accuracy: float
    auc_roc: float
    auc_prc: float
    count: int
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DimensionError(f"scores {scores.shape} do not match {labels.shape[0]} labels")
    return scores, labels


def accuracy(pred_probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs, labels = _check(pred_probs, labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ascending ranks with tied values sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    start = 0
    while start < len(values):
        stop = start + 1
        while stop < len(values) and sorted_vals[stop] == sorted_vals[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def binary_roc_auc(scores, positive) -> float:
    """Mann-Whitney statistic; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both positive and negative samples")
    ranks = _average_ranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_average_precision(scores, positive) -> float:
    """Step-wise AP; samples with equal scores enter the sweep as one block."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive sample")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    # last index of every block of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(p)[ends]
    seen = ends + 1
    precision = tp / seen
    recall = tp / n_pos
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def _macro(scores, labels, fn, name: str) -> tuple[float, dict[int, float]]:
    scores, labels = _check(scores, labels)
    if len(labels) < 2:
        raise UndefinedMetricError(f"{name} needs at least two samples")
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetricError(f"{name} is undefined for single-class data")
    per_class = {}
    for c in range(scores.shape[1]):
        if c not in present:
            logger.warning("%s: class %d absent from labels; skipped", name, c)
            continue
        per_class[c] = fn(scores[:, c], labels == c)
    return float(np.mean(list(per_class.values()))), per_class


def roc_auc_macro(scores, labels) -> float:
    return _macro(scores, labels, binary_roc_auc, "AUC-ROC")[0]


def pr_auc_macro(scores, labels) -> float:
    return _macro(scores, labels, binary_average_precision, "AUC-PRC")[0]


def evaluate(pred_probs, labels) -> MetricReport:
    probs, labels = _check(pred_probs, labels)
    roc, roc_c = _macro(probs, labels, binary_roc_auc, "AUC-ROC")
    prc, prc_c = _macro(probs, labels, binary_average_precision, "AUC-PRC")
    predicted = np.argmax(probs, axis=1)
    per_class = {
        str(c): {
            "auc_roc": roc_c[c],
            "auc_prc": prc_c[c],
            "recall": float(np.mean(predicted[labels == c] == c)),
            "support": int(np.sum(labels == c)),
        }
        for c in roc_c
    }
    return MetricReport(accuracy(probs, labels), roc, prc, int(len(labels)), per_class)


# ---------------------------------------------------------------------------
# comparisons across datasets


def win_tie_loss(a: Sequence[float], b: Sequence[float], tol: float = 1e-4) -> tuple[int, int, int]:
    if len(a) != len(b):
        raise DimensionError(f"{len(a)} scores vs {len(b)}")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins = int(np.sum(diff > tol))
    losses = int(np.sum(-diff > tol))
    return wins, len(diff) - wins - losses, losses


def rank_table(table: Mapping[str, Mapping[str, float]]) -> dict[str, dict[str, float]]:
    """Per-dataset ranks (1 = best score, ties share the mean position)."""
    methods = list(table)
    if not methods:
        raise ContractError("empty comparison table")
    datasets = list(table[methods[0]])
    for m in methods:
        if set(table[m]) != set(datasets):
            raise ContractError(f"method {m!r} is missing datasets")
    ranks: dict[str, dict[str, float]] = {m: {} for m in methods}
    for d in datasets:
        scores = np.array([table[m][d] for m in methods], dtype=np.float64)
        r = _average_ranks(-scores)
        for m, value in zip(methods, r):
            ranks[m][d] = float(value)
    return ranks


def average_rank(table: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    """``table[method][dataset] -> score``; returns the mean rank per method."""
    ranks = rank_table(table)
    return {m: float(np.mean(list(r.values()))) for m, r in ranks.items()}
