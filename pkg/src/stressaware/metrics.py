"""Binary-classification metrics and stratified fold construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import StratificationError, UndefinedAucError


@dataclass(frozen=True)
class EvalMetrics:
    """F1/precision/recall/AUC plus the confusion counts they derive from."""

    f1: float
    precision: float
    recall: float
    auc_roc: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return (self.tp, self.fp, self.tn, self.fn)


def confusion_counts(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[int, int, int, int]:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    return tp, fp, tn, fn


def precision_recall_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC as the normalized Mann-Whitney U statistic; ties contribute 1/2.

    Equivalent to the probability that a random positive outranks a random
    negative (the brute-force pairwise definition used as its test oracle).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks handle ties
    pos_rank_sum = float(ranks[labels == 1].sum())
    u_statistic = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_statistic / (n_pos * n_neg)


def evaluate_scores(y_true: np.ndarray, scores: np.ndarray,
                    threshold: float = 0.5) -> EvalMetrics:
    """Full metric set from probability scores; prediction is score >= threshold."""
    y_true = np.asarray(y_true).astype(int)
    scores = np.asarray(scores, dtype=float)
    y_pred = (scores >= threshold).astype(int)
    tp, fp, tn, fn = confusion_counts(y_true, y_pred)
    precision, recall, f1 = precision_recall_f1(tp, fp, fn)
    try:
        auc = roc_auc(scores, y_true)
    except UndefinedAucError:
        auc = float("nan")
    return EvalMetrics(f1=f1, precision=precision, recall=recall, auc_roc=auc,
                       tp=tp, fp=fp, tn=tn, fn=fn)


def mean_metrics(folds: list[EvalMetrics]) -> EvalMetrics:
    """Mean of the rate metrics; confusion counts are summed."""
    return EvalMetrics(
        f1=float(np.mean([m.f1 for m in folds])),
        precision=float(np.mean([m.precision for m in folds])),
        recall=float(np.mean([m.recall for m in folds])),
        auc_roc=float(np.mean([m.auc_roc for m in folds])),
        tp=sum(m.tp for m in folds),
        fp=sum(m.fp for m in folds),
        tn=sum(m.tn for m in folds),
        fn=sum(m.fn for m in folds),
    )


def stratified_fold_assignments(labels: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold index per sample: class-stratified, fold sizes differing by at most one.

    Each class's samples are shuffled with the given seed and dealt greedily
    into the currently least-loaded fold (ties toward the lowest fold index),
    which balances totals while keeping class proportions close per fold.
    """
    labels = np.asarray(labels).astype(int)
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    class_values, class_counts = np.unique(labels, return_counts=True)
    if class_counts.min() < k:
        raise StratificationError(
            f"k={k} exceeds the minority class count {class_counts.min()}"
        )
    rng = np.random.default_rng(seed)
    assignment = np.empty(labels.size, dtype=int)
    loads = np.zeros(k, dtype=int)
    for value in class_values:
        idx = np.flatnonzero(labels == value)
        rng.shuffle(idx)
        for i in idx:
            fold = int(np.argmin(loads))  # argmin takes the lowest index on ties
            assignment[i] = fold
            loads[fold] += 1
    return assignment
