"""Binary classification metrics."""
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata


class SingleClassError(ValueError):
    """AUROC is undefined when only one class is present."""

    code = "single_class"


def _pair(preds, labels, threshold=0.5):
    p = np.asarray(preds, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions, {y.shape[0]} labels")
    if p.size == 0:
        raise ValueError("empty input")
    if not np.isin(p, (0, 1)).all():
        p = (p >= threshold).astype(float)
    return p.astype(int), y.astype(int)


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    """Fraction correct; probabilities are binarized at ``threshold``."""
    p, y = _pair(preds, labels, threshold)
    return float(np.mean(p == y))


def f1_score(preds, labels, threshold: float = 0.5) -> float:
    p, y = _pair(preds, labels, threshold)
    tp = np.sum((p == 1) & (y == 1))
    precision = tp / p.sum() if p.sum() else 0.0
    recall = tp / y.sum() if y.sum() else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counting one half."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.shape[0]} scores, {y.shape[0]} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both positive and negative labels")
    r = rankdata(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    f1: float
    auroc: float
    level: str
    model: str
    fold: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.level not in ("bag", "instance"):
            raise ValueError(f"unknown level {self.level!r}")
        for m in ("accuracy", "f1", "auroc"):
            v = getattr(self, m)
            if not (0.0 <= v <= 1.0 or np.isnan(v)):
                raise ValueError(f"{m}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(scores, labels, level: str, model: str, fold=None, seed=None) -> MetricReport:
    """All three metrics from positive-class probabilities (threshold 0.5).

    AUROC is reported as NaN when the labels contain a single class.
    """
    try:
        auc = auroc(scores, labels)
    except SingleClassError:
        auc = float("nan")
    return MetricReport(
        accuracy=accuracy(scores, labels), f1=f1_score(scores, labels), auroc=auc,
        level=level, model=model, fold=fold, seed=seed,
    )
