"""Evaluation protocols: temporal-overlap F-score against keyshot ground
truth, and tie-corrected rank correlations against annotator importance.

F-scores compare binary frame masks. Correlations are computed on raw score
sequences (no summary construction): Kendall's tau-b and mean-rank Spearman
rho, both defined as 0 when an input is constant so batch reports never
propagate NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ShapeError, UsageError
from .summarize import SummaryMask


@dataclass
class AnnotationSet:
    """Per-annotator ground truth for one video.

    ``importance`` is an A x T real matrix of frame scores; ``keyshots`` an
    optional A x T boolean matrix of per-annotator summaries.
    """

    importance: np.ndarray | None = None
    keyshots: np.ndarray | None = None

    def __post_init__(self):
        if self.importance is not None:
            self.importance = np.atleast_2d(np.asarray(self.importance, dtype=np.float64))
        if self.keyshots is not None:
            self.keyshots = np.atleast_2d(np.asarray(self.keyshots, dtype=bool))

    @property
    def n_annotators(self) -> int:
        for arr in (self.importance, self.keyshots):
            if arr is not None:
                return arr.shape[0]
        return 0


@dataclass
class EvalResult:
    f1: float
    kendall_tau: float
    spearman_rho: float
    aggregation: str = "mean"


def _mask(x) -> np.ndarray:
    if isinstance(x, SummaryMask):
        x = x.selected
    return np.asarray(x, dtype=bool).reshape(-1)


def fscore(pred, gt) -> float:
    """Harmonic mean of overlap precision and recall between two frame masks."""
    pred = _mask(pred)
    gt = _mask(gt)
    if pred.size != gt.size:
        raise ShapeError(f"mask lengths differ: {pred.size} vs {gt.size}")
    overlap = float(np.sum(pred & gt))
    if pred.sum() == 0 or gt.sum() == 0:
        return 0.0
    precision = overlap / pred.sum()
    recall = overlap / gt.sum()
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def fscore_multi(pred, ann: AnnotationSet, aggregation: str = "mean") -> float:
    """F-score against every annotator's keyshots, then max or mean.

    ``max`` follows the convention for datasets with few, divergent
    annotators; ``mean`` for many consistent ones.
    """
    if ann.keyshots is None:
        raise UsageError("fscore_multi needs annotator keyshot masks")
    if aggregation not in ("max", "mean"):
        raise UsageError(f"aggregation must be 'max' or 'mean', got {aggregation!r}")
    scores = [fscore(pred, row) for row in ann.keyshots]
    return float(max(scores) if aggregation == "max" else np.mean(scores))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"sequence lengths differ: {a.size} vs {b.size}")
    if a.size < 2:
        raise UsageError("rank correlation needs at least two observations")
    return a, b


def _is_constant(x) -> bool:
    return bool(np.all(x == x[0]))


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall's tau-b on raw score pairs; 0 for constant input."""
    a, b = _check_pair(a, b)
    if _is_constant(a) or _is_constant(b):
        return 0.0
    tau = stats.kendalltau(a, b, variant="b").statistic
    return float(tau)


def spearman_rho(a, b) -> float:
    """Pearson correlation of mean ranks; 0 for constant input."""
    a, b = _check_pair(a, b)
    if _is_constant(a) or _is_constant(b):
        return 0.0
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


def rank_protocol(pred, ann: AnnotationSet) -> tuple:
    """Mean Kendall tau and Spearman rho of raw scores against each annotator."""
    if ann.importance is None:
        raise UsageError("rank_protocol needs annotator importance scores")
    taus = [kendall_tau(pred, row) for row in ann.importance]
    rhos = [spearman_rho(pred, row) for row in ann.importance]
    return float(np.mean(taus)), float(np.mean(rhos))
