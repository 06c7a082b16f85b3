"""Evaluation maths: log-score, EER with its operating threshold, boundary metrics, AUC, histograms.

Label convention throughout: ``0`` = bonafide, ``1`` = fake. Scores are
"bonafide-ness": higher means more bonafide, and a sample is classified
bonafide iff ``score > threshold``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, MetricError, ShapeError

BONAFIDE = 0
FAKE = 1
PROB_CLAMP = 1e-12


def log_score(p_bonafide, p_fake):
    """``log10(P_B / P_F)`` with both probabilities clamped to ``[1e-12, 1 - 1e-12]``.

    Saturates at roughly +-12. Works on scalars and arrays. The ratio is
    always taken larger-over-smaller so swapping the arguments negates the
    result exactly.
    """
    pb = np.clip(np.asarray(p_bonafide, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pf = np.clip(np.asarray(p_fake, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    magnitude = np.log10(np.maximum(pb, pf) / np.minimum(pb, pf))
    out = np.where(pb >= pf, magnitude, -magnitude)
    return float(out) if out.ndim == 0 else out


def _check_scoreset(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"scores ({scores.size}) and labels ({labels.size}) differ in length")
    if not np.all(np.isin(labels, (BONAFIDE, FAKE))):
        raise MetricError("labels must be 0 (bonafide) or 1 (fake)")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    labels = labels.astype(np.int64)
    n_fake = int(labels.sum())
    if n_fake == 0 or n_fake == labels.size:
        raise MetricError("both bonafide and fake samples are required")
    return scores, labels


@dataclass
class EerResult:
    eer: float
    threshold: float
    fpr_at_threshold: float
    fnr_at_threshold: float

    def to_dict(self) -> dict:
        return {k: _json_float(v) for k, v in asdict(self).items()}


def eer_candidates(scores) -> np.ndarray:
    """-inf, midpoints between adjacent sorted unique scores, +inf."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = u[:-1] + (u[1:] - u[:-1]) / 2.0
    return np.concatenate(([-np.inf], mids, [np.inf]))


def compute_eer(scores, labels) -> EerResult:
    """Equal error rate and the threshold where it is reached.

    FPR is the fraction of fakes scored above the threshold (accepted as
    bonafide), FNR the fraction of bonafides at or below it. Candidates are
    the thresholds from :func:`eer_candidates`; the one minimising
    ``|FPR - FNR|`` wins, ties going to the smaller threshold. The comparison
    is done on integer cross-products so it is exact.
    """
    scores, labels = _check_scoreset(scores, labels)
    n_fake = int(labels.sum())
    n_bona = labels.size - n_fake

    uniq, inverse = np.unique(scores, return_inverse=True)
    bona_at = np.bincount(inverse, weights=(labels == BONAFIDE), minlength=uniq.size).astype(np.int64)
    fake_at = np.bincount(inverse, weights=(labels == FAKE), minlength=uniq.size).astype(np.int64)
    # candidate k (k=0 is -inf) classifies the first k unique values as fake
    bona_below = np.concatenate(([0], np.cumsum(bona_at)))
    fake_above = n_fake - np.concatenate(([0], np.cumsum(fake_at)))
    gap = np.abs(fake_above * n_bona - bona_below * n_fake)
    k = int(np.argmin(gap))

    thresholds = eer_candidates(uniq)
    fpr = fake_above[k] / n_fake
    fnr = bona_below[k] / n_bona
    return EerResult(
        eer=float((fpr + fnr) / 2.0),
        threshold=float(thresholds[k]),
        fpr_at_threshold=float(fpr),
        fnr_at_threshold=float(fnr),
    )


def predict_fake(p_fake, boundary: float = 0.5) -> np.ndarray:
    """Fake iff ``P_F > boundary``; a tie at the boundary is bonafide."""
    if not 0.0 < boundary < 1.0:
        raise ConfigError(f"boundary must lie in (0, 1), got {boundary}")
    return np.asarray(p_fake, dtype=np.float64) > boundary


@dataclass
class BoundaryMetrics:
    accuracy: float
    f1: float
    # rows: true (bonafide, fake); cols: predicted (bonafide, fake)
    confusion: np.ndarray

    @property
    def confusion_percent(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(100.0 * self.confusion, rows, out=np.zeros(self.confusion.shape), where=rows > 0)


def accuracy_f1(confusion) -> tuple[float, float]:
    """Accuracy and F1 (fake = positive class) from a 2x2 confusion matrix."""
    c = np.asarray(confusion, dtype=np.int64)
    total = int(c.sum())
    tp, fp, fn = int(c[1, 1]), int(c[0, 1]), int(c[1, 0])
    acc = (int(c[0, 0]) + tp) / total if total else 0.0
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return acc, f1


def metrics_at_boundary(p_fake, labels, boundary: float = 0.5) -> BoundaryMetrics:
    pred = predict_fake(p_fake, boundary).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != labels.shape:
        raise ShapeError("probabilities and labels differ in length")
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    acc, f1 = accuracy_f1(confusion)
    return BoundaryMetrics(acc, f1, confusion)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # start of each run of equal values
    starts = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1])))
    ends = np.concatenate((starts[1:], [xs.size]))
    avg = (starts + ends + 1) / 2.0  # 1-based mean rank of the run
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """P(random bonafide scores above random fake), ties counting one half."""
    scores, labels = _check_scoreset(scores, labels)
    bona = labels == BONAFIDE
    n_b = int(bona.sum())
    n_f = labels.size - n_b
    ranks = _average_ranks(scores)
    u = ranks[bona].sum() - n_b * (n_b + 1) / 2.0
    return float(u / (n_b * n_f))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "edges": [float(e) for e in self.edges],
            "counts": [int(c) for c in self.counts],
            "underflow": self.underflow,
            "overflow": self.overflow,
        }


def histogram(values, n_bins: int, value_range: tuple[float, float]) -> Histogram:
    """Equal-width bins ``[left, right)``, the last one closed on the right."""
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ConfigError(f"empty histogram range ({lo}, {hi})")
    v = np.asarray(values, dtype=np.float64).ravel()
    if np.isnan(v).any():
        raise MetricError("histogram input contains NaN")
    edges = np.linspace(lo, hi, n_bins + 1)
    under = v < lo
    over = v > hi
    inside = v[~(under | over)]
    idx = np.searchsorted(edges, inside, side="right") - 1
    idx = np.minimum(idx, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    return Histogram(edges, counts, int(under.sum()), int(over.sum()))


@dataclass
class EvalReport:
    """Boundary metrics plus ranking metrics; ``auc`` and ``eer_result`` are
    ``None`` when the set holds only one class."""

    accuracy: float
    f1: float
    auc: float | None
    confusion: np.ndarray
    eer_result: EerResult | None
    boundary: float = 0.5
    histograms: dict[str, Histogram] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        acc_check, f1_check = accuracy_f1(self.confusion)
        return {
            "boundary": self.boundary,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
            "confusion_percent": BoundaryMetrics(self.accuracy, self.f1, self.confusion).confusion_percent.tolist(),
            "confusion_layout": "rows=true (bonafide, fake), cols=predicted (bonafide, fake); fake is the F1 positive class",
            "eer": None if self.eer_result is None else self.eer_result.to_dict(),
            "eer_convention": "score=log10(P_B/P_F); bonafide iff score > threshold; FPR=fake accepted, FNR=bonafide rejected",
            "consistent": acc_check == self.accuracy and f1_check == self.f1,
            **({} if self.eer_result is not None else {"ranking_metrics": "undefined: only one class present"}),
            "histograms": {k: h.to_dict() for k, h in sorted(self.histograms.items())},
            **self.extra,
        }


def evaluate(p_fake, labels, boundary: float = 0.5, n_bins: int = 50) -> EvalReport:
    """Full report for a set of two-class outputs: boundary metrics plus log-score EER/AUC."""
    p_fake = np.asarray(p_fake, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    scores = log_score(1.0 - p_fake, p_fake)
    scores = np.atleast_1d(scores)
    bm = metrics_at_boundary(p_fake, labels, boundary)
    bound = -math.log10(PROB_CLAMP) + 0.5
    hists = {}
    for name, lab in (("bonafide", BONAFIDE), ("fake", FAKE)):
        hists[f"p_fake_{name}"] = histogram(p_fake[labels == lab], n_bins, (0.0, 1.0))
        hists[f"log_score_{name}"] = histogram(scores[labels == lab], n_bins, (-bound, bound))
    both = 0 < int(labels.sum()) < labels.size
    return EvalReport(
        accuracy=bm.accuracy,
        f1=bm.f1,
        auc=auc(scores, labels) if both else None,
        confusion=bm.confusion,
        eer_result=compute_eer(scores, labels) if both else None,
        boundary=boundary,
        histograms=hists,
    )


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x
