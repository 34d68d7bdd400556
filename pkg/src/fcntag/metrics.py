"""ROC-AUC evaluation for multi-label tagging."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FcnError
from .frontend import FeatureKind, FrontendConfig, bin_frequencies, mel_filterbank


class EmptyReportError(FcnError, ValueError):
    """No tag had both positive and negative examples."""


@dataclass
class TagScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores vs {self.labels.size} labels")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    @property
    def defined(self) -> bool:
        return self.n_pos > 0 and self.n_neg > 0


@dataclass
class AUCReport:
    per_tag: list[float | None]
    macro: float
    n_skipped: int
    n_pos: list[int] = field(default_factory=list)
    n_neg: list[int] = field(default_factory=list)


def _as_scores(scores, labels) -> TagScores:
    return scores if isinstance(scores, TagScores) else TagScores(scores, labels)


def _midranks(values: np.ndarray) -> np.ndarray:
    """Twice the 1-based average rank of each value (an integer array)."""
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    n = values.size
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], n]
    # a tie group spanning ranks s+1..e gets average rank (s+1+e)/2
    twice = np.repeat(starts + 1 + ends, ends - starts)
    out = np.empty(n, dtype=np.int64)
    out[order] = twice
    return out


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney AUC with half credit for ties; NaN when only one class is present."""
    t = _as_scores(scores, labels)
    if not t.defined:
        return math.nan
    n_pos, n_neg = t.n_pos, t.n_neg
    twice_rank_sum = int(_midranks(t.scores)[t.labels].sum())
    # 2U = 2*sum(pos ranks) - n_pos*(n_pos+1), exact in integers
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def roc_curve(scores, labels=None) -> np.ndarray:
    """(fpr, tpr) staircase from (0, 0) to (1, 1), one point per distinct score.

    Tied scores move diagonally, so the trapezoidal area equals :func:`roc_auc`.
    """
    t = _as_scores(scores, labels)
    if not t.defined:
        raise ValueError("ROC curve needs at least one positive and one negative")
    order = np.argsort(-t.scores, kind="mergesort")
    s = t.scores[order]
    y = t.labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    fpr = np.r_[0.0, fp / t.n_neg]
    tpr = np.r_[0.0, tp / t.n_pos]
    return np.column_stack([fpr, tpr])


def curve_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def macro_auc(preds, labels) -> AUCReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 2:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} must be matching N x K")
    per_tag: list[float | None] = []
    n_pos, n_neg = [], []
    for k in range(preds.shape[1]):
        t = TagScores(preds[:, k], labels[:, k])
        n_pos.append(t.n_pos)
        n_neg.append(t.n_neg)
        per_tag.append(roc_auc(t) if t.defined else None)
    defined = [a for a in per_tag if a is not None]
    if not defined:
        raise EmptyReportError("every tag has a single class; AUC is undefined")
    return AUCReport(per_tag, float(np.mean(defined)), len(per_tag) - len(defined), n_pos, n_neg)


def write_report(path, report: AUCReport, tags=None) -> None:
    tags = list(tags) if tags is not None else [f"tag{k}" for k in range(len(report.per_tag))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "auc", "n_pos", "n_neg"])
        for tag, auc, p, n in zip(tags, report.per_tag, report.n_pos, report.n_neg):
            w.writerow([tag, "" if auc is None else f"{auc:.6f}", p, n])
        w.writerow(["__macro__", f"{report.macro:.6f}", sum(report.n_pos), sum(report.n_neg)])


def bins_per_khz(kind, cfg: FrontendConfig | None = None) -> list[int]:
    """How many band centre frequencies fall in each 1 kHz band up to fmax.

    A centre exactly at the top edge (e.g. the Nyquist bin) is counted in the
    last band.
    """
    cfg = cfg or FrontendConfig()
    kind = FeatureKind.parse(kind)
    if kind is FeatureKind.LOG_MEL:
        centers = mel_filterbank(cfg).center_freqs
    elif kind is FeatureKind.LOG_STFT:
        centers = bin_frequencies(cfg)
    else:
        raise ValueError("bins per kHz is defined for mel and STFT features only")
    n_bands = int(math.ceil(cfg.fmax / 1000.0))
    idx = np.minimum(np.floor(centers / 1000.0).astype(int), n_bands - 1)
    return np.bincount(idx, minlength=n_bands).tolist()
