"""Ranking metrics for imbalanced binary labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(tie), via midranks."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUCROC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    # tie groups in ascending order; midrank = (first + last) / 2, 1-based
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s.size]
    midranks = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty_like(midranks)
    ranks[order] = midranks
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision with tied scores entering as one threshold step."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUCPR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[last_of_group]
    predicted = last_of_group + 1
    precision = tp / predicted
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_step))


@dataclass
class EvalReport:
    regime: str
    auc_roc: float | None
    auc_pr: float | None
    n_pos: int
    n_neg: int
    per_silo: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["regime"], d["auc_roc"], d["auc_pr"], d["n_pos"], d["n_neg"],
                   d.get("per_silo", {}))


def _safe(metric, scores, labels):
    try:
        return metric(scores, labels)
    except UndefinedMetricError:
        return None


def evaluate(regime: str, scores, labels, silo_of=None) -> EvalReport:
    """Pooled AUCROC/AUCPR plus, when ``silo_of`` is given, a per-silo breakdown.

    Per-silo entries whose metric is undefined (single-class test split)
    carry ``None``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int(y.sum())
    report = EvalReport(regime, _safe(auc_roc, s, y), _safe(auc_pr, s, y),
                        n_pos, int(y.size - n_pos))
    if silo_of is not None:
        silo_of = np.asarray(silo_of)
        for sid in sorted(set(silo_of.tolist())):
            m = silo_of == sid
            report.per_silo[str(sid)] = {
                "auc_roc": _safe(auc_roc, s[m], y[m]),
                "auc_pr": _safe(auc_pr, s[m], y[m]),
                "n_pos": int(y[m].sum()),
                "n_neg": int((1 - y[m]).sum()),
            }
    return report
