"""Ranking metrics grouped by request, and model evaluation over a dataset."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is not defined for the given input (e.g. a single class)."""


@dataclass
class ScoredGroup:
    request_id: int
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1 or len(self.scores) == 0:
            raise ValueError("a group needs matching, non-empty score and label vectors")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be binary")


@dataclass
class MetricsReport:
    auc: float | None
    mrr: float
    ndcg5: float
    ndcg10: float
    groups: int
    skipped_groups: int
    records: int
    positive_rate: float

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values())


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count half.

    Computed from tie-averaged ranks with integer arithmetic, so the result is
    the correctly rounded value of the exact pair-count ratio.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # twice the average 1-based rank of each tie block: first + last rank
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    twice_rank = np.empty(len(scores), dtype=np.int64)
    for s, e in zip(starts, ends):
        twice_rank[order[s:e]] = (s + 1) + e
    twice_rank_sum = int(twice_rank[labels == 1].sum())
    numerator = twice_rank_sum - n_pos * (n_pos + 1)
    return numerator / (2 * n_pos * n_neg)


def _ranked_labels(group: ScoredGroup) -> np.ndarray:
    # descending score, ties keep candidate order
    return group.labels[np.argsort(-group.scores, kind="stable")]


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def reciprocal_rank(group: ScoredGroup) -> float | None:
    ranked = _ranked_labels(group)
    hits = np.flatnonzero(ranked == 1)
    return None if hits.size == 0 else 1.0 / (int(hits[0]) + 1)


def mrr(groups: Sequence[ScoredGroup]) -> float:
    """Mean of 1/rank of the best-ranked positive; groups without positives are skipped."""
    rr = [v for v in (reciprocal_rank(g) for g in groups) if v is not None]
    return _mean(rr)


def _dcg(gains: np.ndarray, k: int) -> float:
    return math.fsum(float(g) / math.log2(r + 2) for r, g in enumerate(gains[:k]))


def group_ndcg(group: ScoredGroup, k: int) -> float | None:
    if group.labels.sum() == 0:
        return None
    actual = _dcg(_ranked_labels(group), k)
    ideal = _dcg(np.sort(group.labels)[::-1], k)
    return actual / ideal


def ndcg_at_k(groups: Sequence[ScoredGroup], k: int) -> float:
    """Group-averaged NDCG@k with binary gains; groups without positives are skipped."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vals = [v for v in (group_ndcg(g, k) for g in groups) if v is not None]
    return _mean(vals)


def group_records(request_ids, scores, labels) -> list[ScoredGroup]:
    """Assemble groups in first-appearance order, candidates in record order."""
    request_ids = np.asarray(request_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    buckets: dict[int, list[int]] = {}
    for k, rid in enumerate(request_ids.tolist()):
        buckets.setdefault(rid, []).append(k)
    return [ScoredGroup(rid, scores[idx], labels[idx]) for rid, idx in buckets.items()]


def metrics_report(request_ids, scores, labels) -> MetricsReport:
    labels = np.asarray(labels).astype(np.int64)
    groups = group_records(request_ids, scores, labels)
    try:
        a = auc(scores, labels)
    except UndefinedMetricError:
        a = None
    skipped = sum(1 for g in groups if g.labels.sum() == 0)
    return MetricsReport(
        auc=a,
        mrr=mrr(groups),
        ndcg5=ndcg_at_k(groups, 5),
        ndcg10=ndcg_at_k(groups, 10),
        groups=len(groups),
        skipped_groups=skipped,
        records=len(labels),
        positive_rate=float(labels.mean()) if len(labels) else 0.0,
    )


def score_dataset(model, cluster, ds, epsilon: float = 1e-8, chunk: int = 4096) -> np.ndarray:
    """Predicted probabilities for every record, using the frozen cluster state for alpha."""
    from .alignment import ClusterState, enhancement_weights
    from .model import Batch, SnapshotError, forward

    vocab = (ds.n_users, ds.catalog.n_items, ds.catalog.n_brands, ds.catalog.n_categories)
    if vocab != tuple(model.vocab):
        raise SnapshotError(f"dataset vocab (users, items, brands, categories)={vocab} != model vocab {model.vocab}")
    arr = ds.arrays
    cat = ds.catalog
    out = np.empty(len(ds))
    state = cluster if cluster is not None else ClusterState.empty(1, model.d)
    for start in range(0, len(ds), chunk):
        idx = np.arange(start, min(start + chunk, len(ds)))
        batch = Batch.from_arrays(arr, idx)
        alpha = None
        if model.cfg.sidenet:
            alpha = enhancement_weights(model.item_table.value[batch.item], state, epsilon)
        preds = forward(model, batch, cat.brand[batch.item], cat.category[batch.item], alpha)
        out[idx] = preds.value
    return out


def evaluate(model, cluster, ds, epsilon: float = 1e-8) -> MetricsReport:
    scores = score_dataset(model, cluster, ds, epsilon)
    arr = ds.arrays
    return metrics_report(arr["request"], scores, arr["label"])
