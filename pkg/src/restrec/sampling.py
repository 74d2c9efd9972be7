"""In-batch contrastive pair mining under attribute, similarity and distance constraints.

Pipeline per trigger item: attribute pools (share brand or category ->
positive pool, share neither -> negative pool), distance filters (30 km for
positives, 10 km for negatives by default), then similarity ranking. The
single most similar surviving positive is kept, plus up to K most similar
surviving negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ItemCatalog
from .geo import haversine_matrix

POSITIVE_ATTRS = ("both", "category", "brand")


@dataclass
class SamplingConfig:
    pos_radius_km: float = 30.0
    neg_radius_km: float = 10.0
    k_negatives: int = 9
    similarity: str = "dot"
    # which shared attribute qualifies a positive: "both" means brand OR category
    positive_attrs: str = "both"
    random_negatives: bool = False

    def validate(self) -> None:
        from .data import ConfigError

        if self.pos_radius_km < 0 or self.neg_radius_km < 0:
            raise ConfigError("sampling radii must be non-negative")
        if self.k_negatives < 1:
            raise ConfigError(f"sampling.k_negatives must be >= 1, got {self.k_negatives}")
        if self.similarity not in ("dot", "cosine"):
            raise ConfigError(f"sampling.similarity must be dot or cosine, got {self.similarity!r}")
        if self.positive_attrs not in POSITIVE_ATTRS:
            raise ConfigError(f"sampling.positive_attrs must be one of {POSITIVE_ATTRS}")


@dataclass
class ContrastiveBatch:
    triggers: np.ndarray  # (T,) item ids
    positives: np.ndarray  # (T,)
    negatives: np.ndarray  # (T, K), padded with -1
    negative_mask: np.ndarray  # (T, K) bool
    positive_scores: np.ndarray
    negative_scores: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.triggers)

    @classmethod
    def empty(cls, k: int, stats=None) -> "ContrastiveBatch":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.full((0, k), -1, dtype=np.int64),
                   np.zeros((0, k), dtype=bool), np.zeros(0), np.zeros((0, k)), dict(stats or {}))

    def pairs(self):
        """Yield ``(trigger, positive, [negatives])`` per emitted trigger."""
        for t in range(len(self)):
            negs = self.negatives[t][self.negative_mask[t]]
            yield int(self.triggers[t]), int(self.positives[t]), [int(n) for n in negs]


def _attribute_masks(items: np.ndarray, catalog: ItemCatalog, positive_attrs: str):
    b = catalog.brand[items]
    c = catalog.category[items]
    same_b = b[:, None] == b[None, :]
    same_c = c[:, None] == c[None, :]
    if positive_attrs == "brand":
        pos = same_b
    elif positive_attrs == "category":
        pos = same_c
    else:
        pos = same_b | same_c
    pos = pos & ~np.eye(len(items), dtype=bool)
    neg = ~same_b & ~same_c
    return pos, neg


def prior_knowledge_candidates(batch_items, catalog: ItemCatalog, positive_attrs: str = "both"):
    """Map each distinct batch item to its ``(pos_pool, neg_pool)`` of item ids."""
    items = np.unique(np.asarray(batch_items, dtype=np.int64))
    pos, neg = _attribute_masks(items, catalog, positive_attrs)
    return {int(t): (items[pos[k]], items[neg[k]]) for k, t in enumerate(items)}


def similarity_topk(trigger_emb, candidate_embs, k: int, candidate_ids=None) -> np.ndarray:
    """Positions of the ``k`` candidates with the largest dot product, best first.

    Ties break by ascending candidate id (position when ids are omitted).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cand = np.asarray(candidate_embs, dtype=np.float64).reshape(-1, np.size(trigger_emb))
    scores = cand @ np.asarray(trigger_emb, dtype=np.float64)
    ids = np.arange(len(cand)) if candidate_ids is None else np.asarray(candidate_ids)
    order = np.lexsort((ids, -scores))
    return order[:k]


def spatial_filter(trigger_id: int, candidate_ids, catalog: ItemCatalog, radius_km: float) -> np.ndarray:
    if radius_km < 0:
        raise ValueError(f"radius must be non-negative, got {radius_km}")
    cand = np.asarray(candidate_ids, dtype=np.int64)
    if cand.size == 0:
        return cand
    d = haversine_matrix(catalog.lat[[trigger_id]], catalog.lon[[trigger_id]], catalog.lat[cand], catalog.lon[cand])[0]
    return cand[d <= radius_km]


def build_pairs(batch_items, item_embeddings, catalog: ItemCatalog, cfg: SamplingConfig,
                rng: np.random.Generator | None = None) -> ContrastiveBatch:
    """Mine one positive and up to K hard negatives for every distinct batch item.

    ``item_embeddings`` is the full ID table (row = item id); it is read, not
    differentiated. Triggers with no surviving positive or no surviving
    negative are dropped and counted in ``stats``.
    """
    items = np.unique(np.asarray(batch_items, dtype=np.int64))
    n, k = len(items), cfg.k_negatives
    stats = {"batch_items": n, "triggers": 0, "pairs": 0, "dropped_no_positive": 0, "dropped_no_negative": 0,
             "mean_positive_pool": 0.0, "mean_negative_pool": 0.0}
    if n < 2:
        stats["dropped_no_positive"] = n
        return ContrastiveBatch.empty(k, stats)
    emb = np.asarray(item_embeddings, dtype=np.float64)[items]
    if cfg.similarity == "cosine":
        emb = emb / (np.linalg.norm(emb, axis=1, keepdims=True) + 1e-12)
    sim = emb @ emb.T
    dist = haversine_matrix(catalog.lat[items], catalog.lon[items], catalog.lat[items], catalog.lon[items])

    pos_attr, neg_attr = _attribute_masks(items, catalog, cfg.positive_attrs)
    pos_ok = pos_attr & (dist <= cfg.pos_radius_km)
    has_pos = pos_ok.any(axis=1)
    # rows are in ascending id order, so argmax's first-hit rule is the id tie-break
    best = np.argmax(np.where(pos_ok, sim, -np.inf), axis=1)

    if cfg.random_negatives:
        if rng is None:
            raise ValueError("random negatives need an rng")
        neg_ok = ~np.eye(n, dtype=bool)
        neg_ok[np.arange(n), best] &= ~has_pos
        order = np.argsort(np.where(neg_ok, rng.random((n, n)), np.inf), axis=1, kind="stable")
    else:
        neg_ok = neg_attr & (dist <= cfg.neg_radius_km)
        order = np.argsort(np.where(neg_ok, -sim, np.inf), axis=1, kind="stable")
    n_neg = neg_ok.sum(axis=1)
    keep = has_pos & (n_neg > 0)

    stats["dropped_no_positive"] = int((~has_pos).sum())
    stats["dropped_no_negative"] = int((has_pos & (n_neg == 0)).sum())
    stats["mean_positive_pool"] = float(pos_ok.sum(axis=1).mean())
    stats["mean_negative_pool"] = float(n_neg.mean())
    rows = np.flatnonzero(keep)
    stats["triggers"] = len(rows)
    if len(rows) == 0:
        return ContrastiveBatch.empty(k, stats)

    width = min(k, n)
    top = order[rows, :width]
    mask = np.arange(width)[None, :] < np.minimum(n_neg[rows], k)[:, None]
    if width < k:
        top = np.pad(top, ((0, 0), (0, k - width)))
        mask = np.pad(mask, ((0, 0), (0, k - width)))
    negatives = np.where(mask, items[top], -1)
    neg_scores = np.where(mask, sim[rows[:, None], top], 0.0)
    stats["pairs"] = int(len(rows) + mask.sum())
    return ContrastiveBatch(
        triggers=items[rows],
        positives=items[best[rows]],
        negatives=negatives,
        negative_mask=mask,
        positive_scores=sim[rows, best[rows]],
        negative_scores=neg_scores,
        stats=stats,
    )
