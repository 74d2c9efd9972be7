"""Item catalog, interaction logs, the synthetic local-life world, and splits."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import GeoPoint, geohash_decode, geohash_encode, haversine_to_point

LOG_COLUMNS = ("user_id", "request_id", "item_id", "brand_id", "category_id", "lat", "lon", "label", "history")
CATALOG_COLUMNS = ("item_id", "brand_id", "category_id", "lat", "lon", "geohash")


class LogFormatError(ValueError):
    """A row of a log or catalog file could not be parsed."""

    def __init__(self, path, line: int, column: str, message: str):
        super().__init__(f"{path}:{line}: column {column!r}: {message}")
        self.line = line
        self.column = column


class CatalogReferenceError(LookupError):
    """A record refers to an item id the catalog does not know."""


class ConfigError(ValueError):
    """An invalid configuration value."""


@dataclass(frozen=True, eq=False)
class ItemCatalog:
    brand: np.ndarray
    category: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    n_brands: int
    n_categories: int

    def __post_init__(self):
        for name in ("brand", "category"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, arr)
        for name in ("lat", "lon"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.brand)
        if not (len(self.category) == len(self.lat) == len(self.lon) == n):
            raise ValueError("catalog columns have different lengths")
        if n and (self.brand.min() < 0 or self.brand.max() >= self.n_brands):
            raise ValueError("brand id outside brand vocabulary")
        if n and (self.category.min() < 0 or self.category.max() >= self.n_categories):
            raise ValueError("category id outside category vocabulary")

    @property
    def n_items(self) -> int:
        return len(self.brand)

    def location(self, item_id: int) -> GeoPoint:
        return GeoPoint(float(self.lat[item_id]), float(self.lon[item_id]))

    def __eq__(self, other):
        if not isinstance(other, ItemCatalog):
            return NotImplemented
        return (
            self.n_brands == other.n_brands
            and self.n_categories == other.n_categories
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("brand", "category", "lat", "lon"))
        )


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    request_id: int
    item_id: int
    label: int
    history: tuple[int, ...]
    user_location: GeoPoint


class Dataset:
    """Immutable records plus their catalog, with cached columnar views."""

    def __init__(self, records: Sequence[InteractionRecord], catalog: ItemCatalog, n_users: int | None = None):
        self.records = tuple(records)
        self.catalog = catalog
        max_user = max((r.user_id for r in self.records), default=-1)
        self.n_users = max_user + 1 if n_users is None else n_users
        if max_user >= self.n_users:
            raise ValueError(f"user id {max_user} outside user vocabulary {self.n_users}")
        n_items = catalog.n_items
        for r in self.records:
            if not 0 <= r.item_id < n_items:
                raise CatalogReferenceError(f"item id {r.item_id} not in catalog")
            for h in r.history:
                if not 0 <= h < n_items:
                    raise CatalogReferenceError(f"history item id {h} not in catalog")
            if r.label not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {r.label}")

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.catalog, self.n_users)

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        recs = self.records
        n = len(recs)
        width = max(1, max((len(r.history) for r in recs), default=0))
        hist = np.zeros((n, width), dtype=np.int64)
        hist_len = np.zeros(n, dtype=np.int64)
        for k, r in enumerate(recs):
            hist[k, : len(r.history)] = r.history
            hist_len[k] = len(r.history)
        return {
            "user": np.fromiter((r.user_id for r in recs), dtype=np.int64, count=n),
            "request": np.fromiter((r.request_id for r in recs), dtype=np.int64, count=n),
            "item": np.fromiter((r.item_id for r in recs), dtype=np.int64, count=n),
            "label": np.fromiter((r.label for r in recs), dtype=np.float64, count=n),
            "history": hist,
            "history_mask": (np.arange(width)[None, :] < hist_len[:, None]).astype(np.float64),
            "user_lat": np.fromiter((r.user_location.lat for r in recs), dtype=np.float64, count=n),
            "user_lon": np.fromiter((r.user_location.lon for r in recs), dtype=np.float64, count=n),
        }

    def item_counts(self) -> Counter:
        return Counter(r.item_id for r in self.records)


# ---------------------------------------------------------------------------
# file formats


@dataclass(frozen=True)
class LogFormat:
    delimiter: str = ","
    history_sep: str = "|"


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_catalog(catalog: ItemCatalog, path, fmt: LogFormat = LogFormat()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=fmt.delimiter, lineterminator="\n")
        w.writerow(CATALOG_COLUMNS + ("n_brands", "n_categories"))
        for i in range(catalog.n_items):
            p = catalog.location(i)
            extra = (catalog.n_brands, catalog.n_categories) if i == 0 else ("", "")
            w.writerow(
                (i, int(catalog.brand[i]), int(catalog.category[i]), _fmt_float(p.lat), _fmt_float(p.lon),
                 str(geohash_encode(p, 12))) + extra
            )


def _parse_int(path, line, column, text):
    try:
        return int(text)
    except ValueError:
        raise LogFormatError(path, line, column, f"expected an integer, got {text!r}") from None


def _parse_float(path, line, column, text):
    try:
        v = float(text)
    except ValueError:
        raise LogFormatError(path, line, column, f"expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise LogFormatError(path, line, column, f"non-finite value {text!r}")
    return v


def _header_index(path, header, required):
    missing = [c for c in required if c not in header]
    if missing:
        raise LogFormatError(path, 1, missing[0], "column missing from header")
    return {c: header.index(c) for c in header}


def load_catalog(path, fmt: LogFormat = LogFormat()) -> ItemCatalog:
    """Read a catalog file; rows with blank lat/lon fall back to the geohash cell center."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter=fmt.delimiter))
    if not rows:
        raise LogFormatError(path, 1, "item_id", "empty file")
    col = _header_index(path, rows[0], ("item_id", "brand_id", "category_id"))
    brand, category, lat, lon = {}, {}, {}, {}
    n_brands = n_categories = 0
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise LogFormatError(path, line, "item_id", f"expected {len(rows[0])} fields, got {len(row)}")
        item = _parse_int(path, line, "item_id", row[col["item_id"]])
        if item in brand:
            raise LogFormatError(path, line, "item_id", f"duplicate item id {item}")
        brand[item] = _parse_int(path, line, "brand_id", row[col["brand_id"]])
        category[item] = _parse_int(path, line, "category_id", row[col["category_id"]])
        la = row[col["lat"]] if "lat" in col else ""
        lo = row[col["lon"]] if "lon" in col else ""
        if la and lo:
            lat[item] = _parse_float(path, line, "lat", la)
            lon[item] = _parse_float(path, line, "lon", lo)
        else:
            gh = row[col["geohash"]] if "geohash" in col else ""
            if not gh:
                raise LogFormatError(path, line, "lat", "row has neither coordinates nor geohash")
            try:
                center, _ = geohash_decode(gh)
            except ValueError as exc:
                raise LogFormatError(path, line, "geohash", str(exc)) from None
            lat[item], lon[item] = center.lat, center.lon
        for name, target in (("n_brands", "b"), ("n_categories", "c")):
            if name in col and row[col[name]]:
                v = _parse_int(path, line, name, row[col[name]])
                if target == "b":
                    n_brands = max(n_brands, v)
                else:
                    n_categories = max(n_categories, v)
    n = len(brand)
    if sorted(brand) != list(range(n)):
        raise LogFormatError(path, 2, "item_id", "item ids must be dense 0..n-1")
    b = np.array([brand[i] for i in range(n)], dtype=np.int64)
    c = np.array([category[i] for i in range(n)], dtype=np.int64)
    return ItemCatalog(
        brand=b,
        category=c,
        lat=np.array([lat[i] for i in range(n)]),
        lon=np.array([lon[i] for i in range(n)]),
        n_brands=max(n_brands, int(b.max()) + 1 if n else 0),
        n_categories=max(n_categories, int(c.max()) + 1 if n else 0),
    )


def write_log(ds: Dataset, path, fmt: LogFormat = LogFormat()) -> None:
    cat = ds.catalog
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=fmt.delimiter, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in ds.records:
            w.writerow((
                r.user_id, r.request_id, r.item_id, int(cat.brand[r.item_id]), int(cat.category[r.item_id]),
                _fmt_float(r.user_location.lat), _fmt_float(r.user_location.lon), r.label,
                fmt.history_sep.join(str(h) for h in r.history),
            ))


def load_log(path, catalog: ItemCatalog, fmt: LogFormat = LogFormat(), n_users: int | None = None) -> Dataset:
    """Parse an interaction log against ``catalog``.

    ``lat``/``lon`` are the user's location at request time; brand and
    category must agree with the catalog.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter=fmt.delimiter))
    if not rows:
        raise LogFormatError(path, 1, LOG_COLUMNS[0], "empty file")
    col = _header_index(path, rows[0], LOG_COLUMNS)
    n_items = catalog.n_items
    records = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise LogFormatError(path, line, LOG_COLUMNS[0], f"expected {len(rows[0])} fields, got {len(row)}")
        get = lambda name: row[col[name]]  # noqa: E731
        user = _parse_int(path, line, "user_id", get("user_id"))
        request = _parse_int(path, line, "request_id", get("request_id"))
        item = _parse_int(path, line, "item_id", get("item_id"))
        brand = _parse_int(path, line, "brand_id", get("brand_id"))
        category = _parse_int(path, line, "category_id", get("category_id"))
        lat = _parse_float(path, line, "lat", get("lat"))
        lon = _parse_float(path, line, "lon", get("lon"))
        label = _parse_int(path, line, "label", get("label"))
        if user < 0:
            raise LogFormatError(path, line, "user_id", "negative user id")
        if label not in (0, 1):
            raise LogFormatError(path, line, "label", f"label must be 0 or 1, got {label}")
        try:
            loc = GeoPoint(lat, lon)
        except ValueError as exc:
            raise LogFormatError(path, line, "lat", str(exc)) from None
        text = get("history")
        history = tuple(_parse_int(path, line, "history", t) for t in text.split(fmt.history_sep)) if text else ()
        for ref in (item,) + history:
            if not 0 <= ref < n_items:
                raise CatalogReferenceError(f"{path}:{line}: item id {ref} not in catalog")
        if brand != catalog.brand[item] or category != catalog.category[item]:
            raise CatalogReferenceError(f"{path}:{line}: brand/category of item {item} disagree with catalog")
        records.append(InteractionRecord(user, request, item, label, history, loc))
    return Dataset(records, catalog, n_users)


# ---------------------------------------------------------------------------
# synthetic world


@dataclass
class SynthConfig:
    n_cities: int = 8
    city_radius_km: float = 6.0
    n_users: int = 6000
    n_items: int = 8000
    n_brands: int = 800
    n_categories: int = 24
    chain_fraction: float = 0.1
    zipf_exponent: float = 1.0
    candidate_radius_km: float = 5.0
    history_length_max: int = 16
    label_noise: float = 0.05
    n_requests: int = 6000
    candidates_per_request: int = 10
    latent_dim: int = 8
    item_noise: float = 0.5
    affinity_scale: float = 3.0
    quality_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        counts = ("n_cities", "n_users", "n_items", "n_brands", "n_categories", "history_length_max",
                  "n_requests", "candidates_per_request", "latent_dim")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be positive, got {getattr(self, name)}")
        for name in ("chain_fraction", "label_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"synth.{name} must lie in [0, 1], got {getattr(self, name)}")
        for name in ("city_radius_km", "candidate_radius_km"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth.{name} must be positive, got {getattr(self, name)}")
        if self.zipf_exponent < 0 or self.item_noise < 0:
            raise ConfigError("synth.zipf_exponent and synth.item_noise must be non-negative")


_KM_PER_DEG_LAT = math.pi * 6371.0 / 180.0


def _offset(rng, center_lat, center_lon, sigma_km, size):
    dlat = rng.normal(0.0, sigma_km, size) / _KM_PER_DEG_LAT
    dlon = rng.normal(0.0, sigma_km, size) / (_KM_PER_DEG_LAT * np.cos(np.radians(center_lat)))
    return center_lat + dlat, center_lon + dlon


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate a deterministic spatial long-tail interaction world.

    Items sit in Gaussian city clusters. Chain brands have stores in every
    city, local brands in one. Exposure follows a Zipf popularity law inside
    each user's candidate radius; clicks follow a latent user/item affinity
    where an item's latent factor is its brand and category factors plus
    item-specific noise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    sigma = cfg.city_radius_km / 2.0

    side = math.ceil(math.sqrt(cfg.n_cities))
    city_lat = np.array([28.0 + (c // side) * 1.5 for c in range(cfg.n_cities)]) + rng.uniform(-0.2, 0.2, cfg.n_cities)
    city_lon = np.array([110.0 + (c % side) * 1.5 for c in range(cfg.n_cities)]) + rng.uniform(-0.2, 0.2, cfg.n_cities)

    n_chain = int(round(cfg.chain_fraction * cfg.n_brands))
    brand_category = rng.integers(cfg.n_categories, size=cfg.n_brands)
    brand_city = rng.integers(cfg.n_cities, size=cfg.n_brands)
    is_chain = np.arange(cfg.n_brands) < n_chain

    weights = np.where(is_chain, 8.0, 1.0)
    item_brand = rng.choice(cfg.n_brands, size=cfg.n_items, p=weights / weights.sum())
    head = min(cfg.n_items, cfg.n_brands)
    item_brand[:head] = rng.permutation(cfg.n_brands)[:head]
    item_city = np.where(is_chain[item_brand], rng.integers(cfg.n_cities, size=cfg.n_items), brand_city[item_brand])
    off_category = rng.random(cfg.n_items) < 0.15
    item_category = np.where(off_category, rng.integers(cfg.n_categories, size=cfg.n_items), brand_category[item_brand])
    item_lat, item_lon = _offset(rng, city_lat[item_city], city_lon[item_city], sigma, cfg.n_items)

    ranks = rng.permutation(cfg.n_items)
    popularity = 1.0 / (ranks + 1.0) ** cfg.zipf_exponent

    r = cfg.latent_dim
    category_vec = rng.normal(size=(cfg.n_categories, r))
    brand_vec = rng.normal(size=(cfg.n_brands, r))
    item_vec = category_vec[item_category] + 0.5 * brand_vec[item_brand] + cfg.item_noise * rng.normal(size=(cfg.n_items, r))
    item_vec /= np.linalg.norm(item_vec, axis=1, keepdims=True)
    brand_quality = rng.normal(size=cfg.n_brands)
    item_quality = brand_quality[item_brand] + 0.5 * rng.normal(size=cfg.n_items)

    # tastes concentrate on two favourite categories
    favourites = rng.integers(cfg.n_categories, size=(cfg.n_users, 2))
    user_vec = category_vec[favourites].mean(axis=1) + 0.3 * rng.normal(size=(cfg.n_users, r))
    user_vec /= np.linalg.norm(user_vec, axis=1, keepdims=True)
    user_city = rng.integers(cfg.n_cities, size=cfg.n_users)
    user_lat, user_lon = _offset(rng, city_lat[user_city], city_lon[user_city], sigma * 0.8, cfg.n_users)
    affinity = user_vec @ item_vec.T  # cosine in [-1, 1], (users, items)

    city_items = [np.flatnonzero(item_city == c) for c in range(cfg.n_cities)]

    histories = []
    for u in range(cfg.n_users):
        pool = city_items[user_city[u]]
        length = int(rng.integers(0, cfg.history_length_max + 1))
        length = min(length, len(pool))
        if length == 0:
            histories.append(())
            continue
        dist = haversine_to_point(item_lat[pool], item_lon[pool], GeoPoint(float(user_lat[u]), float(user_lon[u])))
        w = np.sqrt(popularity[pool]) * np.exp(-dist / cfg.city_radius_km) * np.exp(cfg.affinity_scale * affinity[u, pool])
        picked = rng.choice(pool, size=length, replace=False, p=w / w.sum())
        histories.append(tuple(int(i) for i in picked))

    records = []
    request_id = 0
    attempts = 0
    while request_id < cfg.n_requests:
        attempts += 1
        if attempts > 20 * cfg.n_requests:
            raise ConfigError("could not place requests: candidate radius too small for the item density")
        u = int(rng.integers(cfg.n_users))
        la, lo = _offset(rng, user_lat[u], user_lon[u], 1.0, 1)
        loc = GeoPoint(float(np.clip(la[0], -90, 90)), float(np.clip(lo[0], -180, 180)))
        pool = city_items[user_city[u]]
        dist = haversine_to_point(item_lat[pool], item_lon[pool], loc)
        near = dist <= cfg.candidate_radius_km
        pool, dist = pool[near], dist[near]
        if len(pool) == 0:
            continue
        n_cand = min(cfg.candidates_per_request, len(pool))
        w = popularity[pool]
        chosen = rng.choice(len(pool), size=n_cand, replace=False, p=w / w.sum())
        items, d = pool[chosen], dist[chosen]
        logit = cfg.affinity_scale * affinity[u, items] + cfg.quality_scale * item_quality[items] - 0.1 * d - 1.0
        labels = (rng.random(n_cand) < _sigmoid(logit)).astype(int)
        flip = rng.random(n_cand) < cfg.label_noise
        labels = np.where(flip, 1 - labels, labels)
        for item, y in zip(items, labels):
            records.append(InteractionRecord(u, request_id, int(item), int(y), histories[u], loc))
        request_id += 1

    catalog = ItemCatalog(item_brand, item_category, item_lat, item_lon, cfg.n_brands, cfg.n_categories)
    return Dataset(records, catalog, cfg.n_users)


# ---------------------------------------------------------------------------
# filters and splits


def spatial_candidate_filter(u_loc: GeoPoint, catalog: ItemCatalog, d_km: float) -> frozenset[int]:
    """Item ids within ``d_km`` of ``u_loc``; ``math.inf`` disables the constraint."""
    if d_km < 0:
        raise ValueError(f"radius must be non-negative, got {d_km}")
    if math.isinf(d_km):
        return frozenset(range(catalog.n_items))
    dist = haversine_to_point(catalog.lat, catalog.lon, u_loc)
    return frozenset(int(i) for i in np.flatnonzero(dist <= d_km))


def cold_start_split(ds: Dataset, threshold: int = 3, counts_from: Dataset | None = None) -> Dataset:
    """Records whose candidate item occurs fewer than ``threshold`` times.

    Occurrences are counted over ``counts_from`` (the full corpus) when given,
    else over ``ds`` itself.
    """
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    counts = (ds if counts_from is None else counts_from).item_counts()
    return ds.subset(k for k, r in enumerate(ds.records) if counts[r.item_id] < threshold)


def train_eval_split(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split by request group so no request straddles the two sides."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    groups = sorted({r.request_id for r in ds.records})
    order = np.random.default_rng(seed).permutation(len(groups))
    n_train = int(round(ratio * len(groups)))
    if len(groups) >= 2:
        n_train = min(max(n_train, 1), len(groups) - 1)
    train_groups = {groups[k] for k in order[:n_train]}
    train_idx = [k for k, r in enumerate(ds.records) if r.request_id in train_groups]
    eval_idx = [k for k, r in enumerate(ds.records) if r.request_id not in train_groups]
    return ds.subset(train_idx), ds.subset(eval_idx)


def summarize(ds: Dataset) -> dict[str, float]:
    seen = ds.item_counts()
    counts = np.array([seen.get(i, 0) for i in range(ds.catalog.n_items)], dtype=np.float64)
    return {
        "records": len(ds),
        "requests": len({r.request_id for r in ds.records}),
        "users": ds.n_users,
        "items": ds.catalog.n_items,
        "items_seen": int(np.count_nonzero(counts)),
        "positive_rate": float(np.mean([r.label for r in ds.records])) if len(ds) else 0.0,
        "gini": gini(counts),
    }


def gini(values) -> float:
    """Gini coefficient of non-negative counts (0 = uniform)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n == 0 or x.sum() == 0:
        return 0.0
    cum = np.cumsum(x)
    return float((n + 1 - 2 * (cum.sum() / cum[-1])) / n)
