"""Embedding tables, the attention ranking tower, and the meta ID warm-up networks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import compute as C
from .compute import Parameter, Tensor


@dataclass
class ModelConfig:
    d: int = 8
    tower: tuple[int, ...] = (32, 16)
    attention_hidden: int = 16
    attention_softmax: bool = False
    # False builds the bare ranking tower with no warm-up/alignment networks at all
    sidenet: bool = True
    # False feeds raw ID embeddings to the tower even when the warm-up nets exist
    use_warm: bool = True

    def validate(self) -> None:
        from .data import ConfigError

        if self.d < 1 or self.attention_hidden < 1 or any(w < 1 for w in self.tower):
            raise ConfigError("model widths must be positive")


class MLP:
    """Stack of affine layers with ReLU between them and no final activation."""

    def __init__(self, widths, rng: np.random.Generator, name: str):
        self.layers: list[tuple[Parameter, Parameter]] = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.layers.append((Parameter(w, f"{name}.{k}.weight"), Parameter(np.zeros(fan_out), f"{name}.{k}.bias")))

    def __call__(self, x) -> Tensor:
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            x = C.affine(x, w, b)
            if k < last:
                x = C.relu(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]


class SENet:
    """Two-field squeeze-and-excitation gate over brand and category embeddings.

    Squeeze takes each field's mean, excitation is 2 -> 1 (ReLU) -> 2 (sigmoid),
    and each field is scaled by twice its gate so g = 0.5 is the identity.
    """

    def __init__(self, rng: np.random.Generator, name: str = "senet"):
        self.reduce_w = Parameter(rng.normal(0.0, 1.0, size=(2, 1)), f"{name}.reduce.weight")
        self.reduce_b = Parameter(np.zeros(1), f"{name}.reduce.bias")
        self.expand_w = Parameter(rng.normal(0.0, math.sqrt(2.0), size=(1, 2)), f"{name}.expand.weight")
        self.expand_b = Parameter(np.zeros(2), f"{name}.expand.bias")

    def parameters(self) -> list[Parameter]:
        return [self.reduce_w, self.reduce_b, self.expand_w, self.expand_b]


class ModelParams:
    def __init__(self, n_users: int, n_items: int, n_brands: int, n_categories: int,
                 cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        self.vocab = (n_users, n_items, n_brands, n_categories)
        d = cfg.d
        # independent streams so the bare tower initializes identically with or without the warm-up nets
        base_seq, side_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(base_seq)
        bound = 1.0 / math.sqrt(d)
        self.user_table = Parameter(rng.uniform(-bound, bound, (n_users, d)), "user_table")
        self.item_table = Parameter(rng.uniform(-bound, bound, (n_items, d)), "item_table")
        self.brand_table = Parameter(rng.uniform(-bound, bound, (n_brands, d)), "brand_table")
        self.category_table = Parameter(rng.uniform(-bound, bound, (n_categories, d)), "category_table")
        self.attention = MLP((4 * d, cfg.attention_hidden, 1), rng, "attention")
        self.tower = MLP((5 * d,) + tuple(cfg.tower) + (1,), rng, "tower")
        self.senet = self.inject = self.project = None
        if cfg.sidenet:
            side = np.random.default_rng(side_seq)
            self.senet = SENet(side)
            self.inject = MLP((2 * d, 2 * d, d), side, "inject")
            self.project = MLP((2 * d, 2 * d, d), side, "project")

    @property
    def d(self) -> int:
        return self.cfg.d

    def tables(self) -> list[Parameter]:
        return [self.user_table, self.item_table, self.brand_table, self.category_table]

    def parameters(self) -> list[Parameter]:
        """Everything the optimizer updates."""
        ps = self.tables() + self.attention.parameters() + self.tower.parameters()
        if self.cfg.sidenet:
            ps += self.senet.parameters() + self.inject.parameters()
        return ps

    def named_arrays(self) -> dict[str, Parameter]:
        ps = self.parameters()
        if self.cfg.sidenet:
            ps += self.project.parameters()
        return {p.name: p for p in ps}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


# ---------------------------------------------------------------------------
# network pieces


def senet_select(senet: SENet, e_b, e_c) -> Tensor:
    """Gate brand and category embeddings; returns ``[2 g_b e_b, 2 g_c e_c]``."""
    e_b, e_c = C._as_tensor(e_b), C._as_tensor(e_c)
    squeezed = C.concat([C.reshape(C.mean(e_b, axis=-1), e_b.shape[:-1] + (1,)),
                         C.reshape(C.mean(e_c, axis=-1), e_c.shape[:-1] + (1,))])
    hidden = C.relu(C.affine(squeezed, senet.reduce_w, senet.reduce_b))
    gates = C.sigmoid(C.affine(hidden, senet.expand_w, senet.expand_b)) * 2.0
    lead = gates.shape[:-1]
    g_b = C.reshape(_column(gates, 0), lead + (1,))
    g_c = C.reshape(_column(gates, 1), lead + (1,))
    return C.concat([e_b * g_b, e_c * g_c])


def _column(x: Tensor, k: int) -> Tensor:
    """Select ``x[..., k]`` as a differentiable view."""
    width = x.shape[-1]
    onehot = np.zeros(width)
    onehot[k] = 1.0
    return C.sum_(x * onehot, axis=-1)


def meta_inject(inject: MLP, features, e_i, alpha=1.0) -> Tensor:
    """Residual warm embedding ``alpha * MLP(features) + e_i``.

    ``alpha`` is a constant (scalar or one value per row); no gradient flows into it.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    e_i = C._as_tensor(e_i)
    if alpha.ndim:
        alpha = alpha[..., None]
    return inject(features) * alpha + e_i


def user_interest(attention: MLP, history, target, mask=None, softmax: bool = False) -> Tensor:
    """Attention-pooled history ``sum_j a(v_j, v_t) v_j``.

    Batched shapes: ``history`` (B, L, d), ``target`` (B, d), ``mask`` (B, L).
    A single example may drop the leading batch axis. Padded positions
    (mask 0) contribute nothing, so an empty history yields the zero vector.
    """
    history, target = C._as_tensor(history), C._as_tensor(target)
    single = history.ndim == 2
    if single:
        history = C.reshape(history, (1,) + history.shape)
        target = C.reshape(target, (1,) + target.shape)
        mask = None if mask is None else np.asarray(mask, dtype=np.float64)[None, :]
    b, length, d = history.shape
    if mask is None:
        mask = np.ones((b, length))
    mask = np.asarray(mask, dtype=np.float64)
    if length == 0:
        out = Tensor(np.zeros((b, d)))
        return C.reshape(out, (d,)) if single else out
    tgt = C.reshape(target, (b, 1, d)) * np.ones((1, length, 1))
    feats = C.concat([history, tgt, history - tgt, history * tgt])
    scores = C.reshape(attention(feats), (b, length))
    if softmax:
        weights = C.softmax(scores + (mask - 1.0) * 1e30) * mask
    else:
        weights = scores * mask
    pooled = C.sum_(history * C.reshape(weights, (b, length, 1)), axis=1)
    return C.reshape(pooled, (d,)) if single else pooled


def predict(tower: MLP, v_u, e_u, e_item, e_b, e_c) -> Tensor:
    """Click probability ``sigmoid(MLP(v_u || e_u || e_item || e_b || e_c))`` with the last axis squeezed."""
    logits = tower(C.concat([C._as_tensor(t) for t in (v_u, e_u, e_item, e_b, e_c)]))
    return C.sigmoid(C.reshape(logits, logits.shape[:-1]))


@dataclass
class Batch:
    user: np.ndarray
    item: np.ndarray
    history: np.ndarray
    history_mask: np.ndarray
    label: np.ndarray

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], idx=None) -> "Batch":
        sel = slice(None) if idx is None else idx
        return cls(arrays["user"][sel], arrays["item"][sel], arrays["history"][sel],
                   arrays["history_mask"][sel], arrays["label"][sel])


def forward(model: ModelParams, batch: Batch, brand: np.ndarray, category: np.ndarray, alpha=None) -> Tensor:
    """Predicted probabilities for a batch of records.

    ``brand``/``category`` are the catalog id arrays for ``batch.item``.
    ``alpha`` holds the per-record enhancement weights; warm embeddings replace
    the raw item embeddings only when the model has warm-up nets and
    ``cfg.use_warm`` is on.
    """
    e_u = C.lookup(model.user_table, batch.user)
    e_i = C.lookup(model.item_table, batch.item)
    e_b = C.lookup(model.brand_table, brand)
    e_c = C.lookup(model.category_table, category)
    if model.cfg.sidenet and model.cfg.use_warm:
        feats = senet_select(model.senet, e_b, e_c)
        e_item = meta_inject(model.inject, feats, e_i, 1.0 if alpha is None else alpha)
    else:
        e_item = e_i
    hist = C.lookup(model.item_table, batch.history)
    v_u = user_interest(model.attention, hist, e_item, batch.history_mask, model.cfg.attention_softmax)
    return predict(model.tower, v_u, e_u, e_item, e_b, e_c)


# ---------------------------------------------------------------------------
# snapshots


class SnapshotError(ValueError):
    """A snapshot is malformed or does not fit the model it is loaded into."""


_MANIFEST = "manifest.txt"
_BLOB = "params.bin"


def save_snapshot(path, model: ModelParams, cluster=None) -> None:
    """Write ``manifest.txt`` (config + name/shape/offset lines) and ``params.bin`` (float64 LE)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.value for name, p in model.named_arrays().items()}
    if cluster is not None:
        arrays["kmeans.centroids"] = cluster.centroids
        arrays["kmeans.counts"] = cluster.counts.astype(np.float64)
        arrays["kmeans.filled"] = np.array([float(cluster.n_filled)])
    lines = ["# restrec snapshot v1"]
    cfg = asdict(model.cfg)
    cfg["tower"] = ",".join(str(w) for w in model.cfg.tower)
    for key, value in cfg.items():
        lines.append(f"config.{key}={value}")
    lines.append("vocab=" + ",".join(str(v) for v in model.vocab))
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{offset}\t{arr.size}")
        offset += arr.size
        blobs.append(arr.tobytes())
    (path / _MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (path / _BLOB).write_bytes(b"".join(blobs))


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def load_snapshot(path, expected_vocab=None):
    """Rebuild ``(ModelParams, ClusterState | None)`` from a snapshot directory."""
    from .alignment import ClusterState

    path = Path(path)
    try:
        manifest = (path / _MANIFEST).read_text(encoding="utf-8").splitlines()
        blob = np.frombuffer((path / _BLOB).read_bytes(), dtype="<f8")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"snapshot incomplete: {exc.filename}") from None
    cfg_values: dict[str, str] = {}
    vocab = None
    entries = {}
    for line in manifest:
        if not line or line.startswith("#"):
            continue
        if line.startswith("config."):
            key, _, value = line[len("config."):].partition("=")
            cfg_values[key] = value
        elif line.startswith("vocab="):
            vocab = tuple(int(v) for v in line[len("vocab="):].split(","))
        else:
            name, shape, offset, size = line.split("\t")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            entries[name] = (dims, int(offset), int(size))
    if vocab is None:
        raise SnapshotError("manifest lacks vocab line")
    if expected_vocab is not None and tuple(expected_vocab) != vocab:
        raise SnapshotError(
            f"snapshot vocab (users, items, brands, categories)={vocab} does not match data {tuple(expected_vocab)}"
        )
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in cfg_values:
            continue
        raw = cfg_values[f.name]
        if f.name == "tower":
            kwargs[f.name] = tuple(int(w) for w in raw.split(",") if w)
        elif f.type in ("bool", bool):
            kwargs[f.name] = _parse_bool(raw)
        else:
            kwargs[f.name] = int(raw)
    model = ModelParams(*vocab, cfg=ModelConfig(**kwargs))

    def read(name):
        dims, offset, size = entries[name]
        if offset + size > blob.size:
            raise SnapshotError(f"array {name} runs past the end of {_BLOB}")
        return blob[offset: offset + size].reshape(dims).copy()

    for name, param in model.named_arrays().items():
        if name not in entries:
            raise SnapshotError(f"snapshot lacks array {name}")
        dims = entries[name][0]
        if dims != param.shape:
            raise SnapshotError(f"array {name}: snapshot shape {dims} != model shape {param.shape}")
        param.value = read(name)
        param.zero_grad()
    cluster = None
    if "kmeans.centroids" in entries:
        centroids = read("kmeans.centroids")
        if centroids.shape[1:] != (model.d,):
            raise SnapshotError(f"kmeans.centroids width {centroids.shape} does not match d={model.d}")
        cluster = ClusterState(centroids, read("kmeans.counts").astype(np.int64), int(read("kmeans.filled")[0]))
    return model, cluster
