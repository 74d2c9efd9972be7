"""Losses, AdamW with step decay, and the joint training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import compute as C
from .alignment import AlignmentConfig, ClusterState, enhancement_weights, kmeans_update, project_attributes
from .compute import Parameter, Tape, Tensor
from .data import ConfigError, Dataset, cold_start_split
from .metrics import MetricsReport, evaluate
from .model import Batch, ModelConfig, ModelParams, _column, forward
from .sampling import ContrastiveBatch, SamplingConfig, build_pairs

MODES = ("full", "rest1_random_neg", "rest2_category_only", "rest3_brand_only", "rest4_no_warmup")


class NumericError(ArithmeticError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lr_decay: float = 0.9
    lr_period: int = 500
    temperature: float = 0.1
    alpha2: float = 0.01
    epochs: int = 3
    seed: int = 0
    mode: str = "full"
    eval_ratio: float = 0.2
    contrastive_on_warm: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.temperature > 0:
            raise ConfigError(f"train.temperature must be > 0, got {self.temperature}")
        if self.alpha2 < 0:
            raise ConfigError(f"train.alpha2 must be >= 0, got {self.alpha2}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0 or self.lr_period < 1 or not 0 < self.lr_decay <= 1:
            raise ConfigError("train.learning_rate, lr_period and lr_decay must be positive (decay <= 1)")
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.eval_ratio < 1:
            raise ConfigError(f"train.eval_ratio must lie in (0, 1), got {self.eval_ratio}")


def apply_mode(mode: str, model_cfg: ModelConfig, sampling: SamplingConfig) -> tuple[ModelConfig, SamplingConfig]:
    """Config overrides for an ablation variant."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "rest1_random_neg":
        sampling = replace(sampling, random_negatives=True)
    elif mode == "rest2_category_only":
        sampling = replace(sampling, positive_attrs="category")
    elif mode == "rest3_brand_only":
        sampling = replace(sampling, positive_attrs="brand")
    elif mode == "rest4_no_warmup":
        model_cfg = replace(model_cfg, use_warm=False)
    return model_cfg, sampling


# ---------------------------------------------------------------------------
# losses


def ce_loss(preds, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12]."""
    preds = C._as_tensor(preds)
    y = np.asarray(labels, dtype=np.float64)
    if preds.shape != y.shape:
        raise ValueError(f"ce_loss: {preds.shape[0] if preds.ndim else 1} predictions vs {y.size} labels")
    p = C.clip(preds, 1e-12, 1.0 - 1e-12)
    ll = C.log(p) * y + C.log(1.0 - p) * (1.0 - y)
    return -C.mean(ll)


def infonce_loss(cb: ContrastiveBatch, item_embeddings, temperature: float, alpha=None):
    """Alpha-weighted mean InfoNCE over triggers; the positive sits in the denominator.

    ``item_embeddings`` is either the item table (Parameter/Tensor) or a
    callable mapping an id array to embeddings of shape ``ids.shape + (d,)``.
    Returns ``(loss, alpha_used)``; an empty batch gives a constant 0.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    n = len(cb)
    if n == 0:
        return Tensor(0.0), np.zeros(0)
    embed = item_embeddings if callable(item_embeddings) else (lambda ids: C.lookup(item_embeddings, ids))
    alpha = np.ones(n) if alpha is None else np.asarray(alpha, dtype=np.float64)
    cand = np.concatenate([cb.positives[:, None], np.where(cb.negative_mask, cb.negatives, cb.positives[:, None])], 1)
    mask = np.concatenate([np.ones((n, 1), dtype=bool), cb.negative_mask], axis=1)
    e_t = embed(cb.triggers)
    e_c = embed(cand)
    d = e_t.shape[-1]
    logits = C.sum_(e_c * C.reshape(e_t, (n, 1, d)), axis=-1) / temperature
    per_trigger = C.logsumexp(logits, mask) - _column(logits, 0)
    return C.mean(per_trigger * alpha), alpha


def final_loss(ce, cl, alpha2: float):
    """``ce + alpha2 * cl``; the per-item weights are already inside ``cl``."""
    return ce + cl * alpha2


def lr_at(step: int, base_lr: float, factor: float = 0.9, period: int = 500) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return base_lr * factor ** (step // period)


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.value *= 1.0 - lr * self.weight_decay
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, grads, state: AdamW, lr: float) -> None:
    """Functional front for :meth:`AdamW.step` with explicit gradients."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=np.float64)
    state.step(lr)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainReport:
    variant: str
    mode: str
    epochs: list[dict] = field(default_factory=list)
    step_ce: list[float] = field(default_factory=list)
    step_cl: list[float] = field(default_factory=list)
    metrics: dict[str, MetricsReport] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"variant={self.variant}", f"mode={self.mode}"]
        for ep in self.epochs:
            lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in ep.items()))
        for name, rep in self.metrics.items():
            lines.extend(rep.to_text(prefix=f"{name}.").splitlines())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        if not self.epochs:
            return "epoch\n"
        keys = list(self.epochs[0])
        rows = [",".join(keys)] + [",".join(_fmt(ep[k]) for k in keys) for ep in self.epochs]
        return "\n".join(rows) + "\n"

    def steps_csv(self) -> str:
        rows = ["step,ce,cl"] + [f"{k},{ce!r},{cl!r}" for k, (ce, cl) in enumerate(zip(self.step_ce, self.step_cl))]
        return "\n".join(rows) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_report.txt").write_text(self.to_text(), encoding="utf-8")
        (out / "train_report.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "steps.csv").write_text(self.steps_csv(), encoding="utf-8")


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def variant_label(model_cfg: ModelConfig, cfg: TrainConfig) -> str:
    if not model_cfg.sidenet or (cfg.mode == "rest4_no_warmup" and cfg.alpha2 == 0):
        return "baseline"
    return cfg.mode


def build_model(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig) -> ModelParams:
    model_cfg, _ = apply_mode(cfg.mode, model_cfg, SamplingConfig())
    cat = ds.catalog
    return ModelParams(ds.n_users, cat.n_items, cat.n_brands, cat.n_categories, model_cfg, seed=cfg.seed)


def train(ds: Dataset, model: ModelParams, cfg: TrainConfig, sampling: SamplingConfig | None = None,
          alignment: AlignmentConfig | None = None, eval_sets: dict[str, Dataset] | None = None,
          log=None):
    """Run the joint objective over ``ds``; returns ``(model, cluster_state, report)``.

    Each step: project the batch items' attributes and advance K-means, read
    per-item alpha from the ID embeddings, build the CE loss on (warm)
    embeddings, mine contrastive pairs in-batch, then one AdamW update on
    ``ce + alpha2 * weighted InfoNCE``.
    """
    cfg.validate()
    sampling = sampling or SamplingConfig()
    alignment = alignment or AlignmentConfig()
    sampling.validate()
    alignment.validate()
    model_cfg, sampling = apply_mode(cfg.mode, model.cfg, sampling)
    model.cfg = model_cfg
    side = model_cfg.sidenet
    shuffle_seq, negative_seq = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    negative_rng = np.random.default_rng(negative_seq)

    cat = ds.catalog
    arr = ds.arrays
    opt = AdamW(model.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    cluster = ClusterState.empty(alignment.n_clusters, model.d)
    report = TrainReport(variant=variant_label(model_cfg, cfg), mode=cfg.mode)
    step = 0
    n = len(ds)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        ce_sum = cl_sum = alpha_sum = 0.0
        n_steps = pairs = triggers = dropped = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            batch = Batch.from_arrays(arr, idx)
            brand, category = cat.brand[batch.item], cat.category[batch.item]
            lr = lr_at(step, cfg.learning_rate, cfg.lr_decay, cfg.lr_period)
            alpha_rec = None
            if side:
                items, inverse = np.unique(batch.item, return_inverse=True)
                projected = project_attributes(model.project, model.brand_table.value[cat.brand[items]],
                                               model.category_table.value[cat.category[items]])
                cluster = kmeans_update(projected.value, cluster)
                alpha_items = enhancement_weights(model.item_table.value[items], cluster, alignment.epsilon)
                alpha_rec = alpha_items[inverse]

            model.zero_grad()
            with Tape() as tape:
                preds = forward(model, batch, brand, category, alpha_rec)
                ce = ce_loss(preds, batch.label)
                loss = ce
                cl_value = 0.0
                if side:
                    cb = build_pairs(items, model.item_table.value, cat, sampling, negative_rng)
                    alpha_t = alpha_items[np.searchsorted(items, cb.triggers)]
                    embed = _warm_embedder(model, cat, alpha_items, items) if cfg.contrastive_on_warm \
                        else model.item_table
                    cl, _ = infonce_loss(cb, embed, cfg.temperature, alpha_t)
                    loss = final_loss(ce, cl, cfg.alpha2)
                    cl_value = cl.item()
                    pairs += cb.stats["pairs"]
                    triggers += cb.stats["triggers"]
                    dropped += cb.stats["dropped_no_positive"] + cb.stats["dropped_no_negative"]
                    alpha_sum += float(alpha_rec.mean())
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch})")
            C.backward(tape, loss)
            opt.step(lr)
            report.step_ce.append(ce.item())
            report.step_cl.append(cl_value)
            ce_sum += ce.item()
            cl_sum += cl_value
            n_steps += 1
            step += 1
        report.epochs.append({
            "epoch": epoch,
            "steps": n_steps,
            "ce": ce_sum / max(n_steps, 1),
            "cl": cl_sum / max(n_steps, 1),
            "alpha": alpha_sum / max(n_steps, 1),
            "pairs": pairs,
            "triggers": triggers,
            "dropped": dropped,
            "lr": lr_at(max(step - 1, 0), cfg.learning_rate, cfg.lr_decay, cfg.lr_period),
        })
        if log:
            log(report.to_text().splitlines()[-1])

    for name, eval_ds in (eval_sets or {}).items():
        if len(eval_ds):
            report.metrics[name] = evaluate(model, cluster if side else None, eval_ds, alignment.epsilon)
    return model, cluster, report


def _warm_embedder(model: ModelParams, cat, alpha_items, items):
    from .model import meta_inject, senet_select

    def embed(ids):
        ids = np.asarray(ids)
        pos = np.searchsorted(items, ids)
        e_i = C.lookup(model.item_table, ids)
        e_b = C.lookup(model.brand_table, cat.brand[ids])
        e_c = C.lookup(model.category_table, cat.category[ids])
        return meta_inject(model.inject, senet_select(model.senet, e_b, e_c), e_i, alpha_items[pos])

    return embed


def standard_eval_sets(full: Dataset, eval_ds: Dataset, threshold: int = 3) -> dict[str, Dataset]:
    return {"eval": eval_ds, "cold": cold_start_split(eval_ds, threshold, counts_from=full)}
