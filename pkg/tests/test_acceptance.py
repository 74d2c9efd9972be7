"""End-to-end acceptance checks, one test per criterion.

``conftest.py`` prints a PASS/FAIL line for each criterion after the run.
"""

import csv
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from oracles import (
    brute_pairs,
    grid_embeddings,
    mean_skipping_none,
    ndcg_oracle,
    pair_count_auc,
    planar_catalog,
    rr_oracle,
)

from restrec.alignment import ClusterState, enhancement_weight, enhancement_weights, kmeans_update, project_attributes
from restrec.cli import cmd_sweep, run_training, write_dataset
from restrec.compute import Parameter, Tape, Tensor, backward, finite_difference_check
from restrec.config import RunConfig, parse_config
from restrec.data import ItemCatalog, SynthConfig, synth_generate
from restrec.geo import EARTH_RADIUS_KM, GeoPoint, geohash_decode, geohash_encode, haversine_km, within_radius
from restrec.metrics import ScoredGroup, auc, mrr, ndcg_at_k
from restrec.model import Batch, ModelConfig, ModelParams, forward
from restrec.sampling import ContrastiveBatch, SamplingConfig, build_pairs
from restrec.training import TrainConfig, build_model, ce_loss, final_loss, infonce_loss, train


def cosine_law_km(a, b):
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    c = math.sin(phi1) * math.sin(phi2) + math.cos(phi1) * math.cos(phi2) * math.cos(math.radians(b.lon - a.lon))
    return EARTH_RADIUS_KM * math.acos(max(-1.0, min(1.0, c)))


def test_criterion_01_geospatial_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        a = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        b = GeoPoint(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        ref = cosine_law_km(a, b)
        assert abs(haversine_km(a, b) - ref) <= 0.005 * ref
        for precision in (1, 5, 12):
            center, (lat_err, lon_err) = geohash_decode(geohash_encode(a, precision))
            assert abs(center.lat - a.lat) <= lat_err and abs(center.lon - a.lon) <= lon_err
    assert geohash_encode(GeoPoint(42.605, -5.603), 5) == "ezs42"
    assert not within_radius(GeoPoint(0, 0), GeoPoint(0, 180), 20000)
    assert time.perf_counter() - start < 1.0


def test_criterion_02_sampling_soundness():
    start = time.perf_counter()
    cat = planar_catalog(3000, 150, 12, 50, seed=11)
    emb = grid_embeddings(3000, 8, seed=12)
    cfg = SamplingConfig()
    rng = np.random.default_rng(13)
    violations = emitted = 0
    for _ in range(200):
        batch = rng.choice(3000, size=128, replace=False)
        cb = build_pairs(batch, emb, cat, cfg)
        oracle = brute_pairs(batch, emb, cat, cfg.pos_radius_km, cfg.neg_radius_km, cfg.k_negatives)
        got = {}
        for t, p, negs in cb.pairs():
            got[t] = (p, negs)
            emitted += 1
            tp = cat.location(t)
            shares = cat.brand[p] == cat.brand[t] or cat.category[p] == cat.category[t]
            violations += not (shares and haversine_km(tp, cat.location(p)) <= 30.0)
            for n in negs:
                disjoint = cat.brand[n] != cat.brand[t] and cat.category[n] != cat.category[t]
                violations += not (disjoint and haversine_km(tp, cat.location(n)) <= 10.0)
        violations += got != {t: v for t, v in oracle.items() if v is not None}
    assert emitted > 1000
    assert violations == 0
    assert time.perf_counter() - start < 30.0


def test_criterion_03_alignment_bounds():
    rng = np.random.default_rng(5)
    es = rng.normal(size=(10_000, 8)) * rng.uniform(0.01, 10, size=(10_000, 1))
    rs = rng.normal(size=(10_000, 8))
    state_alpha = [enhancement_weight(e, r) for e, r in zip(es, rs)]
    assert all(0.0 <= a <= 1.0 for a in state_alpha)
    r = np.array([0.3, -1.2, 0.5, 2.0])
    orth = np.array([1.2, 0.3, 0.0, 0.0])
    assert abs(enhancement_weight(r, r) - 0.0) <= 1e-6
    assert abs(enhancement_weight(orth, r) - 0.5) <= 1e-6
    assert abs(enhancement_weight(-r, r) - 1.0) <= 1e-6
    cosines = np.linspace(-1.0, 1.0, 100)
    sweep = [enhancement_weight([c, math.sqrt(max(0.0, 1 - c * c))], [1.0, 0.0]) for c in cosines]
    assert all(b < a for a, b in zip(sweep, sweep[1:]))
    # vectorized path agrees
    state = ClusterState.from_centroids(rs[:50])
    assert np.all((enhancement_weights(es, state) >= 0) & (enhancement_weights(es, state) <= 1))


def gradient_instance(seed, alpha2=0.01):
    """d=4, two history slots, batch of 8 records, K=2 negatives, 3 clusters."""
    rng = np.random.default_rng(seed)
    n_items = 10
    cat = ItemCatalog(
        brand=np.array([0, 0, 1, 1, 2, 2, 0, 1, 2, 0]),
        category=np.array([0, 1, 1, 2, 2, 0, 2, 0, 1, 1]),
        lat=30 + rng.uniform(0, 0.01, n_items),
        lon=110 + rng.uniform(0, 0.01, n_items),
        n_brands=3,
        n_categories=3,
    )
    model = ModelParams(3, n_items, 3, 3, ModelConfig(d=4), seed=seed)
    batch = Batch(rng.integers(0, 3, 8), np.arange(8), rng.integers(0, n_items, (8, 2)), np.ones((8, 2)),
                  rng.integers(0, 2, 8))
    items, inverse = np.unique(batch.item, return_inverse=True)
    projected = project_attributes(model.project, model.brand_table.value[cat.brand[items]],
                                   model.category_table.value[cat.category[items]]).value
    cluster = kmeans_update(projected, ClusterState.empty(3, 4))
    alpha = enhancement_weights(model.item_table.value[items], cluster)
    # pairs and alpha are constants of the step, frozen before differentiation
    cb = build_pairs(items, model.item_table.value, cat, SamplingConfig(k_negatives=2))
    alpha_t = alpha[np.searchsorted(items, cb.triggers)]

    def loss():
        preds = forward(model, batch, cat.brand[batch.item], cat.category[batch.item], alpha[inverse])
        cl, _ = infonce_loss(cb, model.item_table, 0.1, alpha_t)
        return final_loss(ce_loss(preds, batch.label), cl, alpha2)

    return model, cb, loss


# Over instance seeds 0-9, nine pass this check. Seed 0 reads 1.05e-4: one coordinate has a
# true gradient of 3.0e-8, where central-difference roundoff (|L| eps / h ~ 1e-11) dominates.
# test_gradient_panel_within_roundoff checks all ten seeds with that roundoff allowed for.
GRADIENT_SEED = 1


def test_criterion_04_gradient_correctness():
    start = time.perf_counter()
    model, cb, loss = gradient_instance(GRADIENT_SEED)
    assert len(cb) > 0 and cb.negative_mask.any()
    err = finite_difference_check(loss, model.parameters(), h=1e-5)
    assert err <= 1e-4
    assert time.perf_counter() - start < 10.0


def test_criterion_05_loss_closed_forms():
    for k in (1, 4, 9):
        table = Parameter(np.full((k + 2, 3), 0.5))
        negs = np.arange(2, k + 2)[None, :]
        cb = ContrastiveBatch(np.array([0]), np.array([1]), negs, np.ones_like(negs, dtype=bool),
                              np.zeros(1), np.zeros((1, k)))
        loss, _ = infonce_loss(cb, table, 0.1, np.ones(1))
        assert abs(loss.item() - math.log(k + 1)) <= 1e-9
    assert abs(ce_loss(Tensor(np.full(6, 0.5)), [0, 1, 1, 0, 1, 0]).item() - math.log(2)) <= 1e-12
    assert final_loss(0.6931, 5.0, 0.0) == 0.6931
    assert final_loss(0.6931, 0.0, 0.01) == 0.6931


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(2, 101))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        rids = np.sort(rng.integers(0, max(1, n // 5), n))
        assert auc(scores, labels) == pair_count_auc(scores.tolist(), labels.tolist())
        groups = [ScoredGroup(int(r), scores[rids == r], labels[rids == r]) for r in np.unique(rids)]
        assert mrr(groups) == mean_skipping_none([rr_oracle(g.scores.tolist(), g.labels.tolist()) for g in groups])
        for k in (5, 10):
            expected = mean_skipping_none([ndcg_oracle(g.scores.tolist(), g.labels.tolist(), k) for g in groups])
            assert ndcg_at_k(groups, k) == expected
    second = ScoredGroup(0, np.array([0.9, 0.5, 0.1]), np.array([0, 1, 0]))
    assert abs(ndcg_at_k([second], 5) - 1 / math.log2(3)) <= 1e-9
    assert abs(ndcg_at_k([second], 10) - 0.6309297535714575) <= 1e-9
    assert abs(mrr([second]) - 0.5) <= 1e-9


def test_criterion_07_degenerate_equivalence():
    ds = synth_generate(SynthConfig(n_users=1500, n_items=2000, n_brands=200, n_requests=1500, seed=4))
    cfg = TrainConfig(epochs=2, mode="rest4_no_warmup", alpha2=0.0, seed=4)
    side_model = build_model(ds, ModelConfig(), cfg)
    assert side_model.cfg.sidenet
    side = train(ds, side_model, cfg)[2]
    bare_cfg = replace(cfg, mode="full")
    bare = train(ds, build_model(ds, ModelConfig(sidenet=False), bare_cfg), bare_cfg)[2]
    assert len(side.step_ce) == len(bare.step_ce) > 0
    assert side.step_ce == bare.step_ce  # exact float equality, step by step


def test_criterion_08_determinism(tmp_path):
    cfg = parse_config("[synth]\nn_users = 400\nn_items = 500\nn_brands = 60\nn_requests = 400\n[train]\nepochs = 2\n")
    ds = synth_generate(cfg.synth)
    write_dataset(ds, tmp_path / "data")
    from restrec.cli import cmd_train

    cmd_train(cfg, tmp_path / "data", tmp_path / "a")
    cmd_train(cfg, tmp_path / "data", tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert {str(f) for f in files} >= {"train_report.txt", "train_report.csv", "steps.csv", "snapshot/params.bin",
                                       "snapshot/manifest.txt", "config.resolved.ini"}
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


DIRECTIONAL_SEEDS = (0, 1, 2, 3, 4)


@pytest.mark.slow
def test_criterion_09_directional(tmp_path, capsys):
    start = time.perf_counter()
    rows = []
    for seed in DIRECTIONAL_SEEDS:
        cfg = RunConfig().with_seed(seed)
        ds = synth_generate(cfg.synth)
        assert len(ds) >= 50_000
        full = run_training(cfg, ds, tmp_path / f"full{seed}")
        base_cfg = replace(cfg, train=replace(cfg.train, mode="rest4_no_warmup", alpha2=0.0))
        base = run_training(base_cfg, ds, tmp_path / f"base{seed}")
        assert base.variant == "baseline"
        rows.append((seed, full.metrics["eval"].auc, base.metrics["eval"].auc,
                     full.metrics["cold"].auc, base.metrics["cold"].auc, full.metrics["cold"].records))
    with capsys.disabled():
        print("\nseed  eval_full  eval_base  cold_full  cold_base  cold_records")
        for r in rows:
            print(f"{r[0]:>4}  {r[1]:.4f}     {r[2]:.4f}     {r[3]:.4f}     {r[4]:.4f}     {r[5]}")
    overall_ok = [f >= b - 0.002 for _, f, b, _, _, _ in rows]
    cold_wins = [cf > cb for _, _, _, cf, cb, _ in rows]
    assert all(overall_ok)
    assert sum(cold_wins) >= 4
    assert time.perf_counter() - start < 600


def test_criterion_10_sweep_structure(tmp_path):
    cfg = parse_config("[synth]\nn_users = 150\nn_items = 200\nn_brands = 30\nn_requests = 100\n"
                       "[train]\nepochs = 1\nbatch_size = 128\n")
    write_dataset(synth_generate(cfg.synth), tmp_path / "data")
    expected = {
        "radii": [[p, n] for p in ("5.0", "10.0", "30.0") for n in ("5.0", "10.0", "30.0")] + [["inf", "inf"]],
        "k_negatives": [["3"], ["6"], ["9"], ["12"], ["15"]],
        "clusters": [["5"], ["25"], ["50"], ["75"], ["100"]],
        "alpha2": [["1e-05"], ["0.0001"], ["0.001"], ["0.01"], ["0.1"], ["1.0"]],
    }
    for axis, settings in expected.items():
        path = cmd_sweep(cfg, axis, tmp_path / "data", tmp_path / "sweep")
        rows = list(csv.reader(path.open()))
        width = len(settings[0])
        assert [r[:width] for r in rows[1:]] == settings
        header = rows[0]
        assert "eval_auc" in header and "cold_auc" in header
        k = header.index("eval_auc")
        assert all(0.0 <= float(r[k]) <= 1.0 for r in rows[1:])


def test_gradient_panel_within_roundoff():
    """Every instance seed agrees once central-difference roundoff (|L| eps / h) is allowed for."""
    for seed in range(10):
        model, _, loss = gradient_instance(seed)
        params = model.parameters()
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            value = loss()
        backward(tape, value)
        floor = 10 * abs(value.item()) * np.finfo(float).eps / 1e-5
        for p in params:
            flat, grad = p.value.reshape(-1), p.grad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + 1e-5
                up = loss().item()
                flat[k] = orig - 1e-5
                down = loss().item()
                flat[k] = orig
                numeric = (up - down) / 2e-5
                assert abs(grad[k] - numeric) <= 1e-4 * abs(grad[k]) + floor, (seed, p.name, k)
