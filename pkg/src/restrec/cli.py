"""Command-line entry point: generate, train, evaluate, sweep, ablate, report.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path

from .config import SWEEP_AXES, RunConfig, format_value, load_config
from .data import (
    CatalogReferenceError,
    ConfigError,
    Dataset,
    LogFormatError,
    cold_start_split,
    load_catalog,
    load_log,
    summarize,
    synth_generate,
    train_eval_split,
    write_catalog,
    write_log,
)
from .metrics import MetricsReport, evaluate
from .model import SnapshotError, load_snapshot, save_snapshot
from .training import MODES, NumericError, TrainReport, build_model, standard_eval_sets, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

CATALOG_FILE = "catalog.csv"
LOG_FILE = "interactions.csv"
META_FILE = "dataset.txt"
CONFIG_ECHO = "config.resolved.ini"
METRIC_KEYS = ("auc", "mrr", "ndcg5", "ndcg10", "records")


def _echo(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(ds.catalog, out / CATALOG_FILE)
    write_log(ds, out / LOG_FILE)
    (out / META_FILE).write_text(f"n_users={ds.n_users}\n", encoding="utf-8")
    return out


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    for name in (CATALOG_FILE, LOG_FILE):
        if not (data_dir / name).is_file():
            raise FileNotFoundError(f"missing dataset file {data_dir / name}")
    n_users = None
    meta = data_dir / META_FILE
    if meta.is_file():
        for line in meta.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            if key.strip() == "n_users":
                n_users = int(value)
    catalog = load_catalog(data_dir / CATALOG_FILE)
    return load_log(data_dir / LOG_FILE, catalog, n_users=n_users)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, out_dir=None) -> dict:
    out = Path(out_dir or cfg.paths.data_dir)
    ds = synth_generate(cfg.synth)
    write_dataset(ds, out)
    stats = summarize(ds)
    (out / "summary.txt").write_text("".join(f"{k}={format_value(v)}\n" for k, v in stats.items()), encoding="utf-8")
    cfg.write(out, CONFIG_ECHO)
    return stats


def run_training(cfg: RunConfig, ds: Dataset, out_dir) -> TrainReport:
    """Split, train, evaluate on eval + cold splits, and write all artifacts under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out, CONFIG_ECHO)
    tr, ev = train_eval_split(ds, 1.0 - cfg.train.eval_ratio, cfg.train.seed)
    eval_sets = standard_eval_sets(ds, ev, cfg.evaluate.cold_threshold)
    model = build_model(ds, cfg.model, cfg.train)
    model, cluster, report = train(tr, model, cfg.train, cfg.sampling, cfg.alignment, eval_sets, log=_echo)
    save_snapshot(out / "snapshot", model, cluster if model.cfg.sidenet else None)
    report.write(out)
    return report


def cmd_train(cfg: RunConfig, data_dir=None, out_dir=None) -> TrainReport:
    ds = load_dataset(data_dir or cfg.paths.data_dir)
    return run_training(cfg, ds, out_dir or cfg.paths.run_dir)


def cmd_evaluate(cfg: RunConfig, snapshot=None, data_dir=None, out_dir=None, cold_start: bool = False) -> dict:
    ds = load_dataset(data_dir or cfg.paths.data_dir)
    snap = Path(snapshot) if snapshot else cfg.snapshot_path
    vocab = (ds.n_users, ds.catalog.n_items, ds.catalog.n_brands, ds.catalog.n_categories)
    model, cluster = load_snapshot(snap, expected_vocab=vocab)
    eps = cfg.alignment.epsilon
    reports: dict[str, MetricsReport | None] = {"all": evaluate(model, cluster, ds, eps)}
    if cold_start:
        cold = cold_start_split(ds, cfg.evaluate.cold_threshold)
        reports["cold"] = evaluate(model, cluster, cold, eps) if len(cold) else None
    out = Path(out_dir) if out_dir else Path(cfg.paths.run_dir) / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    text = [f"snapshot={snap.as_posix()}"]
    rows = []
    for name, rep in reports.items():
        if rep is None:
            text.append(f"{name}.notice=empty split: no item occurs fewer than {cfg.evaluate.cold_threshold} times")
            _echo(f"cold-start split is empty (threshold {cfg.evaluate.cold_threshold}); no cold metrics")
            continue
        text.extend(rep.to_text(prefix=f"{name}.").splitlines())
        rows.append(f"{name},{rep.csv_row()}")
    header = "split," + MetricsReport(None, 0.0, 0.0, 0.0, 0, 0, 0, 0.0).csv_header()
    (out / "metrics.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    cfg.write(out, CONFIG_ECHO)
    return reports


def _metric_cells(report: TrainReport) -> list[str]:
    cells = []
    for split in ("eval", "cold"):
        rep = report.metrics.get(split)
        for key in METRIC_KEYS:
            cells.append(format_value(getattr(rep, key)) if rep is not None and getattr(rep, key) is not None
                         else "nan")
    return cells


def _metric_header() -> list[str]:
    return [f"{split}_{key}" for split in ("eval", "cold") for key in METRIC_KEYS]


def sweep_variant(cfg: RunConfig, axis: str, setting) -> tuple[RunConfig, list[str], list[str], str]:
    """Config for one sweep point, plus its setting columns and a directory label."""
    if axis == "radii":
        pos, neg = setting
        new = replace(cfg, sampling=replace(cfg.sampling, pos_radius_km=float(pos), neg_radius_km=float(neg)))
        cols, vals = ["pos_radius_km", "neg_radius_km"], [format_value(float(pos)), format_value(float(neg))]
    elif axis == "k_negatives":
        new = replace(cfg, sampling=replace(cfg.sampling, k_negatives=int(setting)))
        cols, vals = ["k_negatives"], [str(int(setting))]
    elif axis == "clusters":
        new = replace(cfg, alignment=replace(cfg.alignment, n_clusters=int(setting)))
        cols, vals = ["n_clusters"], [str(int(setting))]
    elif axis == "alpha2":
        new = replace(cfg, train=replace(cfg.train, alpha2=float(setting)))
        cols, vals = ["alpha2"], [format_value(float(setting))]
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return new.validate(), cols, vals, "_".join(vals)


def _write_table(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_sweep(cfg: RunConfig, axis: str, data_dir=None, out_dir=None) -> Path:
    settings = cfg.sweep.settings(axis)
    ds = load_dataset(data_dir or cfg.paths.data_dir)
    out = Path(out_dir or "runs/sweep")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out, CONFIG_ECHO)
    rows, header = [], None
    for setting in settings:
        run_cfg, cols, vals, label = sweep_variant(cfg, axis, setting)
        _echo(f"sweep {axis}={label}")
        report = run_training(run_cfg, ds, out / axis / label)
        header = cols + _metric_header()
        rows.append(vals + _metric_cells(report))
    path = out / f"sweep_{axis}.csv"
    _write_table(path, header, rows)
    return path


ABLATION_ECHO = ("use_warm", "random_negatives", "positive_attrs", "alpha2", "pos_radius_km", "neg_radius_km",
                 "k_negatives", "n_clusters")


def cmd_ablate(cfg: RunConfig, data_dir=None, out_dir=None) -> Path:
    from .training import apply_mode

    ds = load_dataset(data_dir or cfg.paths.data_dir)
    out = Path(out_dir or "runs/ablate")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out, CONFIG_ECHO)
    rows = []
    for mode in MODES:
        run_cfg = replace(cfg, train=replace(cfg.train, mode=mode))
        _echo(f"ablate {mode}")
        report = run_training(run_cfg, ds, out / mode)
        model_cfg, sampling = apply_mode(mode, run_cfg.model, run_cfg.sampling)
        echo = [model_cfg.use_warm, sampling.random_negatives, sampling.positive_attrs, run_cfg.train.alpha2,
                sampling.pos_radius_km, sampling.neg_radius_km, sampling.k_negatives, run_cfg.alignment.n_clusters]
        rows.append([report.variant, mode] + [format_value(v) for v in echo] + _metric_cells(report))
    path = out / "ablation.csv"
    _write_table(path, ["variant", "mode", *ABLATION_ECHO] + _metric_header(), rows)
    return path


def render_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def cmd_report(out_dir) -> str:
    """Aligned text rendering of every CSV under ``out_dir`` (sorted by path)."""
    root = Path(out_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"no such run directory {root}")
    parts = []
    for path in sorted(root.rglob("*.csv")):
        if path.name == "steps.csv":
            continue
        with path.open(encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows:
            parts.append(f"== {path.relative_to(root).as_posix()}\n{render_table(rows)}")
    text = "\n".join(parts) if parts else "no CSV reports found\n"
    (root / "report.txt").write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="INI config file; omitted keys use defaults")
        p.add_argument("--seed", type=int, help="override synth.seed and train.seed")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory (default: paths.data_dir)")
        return p

    common(sub.add_parser("generate", help="write a synthetic catalog and interaction log"), data=False)
    common(sub.add_parser("train", help="train one model and write snapshot + reports"))
    ev = common(sub.add_parser("evaluate", help="score a snapshot on a dataset"))
    ev.add_argument("--snapshot", help="snapshot directory (default: paths.snapshot)")
    ev.add_argument("--cold-start", action="store_true", help="also report the cold-start split")
    sw = common(sub.add_parser("sweep", help="train once per setting along one axis"))
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    common(sub.add_parser("ablate", help="train the full model and the four ablations"))
    rp = sub.add_parser("report", help="render every CSV under a run directory as text")
    rp.add_argument("--out", required=True, help="run directory to summarize")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(cmd_report(args.out), end="")
            return EXIT_OK
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "generate":
            stats = cmd_generate(cfg, args.out)
            print("".join(f"{k}={format_value(v)}\n" for k, v in stats.items()), end="")
        elif args.command == "train":
            report = cmd_train(cfg, args.data, args.out)
            print(report.to_text(), end="")
        elif args.command == "evaluate":
            reports = cmd_evaluate(cfg, args.snapshot, args.data, args.out, args.cold_start)
            for name, rep in reports.items():
                if rep is not None:
                    print(rep.to_text(prefix=f"{name}."), end="")
        elif args.command == "sweep":
            print(cmd_sweep(cfg, args.axis, args.data, args.out))
        elif args.command == "ablate":
            print(cmd_ablate(cfg, args.data, args.out))
    except ConfigError as exc:
        _echo(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        _echo(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (OSError, LogFormatError, CatalogReferenceError, SnapshotError) as exc:
        _echo(f"I/O error: {exc}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
