"""Command-line entry point: ``deepconvlstm {synth,train,loso-grid,analyze,bench}``.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 training divergence, 5 evaluation-protocol error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import statistics
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data import CsvSchema, RawDataset, load_csv, normalize, segment, synth_generate, write_csv
from .errors import ConfigError, DataError, DivergenceError, ProtocolError
from .fileio import atomic_write_text, config_hash, write_json
from .harness import (CELL_COLUMNS, COST_COLUMNS, benchmark_runtime, cell_rows, cost_table, run_grid,
                      summary_rows)
from .metrics import compute_metrics
from .model import ModelConfig, build, parameter_inventory, predict
from .train import train_epochs

log = logging.getLogger("deepconvlstm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_PROTOCOL = 5

OUT_ENV = "DEEPCONVLSTM_OUT"


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    return values


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config file")
    common.add_argument("--profile", choices=sorted(C.PROFILES), help="recipe profile")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--csv", dest="csv_path", help="dataset CSV (default: synthetic data)")
    common.add_argument("--sampling-rate", type=float)
    common.add_argument("--window-seconds", type=float)
    common.add_argument("--overlap", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--seeds", type=_int_list)
    common.add_argument("--hidden", type=_int_list, help="hidden units (list for grids)")
    common.add_argument("--lstm-layers", type=_int_list, help="LSTM depth(s), 1 and/or 2")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    common.add_argument("--format", dest="formats", action="append", choices=["csv", "structured"])
    common.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field by dotted path, e.g. train.lr=3e-4")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deepconvlstm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset CSV")
    p.add_argument("path", help="target CSV file")
    sub.add_parser("train", parents=[common], help="train one model and evaluate on a holdout subject")
    p = sub.add_parser("loso-grid", parents=[common], help="leave-one-subject-out grid over depth x width x seed")
    p.add_argument("--resume", action="store_true", help="reuse finished cells in <out>/cells")
    p = sub.add_parser("analyze", parents=[common], help="closed-form LSTM parameter counts")
    p.add_argument("--s", dest="s_list", type=_int_list, default=None, help="LSTM input extents")
    sub.add_parser("bench", parents=[common], help="1-layer vs 2-layer epoch runtime benchmark")
    return parser


def overrides_from_args(args) -> dict:
    o: dict = {}
    if args.profile:
        o["profile"] = args.profile
    simple = {
        "csv_path": "data.csv", "sampling_rate": "data.sampling_rate", "window_seconds": "window.seconds",
        "overlap": "window.overlap", "seed": "seed", "epochs": "train.epochs", "batch_size": "train.batch_size",
        "seeds": "grid.seeds", "formats": "formats",
    }
    for attr, path in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            C.set_path(o, path, value)
    if args.hidden:
        C.set_path(o, "model.hidden_units", args.hidden[0])
        C.set_path(o, "grid.hidden_units", args.hidden)
        C.set_path(o, "bench.hidden_units", args.hidden)
    if args.lstm_layers:
        C.set_path(o, "model.lstm_layers", args.lstm_layers[0])
        C.set_path(o, "grid.lstm_layers", args.lstm_layers)
    for item in args.sets:
        if "=" not in item:
            raise ConfigError("set", f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        C.set_path(o, key.strip(), _parse_value(value.strip()))
    return o


def resolve_args(args) -> dict:
    file_cfg = C.load_file(args.config) if args.config else {}
    cfg = C.resolve(file_cfg, overrides_from_args(args))
    cfg["out"] = args.out or file_cfg.get("out") or os.environ.get(OUT_ENV) or "runs"
    cfg["jobs"] = args.jobs
    return cfg


def load_dataset(cfg: dict) -> RawDataset:
    d = cfg["data"]
    if d["csv"]:
        path = Path(d["csv"])
        if not path.exists():
            raise DataError(f"dataset file {path} does not exist")
        return load_csv(path, CsvSchema(sampling_rate=float(d["sampling_rate"]), class_names=d["class_names"]))
    s = d["synthetic"]
    return synth_generate(int(s["num_subjects"]), int(s["num_classes"]), float(d["sampling_rate"]),
                          float(s["duration_seconds"]), int(s["seed"]), channels=int(s["channels"]),
                          segment_seconds=float(s["segment_seconds"]))


def _provenance(cfg: dict) -> dict:
    snap = C.snapshot(cfg)
    return {"config": snap, "config_hash": config_hash(snap)}


def _csv_text(columns, rows, cfg: dict) -> str:
    prov = _provenance(cfg)
    buf = io.StringIO()
    buf.write(f"# config_hash={prov['config_hash']} config={json.dumps(prov['config'], sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


# -- commands ------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> int:
    raw = load_dataset(C.resolve(C.snapshot(cfg), {"data": {"csv": None}}))
    write_csv(raw, args.path)
    log.info("wrote %d subjects x %d samples to %s", len(raw.streams), len(raw.streams[0]), args.path)
    return EXIT_OK


def cmd_train(cfg: dict, args=None) -> int:
    out = Path(cfg["out"])
    raw = load_dataset(cfg)
    subjects = raw.subjects
    holdout = cfg["data"]["holdout_subject"] or subjects[-1]
    if holdout not in subjects:
        raise ConfigError("holdout_subject", f"{holdout!r} is not one of {subjects}")
    train_subjects = [s for s in subjects if s != holdout] or subjects
    if len(subjects) < 2:
        log.warning("only one subject available; evaluating on the training subject")
    normed = normalize(raw, train_subjects, cfg["data"]["normalization"])
    windows = segment(normed, cfg["window"]["seconds"], cfg["window"]["overlap"], cfg["data"]["label_mode"])
    train_set, val_set = windows.select(train_subjects), windows.select([holdout])
    mcfg = C.model_config(cfg, raw.num_classes, raw.channels)
    tcfg = C.train_config(cfg)
    model = build(mcfg, tcfg.seed)
    log.info("training %d-layer LSTM (h=%d) on %d windows, validating on %s (%d windows)",
             mcfg.lstm_layers, mcfg.hidden_units, len(train_set), holdout, len(val_set))
    trace = train_epochs(model, train_set, tcfg, val_set=val_set,
                         log=lambda r: log.info("epoch %d loss %.4f", r.epoch, r.loss))
    prov = _provenance(cfg)
    model.save(out / "checkpoint.npz", extra=prov)
    atomic_write_text(out / "trace.jsonl", trace.to_jsonl(prov))
    metrics = compute_metrics(val_set.labels, predict(model, val_set.windows), raw.num_classes)
    inv = parameter_inventory(model)
    write_json(out / "metrics.json", {
        **prov,
        "holdout_subject": holdout,
        "class_names": raw.class_names,
        "final_train_loss": trace.epochs[-1].loss,
        "holdout_metrics": metrics.to_dict(),
        "parameter_inventory": [{"layer": e.layer, "param": e.param, "shape": list(e.shape), "count": e.count}
                                for e in inv],
    })
    print(f"holdout {holdout}: macro-F1 {metrics.macro_f1:.4f}, accuracy {metrics.accuracy:.4f}")
    return EXIT_OK


def cmd_loso_grid(cfg: dict, args=None) -> int:
    out = Path(cfg["out"])
    resume = bool(getattr(args, "resume", False))
    raw = load_dataset(cfg)
    cell_dir = out / "cells"
    if not resume and cell_dir.exists():
        shutil.rmtree(cell_dir)
    base = C.model_config(cfg, raw.num_classes, raw.channels)
    report = run_grid(
        raw, base, C.train_config(cfg),
        window_seconds=cfg["window"]["seconds"], overlap=cfg["window"]["overlap"],
        hidden_grid=cfg["grid"]["hidden_units"], layer_grid=cfg["grid"]["lstm_layers"],
        seeds=cfg["grid"]["seeds"], normalization=cfg["data"]["normalization"],
        label_mode=cfg["data"]["label_mode"], jobs=cfg["jobs"], cell_dir=cell_dir, resume=resume,
        config_snapshot=_provenance(cfg),
        progress=lambda c: log.info("cell L%d H%d seed %d val %s: macro-F1 %.4f", c.lstm_layers,
                                    c.hidden_units, c.seed, c.validation_subject, c.metrics.macro_f1))
    formats = cfg["formats"]
    if "structured" in formats:
        write_json(out / "report.json", report.to_dict())
        write_json(out / "runtime.json", report.runtime_dict())
    if "csv" in formats:
        atomic_write_text(out / "cells.csv", _csv_text(CELL_COLUMNS, cell_rows(report), cfg))
        rt_rows = [[c.lstm_layers, c.hidden_units, c.seed, c.validation_subject,
                    repr(float(np.mean(c.epoch_seconds)))] for c in report.cells]
        atomic_write_text(out / "runtime.csv", _csv_text(
            ("lstm_layers", "hidden_units", "seed", "validation_subject", "mean_epoch_seconds"), rt_rows, cfg))
    summary = format_summary(report)
    atomic_write_text(out / "summary.txt", summary)
    print(summary, end="")
    return EXIT_OK


def format_summary(report) -> str:
    lines = [f"LOSO grid: {len(report.folds)} folds x {len(report.seeds)} seeds, "
             f"{len(report.cells)} cells (macro averages, mean over folds of per-fold seed mean/std)", ""]
    header = f"{'variant':<10}{'P':>16}{'R':>16}{'F1':>16}{'LSTM params':>14}"
    lines.append(header)
    for key, agg in report.aggregates.items():
        cells = [f"{agg[m]['mean']:.4f}±{agg[m]['std']:.4f}" for m in ("macro_precision", "macro_recall", "macro_f1")]
        lines.append(f"{key:<10}{cells[0]:>16}{cells[1]:>16}{cells[2]:>16}{report.parameters[key]['lstm_params']:>14}")
    rows = summary_rows(report)
    if rows:
        lines += ["", f"{'h':>6}{'F1 1L':>9}{'F1 2L':>9}  {'direction':<10}{'param delta':>13}"
                      f"{'reduction':>11}{'time 1L/2L':>12}"]
        for r in rows:
            lines.append(f"{r['hidden_units']:>6}{r['macro_f1_1l']:>9.4f}{r['macro_f1_2l']:>9.4f}  "
                         f"{r['direction']:<10}{r['param_delta']:>13}{r['param_reduction']:>10.1%}"
                         f"{r['runtime_ratio_1l_2l']:>12.3f}")
    return "\n".join(lines) + "\n"


def cmd_analyze(cfg: dict, args) -> int:
    h_list = args.hidden if args.hidden is not None else cfg["grid"]["hidden_units"]
    s_list = args.s_list
    if s_list is None:
        s_list = [cfg["model"]["num_filters"]]
    if not h_list or not s_list:
        raise ConfigError("h_list" if not h_list else "s_list", "needs at least one value")
    if any(v < 1 for v in [*h_list, *s_list]):
        raise ConfigError("s_list/h_list", "values must be positive integers")
    table = cost_table(s_list, h_list)
    rows = [[c.s, c.h, c.p1, c.p2, c.delta, f"{c.reduction:.6f}"] for c in table]
    text = _csv_text(COST_COLUMNS, rows, {**cfg, "analyze": {"s": s_list, "h": h_list}})
    if args.out:
        atomic_write_text(Path(cfg["out"]) / "cost.csv", text)
    print(text.split("\n", 1)[1], end="")
    mean = statistics.mean(c.reduction for c in table)
    print(f"mean reduction over grid: {mean:.1%} (reference value 63%)")
    return EXIT_OK


BENCH_COLUMNS = ("hidden_units", "seconds_1l", "seconds_2l", "ratio_1l_2l", "saving", "repetitions")


def cmd_bench(cfg: dict, args=None) -> int:
    b = cfg["bench"]
    if b["repetitions"] == 1:
        log.warning("repetitions=1: the median of a single run is noisy")
    channels = int(cfg["data"]["synthetic"]["channels"])
    classes = int(cfg["data"]["synthetic"]["num_classes"])
    pairs = []
    for h in b["hidden_units"]:
        one = C.model_config(C.resolve(C.snapshot(cfg), {"model": {"hidden_units": h, "lstm_layers": 1}}),
                             classes, channels)
        pairs.append((one, ModelConfig(**{**one.to_dict(), "lstm_layers": 2})))
    result = benchmark_runtime(pairs, repetitions=b["repetitions"], warmup=b["warmup"],
                               batches_per_epoch=b["batches_per_epoch"], batch_size=b["batch_size"],
                               seed=cfg["seed"])
    prov = _provenance(cfg)
    rows = [[r.hidden_units, f"{r.seconds_1l:.6f}", f"{r.seconds_2l:.6f}", f"{r.ratio:.4f}", f"{r.saving:.4f}",
             result.repetitions] for r in result.rows]
    out = Path(cfg["out"])
    if "structured" in cfg["formats"]:
        write_json(out / "bench.json", {**prov, **result.to_dict()})
    if "csv" in cfg["formats"]:
        atomic_write_text(out / "bench.csv", _csv_text(BENCH_COLUMNS, rows, cfg))
    print(f"config {prov['config_hash']} | {result.machine['platform']} | {result.machine['cpu_count']} CPUs | "
          f"median of {result.repetitions} after {result.warmup} warmup")
    print(f"{'h':>6}{'1L s':>10}{'2L s':>10}{'1L/2L':>8}{'saving':>8}")
    for r in result.rows:
        print(f"{r.hidden_units:>6}{r.seconds_1l:>10.4f}{r.seconds_2l:>10.4f}{r.ratio:>8.3f}{r.saving:>8.1%}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "loso-grid": cmd_loso_grid,
            "analyze": cmd_analyze, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_args(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
