"""Leave-one-subject-out grid runs, LSTM cost algebra and runtime benchmarks."""
from __future__ import annotations

import json
import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import RawDataset, WindowedDataset, normalize, segment
from .errors import ConfigError, DivergenceError, ProtocolError
from .fileio import write_json
from .metrics import MetricsRecord, compute_metrics
from .model import ModelConfig, build, forward, lstm_parameter_total, parameter_inventory, predict
from .optim import AdamState, adam_step
from .train import TrainRunConfig, train_epochs

SUMMARY_METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1",
                   "weighted_precision", "weighted_recall", "weighted_f1")
DEFAULT_HIDDEN_GRID = (128, 256, 512, 1024)
DEFAULT_LAYER_GRID = (1, 2)
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


# -- LSTM cost model -----------------------------------------------------------

@dataclass(frozen=True)
class LstmCostModel:
    s: int
    h: int
    layers: int = 1

    def __post_init__(self):
        if self.s < 1 or self.h < 1:
            raise ConfigError("s/h", f"must be >= 1, got s={self.s}, h={self.h}")
        if self.layers not in (1, 2):
            raise ConfigError("layers", f"must be 1 or 2, got {self.layers}")

    @property
    def p1(self) -> int:
        s, h = self.s, self.h
        return 4 * s * h + 4 * h + 4 * h * h

    @property
    def p2(self) -> int:
        s, h = self.s, self.h
        return 4 * s * h + 8 * h + 12 * h * h

    @property
    def delta(self) -> int:
        return self.p2 - self.p1

    @property
    def reduction(self) -> float:
        """Fraction of two-layer LSTM parameters removed by dropping the second layer."""
        return self.delta / self.p2

    @property
    def params(self) -> int:
        return self.p1 if self.layers == 1 else self.p2

    def to_dict(self) -> dict:
        return {"s": self.s, "h": self.h, "p1": self.p1, "p2": self.p2,
                "delta": self.delta, "reduction": self.reduction}


def lstm_cost(s: int, h: int, layers: int = 1) -> LstmCostModel:
    return LstmCostModel(s, h, layers)


COST_COLUMNS = ("s", "h", "p1", "p2", "delta", "reduction")


def cost_table(s_list: Sequence[int], h_list: Sequence[int]) -> list[LstmCostModel]:
    if not s_list or not h_list:
        raise ConfigError("s_list/h_list", "need at least one value each")
    return [lstm_cost(s, h) for s in s_list for h in h_list]


# -- LOSO ----------------------------------------------------------------------

class Fold(NamedTuple):
    train_subjects: tuple[str, ...]
    validation_subject: str


def loso_folds(subjects_or_dataset) -> list[Fold]:
    """One fold per subject, in first-appearance order."""
    if hasattr(subjects_or_dataset, "subjects"):
        subjects = list(subjects_or_dataset.subjects)
    else:
        subjects = list(dict.fromkeys(subjects_or_dataset))
    if len(subjects) < 2:
        raise ProtocolError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}; "
                            "use a holdout split instead")
    return [Fold(tuple(s for s in subjects if s != v), v) for v in subjects]


# -- grid ----------------------------------------------------------------------

@dataclass
class GridCell:
    lstm_layers: int
    hidden_units: int
    seed: int
    validation_subject: str
    metrics: MetricsRecord
    final_loss: float
    lstm_params: int
    total_params: int
    epoch_seconds: list[float] = field(default_factory=list)

    @property
    def key(self) -> tuple:
        return (self.lstm_layers, self.hidden_units, self.seed, self.validation_subject)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "lstm_layers": self.lstm_layers,
            "hidden_units": self.hidden_units,
            "seed": self.seed,
            "validation_subject": self.validation_subject,
            "metrics": self.metrics.to_dict(),
            "final_loss": self.final_loss,
            "lstm_params": self.lstm_params,
            "total_params": self.total_params,
        }
        if timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridCell":
        return cls(d["lstm_layers"], d["hidden_units"], d["seed"], d["validation_subject"],
                   MetricsRecord.from_dict(d["metrics"]), d["final_loss"], d["lstm_params"],
                   d["total_params"], list(d.get("epoch_seconds", [])))


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate_cells(cells: Iterable[GridCell]) -> dict:
    """Per variant: mean and std over seeds within each fold, then the mean over folds.

    Returns ``{"L<layers>_H<h>": {metric: {"mean": m, "std": s}}}``.
    """
    grouped: dict[tuple[int, int], dict[str, list[GridCell]]] = {}
    for c in cells:
        grouped.setdefault((c.lstm_layers, c.hidden_units), {}).setdefault(c.validation_subject, []).append(c)
    out = {}
    for (layers, h), folds in sorted(grouped.items()):
        entry = {}
        for metric in SUMMARY_METRICS:
            means, stds = [], []
            for fold_cells in folds.values():
                values = [getattr(c.metrics, metric) for c in sorted(fold_cells, key=lambda c: c.seed)]
                means.append(float(np.mean(values)))
                stds.append(_std(values))
            entry[metric] = {"mean": float(np.mean(means)), "std": float(np.mean(stds))}
        out[variant_key(layers, h)] = entry
    return out


def variant_key(layers: int, h: int) -> str:
    return f"L{layers}_H{h}"


@dataclass
class EvaluationReport:
    hidden_grid: tuple[int, ...]
    layer_grid: tuple[int, ...]
    seeds: tuple[int, ...]
    folds: list[Fold]
    cells: list[GridCell]
    aggregates: dict
    parameters: dict
    config: dict = field(default_factory=dict)

    def cell(self, layers, h, seed, subject) -> GridCell:
        for c in self.cells:
            if c.key == (layers, h, seed, subject):
                return c
        raise KeyError((layers, h, seed, subject))

    def mean_epoch_seconds(self, layers: int, h: int) -> float:
        times = [t for c in self.cells if (c.lstm_layers, c.hidden_units) == (layers, h) for t in c.epoch_seconds]
        return float(np.mean(times)) if times else float("nan")

    def runtime_ratios(self) -> dict[int, float]:
        """Mean epoch time of the 1-layer variant divided by the 2-layer one, per width."""
        if not {1, 2} <= set(self.layer_grid):
            return {}
        return {h: self.mean_epoch_seconds(1, h) / self.mean_epoch_seconds(2, h) for h in self.hidden_grid}

    def to_dict(self) -> dict:
        """Deterministic part of the report: no wall-clock values."""
        return {
            "config": self.config,
            "grid": {"hidden_units": list(self.hidden_grid), "lstm_layers": list(self.layer_grid),
                     "seeds": list(self.seeds),
                     "folds": [{"train": list(f.train_subjects), "validation": f.validation_subject}
                               for f in self.folds]},
            "aggregation": "mean/std (sample, ddof=1) over seeds within each fold, then mean over folds",
            "aggregates": self.aggregates,
            "parameters": self.parameters,
            "cells": [c.to_dict(timing=False) for c in self.cells],
        }

    def runtime_dict(self) -> dict:
        variants = {variant_key(l, h): self.mean_epoch_seconds(l, h)
                    for l in self.layer_grid for h in self.hidden_grid}
        return {
            "config": self.config,
            "machine": machine_descriptor(),
            "measure": "wall-clock seconds per training epoch (optimisation loop only)",
            "mean_epoch_seconds": variants,
            "ratio_1l_over_2l": {str(h): r for h, r in self.runtime_ratios().items()},
            "cells": [{"lstm_layers": c.lstm_layers, "hidden_units": c.hidden_units, "seed": c.seed,
                       "validation_subject": c.validation_subject, "epoch_seconds": c.epoch_seconds}
                      for c in self.cells],
        }


CELL_COLUMNS = ("lstm_layers", "hidden_units", "seed", "validation_subject", *SUMMARY_METRICS,
                "final_loss", "lstm_params", "total_params")


def cell_rows(report: EvaluationReport) -> list[list]:
    rows = []
    for c in report.cells:
        m = c.metrics.summary()
        rows.append([c.lstm_layers, c.hidden_units, c.seed, c.validation_subject,
                     *(repr(m[k]) for k in SUMMARY_METRICS), repr(c.final_loss), c.lstm_params, c.total_params])
    return rows


def _fold_data(raw: RawDataset, fold: Fold, window_seconds, overlap, normalization, label_mode):
    normed = normalize(raw, fold.train_subjects, normalization)
    windows = segment(normed, window_seconds, overlap, label_mode)
    return windows.select(fold.train_subjects), windows.select([fold.validation_subject])


@dataclass(frozen=True)
class _CellJob:
    layers: int
    h: int
    seed: int
    fold: Fold


def _run_cell(model_config: ModelConfig, train_cfg: TrainRunConfig, job: _CellJob,
              train_set: WindowedDataset, val_set: WindowedDataset) -> GridCell:
    cfg = replace(model_config, lstm_layers=job.layers, hidden_units=job.h)
    run_cfg = replace(train_cfg, seed=job.seed)
    model = build(cfg, job.seed)
    try:
        trace = train_epochs(model, train_set, run_cfg, evaluate_train=False)
    except DivergenceError as exc:
        raise DivergenceError(f"{exc} (cell: lstm_layers={job.layers}, hidden_units={job.h}, "
                              f"seed={job.seed}, validation_subject={job.fold.validation_subject})",
                              exc.epoch, exc.batch) from exc
    preds = predict(model, val_set.windows)
    inv = parameter_inventory(model)
    return GridCell(job.layers, job.h, job.seed, job.fold.validation_subject,
                    compute_metrics(val_set.labels, preds, cfg.num_classes),
                    trace.epochs[-1].loss, lstm_parameter_total(inv), sum(e.count for e in inv),
                    trace.epoch_seconds)


def _cell_path(cell_dir: Path, job: _CellJob) -> Path:
    return cell_dir / f"{variant_key(job.layers, job.h)}_S{job.seed}_V{job.fold.validation_subject}.json"


def _worker(args):
    model_config, train_cfg, job, train_set, val_set, cell_dir = args
    cell = _run_cell(model_config, train_cfg, job, train_set, val_set)
    if cell_dir is not None:
        write_json(_cell_path(cell_dir, job), cell.to_dict())
    return cell


def run_grid(raw: RawDataset, base_config: ModelConfig, train_cfg: TrainRunConfig, *,
             window_seconds: float = 1.0, overlap: float = 0.6,
             hidden_grid: Sequence[int] = DEFAULT_HIDDEN_GRID,
             layer_grid: Sequence[int] = DEFAULT_LAYER_GRID,
             seeds: Sequence[int] = DEFAULT_SEEDS,
             normalization: str = "zscore", label_mode: str = "last",
             jobs: int = 1, cell_dir=None, resume: bool = False,
             config_snapshot: dict | None = None, progress=None) -> EvaluationReport:
    """Train and evaluate every (layers, h, seed, fold) cell.

    Each fold normalises with statistics from its training subjects only and
    re-segments.  With ``cell_dir`` every finished cell is written there
    atomically; ``resume=True`` reuses those files instead of retraining.
    """
    folds = loso_folds(raw.subjects)
    hidden_grid, layer_grid, seeds = tuple(hidden_grid), tuple(layer_grid), tuple(seeds)
    if not hidden_grid or not layer_grid or not seeds:
        raise ConfigError("grid", "hidden, layer and seed grids must be non-empty")
    base_config.validate()
    cell_dir = Path(cell_dir) if cell_dir is not None else None

    fold_data = {f.validation_subject: _fold_data(raw, f, window_seconds, overlap, normalization, label_mode)
                 for f in folds}
    s_w = next(iter(fold_data.values()))[0].window_samples
    if s_w != base_config.window_samples:
        raise ConfigError("window_samples", f"model expects {base_config.window_samples} samples per window, "
                                            f"segmentation yields {s_w}")

    jobs_list = [_CellJob(l, h, s, f) for l in layer_grid for h in hidden_grid for s in seeds for f in folds]
    done: dict[tuple, GridCell] = {}
    todo = []
    for job in jobs_list:
        path = _cell_path(cell_dir, job) if cell_dir is not None else None
        if resume and path is not None and path.exists():
            done[(job.layers, job.h, job.seed, job.fold.validation_subject)] = GridCell.from_dict(
                json.loads(path.read_text()))
        else:
            todo.append(job)

    args = [(base_config, train_cfg, job, *fold_data[job.fold.validation_subject], cell_dir) for job in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_worker, args)
            for cell in results:
                done[cell.key] = cell
                if progress:
                    progress(cell)
    else:
        for a in args:
            cell = _worker(a)
            done[cell.key] = cell
            if progress:
                progress(cell)

    cells = [done[(j.layers, j.h, j.seed, j.fold.validation_subject)] for j in jobs_list]
    parameters = {}
    for l in layer_grid:
        for h in hidden_grid:
            cost = lstm_cost(base_config.lstm_input_size, h, l)
            sample = next(c for c in cells if (c.lstm_layers, c.hidden_units) == (l, h))
            parameters[variant_key(l, h)] = {"lstm_params": sample.lstm_params, "total_params": sample.total_params,
                                             "formula_params": cost.params}
    return EvaluationReport(hidden_grid, layer_grid, seeds, folds, cells, aggregate_cells(cells), parameters,
                            dict(config_snapshot or {}))


def summary_rows(report: EvaluationReport, metric: str = "macro_f1") -> list[dict]:
    """One row per hidden width comparing the 1-layer and 2-layer variants."""
    if not {1, 2} <= set(report.layer_grid):
        return []
    ratios = report.runtime_ratios()
    rows = []
    for h in report.hidden_grid:
        f1 = report.aggregates[variant_key(1, h)][metric]["mean"]
        f2 = report.aggregates[variant_key(2, h)][metric]["mean"]
        p1 = report.parameters[variant_key(1, h)]["lstm_params"]
        p2 = report.parameters[variant_key(2, h)]["lstm_params"]
        rows.append({"hidden_units": h, f"{metric}_1l": f1, f"{metric}_2l": f2,
                     "direction": "1L better" if f1 > f2 else ("equal" if f1 == f2 else "2L better"),
                     "param_delta": p2 - p1, "param_reduction": (p2 - p1) / p2,
                     "runtime_ratio_1l_2l": ratios.get(h, float("nan"))})
    return rows


# -- runtime benchmark ---------------------------------------------------------

def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


@dataclass
class BenchmarkRow:
    hidden_units: int
    seconds_1l: float
    seconds_2l: float
    times_1l: list[float]
    times_2l: list[float]

    @property
    def ratio(self) -> float:
        return self.seconds_1l / self.seconds_2l

    @property
    def saving(self) -> float:
        return 1.0 - self.ratio

    def to_dict(self) -> dict:
        return {"hidden_units": self.hidden_units, "seconds_1l": self.seconds_1l, "seconds_2l": self.seconds_2l,
                "ratio": self.ratio, "saving": self.saving, "times_1l": self.times_1l, "times_2l": self.times_2l}


@dataclass
class BenchmarkResult:
    rows: list[BenchmarkRow]
    repetitions: int
    warmup: int
    batches_per_epoch: int
    batch_size: int
    machine: dict

    def to_dict(self) -> dict:
        return {"repetitions": self.repetitions, "warmup": self.warmup,
                "batches_per_epoch": self.batches_per_epoch, "batch_size": self.batch_size,
                "statistic": "median over repetitions",
                "machine": self.machine, "rows": [r.to_dict() for r in self.rows]}


def _time_epoch(model, batches, labels, weights, state, rng) -> float:
    params = model.parameters()
    start = time.perf_counter()
    for x, y in zip(batches, labels):
        model.zero_grad()
        with T.Tape() as tape:
            loss = T.softmax_cross_entropy_weighted(forward(model, x, training=True, rng=rng), y, weights)
            tape.backward(loss)
        adam_step(state, params)
    return time.perf_counter() - start


def benchmark_runtime(pairs: Sequence[tuple[ModelConfig, ModelConfig]], repetitions: int = 5, warmup: int = 1,
                      batches_per_epoch: int = 2, batch_size: int = 32, seed: int = 0) -> BenchmarkResult:
    """Median training-epoch time of each (1-layer, 2-layer) config pair.

    An epoch here is ``batches_per_epoch`` optimisation steps on a fixed
    synthetic batch stream.  Repetitions of the two variants are interleaved
    so slow drifts in machine load hit both equally; warmup epochs are
    discarded.
    """
    if repetitions < 1:
        raise ConfigError("repetitions", f"must be >= 1, got {repetitions}")
    rows = []
    for one, two in pairs:
        if replace(one, lstm_layers=two.lstm_layers) != two:
            raise ConfigError("pairs", f"benchmark pairs must differ only in lstm_layers: {one} vs {two}")
        rng = np.random.default_rng(seed)
        K = one.num_classes
        batches = [rng.standard_normal((batch_size, 1, one.window_samples, one.channels)).astype(np.float32)
                   for _ in range(batches_per_epoch)]
        labels = [rng.integers(0, K, batch_size) for _ in range(batches_per_epoch)]
        weights = np.ones(K, dtype=np.float32)
        entries = []
        for cfg in (one, two):
            model = build(cfg, seed)
            entries.append((model, AdamState.for_params(model.parameters())))
        times: list[list[float]] = [[], []]
        drop_rng = np.random.default_rng(seed + 1)
        for rep in range(warmup + repetitions):
            for i, (model, state) in enumerate(entries):
                t = _time_epoch(model, batches, labels, weights, state, drop_rng)
                if rep >= warmup:
                    times[i].append(t)
        rows.append(BenchmarkRow(one.hidden_units, statistics.median(times[0]), statistics.median(times[1]),
                                 times[0], times[1]))
    return BenchmarkResult(rows, repetitions, warmup, batches_per_epoch, batch_size, machine_descriptor())
