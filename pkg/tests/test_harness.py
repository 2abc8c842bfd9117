import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepconvlstm.data import synth_generate
from deepconvlstm.errors import LabelError, ProtocolError, ShapeError
from deepconvlstm.harness import (CELL_COLUMNS, GridCell, aggregate_cells, benchmark_runtime, cell_rows, cost_table,
                                  loso_folds, lstm_cost, run_grid, summary_rows)
from deepconvlstm.metrics import compute_metrics
from deepconvlstm.model import ModelConfig, build, parameter_inventory, lstm_parameter_total
from deepconvlstm.train import TrainRunConfig


def brute_force_metrics(y_true, y_pred, K):
    """Per-class counts by explicit loops; 0/0 -> 0."""
    per = []
    for c in range(K):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per.append((prec, rec, f1, tp + fn))
    n = len(y_true)
    return {
        "precision": [p[0] for p in per], "recall": [p[1] for p in per], "f1": [p[2] for p in per],
        "macro_f1": sum(p[2] for p in per) / K,
        "weighted_f1": sum(p[2] * p[3] for p in per) / n,
        "accuracy": sum(1 for t, p in zip(y_true, y_pred) if t == p) / n,
    }


# -- metrics -------------------------------------------------------------------

def test_metrics_perfect():
    m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert m.accuracy == m.macro_f1 == m.weighted_f1 == m.macro_precision == m.macro_recall == 1.0


def test_metrics_hand_example():
    m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
    np.testing.assert_allclose(m.precision, [1, 2 / 3])
    np.testing.assert_allclose(m.recall, [0.5, 1])
    np.testing.assert_allclose(m.f1, [2 / 3, 0.8])
    assert m.macro_f1 == pytest.approx(0.7333, abs=1e-4)
    np.testing.assert_array_equal(m.confusion, [[1, 1], [0, 2]])


def test_zero_support_class_enters_macro_mean():
    m = compute_metrics([0, 1], [0, 1], 3)
    assert (m.precision[2], m.recall[2], m.f1[2]) == (0, 0, 0)
    assert m.macro_f1 == pytest.approx(2 / 3)
    assert m.weighted_f1 == 1.0


def test_metrics_errors():
    with pytest.raises(ShapeError):
        compute_metrics([0, 1], [0], 2)
    with pytest.raises(LabelError):
        compute_metrics([0, 2], [0, 1], 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10).flatmap(
    lambda K: st.tuples(st.just(K), st.integers(1, 1000).flatmap(
        lambda n: st.tuples(st.lists(st.integers(0, K - 1), min_size=n, max_size=n),
                            st.lists(st.integers(0, K - 1), min_size=n, max_size=n))))))
def test_metrics_match_brute_force(case):
    K, (y_true, y_pred) = case
    m = compute_metrics(y_true, y_pred, K)
    ref = brute_force_metrics(y_true, y_pred, K)
    for key in ("precision", "recall", "f1"):
        np.testing.assert_allclose(getattr(m, key), ref[key], rtol=1e-12, atol=1e-15)
    for key in ("macro_f1", "weighted_f1", "accuracy"):
        assert getattr(m, key) == pytest.approx(ref[key], rel=1e-12, abs=1e-15)
    np.testing.assert_array_equal(m.confusion.sum(1), m.support)


# -- folds ---------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 4, 22])
def test_loso_folds_partition(n):
    subjects = [f"s{i:02d}" for i in range(n)]
    folds = loso_folds(subjects)
    assert len(folds) == n
    assert sorted(f.validation_subject for f in folds) == subjects
    for f in folds:
        assert f.validation_subject not in f.train_subjects
        assert sorted([*f.train_subjects, f.validation_subject]) == subjects


def test_two_subject_folds():
    assert [(list(f.train_subjects), f.validation_subject) for f in loso_folds(["a", "b"])] == \
        [(["b"], "a"), (["a"], "b")]


def test_single_subject_is_a_protocol_error():
    with pytest.raises(ProtocolError, match="holdout"):
        loso_folds(["only"])


# -- cost model ----------------------------------------------------------------

def test_cost_examples():
    c = lstm_cost(64, 128)
    assert (c.p1, c.p2) == (98_816, 230_400)
    assert c.reduction == pytest.approx(0.571, abs=5e-4)
    big = lstm_cost(64, 1024)
    assert (big.delta, big.p2) == (8_392_704, 12_853_248)
    assert big.reduction == pytest.approx(0.653, abs=5e-4)
    unit = lstm_cost(1, 1)
    assert (unit.p1, unit.p2, unit.delta) == (12, 24, 12)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 4096))
def test_cost_invariants(s, h):
    c = lstm_cost(s, h)
    assert c.delta == c.p2 - c.p1 == 8 * h * h + 4 * h
    assert 0 < c.reduction < 2 / 3
    assert lstm_cost(s, h + 1).reduction > c.reduction


@pytest.mark.parametrize("s,h", [(3, 5), (17, 8), (40, 33)])
def test_cost_matches_built_model(s, h):
    # s = num_filters * channels, so pick filters=s and one channel
    for layers, attr in ((1, "p1"), (2, "p2")):
        cfg = ModelConfig(num_classes=2, channels=1, window_samples=12, num_filters=s, kernel_len=3,
                          lstm_layers=layers, hidden_units=h)
        assert lstm_parameter_total(parameter_inventory(build(cfg, 0))) == getattr(lstm_cost(s, h), attr)


def test_cost_table_order():
    rows = cost_table([64], [128, 256, 512, 1024])
    assert [r.h for r in rows] == [128, 256, 512, 1024]
    red = [r.reduction for r in rows]
    assert red == sorted(red)
    assert round(red[0] * 100, 1) == 57.1 and round(red[-1] * 100, 1) == 65.3


# -- grid ----------------------------------------------------------------------

TINY = ModelConfig(num_classes=3, channels=3, window_samples=50, num_filters=4, kernel_len=5, hidden_units=8)


@pytest.fixture(scope="module")
def tiny_raw():
    return synth_generate(3, 3, 50, 12, seed=0)


@pytest.fixture(scope="module")
def tiny_report(tiny_raw, tmp_path_factory):
    return run_grid(tiny_raw, TINY, TrainRunConfig(epochs=1, batch_size=32), hidden_grid=(4, 8),
                    layer_grid=(1, 2), seeds=(1, 2), cell_dir=tmp_path_factory.mktemp("cells"))


def test_grid_cell_count_and_order(tiny_report):
    assert len(tiny_report.cells) == 2 * 2 * 2 * 3
    assert [c.key for c in tiny_report.cells] == sorted(c.key for c in tiny_report.cells)
    assert all(len(c.epoch_seconds) == 1 and c.epoch_seconds[0] > 0 for c in tiny_report.cells)


def test_aggregates_recompute(tiny_report):
    for key, entry in tiny_report.aggregates.items():
        layers, h = int(key[1]), int(key.split("_H")[1])
        for metric, agg in entry.items():
            per_fold = {}
            for c in tiny_report.cells:
                if (c.lstm_layers, c.hidden_units) == (layers, h):
                    per_fold.setdefault(c.validation_subject, []).append(getattr(c.metrics, metric))
            means = [sum(v) / len(v) for v in per_fold.values()]
            stds = [np.std(v, ddof=1) for v in per_fold.values()]
            assert abs(agg["mean"] - sum(means) / len(means)) <= 1e-12
            assert abs(agg["std"] - sum(stds) / len(stds)) <= 1e-12


def test_parameters_match_formula(tiny_report):
    for key, p in tiny_report.parameters.items():
        assert p["lstm_params"] == p["formula_params"]
    rows = summary_rows(tiny_report)
    assert [r["hidden_units"] for r in rows] == [4, 8]
    assert all(r["param_delta"] == 8 * r["hidden_units"] ** 2 + 4 * r["hidden_units"] for r in rows)


def test_report_serialisation_has_no_timings(tiny_report):
    text = json.dumps(tiny_report.to_dict())
    assert "seconds" not in text
    assert "epoch_seconds" in json.dumps(tiny_report.runtime_dict())
    rows = cell_rows(tiny_report)
    assert all(len(r) == len(CELL_COLUMNS) for r in rows)


def test_cell_roundtrip(tiny_report):
    c = tiny_report.cells[0]
    back = GridCell.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back.to_dict() == c.to_dict()


def test_resume_reuses_cells_and_parallel_matches(tiny_raw, tmp_path):
    kw = dict(hidden_grid=(4,), layer_grid=(1,), seeds=(1, 2), cell_dir=tmp_path)
    cfg = TrainRunConfig(epochs=1, batch_size=32)
    first = run_grid(tiny_raw, TINY, cfg, **kw)
    # corrupt nothing, mark a cell so we can tell it was reused rather than retrained
    path = next(tmp_path.glob("*.json"))
    d = json.loads(path.read_text())
    d["final_loss"] = 123.0
    path.write_text(json.dumps(d))
    resumed = run_grid(tiny_raw, TINY, cfg, resume=True, **kw)
    assert 123.0 in [c.final_loss for c in resumed.cells]
    parallel = run_grid(tiny_raw, TINY, cfg, jobs=2, hidden_grid=(4,), layer_grid=(1,), seeds=(1, 2))
    assert [c.to_dict(timing=False) for c in parallel.cells] == [c.to_dict(timing=False) for c in first.cells]


def test_aggregate_single_seed_has_zero_std():
    from deepconvlstm.metrics import compute_metrics as cm
    cells = [GridCell(1, 4, 1, s, cm([0, 1], [0, 0], 2), 0.0, 0, 0) for s in ("a", "b")]
    agg = aggregate_cells(cells)["L1_H4"]
    assert agg["macro_f1"]["std"] == 0.0


def test_benchmark_identical_configs_ratio_near_one():
    cfg = ModelConfig(num_classes=3, channels=3, window_samples=50, hidden_units=64)
    res = benchmark_runtime([(cfg, cfg)], repetitions=5, warmup=1, batches_per_epoch=2, batch_size=16)
    assert 0.7 < res.rows[0].ratio < 1.3
    assert res.to_dict()["repetitions"] == 5 and "machine" in res.to_dict()


def test_benchmark_rejects_pairs_differing_elsewhere():
    from deepconvlstm.errors import ConfigError
    a = ModelConfig(num_classes=3, channels=3, window_samples=50, hidden_units=8)
    b = ModelConfig(num_classes=3, channels=3, window_samples=50, hidden_units=16, lstm_layers=2)
    with pytest.raises(ConfigError):
        benchmark_runtime([(a, b)], repetitions=1)
