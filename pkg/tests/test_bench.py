import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rulssl import bench as B
from rulssl import data, trainers
from rulssl.models import ExtractorConfig, FeatureExtractor
from rulssl.synthetic import CorpusSpec, generate_corpus


def brute_rmse(p, t):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / len(p))


def brute_score(p, t):
    total = 0.0
    for a, b in zip(p, t):
        d = a - b
        total += math.exp(-d / 13) - 1 if d < 0 else math.exp(d / 10) - 1
    return total


# -- metrics -----------------------------------------------------------------

def test_metric_examples():
    assert B.rmse_metric([1, 2, 3], [1, 2, 3]) == 0.0
    assert B.rmse_metric([3, -4], [0, 0]) == pytest.approx(math.sqrt(12.5))
    assert B.rmse_metric([5], [0]) == 5.0
    assert B.rul_score([4, 4], [4, 4]) == 0.0
    assert B.rul_score([10], [0]) == pytest.approx(math.e - 1, abs=1e-6)
    assert B.rul_score([-13], [0]) == pytest.approx(math.e - 1, abs=1e-6)
    assert B.rul_score([-10], [0]) == pytest.approx(math.exp(10 / 13) - 1, abs=1e-6)
    assert B.rul_score([-10], [0]) < B.rul_score([10], [0])
    for fn in (B.rmse_metric, B.rul_score):
        with pytest.raises(ValueError):
            fn([], [])
        with pytest.raises(ValueError):
            fn([1, 2], [1])


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        t = rng.uniform(0, 125, n)
        p = t + rng.normal(0, 20, n)
        assert B.rmse_metric(p, t) == pytest.approx(brute_rmse(p, t), rel=1e-9)
        assert B.rul_score(p, t) == pytest.approx(brute_score(p, t), rel=1e-9)


@given(st.floats(1e-6, 200))
def test_score_asymmetry(d):
    assert B.rul_score([d], [0.0]) > B.rul_score([-d], [0.0])


def test_metric_report_rows():
    rep = B.MetricReport.evaluate([3, 7], [10.0, 20.0], [12.0, 10.0])
    assert rep.count == 2 and rep.rmse >= 0 and rep.score >= 0
    rows = rep.rows()
    assert [r["engine"] for r in rows] == [3, 7]
    assert sum(r["score"] for r in rows) == pytest.approx(rep.score)


# -- search ------------------------------------------------------------------

def test_qlogu_quantized_and_log_uniform():
    dist = B.QLogUniform(1e-4, 1e-1, 5e-5)
    rng = np.random.default_rng(0)
    xs = np.array([dist.sample(rng) for _ in range(10_000)])
    assert xs.min() >= 1e-4 and xs.max() <= 1e-1
    k = np.round(xs / 5e-5)
    assert np.all(xs == np.round(k * 5e-5, 12))
    counts = np.histogram(xs, bins=[1e-4, 1e-3, 1e-2, 1e-1 + 1e-12])[0]
    assert stats.chisquare(counts).pvalue > 0.01


def test_qu_values():
    dist = B.QUniform(0.0, 0.5, 0.1)
    rng = np.random.default_rng(1)
    xs = {dist.sample(rng) for _ in range(10_000)}
    assert xs == {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}


def test_random_search_constant_objective(tmp_path):
    best, log = B.random_search(B.PRETRAIN_SPACE, 25, lambda p: 1.0, seed=3, log_path=tmp_path / "s.jsonl")
    assert len(log) == 25
    assert best == log[0]["params"]
    assert set(best) == {"lr", "dropout", "batch_size", "min_distance"}
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 25


def test_random_search_argmin_and_errors():
    best, log = B.random_search(B.SUPERVISED_SPACE, 40, lambda p: abs(math.log10(p["lr"]) + 2), seed=0)
    assert best == min(log, key=lambda r: r["objective"])["params"]
    with pytest.raises(ValueError):
        B.random_search(B.SUPERVISED_SPACE, 0, lambda p: 0.0)

    def diverge(p):
        raise trainers.TrainingDiverged("nan")

    _, log = B.random_search(B.SUPERVISED_SPACE, 3, diverge)
    assert all(r["objective"] == math.inf and r["error"] for r in log)


def test_random_search_seeded():
    a = B.random_search(B.SUPERVISED_SPACE, 10, lambda p: p["lr"], seed=5)
    b = B.random_search(B.SUPERVISED_SPACE, 10, lambda p: p["lr"], seed=5)
    assert a == b


# -- grid --------------------------------------------------------------------

def test_default_grid_size():
    cells = B.default_grid(replications=1)
    assert len(cells) == 320
    assert len(B.default_grid()) == 3200
    assert len({c.key for c in cells}) == 320
    per = [c for c in cells if c.subset == "FD002"]
    assert {c.percent for c in per} == {2, 10, 20, 40, 100}
    assert {c.grade for c in per if c.method != "none"} == {40, 60, 70, 80, 90}
    assert sum(c.method == "none" for c in per) == 5


def test_cell_seeds_ignore_method_and_grade():
    a = B.CellSpec("FD001", "ae", 10, 60, 2)
    b = B.CellSpec("FD001", "none", 10, None, 2)
    c = B.CellSpec("FD001", "self", 10, 90, 2)
    assert a.split_seed == b.split_seed == c.split_seed
    assert a.train_seed == c.train_seed
    assert a.split_seed != B.CellSpec("FD001", "ae", 10, 60, 3).split_seed
    assert B.derive_seed("x", 1) == B.derive_seed("x", 1)
    with pytest.raises(ValueError):
        B.CellSpec("FD001", "vae", 10, 60, 0)


def test_constant_split_across_methods():
    train = data.prepare(*generate_corpus(CorpusSpec(n_train=60, n_test=2), seed=0), window=15).train
    ids = {m: B.cell_split(B.CellSpec("FD001", m, 10, None if m == "none" else 70, 0), train).labeled.engine_ids
           for m in B.METHODS}
    assert len({tuple(v) for v in ids.values()}) == 1
    assert len(ids["none"]) == 4


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    spec = CorpusSpec(n_train=12, n_test=4, min_length=40, max_length=60, min_test_length=20)
    ds = data.prepare(*generate_corpus(spec, seed=2), window=15, seed=0)
    path = tmp_path_factory.mktemp("ds") / "FD001.json"
    ds.save(path)
    return ds, path


FAST = B.GridSettings(filters=4, pretrain_epochs=2, finetune_epochs=2, rbm_epochs=1, max_epochs=2,
                      overrides={"self": {"min_distance": 5}})


def _strip(doc):
    return {k: v for k, v in doc.items() if k != "seconds"}


@pytest.mark.parametrize("method", B.METHODS)
def test_run_cell(tiny, method):
    ds, _ = tiny
    cell = B.run_cell(B.CellSpec("FD001", method, 40, 60, 0), ds, FAST)
    assert cell.ok, cell.error
    assert len(cell.per_engine) == len(ds.test)
    assert cell.rmse == pytest.approx(brute_rmse([r["prediction"] for r in cell.per_engine],
                                                 [r["truth"] for r in cell.per_engine]))
    assert (cell.pretrain_best is None) == (method == "none")
    back = B.ExperimentCell.from_json(json.loads(json.dumps(cell.to_json())))
    assert back == cell


def test_run_cell_records_errors(tiny):
    ds, _ = tiny
    bad = B.GridSettings(filters=4, pretrain_epochs=1, finetune_epochs=1, overrides={"self": {"min_distance": 500}})
    cell = B.run_cell(B.CellSpec("FD001", "self", 40, 60, 0), ds, bad)
    assert not cell.ok and "minimum distance" in cell.error


def test_grid_resumes_only_missing_cells(tiny, tmp_path, monkeypatch):
    _, path = tiny
    cells = [B.CellSpec("FD001", "none", 40, None, r) for r in range(3)]
    first = B.run_grid(cells, {"FD001": path}, tmp_path, FAST)
    assert len(first) == 3
    lines = (tmp_path / "cells.jsonl").read_text().splitlines()
    (tmp_path / "cells.jsonl").write_text("\n".join(lines[:2]) + "\n")

    calls = []
    real = B.run_cell
    monkeypatch.setattr(B, "run_cell", lambda spec, *a, **k: calls.append(spec.key) or real(spec, *a, **k))
    second = B.run_grid(cells, {"FD001": path}, tmp_path, FAST)
    assert calls == [cells[2].key]
    assert {c.spec.key: _strip(c.to_json()) for c in second} == {c.spec.key: _strip(c.to_json()) for c in first}


def test_aggregate_statistics_and_order():
    def cell(method, percent, grade, rep, rmse, subset="FD001"):
        return B.ExperimentCell(B.CellSpec(subset, method, percent, grade, rep), 0, rmse=rmse, score=rmse / 10)

    cells = [
        cell("self", 10, 60, 0, 10.0), cell("self", 10, 60, 1, 20.0),
        cell("ae", 10, 60, 0, 30.0),
        cell("none", 10, None, 0, 18.0), cell("none", 10, None, 1, 18.0),
        cell("self", 2, 40, 0, 40.0), cell("none", 2, None, 0, 30.0),
        B.ExperimentCell(B.CellSpec("FD001", "rbm", 10, 60, 0), 0, error="boom"),
    ]
    rows = B.aggregate(cells)
    by = {(r["method"], r["percent"], r["grade"]): r for r in rows}
    self_row = by[("self", 10, 60)]
    assert self_row["rmse_mean"] == 15.0
    assert self_row["rmse_std"] == pytest.approx(7.0710678, abs=1e-6)
    assert by[("ae", 10, 60)]["single"] and by[("ae", 10, 60)]["rmse_std"] == 0.0
    assert ("rbm", 10, 60) not in by
    assert self_row["best_rmse"] and not by[("ae", 10, 60)]["best_rmse"]
    assert by[("none", 2, None)]["best_rmse"] and not by[("self", 2, 40)]["best_rmse"]
    keys = [(r["subset"], -1 if r["grade"] is None else r["grade"], r["percent"]) for r in rows]
    assert keys == sorted(keys)
    assert rows == B.aggregate(list(reversed(cells)))


def test_reports(tmp_path):
    cells = [B.ExperimentCell(B.CellSpec("FD004", "self", 2, 90, r), 0, rmse=30.0 + r, score=100.0,
                              per_engine=[{"engine": 1, "prediction": 1.0, "truth": 2.0, "delta": -1.0,
                                           "score": 0.08}]) for r in range(2)]
    rows = B.aggregate(cells)
    B.write_table(rows, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == B.TABLE_FIELDS and len(table) == 1
    assert B.write_engine_rows(cells, tmp_path / "e.csv") == 2
    md = B.render_markdown(rows)
    assert "**30.50 ± 0.71**" in md and "FD004" in md


def test_export_embeddings(tiny, tmp_path):
    ds, _ = tiny
    f = FeatureExtractor(ExtractorConfig(15, 4), np.random.default_rng(0))
    n = B.export_embeddings(f, ds.validation, tmp_path / "a.csv")
    B.export_embeddings(f, ds.validation, tmp_path / "b.csv")
    assert n == sum(s.length - 14 for s in ds.validation)
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    header = text.splitlines()[0].split(",")
    assert header == ["engine", "end_index"] + [f"e{k}" for k in range(64)] + ["rul"]
    assert len(text.splitlines()) == n + 1
