from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rulssl import scenarios as sc
from rulssl.data import EngineSeries, SeriesSet


def make_train(lengths, start_id=1, channels=2):
    return SeriesSet("FD004", "train", [
        EngineSeries(start_id + k, np.arange(n * channels, dtype=float).reshape(n, channels))
        for k, n in enumerate(lengths)])


def test_scenario_validation():
    sc.DataScenario(2, 90)
    sc.DataScenario(100)  # grade ignored
    with pytest.raises(ValueError):
        sc.DataScenario(10, 100)
    with pytest.raises(ValueError):
        sc.DataScenario(10, None)
    with pytest.raises(ValueError):
        sc.DataScenario(15, 80)
    with pytest.raises(ValueError):
        sc.DataScenario(10, 85)
    sc.DataScenario(15, 85, strict=False)
    with pytest.raises(ValueError):
        sc.DataScenario(0, 50, strict=False)


def test_two_percent_of_199_engines_is_three():
    split = sc.apply_scenario(make_train([50] * 199), sc.DataScenario(2, 90, seed=1))
    assert len(split.labeled) == 3
    assert len(split.unlabeled) == 196


@pytest.mark.parametrize("n, percent, expected", [(199, 2, 3), (10, 2, 1), (100, 10, 10), (80, 40, 32), (7, 100, 7)])
def test_labeled_count(n, percent, expected):
    assert sc.labeled_count(n, percent) == expected


def test_truncation_to_grade():
    split = sc.apply_scenario(make_train([100, 100]), sc.DataScenario(2, 80, seed=0))
    (u,) = split.unlabeled.series
    assert u.length == 80
    src = make_train([100, 100]).by_id(u.engine_id)
    assert np.array_equal(u.readings, src.readings[:80])
    assert split.source_lengths[u.engine_id] == 100


def test_full_labeled_has_no_unlabeled():
    split = sc.apply_scenario(make_train([30, 40, 50]), sc.DataScenario(100))
    assert len(split.unlabeled) == 0 and len(split.labeled) == 3


def test_scenario_requires_train_role():
    val = SeriesSet("FD001", "validation", make_train([10, 10]).series)
    with pytest.raises(ValueError):
        sc.apply_scenario(val, sc.DataScenario(10, 40))


@given(st.integers(0, 10_000), st.sampled_from(sc.PERCENT_GRID), st.sampled_from(sc.GRADE_GRID),
       st.lists(st.integers(3, 300), min_size=2, max_size=40))
@settings(max_examples=100, deadline=None)
def test_scenario_properties(seed, percent, grade, lengths):
    train = make_train(lengths)
    scenario = sc.DataScenario(percent, grade, seed)
    split = sc.apply_scenario(train, scenario)
    again = sc.apply_scenario(train, scenario)
    assert split.manifest() == again.manifest()
    lab, unl = set(split.labeled.engine_ids), set(split.unlabeled.engine_ids)
    assert not lab & unl
    for s in split.labeled:
        assert s.length == train.by_id(s.engine_id).length
    for s in split.unlabeled:
        src = train.by_id(s.engine_id)
        assert s.length < src.length
        assert s.length >= grade / 100 * src.length - 1
        assert np.array_equal(s.readings, src.readings[: s.length])
    # every other grade sees the same labeled engines
    other = sc.apply_scenario(train, sc.DataScenario(percent, sc.GRADE_GRID[0], seed))
    assert other.labeled.engine_ids == split.labeled.engine_ids


def test_manifest(tmp_path):
    split = sc.apply_scenario(make_train([20, 30, 40]), sc.DataScenario(40, 60, seed=2))
    split.write_manifest(tmp_path / "m.json")
    import json
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["percent_labeled"] == 40 and doc["grade"] == 60
    assert doc["labeled_engines"] == split.labeled.engine_ids
    for eid, (kept, full) in doc["truncation"].items():
        assert kept < full


def test_relative_rul_target():
    assert sc.relative_rul_target(50, 75, 125) == 0.2
    assert sc.relative_rul_target(1, 126, 125) == 1.0
    with pytest.raises(ValueError):
        sc.relative_rul_target(5, 5)
    with pytest.raises(ValueError):
        sc.relative_rul_target(1, 127, 125)


def test_ineligible_engine():
    series = [EngineSeries(1, np.zeros((30, 2)))]
    with pytest.raises(ValueError, match="16 end indices"):
        sc.PairSampler(series, 15, 30)


def test_min_distance_respected():
    series = make_train([120, 90, 60]).series
    batch = sc.sample_pair_batch(series, 500, 10, 125, np.random.default_rng(0), w=15)
    gaps = batch.j - batch.i
    assert gaps.min() >= 10 and gaps.max() <= 125
    np.testing.assert_array_equal(batch.targets, gaps / 125)
    assert np.all((batch.targets > 0) & (batch.targets <= 1))


def test_pair_frames_match_indices():
    series = make_train([60, 45], channels=3).series
    w = 10
    batch = sc.sample_pair_batch(series, 50, 1, 125, np.random.default_rng(3), w)
    by_id = {s.engine_id: s for s in series}
    for a, p, e, i, j in zip(batch.anchors, batch.partners, batch.engines, batch.i, batch.j):
        r = by_id[int(e)].readings
        assert np.array_equal(a, r[i - w:i].T)
        assert np.array_equal(p, r[j - w:j].T)


def test_sampling_deterministic():
    series = make_train([80, 70]).series
    a = sc.sample_pair_batch(series, 64, 5, 125, np.random.default_rng(9), 20)
    b = sc.sample_pair_batch(series, 64, 5, 125, np.random.default_rng(9), 20)
    assert np.array_equal(a.anchors, b.anchors) and np.array_equal(a.targets, b.targets)


def test_gap_cap_by_rul_max():
    # long engine: gaps beyond rul_max must never appear
    series = make_train([400]).series
    batch = sc.sample_pair_batch(series, 2000, 1, 50, np.random.default_rng(1), 5)
    assert (batch.j - batch.i).max() <= 50


@pytest.mark.parametrize("length, w, min_d, rul_max", [(40, 5, 3, 125), (60, 15, 10, 125), (50, 1, 1, 20)])
def test_pairs_uniform_over_enumeration(length, w, min_d, rul_max):
    pairs = sc.enumerate_pairs(length, w, min_d, rul_max)
    sampler = sc.PairSampler([EngineSeries(1, np.zeros((length, 1)))], w, min_d, rul_max)
    n = 40 * len(pairs)
    batch = sampler.sample(n, np.random.default_rng(length))
    counts = Counter(zip(batch.i.tolist(), batch.j.tolist()))
    assert set(counts) <= set(pairs)
    observed = np.array([counts.get(p, 0) for p in pairs])
    assert stats.chisquare(observed).pvalue > 0.01


def test_engine_choice_uniform():
    series = make_train([100, 40, 25]).series
    sampler = sc.PairSampler(series, 10, 5, 125)
    batch = sampler.sample(6000, np.random.default_rng(4))
    observed = np.array([np.sum(batch.engines == e) for e in (1, 2, 3)])
    assert stats.chisquare(observed).pvalue > 0.01


def test_validation_pairs():
    val = make_train([70, 80], start_id=50).series
    a = sc.validation_pairs(val, 32, 5, seed=7, w=20)
    b = sc.validation_pairs(val, 32, 5, seed=7, w=20)
    assert np.array_equal(a.anchors, b.anchors)
    assert set(a.engines.tolist()) <= {50, 51}
    with pytest.raises(ValueError):
        sc.validation_pairs(val, 0, 5, w=20)


def test_unlabeled_only():
    split = sc.unlabeled_only(make_train([100, 50]), 80)
    assert len(split.labeled) == 0
    assert [s.length for s in split.unlabeled] == [80, 40]
