"""Synthetic run-to-failure corpora in the CMAPSS text layout.

Each engine degrades linearly once it is within ``onset`` cycles of failure; the
14 informative sensors respond monotonically with per-engine offsets and gains,
the other 7 carry noise only. Optional operating regimes, drawn per time step,
add large sensor offsets the way the multi-condition subsets do.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .data import N_SENSORS, SELECTED_SENSORS, EngineSeries, SeriesSet, serialize_cmapss


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 60
    n_test: int = 20
    min_length: int = 128
    max_length: int = 200
    onset: float = 125.0
    noise: float = 0.05
    engine_offset: float = 0.4
    engine_gain: float = 0.25
    min_test_length: int = 30
    conditions: int = 1
    condition_scale: float = 0.0


def _engine(rng: np.random.Generator, engine_id: int, length: int, spec: CorpusSpec,
            slopes: np.ndarray, base: np.ndarray, regimes: np.ndarray) -> EngineSeries:
    rul = length - np.arange(1, length + 1)
    health = np.clip((spec.onset - rul) / spec.onset, 0.0, 1.0)
    readings = np.tile(base, (length, 1)).astype(np.float64)
    informative = [s - 1 for s in SELECTED_SENSORS]
    offset = rng.normal(0.0, spec.engine_offset, size=len(informative))
    gain = 1.0 + rng.normal(0.0, spec.engine_gain)
    readings[:, informative] += offset + gain * np.outer(health, slopes)
    readings += rng.normal(0.0, spec.noise, size=readings.shape) * np.abs(slopes).mean()
    regime = rng.integers(spec.conditions, size=length)
    readings += regimes[regime]
    settings = regime[:, None] * np.array([10.0, 0.1, 20.0]) + rng.normal(0.0, 0.002, size=(length, 3))
    return EngineSeries(engine_id, readings, settings)


def generate_corpus(spec: CorpusSpec = CorpusSpec(), seed: int = 0, subset: str = "FD001") -> Tuple[SeriesSet, SeriesSet]:
    """Raw (21-sensor) train and test sets; test engines stop before failure."""
    rng = np.random.default_rng(seed)
    slopes = rng.uniform(1.0, 3.0, size=len(SELECTED_SENSORS)) * rng.choice([-1.0, 1.0], size=len(SELECTED_SENSORS))
    base = rng.uniform(5.0, 50.0, size=N_SENSORS)
    # operating conditions shift every sensor by a regime-specific offset
    regimes = rng.normal(0.0, spec.condition_scale * np.abs(slopes).mean(), size=(spec.conditions, N_SENSORS))

    train = []
    for e in range(1, spec.n_train + 1):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        train.append(_engine(rng, e, length, spec, slopes, base, regimes))

    test, ruls = [], {}
    for e in range(1, spec.n_test + 1):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        full = _engine(rng, e, length, spec, slopes, base, regimes)
        cut = int(rng.integers(spec.min_test_length, length))
        test.append(full.prefix(cut))
        ruls[e] = float(length - cut)
    return SeriesSet(subset, "train", train), SeriesSet(subset, "test", test, ruls)


def _rounded(ss: SeriesSet, decimals: int) -> SeriesSet:
    series = [EngineSeries(s.engine_id, np.round(s.readings, decimals), np.round(s.op_settings, decimals))
              for s in ss.series]
    return SeriesSet(ss.subset, ss.role, series, ss.test_rul)


def write_corpus(directory, train: SeriesSet, test: SeriesSet, decimals: Optional[int] = None) -> Path:
    """Write train_/test_/RUL_ files named after ``train.subset``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    if decimals is not None:
        train, test = _rounded(train, decimals), _rounded(test, decimals)
    subset = train.subset
    (root / f"train_{subset}.txt").write_text(serialize_cmapss(train))
    (root / f"test_{subset}.txt").write_text(serialize_cmapss(test))
    (root / f"RUL_{subset}.txt").write_text("".join(f"{int(test.test_rul[i])}\n" for i in test.engine_ids))
    return root
