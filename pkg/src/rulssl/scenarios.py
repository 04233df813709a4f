"""Data scenarios (labeled share x grade of degradation) and siamese pair sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import RUL_MAX, EngineSeries, SeriesSet, frame_array

PERCENT_GRID = (2, 10, 20, 40, 100)
GRADE_GRID = (40, 60, 70, 80, 90)


@dataclass(frozen=True)
class DataScenario:
    percent: float
    grade: Optional[float] = None
    seed: int = 0
    strict: bool = True

    def __post_init__(self):
        if not 0 < self.percent <= 100:
            raise ValueError(f"percent labeled must be in (0, 100], got {self.percent}")
        if self.strict and self.percent not in PERCENT_GRID:
            raise ValueError(f"percent labeled {self.percent} not in {PERCENT_GRID}")
        if self.percent == 100:
            return
        if self.grade is None:
            raise ValueError("grade of degradation required below 100% labeled")
        if self.grade >= 100:
            raise ValueError("a grade of degradation of 100% is not a valid scenario")
        if not 0 < self.grade < 100:
            raise ValueError(f"grade of degradation must be in (0, 100), got {self.grade}")
        if self.strict and self.grade not in GRADE_GRID:
            raise ValueError(f"grade {self.grade} not in {GRADE_GRID}")


@dataclass
class ScenarioSplit:
    labeled: SeriesSet
    unlabeled: SeriesSet
    scenario: DataScenario
    source_lengths: Dict[int, int] = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "subset": self.labeled.subset,
            "percent_labeled": self.scenario.percent,
            "grade": self.scenario.grade,
            "seed": self.scenario.seed,
            "labeled_engines": self.labeled.engine_ids,
            "unlabeled_engines": self.unlabeled.engine_ids,
            "truncation": {str(s.engine_id): [s.length, self.source_lengths[s.engine_id]]
                           for s in self.unlabeled.series},
        }

    def write_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2)

    @property
    def all_series(self) -> List[EngineSeries]:
        return list(self.labeled.series) + list(self.unlabeled.series)


def labeled_count(n_engines: int, percent: float) -> int:
    return min(n_engines, max(1, int(np.floor(percent * n_engines / 100 + 1e-9))))


def select_labeled(train: SeriesSet, percent: float, seed: int) -> List[int]:
    """Engine ids of the failed (labeled) engines; depends only on (ids, percent, seed)."""
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    ids = sorted(train.engine_ids)
    n_lab = labeled_count(n, percent)
    if n_lab == n:
        return ids
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(ids, size=n_lab, replace=False).tolist())


def apply_scenario(train: SeriesSet, scenario: DataScenario) -> ScenarioSplit:
    """Pick the failed (labeled) engines and truncate the rest to the grade of degradation.

    Only ``(train, percent, seed)`` decides the labeled engines, so every method and
    every grade sees the same labeled data.
    """
    if train.role != "train":
        raise ValueError(f"scenarios apply to training data, got role {train.role!r}")
    chosen = set(select_labeled(train, scenario.percent, scenario.seed))

    labeled, unlabeled, lengths = [], [], {}
    for s in train.series:
        if s.engine_id in chosen:
            labeled.append(s)
            continue
        keep = int(np.floor(scenario.grade * s.length / 100 + 1e-9))
        keep = min(keep, s.length - 1)
        if keep < 1:
            continue
        unlabeled.append(s.prefix(keep))
        lengths[s.engine_id] = s.length
    return ScenarioSplit(
        SeriesSet(train.subset, "train", labeled),
        SeriesSet(train.subset, "train", unlabeled),
        scenario,
        lengths,
    )


def relative_rul_target(i: int, j: int, rul_max: float = RUL_MAX) -> float:
    if not i < j:
        raise ValueError(f"relative RUL needs i < j, got i={i}, j={j}")
    if j - i > rul_max:
        raise ValueError(f"pair distance {j - i} exceeds RUL_max={rul_max}")
    return (j - i) / rul_max


# ---------------------------------------------------------------------------
# pair sampling


@dataclass
class PairBatch:
    anchors: np.ndarray  # [B, C, w]
    partners: np.ndarray  # [B, C, w]
    targets: np.ndarray  # [B]
    engines: np.ndarray
    i: np.ndarray
    j: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def max_gap(n_ends: int, rul_max: float) -> int:
    return int(min(n_ends - 1, np.floor(rul_max)))


def gap_weights(n_ends: int, min_distance: int, rul_max: float) -> Tuple[np.ndarray, np.ndarray]:
    """Admissible gaps d and how many (i, j) pairs have each gap."""
    hi = max_gap(n_ends, rul_max)
    gaps = np.arange(min_distance, hi + 1)
    return gaps, (n_ends - gaps).astype(np.float64)


def enumerate_pairs(length: int, w: int, min_distance: int, rul_max: float = RUL_MAX) -> List[Tuple[int, int]]:
    """All admissible (i, j) end-index pairs of one engine, by brute force."""
    ends = range(w, length + 1)
    return [(i, j) for i in ends for j in ends if i < j and min_distance <= j - i <= rul_max]


class PairSampler:
    """Samples within-engine frame pairs uniformly over the admissible (i, j) set."""

    def __init__(self, series: Sequence[EngineSeries], w: int, min_distance: int,
                 rul_max: float = RUL_MAX):
        if min_distance < 1:
            raise ValueError("minimum distance must be at least 1")
        self.w = w
        self.min_distance = min_distance
        self.rul_max = rul_max
        self.frames: List[np.ndarray] = []
        self.engine_ids: List[int] = []
        self.gaps: List[np.ndarray] = []
        self.gap_probs: List[np.ndarray] = []
        usable = []
        for s in series:
            n_ends = s.length - w + 1
            usable.append(max(n_ends, 0))
            if n_ends < min_distance + 1 or min_distance > rul_max:
                continue
            gaps, weights = gap_weights(n_ends, min_distance, rul_max)
            self.frames.append(frame_array(s, w))
            self.engine_ids.append(s.engine_id)
            self.gaps.append(gaps)
            self.gap_probs.append(weights / weights.sum())
        if not self.frames:
            longest = max(usable, default=0)
            raise ValueError(
                f"no engine has enough frame end-indices for minimum distance {min_distance} "
                f"(longest usable: {longest} end indices, need {min_distance + 1})")

    def sample(self, batch_size: int, rng: np.random.Generator) -> PairBatch:
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        which = rng.integers(len(self.frames), size=batch_size)
        anchors, partners, targets, ii, jj = [], [], [], [], []
        for e in which:
            d = int(rng.choice(self.gaps[e], p=self.gap_probs[e]))
            n_ends = len(self.frames[e])
            start = int(rng.integers(n_ends - d))  # 0-based offset of i among end indices
            i = start + self.w
            j = i + d
            anchors.append(self.frames[e][start])
            partners.append(self.frames[e][start + d])
            targets.append(relative_rul_target(i, j, self.rul_max))
            ii.append(i)
            jj.append(j)
        return PairBatch(
            np.stack(anchors), np.stack(partners), np.asarray(targets),
            np.asarray([self.engine_ids[e] for e in which]), np.asarray(ii), np.asarray(jj))


def sample_pair_batch(series: Sequence[EngineSeries], batch_size: int, min_distance: int,
                      rul_max: float, rng: np.random.Generator, w: int) -> PairBatch:
    return PairSampler(series, w, min_distance, rul_max).sample(batch_size, rng)


def validation_pairs(validation: SeriesSet | Sequence[EngineSeries], count: int, min_distance: int,
                     rul_max: float = RUL_MAX, seed: int = 0, w: int = 30) -> PairBatch:
    """A frozen pair set for monitoring pre-training; same seed, same pairs."""
    if count < 1:
        raise ValueError("validation pair count must be positive")
    return sample_pair_batch(list(validation), count, min_distance, rul_max,
                             np.random.default_rng(seed), w)


def unlabeled_only(train: SeriesSet, grade: float) -> ScenarioSplit:
    """Every engine truncated to ``grade`` percent and treated as unlabeled (label-free tuning)."""
    scenario = DataScenario(100, None, 0, strict=False)
    unlabeled, lengths = [], {}
    for s in train.series:
        keep = int(np.floor(grade * s.length / 100 + 1e-9))
        if keep >= 1:
            unlabeled.append(s.prefix(min(keep, s.length - 1)))
            lengths[s.engine_id] = s.length
    return ScenarioSplit(SeriesSet(train.subset, "train", []), SeriesSet(train.subset, "train", unlabeled),
                         scenario, lengths)
