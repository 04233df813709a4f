"""CMAPSS parsing and preprocessing: channel selection, min-max scaling,
piece-wise linear RUL labels, sliding windows and the validation split."""
from __future__ import annotations

import io
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

logger = logging.getLogger(__name__)

N_COLUMNS = 26
N_SENSORS = 21
SELECTED_SENSORS = (2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21)
RUL_MAX = 125
WINDOW_SIZES = {"FD001": 30, "FD002": 20, "FD003": 30, "FD004": 15}
SUBSETS = tuple(WINDOW_SIZES)
ROLES = ("train", "test", "validation")
ARCHIVE_VERSION = 1
DATA_DIR_ENV = "RULSSL_DATA_DIR"


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class EngineSeries:
    engine_id: int
    readings: np.ndarray  # [T, C]
    op_settings: np.ndarray = field(default=None)  # [T, 3]

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.readings.ndim != 2 or len(self.readings) < 1:
            raise ValueError(f"engine {self.engine_id}: readings must be a non-empty [T, C] matrix")
        if self.op_settings is None:
            self.op_settings = np.zeros((len(self.readings), 3))
        self.op_settings = np.asarray(self.op_settings, dtype=np.float64)
        if len(self.op_settings) != len(self.readings):
            raise ValueError(f"engine {self.engine_id}: op settings and readings differ in length")

    @property
    def length(self) -> int:
        return len(self.readings)

    @property
    def n_channels(self) -> int:
        return self.readings.shape[1]

    def prefix(self, n: int) -> "EngineSeries":
        return EngineSeries(self.engine_id, self.readings[:n], self.op_settings[:n])


@dataclass
class SeriesSet:
    subset: str
    role: str
    series: List[EngineSeries]
    test_rul: Optional[Dict[int, float]] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        ids = [s.engine_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise ValueError("engine ids within a SeriesSet must be unique")
        if self.role == "test":
            missing = [i for i in ids if self.test_rul is None or i not in self.test_rul]
            if missing:
                raise ValueError(f"test set lacks true RUL for engines {missing}")

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def engine_ids(self) -> List[int]:
        return [s.engine_id for s in self.series]

    def by_id(self, engine_id: int) -> EngineSeries:
        for s in self.series:
            if s.engine_id == engine_id:
                return s
        raise KeyError(engine_id)


@dataclass
class Scaler:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if np.any(self.maximum < self.minimum):
            raise ValueError("scaler maximum below minimum")

    @property
    def constant(self) -> np.ndarray:
        return self.maximum == self.minimum

    def transform(self, values: np.ndarray) -> np.ndarray:
        span = self.maximum - self.minimum
        safe = np.where(self.constant, 1.0, span)
        out = (values - self.minimum) / safe
        return np.where(self.constant, 0.0, out)


@dataclass
class Frame:
    engine_id: int
    end: int  # 1-based index of the last time step in the window
    values: np.ndarray  # [w, C]
    label: Optional[float] = None


# ---------------------------------------------------------------------------
# parsing


def parse_cmapss(stream: TextIO | str, subset: str = "FD001", role: str = "train",
                 test_rul: Optional[Dict[int, float]] = None) -> SeriesSet:
    """Parse the whitespace-separated CMAPSS layout (id, cycle, 3 settings, 21 sensors)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows: Dict[int, List[Tuple[int, np.ndarray]]] = {}
    order: List[int] = []
    for lineno, line in enumerate(stream, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != N_COLUMNS:
            raise ParseError(f"expected {N_COLUMNS} columns, found {len(parts)}", lineno)
        try:
            values = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        engine, cycle = int(values[0]), int(values[1])
        if engine not in rows:
            rows[engine] = []
            order.append(engine)
        expected = len(rows[engine]) + 1
        if cycle != expected:
            raise ParseError(f"engine {engine}: cycle {cycle} follows {expected - 1}", lineno)
        rows[engine].append((cycle, values))

    series = []
    for engine in order:
        block = np.stack([v for _, v in rows[engine]])
        series.append(EngineSeries(engine, block[:, 5:], block[:, 2:5]))
    return SeriesSet(subset, role, series, test_rul)


def parse_rul_file(stream: TextIO | str, engine_ids: Sequence[int]) -> Dict[int, float]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    values = [float(line.split()[0]) for line in stream if line.strip()]
    if len(values) != len(engine_ids):
        raise ParseError(f"RUL file has {len(values)} entries for {len(engine_ids)} test engines")
    return dict(zip(engine_ids, values))


def serialize_cmapss(series_set: SeriesSet) -> str:
    """Inverse of :func:`parse_cmapss` (needs all 21 sensor channels)."""
    lines = []
    for s in series_set.series:
        if s.n_channels != N_SENSORS:
            raise ValueError("serialization needs the raw 21-sensor layout")
        for t in range(s.length):
            fields = [str(s.engine_id), str(t + 1)]
            fields += [repr(float(v)) for v in s.op_settings[t]]
            fields += [repr(float(v)) for v in s.readings[t]]
            lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def load_subset(data_dir: str | os.PathLike | None, subset: str) -> Tuple[SeriesSet, SeriesSet]:
    """Read train_/test_/RUL_ files for one subset."""
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV)
        if data_dir is None:
            raise ValueError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    root = Path(data_dir)
    with open(root / f"train_{subset}.txt") as fh:
        train = parse_cmapss(fh, subset, "train")
    with open(root / f"test_{subset}.txt") as fh:
        test_raw = parse_cmapss(fh, subset, "train")
    with open(root / f"RUL_{subset}.txt") as fh:
        ruls = parse_rul_file(fh, test_raw.engine_ids)
    return train, SeriesSet(subset, "test", test_raw.series, ruls)


# ---------------------------------------------------------------------------
# preprocessing


def select_channels(series_set: SeriesSet, sensors: Sequence[int] = SELECTED_SENSORS) -> SeriesSet:
    cols = [s - 1 for s in sensors]
    out = []
    for s in series_set.series:
        if s.n_channels < N_SENSORS:
            raise ValueError(f"engine {s.engine_id} has {s.n_channels} channels, need {N_SENSORS}")
        out.append(EngineSeries(s.engine_id, s.readings[:, cols].copy(), s.op_settings))
    return replace(series_set, series=out)


def fit_scaler(train: SeriesSet) -> Scaler:
    if train.role != "train":
        raise ValueError(f"scaler must be fitted on a training set, got role {train.role!r}")
    stacked = np.concatenate([s.readings for s in train.series])
    scaler = Scaler(stacked.min(axis=0), stacked.max(axis=0))
    if scaler.constant.any():
        warnings.warn(f"constant channels {np.flatnonzero(scaler.constant).tolist()} scaled to 0",
                      stacklevel=2)
    return scaler


def apply_scaler(series_set: SeriesSet, scaler: Scaler) -> SeriesSet:
    out = [EngineSeries(s.engine_id, scaler.transform(s.readings), s.op_settings)
           for s in series_set.series]
    return replace(series_set, series=out)


def piecewise_rul_labels(series: EngineSeries | int, rul_max: float = RUL_MAX) -> np.ndarray:
    """Label for steps i = 1..|k|: min(rul_max, |k| - i)."""
    length = series if isinstance(series, int) else series.length
    steps = np.arange(1, length + 1)
    return np.minimum(rul_max, length - steps).astype(np.float64)


def window_ends(length: int, w: int) -> np.ndarray:
    """1-based end indices of all full windows."""
    return np.arange(w, length + 1)


def make_windows(series: EngineSeries, w: int, labels: Optional[np.ndarray] = None,
                 step: int = 1) -> List[Frame]:
    if series.length < w:
        warnings.warn(f"engine {series.engine_id}: length {series.length} < window {w}, skipped",
                      stacklevel=2)
        return []
    frames = []
    for end in window_ends(series.length, w)[::step]:
        label = None if labels is None else float(labels[end - 1])
        frames.append(Frame(series.engine_id, int(end), series.readings[end - w:end], label))
    return frames


def frame_array(series: EngineSeries, w: int) -> np.ndarray:
    """All windows of a series as a [n, C, w] array (channel-major, network layout)."""
    if series.length < w:
        return np.empty((0, series.n_channels, w))
    view = np.lib.stride_tricks.sliding_window_view(series.readings, w, axis=0)
    return np.ascontiguousarray(view)  # [n, C, w]


def labeled_arrays(series_set: SeriesSet | Iterable[EngineSeries], w: int,
                   rul_max: float = RUL_MAX) -> Tuple[np.ndarray, np.ndarray]:
    """Stack run-to-failure series into network inputs [n, C, w] and labels [n]."""
    xs, ys = [], []
    for s in series_set:
        if s.length < w:
            warnings.warn(f"engine {s.engine_id}: length {s.length} < window {w}, skipped",
                          stacklevel=2)
            continue
        xs.append(frame_array(s, w))
        ys.append(piecewise_rul_labels(s, rul_max)[w - 1:])
    if not xs:
        return np.empty((0, 0, w)), np.empty(0)
    return np.concatenate(xs), np.concatenate(ys)


def unlabeled_array(series: Iterable[EngineSeries], w: int) -> np.ndarray:
    xs = [frame_array(s, w) for s in series if s.length >= w]
    return np.concatenate(xs) if xs else np.empty((0, 0, w))


def last_windows(test: SeriesSet, w: int, rul_max: float = RUL_MAX) -> Tuple[List[int], np.ndarray, np.ndarray]:
    """Final window of each test engine with its (capped) true RUL."""
    ids, xs, ys = [], [], []
    for s in test.series:
        if s.length < w:
            warnings.warn(f"test engine {s.engine_id} shorter than window {w}; left-padded by edge value",
                          stacklevel=2)
            pad = np.repeat(s.readings[:1], w - s.length, axis=0)
            window = np.concatenate([pad, s.readings])
        else:
            window = s.readings[-w:]
        ids.append(s.engine_id)
        xs.append(window.T)
        ys.append(min(rul_max, test.test_rul[s.engine_id]))
    return ids, np.stack(xs), np.asarray(ys, dtype=np.float64)


def split_validation(train: SeriesSet, fraction: float = 0.2, seed: int = 0) -> Tuple[SeriesSet, SeriesSet]:
    """Engine-level split; validation gets floor(n * fraction) whole series."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(train)
    if n < 2:
        raise ValueError("need at least two engines to split off a validation set")
    n_val = max(1, int(np.floor(n * fraction)))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(train.engine_ids, size=n_val, replace=False).tolist())
    keep = [s for s in train.series if s.engine_id not in chosen]
    val = [s for s in train.series if s.engine_id in chosen]
    return replace(train, series=keep), SeriesSet(train.subset, "validation", val)


# ---------------------------------------------------------------------------
# prepared dataset archive


@dataclass
class PreparedDataset:
    """Scaled, channel-selected splits of one subset plus how they were made."""

    subset: str
    window: int
    scaler: Scaler
    train: SeriesSet
    validation: SeriesSet
    test: SeriesSet
    rul_max: float = RUL_MAX
    split_seed: int = 0

    def to_json(self) -> dict:
        def pack(ss: SeriesSet) -> list:
            return [{"engine": s.engine_id, "readings": s.readings.tolist()} for s in ss.series]

        return {
            "schema_version": ARCHIVE_VERSION,
            "subset": self.subset,
            "window": self.window,
            "rul_max": self.rul_max,
            "split_seed": self.split_seed,
            "channels": list(SELECTED_SENSORS),
            "scaler": {"min": self.scaler.minimum.tolist(), "max": self.scaler.maximum.tolist()},
            "train": pack(self.train),
            "validation": pack(self.validation),
            "test": pack(self.test),
            "test_rul": {str(k): v for k, v in self.test.test_rul.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PreparedDataset":
        if doc.get("schema_version") != ARCHIVE_VERSION:
            raise ValueError(f"unsupported dataset archive version {doc.get('schema_version')!r}")
        subset = doc["subset"]

        def unpack(entries, role, ruls=None) -> SeriesSet:
            return SeriesSet(subset, role, [EngineSeries(e["engine"], e["readings"]) for e in entries], ruls)

        ruls = {int(k): float(v) for k, v in doc["test_rul"].items()}
        return cls(
            subset=subset,
            window=int(doc["window"]),
            scaler=Scaler(doc["scaler"]["min"], doc["scaler"]["max"]),
            train=unpack(doc["train"], "train"),
            validation=unpack(doc["validation"], "validation"),
            test=unpack(doc["test"], "test", ruls),
            rul_max=float(doc["rul_max"]),
            split_seed=int(doc["split_seed"]),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PreparedDataset":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def prepare(train_raw: SeriesSet, test_raw: SeriesSet, window: int | None = None,
            val_fraction: float = 0.2, seed: int = 0, rul_max: float = RUL_MAX) -> PreparedDataset:
    """Select channels, split off validation engines, fit the scaler on the rest, scale all."""
    subset = train_raw.subset
    if window is None:
        window = WINDOW_SIZES[subset]
    train = select_channels(train_raw)
    test = select_channels(test_raw)
    train, validation = split_validation(train, val_fraction, seed)
    scaler = fit_scaler(train)
    return PreparedDataset(
        subset=subset,
        window=window,
        scaler=scaler,
        train=apply_scaler(train, scaler),
        validation=apply_scaler(validation, scaler),
        test=apply_scaler(test, scaler),
        rul_max=rul_max,
        split_seed=seed,
    )
