"""Metrics, the replicated experiment grid, random search and reporting."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import trainers
from .data import RUL_MAX, PreparedDataset, SeriesSet, frame_array, last_windows, piecewise_rul_labels
from .models import ExtractorConfig, FeatureExtractor, RulNetwork
from .scenarios import GRADE_GRID, PERCENT_GRID, DataScenario, ScenarioSplit, apply_scenario, unlabeled_only
from .trainers import TrainConfig

logger = logging.getLogger(__name__)

METHODS = ("none", "ae", "rbm", "self")
PRETRAIN_METHODS = ("ae", "rbm", "self")
REPLICATIONS = 10


# ---------------------------------------------------------------------------
# metrics


def _deltas(predictions, truths) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} truths")
    if len(p) == 0:
        raise ValueError("metrics need at least one sample")
    return p - t


def rmse_metric(predictions, truths) -> float:
    d = _deltas(predictions, truths)
    return float(np.sqrt(np.mean(d * d)))


def rul_score(predictions, truths) -> float:
    """Sum of exp(-d/13) - 1 (early) and exp(d/10) - 1 (late) with d = predicted - true."""
    d = _deltas(predictions, truths)
    s = np.where(d < 0, np.exp(-d / 13.0) - 1.0, np.exp(d / 10.0) - 1.0)
    return float(s.sum())


@dataclass
class MetricReport:
    rmse: float
    score: float
    deltas: List[float]
    engines: List[int]
    predictions: List[float]
    truths: List[float]

    @property
    def count(self) -> int:
        return len(self.deltas)

    @classmethod
    def evaluate(cls, engines: Sequence[int], predictions, truths) -> "MetricReport":
        d = _deltas(predictions, truths)
        return cls(rmse_metric(predictions, truths), rul_score(predictions, truths), d.tolist(),
                   [int(e) for e in engines], np.asarray(predictions, float).ravel().tolist(),
                   np.asarray(truths, float).ravel().tolist())

    def rows(self) -> List[dict]:
        out = []
        for e, p, t, d in zip(self.engines, self.predictions, self.truths, self.deltas):
            s = math.exp(-d / 13.0) - 1.0 if d < 0 else math.exp(d / 10.0) - 1.0
            out.append({"engine": e, "prediction": p, "truth": t, "delta": d, "score": s})
        return out


def evaluate_test(network: RulNetwork, test: SeriesSet, window: int, rul_max: float = RUL_MAX) -> MetricReport:
    """Score the final window of every test engine against its capped true RUL."""
    ids, x, y = last_windows(test, window, rul_max)
    return MetricReport.evaluate(ids, network.predict(x), y)


# ---------------------------------------------------------------------------
# search spaces


@dataclass(frozen=True)
class QLogUniform:
    low: float
    high: float
    q: float

    def grid_value(self, k: int) -> float:
        return round(k * self.q, 12)

    def sample(self, rng: np.random.Generator) -> float:
        x = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
        k = round(x / self.q)
        k = min(max(k, math.ceil(self.low / self.q - 1e-9)), math.floor(self.high / self.q + 1e-9))
        return self.grid_value(k)


@dataclass(frozen=True)
class QUniform:
    low: float
    high: float
    q: float

    def grid_value(self, k: int) -> float:
        return round(k * self.q, 12)

    def sample(self, rng: np.random.Generator) -> float:
        x = rng.uniform(self.low, self.high)
        k = round(x / self.q)
        k = min(max(k, math.ceil(self.low / self.q - 1e-9)), math.floor(self.high / self.q + 1e-9))
        return self.grid_value(k)


@dataclass(frozen=True)
class Choice:
    options: Tuple

    def sample(self, rng: np.random.Generator):
        return self.options[int(rng.integers(len(self.options)))]


SearchSpace = Mapping[str, object]

SUPERVISED_SPACE: Dict[str, object] = {
    "lr": QLogUniform(1e-4, 1e-1, 5e-5),
    "dropout": QUniform(0.0, 0.5, 0.1),
    "batch_size": Choice((64, 128, 256, 512)),
}
PRETRAIN_SPACE: Dict[str, object] = {
    **SUPERVISED_SPACE,
    "min_distance": Choice((1, 10, 15, 30)),
}


def sample_config(space: SearchSpace, rng: np.random.Generator) -> dict:
    return {name: dist.sample(rng) for name, dist in space.items()}


def random_search(space: SearchSpace, trials: int, objective: Callable[[dict], float],
                  seed: int = 0, log_path=None) -> Tuple[dict, List[dict]]:
    """Sample ``trials`` configurations and return the one with the lowest objective."""
    if trials < 1:
        raise ValueError("random search needs at least one trial")
    rng = np.random.default_rng(seed)
    log: List[dict] = []
    best, best_value = None, math.inf
    sink = open(log_path, "w") if log_path else None
    try:
        for trial in range(trials):
            params = sample_config(space, rng)
            try:
                value = float(objective(params))
                error = None
            except trainers.TrainingDiverged as exc:
                value, error = math.inf, str(exc)
            row = {"trial": trial, "params": params, "objective": value, "error": error}
            log.append(row)
            if sink:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
            if value < best_value:
                best, best_value = params, value
    finally:
        if sink:
            sink.close()
    if best is None:
        best = log[0]["params"]
    return best, log


def supervised_objective(dataset: PreparedDataset, model_config: ExtractorConfig, min_epochs: int,
                         patience: int = trainers.DEFAULT_PATIENCE, max_epochs: Optional[int] = None,
                         seed: int = 0) -> Callable[[dict], float]:
    """Validation RMSE of a network trained on all labeled training data."""

    def objective(params: dict) -> float:
        cfg = TrainConfig(min_epochs=min_epochs, patience=patience, max_epochs=max_epochs, seed=seed,
                          **{k: params[k] for k in ("lr", "dropout", "batch_size")})
        return trainers.finetune_supervised(None, dataset.train, dataset.validation, model_config, cfg).best_value

    return objective


def pretrain_objective(method: str, dataset: PreparedDataset, model_config: ExtractorConfig, min_epochs: int,
                       grade: float = 80, replications: int = 5, patience: int = trainers.DEFAULT_PATIENCE,
                       max_epochs: Optional[int] = None, seed: int = 0) -> Callable[[dict], float]:
    """Mean best validation loss of ``replications`` label-free pre-training runs."""
    split = unlabeled_only(dataset.train, grade)

    def objective(params: dict) -> float:
        values = []
        for rep in range(replications):
            cfg = TrainConfig(min_epochs=min_epochs, patience=patience, max_epochs=max_epochs,
                              seed=derive_seed(seed, rep), **params)
            values.append(trainers.pretrain(method, split, dataset.validation, model_config, cfg,
                                            dataset.rul_max).best_value)
        return float(np.mean(values))

    return objective


# ---------------------------------------------------------------------------
# experiment grid


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class CellSpec:
    subset: str
    method: str
    percent: float
    grade: Optional[float]
    replication: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method != "none" and self.grade is None and self.percent != 100:
            raise ValueError("pre-training cells need a grade of degradation")

    @property
    def key(self) -> str:
        grade = "-" if self.grade is None else f"{self.grade:g}"
        return f"{self.subset}/{self.method}/{self.percent:g}/{grade}/{self.replication}"

    @property
    def split_seed(self) -> int:
        # grade is left out on purpose: the labeled engines must match across grades and the baseline
        return derive_seed(self.subset, f"{self.percent:g}", self.replication, "split")

    @property
    def train_seed(self) -> int:
        return derive_seed(self.subset, f"{self.percent:g}", self.replication, "train")


@dataclass
class ExperimentCell:
    spec: CellSpec
    seed: int
    rmse: Optional[float] = None
    score: Optional[float] = None
    per_engine: List[dict] = field(default_factory=list)
    labeled_engines: List[int] = field(default_factory=list)
    pretrain_best: Optional[float] = None
    finetune_best: Optional[float] = None
    history: Optional[str] = None
    error: Optional[str] = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["spec"] = asdict(self.spec)
        doc["key"] = self.spec.key
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentCell":
        doc = dict(doc)
        doc.pop("key", None)
        doc["spec"] = CellSpec(**doc["spec"])
        return cls(**doc)


@dataclass
class GridSettings:
    """Everything besides the cell identity that a run needs."""

    filters: int = 32
    pretrain_epochs: int = trainers.PRETRAIN_MIN_EPOCHS
    finetune_epochs: int = trainers.FINETUNE_MIN_EPOCHS
    rbm_epochs: int = trainers.RBM_EPOCHS
    patience: int = trainers.DEFAULT_PATIENCE
    max_epochs: Optional[int] = None
    overrides: Dict[str, dict] = field(default_factory=dict)
    history_dir: Optional[str] = None

    def stage_config(self, stage: str, subset: str, seed: int) -> TrainConfig:
        if stage == "rbm":
            epochs = dict(min_epochs=self.rbm_epochs, max_epochs=self.rbm_epochs)
        else:
            base = self.finetune_epochs if stage == "supervised" else self.pretrain_epochs
            cap = None if self.max_epochs is None else max(self.max_epochs, base)
            epochs = dict(min_epochs=base, max_epochs=cap, patience=self.patience)
        return trainers.default_config(stage, subset, seed=seed, **epochs, **self.overrides.get(stage, {}))


def default_grid(subsets: Sequence[str] = ("FD001", "FD002", "FD003", "FD004"),
                 replications: int = REPLICATIONS, percents: Sequence[float] = PERCENT_GRID,
                 grades: Sequence[float] = GRADE_GRID, methods: Sequence[str] = PRETRAIN_METHODS) -> List[CellSpec]:
    cells = []
    for subset in subsets:
        for percent in percents:
            for rep in range(replications):
                cells.append(CellSpec(subset, "none", percent, None, rep))
            for grade in grades:
                for method in methods:
                    for rep in range(replications):
                        cells.append(CellSpec(subset, method, percent, grade, rep))
    return cells


def cell_split(spec: CellSpec, train: SeriesSet) -> ScenarioSplit:
    grade = spec.grade if spec.percent < 100 else None
    if spec.method == "none" and grade is None and spec.percent < 100:
        # baseline: labeled engines only; use any grade, the unlabeled part is ignored
        grade = GRADE_GRID[-1]
    return apply_scenario(train, DataScenario(spec.percent, grade, spec.split_seed, strict=False))


def run_cell(spec: CellSpec, dataset: PreparedDataset, settings: GridSettings = GridSettings()) -> ExperimentCell:
    """Pre-train (unless baseline), fine-tune on the labeled engines and score the test set."""
    cell = ExperimentCell(spec, spec.train_seed)
    start = time.time()
    try:
        split = cell_split(spec, dataset.train)
        cell.labeled_engines = split.labeled.engine_ids
        model_config = ExtractorConfig(window=dataset.window, filters=settings.filters)
        hist_pre = hist_ft = None
        if settings.history_dir:
            base = Path(settings.history_dir) / spec.key.replace("/", "_")
            hist_pre, hist_ft = f"{base}_pretrain.jsonl", f"{base}_finetune.jsonl"
            cell.history = hist_ft
        init = None
        if spec.method != "none":
            pcfg = settings.stage_config(spec.method, spec.subset, cell.seed)
            init = trainers.pretrain(spec.method, split, dataset.validation, model_config, pcfg,
                                     dataset.rul_max, history_path=hist_pre)
            cell.pretrain_best = init.best_value
        fcfg = settings.stage_config("supervised", spec.subset, cell.seed)
        result = trainers.finetune_supervised(init, split.labeled, dataset.validation, model_config, fcfg,
                                              rul_max=dataset.rul_max, history_path=hist_ft)
        cell.finetune_best = result.best_value
        report = evaluate_test(result.network, dataset.test, dataset.window, dataset.rul_max)
        cell.rmse, cell.score, cell.per_engine = report.rmse, report.score, report.rows()
    except Exception as exc:  # recorded, the grid goes on
        cell.error = f"{type(exc).__name__}: {exc}"
        logger.warning("cell %s failed: %s\n%s", spec.key, cell.error, traceback.format_exc())
    cell.seconds = time.time() - start
    return cell


def load_cells(path) -> List[ExperimentCell]:
    path = Path(path)
    if path.is_dir():
        path = path / "cells.jsonl"
    if not path.exists():
        return []
    with open(path) as fh:
        return [ExperimentCell.from_json(json.loads(line)) for line in fh if line.strip()]


def _run_job(args) -> dict:
    spec, dataset_path, settings = args
    return run_cell(spec, PreparedDataset.load(dataset_path), settings).to_json()


def run_grid(cells: Sequence[CellSpec], datasets: Mapping[str, str], out_dir, settings: GridSettings = GridSettings(),
             workers: int = 1) -> List[ExperimentCell]:
    """Run every cell not already recorded in ``out_dir/cells.jsonl``.

    ``datasets`` maps subset -> prepared archive path. Only this process writes the
    results file, so workers never collide.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "cells.jsonl"
    done = {c.spec.key for c in load_cells(results_path)}
    todo = [c for c in cells if c.key not in done]
    logger.info("%d cells total, %d already done, %d to run", len(cells), len(done), len(todo))
    jobs = [(spec, str(datasets[spec.subset]), settings) for spec in todo]
    with open(results_path, "a") as sink:
        if workers <= 1:
            for job in jobs:
                sink.write(json.dumps(_run_job(job)) + "\n")
                sink.flush()
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for fut in as_completed([pool.submit(_run_job, job) for job in jobs]):
                    sink.write(json.dumps(fut.result()) + "\n")
                    sink.flush()
    wanted = {c.key for c in cells}
    return [c for c in load_cells(results_path) if c.spec.key in wanted]


# ---------------------------------------------------------------------------
# aggregation and reporting


def _stats(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {
        "n": n,
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if n > 1 else 0.0,
        "median": float(med),
        "iqr": float(q3 - q1),
        "single": n == 1,
    }


def _method_rank(method: str) -> int:
    return METHODS.index(method) if method in METHODS else len(METHODS)


def aggregate(cells: Iterable[ExperimentCell]) -> List[dict]:
    """Mean/std (and median/IQR) per (subset, method, percent, grade), best means flagged."""
    groups: Dict[tuple, List[ExperimentCell]] = {}
    for c in cells:
        if not c.ok:
            continue
        s = c.spec
        grade = None if s.method == "none" else s.grade
        groups.setdefault((s.subset, s.method, s.percent, grade), []).append(c)

    rows = []
    for (subset, method, percent, grade), members in groups.items():
        rmse = _stats([c.rmse for c in members])
        score = _stats([c.score for c in members])
        rows.append({
            "subset": subset, "method": method, "percent": percent, "grade": grade, "n": rmse["n"],
            "rmse_mean": rmse["mean"], "rmse_std": rmse["std"], "rmse_median": rmse["median"],
            "rmse_iqr": rmse["iqr"], "score_mean": score["mean"], "score_std": score["std"],
            "score_median": score["median"], "score_iqr": score["iqr"], "single": rmse["single"],
            "best_rmse": False, "best_score": False,
        })

    baseline = {(r["subset"], r["percent"]): r for r in rows if r["method"] == "none"}
    for metric in ("rmse", "score"):
        by_scenario: Dict[tuple, List[dict]] = {}
        for r in rows:
            if r["method"] != "none":
                by_scenario.setdefault((r["subset"], r["percent"], r["grade"]), []).append(r)
        for (subset, percent, _), members in by_scenario.items():
            top = min(members, key=lambda r: r[f"{metric}_mean"])
            base = baseline.get((subset, percent))
            if base is None or top[f"{metric}_mean"] < base[f"{metric}_mean"]:
                top[f"best_{metric}"] = True
            else:
                # one baseline row serves every grade; flagged if it wins any of them
                base[f"best_{metric}"] = True

    rows.sort(key=lambda r: (r["subset"], -1 if r["grade"] is None else r["grade"], r["percent"],
                             _method_rank(r["method"])))
    return rows


TABLE_FIELDS = ["subset", "method", "percent", "grade", "n", "rmse_mean", "rmse_std", "rmse_median", "rmse_iqr",
                "score_mean", "score_std", "score_median", "score_iqr", "single", "best_rmse", "best_score"]


def write_table(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else r[k]) for k in TABLE_FIELDS})


def write_engine_rows(cells: Iterable[ExperimentCell], path) -> int:
    fields = ["key", "engine", "prediction", "truth", "delta", "score"]
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for c in cells:
            for row in c.per_engine:
                writer.writerow({"key": c.spec.key, **row})
                n += 1
    return n


def render_markdown(rows: Sequence[dict], metric: str = "rmse") -> str:
    """Tables in the layout grade x method rows, percent columns, one block per subset."""
    out = []
    for subset in sorted({r["subset"] for r in rows}):
        sub = [r for r in rows if r["subset"] == subset]
        percents = sorted({r["percent"] for r in sub})
        out.append(f"### {subset} ({metric.upper()})\n")
        out.append("| grade | method | " + " | ".join(f"{p:g}%" for p in percents) + " |")
        out.append("|---|---|" + "---|" * len(percents))
        keys = sorted({(r["grade"], r["method"]) for r in sub},
                      key=lambda k: (-1 if k[0] is None else k[0], _method_rank(k[1])))
        for grade, method in keys:
            cells = []
            for p in percents:
                match = [r for r in sub if r["grade"] == grade and r["method"] == method and r["percent"] == p]
                if not match:
                    cells.append("")
                    continue
                r = match[0]
                text = f"{r[f'{metric}_mean']:.2f} ± {r[f'{metric}_std']:.2f}"
                cells.append(f"**{text}**" if r[f"best_{metric}"] else text)
            label = "-" if grade is None else f"{grade:g}%"
            out.append(f"| {label} | {method} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# embeddings


def export_embeddings(extractor: FeatureExtractor, series_set: SeriesSet | Iterable, path,
                      rul_max: float = RUL_MAX, batch_size: int = 1024) -> int:
    """Write one CSV row per frame: engine, end index, 64 embedding values, piece-wise RUL label."""
    from .autodiff import Tensor

    w = extractor.config.window
    latent = extractor.config.latent
    was = extractor.training
    extractor.eval()
    n = 0
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["engine", "end_index"] + [f"e{k}" for k in range(latent)] + ["rul"])
            for s in series_set:
                frames = frame_array(s, w)
                if len(frames) == 0:
                    continue
                labels = piecewise_rul_labels(s, rul_max)
                emb = np.concatenate([extractor(Tensor(frames[b:b + batch_size])).data
                                      for b in range(0, len(frames), batch_size)])
                for k, row in enumerate(emb):
                    end = w + k
                    writer.writerow([s.engine_id, end] + [repr(float(v)) for v in row] + [labels[end - 1]])
                    n += 1
    finally:
        extractor.train(was)
    return n
