"""Command line interface: ``rulssl <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import bench, data, fixture_dir, trainers
from .models import ExtractorConfig, load_network, save_extractor
from .scenarios import DataScenario, apply_scenario
from .synthetic import CorpusSpec, generate_corpus, write_corpus

log = logging.getLogger("rulssl")

STAGE_OF_METHOD = {"self": "self", "ae": "ae", "rbm": "rbm"}


# ---------------------------------------------------------------------------
# shared helpers


def _load_dataset(args) -> data.PreparedDataset:
    """A prepared archive from --dataset, or prepare one on the fly from raw files."""
    if getattr(args, "dataset", None):
        ds = data.PreparedDataset.load(args.dataset)
        if getattr(args, "subset", None) and args.subset != ds.subset:
            raise SystemExit(f"--subset {args.subset} does not match dataset subset {ds.subset}")
        return ds
    if not getattr(args, "subset", None):
        raise SystemExit("give --dataset, or --subset with --data-dir (or $RULSSL_DATA_DIR)")
    train, test = data.load_subset(_data_dir(args), args.subset)
    return data.prepare(train, test, seed=getattr(args, "split_seed", 0))


def _data_dir(args) -> Optional[str]:
    if getattr(args, "fixture", False):
        return str(fixture_dir())
    return getattr(args, "data_dir", None)


def _stage_config(args, stage: str, subset: str, seed: int) -> trainers.TrainConfig:
    overrides = {}
    for name in ("lr", "dropout", "batch_size", "min_distance", "patience"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if stage == "rbm":
        epochs = args.epochs if args.epochs is not None else trainers.RBM_EPOCHS
        overrides.update(min_epochs=epochs, max_epochs=epochs)
    else:
        if args.epochs is not None:
            overrides["min_epochs"] = args.epochs
        if args.max_epochs is not None:
            floor = overrides.get("min_epochs", trainers.FINETUNE_MIN_EPOCHS if stage == "supervised"
                                  else trainers.PRETRAIN_MIN_EPOCHS)
            overrides["max_epochs"] = max(args.max_epochs, floor)
    return trainers.default_config(stage, subset, seed=seed, **overrides)


def _scenario(args) -> DataScenario:
    grade = None if args.percent == 100 else args.grade
    return DataScenario(args.percent, grade, args.seed, strict=not args.free_scenario)


def _add_training_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="prepared dataset archive (from `prepare`)")
    p.add_argument("--subset", choices=data.SUBSETS, help="subset; prepares raw files if --dataset is absent")
    p.add_argument("--data-dir", help=f"raw CMAPSS directory (default ${data.DATA_DIR_ENV})")
    p.add_argument("--fixture", action="store_true", help="use the bundled synthetic fixture as raw data")
    p.add_argument("--percent", type=float, default=100, help="percent of labeled (failed) engines")
    p.add_argument("--grade", type=float, default=None, help="grade of degradation of unlabeled engines")
    p.add_argument("--free-scenario", action="store_true", help="allow values outside the default grids")
    p.add_argument("--seed", type=int, default=0, help="scenario and training seed")
    p.add_argument("--filters", type=int, default=32, help="filters per ConvBlock")
    p.add_argument("--epochs", type=int, default=None, help="minimum epochs (default per stage)")
    p.add_argument("--max-epochs", type=int, default=None, help="hard epoch cap")
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--history", help="write the per-epoch history as JSON lines here")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = CorpusSpec(n_train=args.engines, n_test=args.test_engines, noise=args.noise,
                      conditions=args.conditions, condition_scale=args.condition_scale)
    train, test = generate_corpus(spec, seed=args.seed, subset=args.subset)
    root = write_corpus(args.out, train, test, decimals=4)
    print(f"wrote {len(train)} train / {len(test)} test engines to {root}")
    return 0


def cmd_prepare(args) -> int:
    train, test = data.load_subset(_data_dir(args), args.subset)
    ds = data.prepare(train, test, window=args.window, val_fraction=args.val_fraction, seed=args.seed)
    out = Path(args.out or f"{args.subset}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"{args.subset}: {len(ds.train)} train / {len(ds.validation)} validation / {len(ds.test)} test "
          f"engines, window {ds.window} -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    ds = _load_dataset(args)
    scenario = _scenario(args)
    split = apply_scenario(ds.train, scenario)
    model_config = ExtractorConfig(window=ds.window, filters=args.filters)
    cfg = _stage_config(args, STAGE_OF_METHOD[args.method], ds.subset, args.seed)
    result = trainers.pretrain(args.method, split, ds.validation, model_config, cfg, ds.rul_max,
                               history_path=args.history)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"subset": ds.subset, "scenario": {"percent": scenario.percent, "grade": scenario.grade,
                                               "seed": scenario.seed},
             "best_epoch": result.best_epoch, "best_value": result.best_value, "metric": result.metric}
    save_extractor(out, result.extractor, args.seed, args.method, result.normalize, extra)
    split.write_manifest(out.with_suffix(".manifest.json"))
    print(f"{args.method} pre-training: best {result.metric} {result.best_value:.6f} "
          f"at epoch {result.best_epoch}/{len(result.history)} -> {out}")
    return 0


def cmd_finetune(args) -> int:
    ds = _load_dataset(args)
    if args.init == "random":
        init, method, normalize = None, "none", False
        model_config = ExtractorConfig(window=ds.window, filters=args.filters)
    else:
        net, meta = load_network(args.init)
        if net.config.window != ds.window:
            raise SystemExit(f"checkpoint window {net.config.window} does not match dataset window {ds.window}")
        stored = meta.get("scenario")
        if stored and (stored["percent"] != args.percent or stored["seed"] != args.seed):
            raise SystemExit(f"checkpoint was pre-trained on scenario {stored}; pass matching --percent/--seed")
        if stored and args.grade is None:
            args.grade = stored["grade"]
        init, method, normalize = net.f.state_dict("f."), meta.get("method", "custom"), net.normalize
        model_config = net.config
    if args.percent < 100 and args.grade is None:
        args.grade = 90  # the baseline ignores unlabeled data; any grade yields the same labeled engines
    scenario = _scenario(args)
    split = apply_scenario(ds.train, scenario)
    cfg = _stage_config(args, "supervised", ds.subset, args.seed)
    result = trainers.finetune_supervised(init, split.labeled, ds.validation, model_config, cfg,
                                          normalize=normalize, rul_max=ds.rul_max, history_path=args.history)
    report = bench.evaluate_test(result.network, ds.test, ds.window, ds.rul_max)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        result.network.save(args.out)
    spec = bench.CellSpec(ds.subset, method, scenario.percent,
                          None if method == "none" else scenario.grade, args.replication)
    cell = bench.ExperimentCell(spec, args.seed, rmse=report.rmse, score=report.score, per_engine=report.rows(),
                                labeled_engines=split.labeled.engine_ids, finetune_best=result.best_value,
                                history=args.history)
    if args.results:
        Path(args.results).parent.mkdir(parents=True, exist_ok=True)
        with open(args.results, "a") as fh:
            fh.write(json.dumps(cell.to_json()) + "\n")
    print(f"fine-tuned ({method}): val RMSE {result.best_value:.3f}, "
          f"test RMSE {report.rmse:.3f}, score {report.score:.2f} over {report.count} engines")
    return 0


def _grid_cells(args) -> List[bench.CellSpec]:
    if args.grid == "default":
        return bench.default_grid(subsets=args.subsets, replications=args.replications)
    text = Path(args.grid).read_text()
    docs = json.loads(text) if text.lstrip().startswith("[") else [json.loads(x) for x in text.splitlines() if x.strip()]
    return [bench.CellSpec(**d) for d in docs]


def _parse_datasets(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        subset, _, path = item.partition("=")
        if not path:
            raise SystemExit(f"--dataset expects SUBSET=PATH, got {item!r}")
        out[subset] = path
    return out


def cmd_experiment(args) -> int:
    cells = _grid_cells(args)
    out = Path(args.out)
    datasets = _parse_datasets(args.dataset)
    for subset in sorted({c.subset for c in cells} - set(datasets)):
        path = out / "datasets" / f"{subset}.json"
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            train, test = data.load_subset(_data_dir(args), subset)
            data.prepare(train, test, seed=args.split_seed).save(path)
        datasets[subset] = str(path)
    overrides = json.loads(args.overrides) if args.overrides else {}
    settings = bench.GridSettings(
        filters=args.filters,
        pretrain_epochs=args.pretrain_epochs,
        finetune_epochs=args.finetune_epochs,
        rbm_epochs=args.rbm_epochs,
        patience=args.patience,
        max_epochs=args.max_epochs,
        overrides=overrides,
        history_dir=str(out / "history"),
    )
    (out / "history").mkdir(parents=True, exist_ok=True)
    done = bench.run_grid(cells, datasets, out, settings, workers=args.workers)
    failed = [c for c in done if not c.ok]
    print(f"{len(done)}/{len(cells)} cells recorded in {out / 'cells.jsonl'}, {len(failed)} failed")
    return 1 if failed else 0


def cmd_search(args) -> int:
    ds = _load_dataset(args)
    model_config = ExtractorConfig(window=ds.window, filters=args.filters)
    epochs = args.epochs if args.epochs is not None else (
        trainers.FINETUNE_MIN_EPOCHS if args.stage == "supervised" else trainers.PRETRAIN_MIN_EPOCHS)
    if args.stage == "supervised":
        space = bench.SUPERVISED_SPACE
        objective = bench.supervised_objective(ds, model_config, epochs, max_epochs=args.max_epochs, seed=args.seed)
    else:
        space = bench.PRETRAIN_SPACE
        if args.method == "rbm":
            raise SystemExit("the RBM learning rate is fixed; no pre-training search for it")
        objective = bench.pretrain_objective(args.method, ds, model_config, epochs, grade=args.grade,
                                             replications=args.replications, max_epochs=args.max_epochs,
                                             seed=args.seed)
    best, trials = bench.random_search(space, args.trials, objective, seed=args.seed, log_path=args.out)
    best_value = min(t["objective"] for t in trials)
    print(json.dumps({"best": best, "objective": best_value, "trials": len(trials)}))
    return 0


def cmd_report(args) -> int:
    cells = bench.load_cells(args.results)
    if not cells:
        raise SystemExit(f"no results found in {args.results}")
    rows = bench.aggregate(cells)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.write_table(rows, out)
    engines = out.with_name(out.stem + "_engines.csv")
    n = bench.write_engine_rows([c for c in cells if c.ok], engines)
    if args.markdown:
        Path(args.markdown).write_text(bench.render_markdown(rows, "rmse") + "\n" + bench.render_markdown(rows, "score"))
    print(f"{len(rows)} table rows -> {out}; {n} per-engine rows -> {engines}")
    return 0


def cmd_export_embeddings(args) -> int:
    net, meta = load_network(args.ckpt)
    ds = data.PreparedDataset.load(args.dataset)
    if ds.window != net.config.window:
        raise SystemExit(f"checkpoint window {net.config.window} does not match dataset window {ds.window}")
    split = {"train": ds.train, "validation": ds.validation, "test": ds.test}[args.split]
    n = bench.export_embeddings(net.f, split, args.out, ds.rul_max)
    print(f"{n} embeddings -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rulssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic run-to-failure corpus in CMAPSS layout")
    p.add_argument("--out", required=True)
    p.add_argument("--subset", default="FD001", choices=data.SUBSETS)
    p.add_argument("--engines", type=int, default=60)
    p.add_argument("--test-engines", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--conditions", type=int, default=1)
    p.add_argument("--condition-scale", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="parse, select channels, split and scale one subset")
    p.add_argument("--subset", required=True, choices=data.SUBSETS)
    p.add_argument("--data-dir", help=f"raw CMAPSS directory (default ${data.DATA_DIR_ENV})")
    p.add_argument("--fixture", action="store_true", help="use the bundled synthetic fixture")
    p.add_argument("--out", help="archive path (default <subset>.json)")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0, help="validation split seed")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="pre-train the feature extractor")
    p.add_argument("--method", required=True, choices=sorted(STAGE_OF_METHOD))
    _add_training_args(p)
    p.add_argument("--min-distance", type=int, default=None)
    p.add_argument("--out", required=True, help="extractor checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint or random init")
    p.add_argument("--init", required=True, help="extractor checkpoint, or 'random' for the baseline")
    _add_training_args(p)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--out", help="network checkpoint path")
    p.add_argument("--results", help="append the scored cell to this JSON-lines file")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("experiment", help="run (or resume) the replicated scenario grid")
    p.add_argument("--grid", default="default", help="'default' or a JSON/JSON-lines file of cell specs")
    p.add_argument("--subsets", nargs="+", default=list(data.SUBSETS), choices=data.SUBSETS)
    p.add_argument("--replications", type=int, default=bench.REPLICATIONS)
    p.add_argument("--dataset", action="append", help="SUBSET=PATH of a prepared archive (repeatable)")
    p.add_argument("--data-dir", help="raw data for subsets without --dataset")
    p.add_argument("--fixture", action="store_true")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--pretrain-epochs", type=int, default=trainers.PRETRAIN_MIN_EPOCHS)
    p.add_argument("--finetune-epochs", type=int, default=trainers.FINETUNE_MIN_EPOCHS)
    p.add_argument("--rbm-epochs", type=int, default=trainers.RBM_EPOCHS)
    p.add_argument("--patience", type=int, default=trainers.DEFAULT_PATIENCE)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--overrides", help='JSON of per-stage config overrides, e.g. {"self": {"lr": 0.001}}')
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--stage", required=True, choices=("supervised", "pretrain"))
    p.add_argument("--method", default="self", choices=("self", "ae", "rbm"))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--dataset")
    p.add_argument("--subset", choices=data.SUBSETS)
    p.add_argument("--data-dir")
    p.add_argument("--fixture", action="store_true")
    p.add_argument("--grade", type=float, default=80)
    p.add_argument("--replications", type=int, default=5)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="trial log (JSON lines)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="aggregate cell results into tables")
    p.add_argument("--results", default="results", help="experiment directory or cells JSON-lines file")
    p.add_argument("--out", default="tables.csv")
    p.add_argument("--markdown", help="also write markdown tables here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-embeddings", help="write per-frame embeddings as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.add_argument("--out", default="embeddings.csv")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
