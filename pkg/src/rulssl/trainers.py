"""Pre-training (self-supervised siamese, autoencoder, RBM) and supervised fine-tuning."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .data import RUL_MAX, EngineSeries, SeriesSet, labeled_arrays, unlabeled_array
from .models import (ConvRBM, Decoder, ExtractorConfig, FeatureExtractor, RulNetwork,
                     extract_patches, siamese_distance)
from .scenarios import PairSampler, ScenarioSplit, validation_pairs

logger = logging.getLogger(__name__)

PRETRAIN_MIN_EPOCHS = 100
FINETUNE_MIN_EPOCHS = 200
RBM_EPOCHS = 5
DEFAULT_PATIENCE = 20


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    dropout: float = 0.0
    batch_size: int = 64
    min_distance: int = 1
    min_epochs: int = PRETRAIN_MIN_EPOCHS
    patience: int = DEFAULT_PATIENCE
    max_epochs: Optional[int] = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    val_pairs: int = 512
    val_seed: int = 1234

    def __post_init__(self):
        if self.max_epochs is not None and self.max_epochs < self.min_epochs:
            raise ValueError("max_epochs must not be below min_epochs")


# per-subset defaults from the hyperparameter search
SUPERVISED = {
    "FD001": dict(lr=0.0056, dropout=0.4, batch_size=128),
    "FD002": dict(lr=0.0903, dropout=0.3, batch_size=512),
    "FD003": dict(lr=0.095, dropout=0.2, batch_size=64),
    "FD004": dict(lr=0.06635, dropout=0.0, batch_size=64),
}
SELF_SUPERVISED = {
    "FD001": dict(lr=0.00015, dropout=0.2, batch_size=64, min_distance=10),
    "FD002": dict(lr=0.01155, dropout=0.4, batch_size=64, min_distance=15),
    "FD003": dict(lr=0.00615, dropout=0.1, batch_size=64, min_distance=15),
    "FD004": dict(lr=0.07455, dropout=0.1, batch_size=64, min_distance=10),
}
AUTOENCODER = {
    "FD001": dict(lr=0.0001, dropout=0.1, batch_size=64, min_distance=1),
    "FD002": dict(lr=0.0248, dropout=0.4, batch_size=256, min_distance=15),
    "FD003": dict(lr=0.015, dropout=0.0, batch_size=64, min_distance=1),
    "FD004": dict(lr=0.0006, dropout=0.0, batch_size=64, min_distance=10),
}
RBM = dict(lr=1e-4, dropout=0.0, batch_size=64)


def default_config(stage: str, subset: str, **overrides) -> TrainConfig:
    """Defaults for ``stage`` in {supervised, self, ae, rbm}."""
    if stage == "supervised":
        base = dict(SUPERVISED[subset], min_epochs=FINETUNE_MIN_EPOCHS)
    elif stage == "self":
        base = dict(SELF_SUPERVISED[subset], min_epochs=PRETRAIN_MIN_EPOCHS)
    elif stage == "ae":
        base = dict(AUTOENCODER[subset], min_epochs=PRETRAIN_MIN_EPOCHS)
    elif stage == "rbm":
        base = dict(RBM, min_epochs=RBM_EPOCHS, max_epochs=RBM_EPOCHS)
    else:
        raise ValueError(f"unknown stage {stage!r}")
    base.update(overrides)
    return TrainConfig(**base)


class EarlyStopMonitor:
    """Tracks the best epoch of a monitored quantity and keeps its checkpoint."""

    def __init__(self, metric: str, min_epochs: int, patience: int, max_epochs: Optional[int] = None):
        self.metric = metric
        self.min_epochs = min_epochs
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_value = math.inf
        self.best_epoch = 0
        self.best_state: Optional[dict] = None

    def update(self, epoch: int, value: float, snapshot: Callable[[], dict]) -> bool:
        if value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self.best_state = snapshot()
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        if self.max_epochs is not None and epoch >= self.max_epochs:
            return True
        return epoch >= self.min_epochs and epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    state: Dict[str, np.ndarray]
    history: List[dict]
    best_epoch: int
    best_value: float
    metric: str
    extractor: Optional[FeatureExtractor] = None
    network: Optional[RulNetwork] = None
    normalize: bool = False
    method: str = "none"

    def write_history(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.history:
                fh.write(json.dumps(row) + "\n")


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing singleton is merged so batchnorm never sees N=1."""
    if n < 2:
        raise ValueError(f"need at least two training samples, got {n}")
    perm = rng.permutation(n)
    batches = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} in epoch {epoch}; lower the learning rate")


def _fit(
    metric: str,
    config: TrainConfig,
    run_epoch: Callable[[int], float],
    validate: Callable[[], float],
    snapshot: Callable[[], dict],
    history_path=None,
    on_improve: Optional[Callable[[dict], None]] = None,
) -> tuple[EarlyStopMonitor, List[dict]]:
    monitor = EarlyStopMonitor(metric, config.min_epochs, config.patience, config.max_epochs)
    history: List[dict] = []
    sink = open(history_path, "w") if history_path else None
    try:
        epoch = 0
        while True:
            epoch += 1
            train_loss = run_epoch(epoch)
            _check_finite(train_loss, "training loss", epoch)
            val = validate()
            _check_finite(val, f"validation {metric}", epoch)
            row = {"epoch": epoch, "train_loss": train_loss, metric: val, "timestamp": time.time()}
            history.append(row)
            if sink:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
            if monitor.update(epoch, val, snapshot) and on_improve:
                on_improve(monitor.best_state)
            logger.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val)
            if monitor.should_stop(epoch):
                break
    finally:
        if sink:
            sink.close()
    return monitor, history


def _pretrain_series(split: ScenarioSplit) -> List[EngineSeries]:
    return split.all_series


def _init_extractor(config: ExtractorConfig, seed: int) -> FeatureExtractor:
    # the same seed gives the same initial extractor as a baseline network
    return RulNetwork(config, seed=seed).f


# ---------------------------------------------------------------------------
# self-supervised siamese pre-training


def pair_loss(extractor: FeatureExtractor, anchors: np.ndarray, partners: np.ndarray,
              targets: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
    """MSE between relative-RUL targets and the siamese distance of the two frames."""
    x = Tensor(np.concatenate([anchors, partners]))
    emb = extractor(x, rng)
    a, b = ad.split_half(emb)
    return ad.mse_loss(siamese_distance(a, b), targets)


def pretrain_self_supervised(split: ScenarioSplit, validation: SeriesSet, model_config: ExtractorConfig,
                             config: TrainConfig, rul_max: float = RUL_MAX, history_path=None,
                             checkpoint: Optional[Callable[[dict], None]] = None) -> TrainResult:
    w = model_config.window
    extractor = _init_extractor(replace(model_config, dropout=config.dropout), config.seed)
    series = _pretrain_series(split)
    sampler = PairSampler(series, w, config.min_distance, rul_max)
    val = validation_pairs(validation, config.val_pairs, config.min_distance, rul_max, config.val_seed, w)
    n_frames = sum(max(s.length - w + 1, 0) for s in series)
    n_batches = max(1, math.ceil(n_frames / config.batch_size))
    rng = np.random.default_rng([config.seed, 1])
    params = extractor.named_parameters("f.")
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)

    def run_epoch(epoch: int) -> float:
        extractor.train()
        losses = []
        for _ in range(n_batches):
            batch = sampler.sample(config.batch_size, rng)
            opt.zero_grad()
            loss = pair_loss(extractor, batch.anchors, batch.partners, batch.targets, rng)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    def validate() -> float:
        extractor.eval()
        return pair_loss(extractor, val.anchors, val.partners, val.targets).item()

    monitor, history = _fit("val_pair_mse", config, run_epoch, validate,
                            lambda: extractor.state_dict("f."), history_path, checkpoint)
    extractor.load_state_dict(monitor.best_state, "f.")
    extractor.config = replace(extractor.config, dropout=0.0)
    return TrainResult(monitor.best_state, history, monitor.best_epoch, monitor.best_value,
                       monitor.metric, extractor=extractor, normalize=True, method="self")


# ---------------------------------------------------------------------------
# autoencoder pre-training


def reconstruction_loss(extractor: FeatureExtractor, decoder: Decoder, x: np.ndarray,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    xt = Tensor(x)
    return ad.mse_loss(decoder(extractor(xt, rng)), xt)


def _batched_eval(fn: Callable[[np.ndarray], float], x: np.ndarray, batch_size: int = 1024) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        chunk = x[s:s + batch_size]
        total += fn(chunk) * len(chunk)
    return total / len(x)


def pretrain_autoencoder(split: ScenarioSplit, validation: SeriesSet, model_config: ExtractorConfig,
                         config: TrainConfig, history_path=None,
                         checkpoint: Optional[Callable[[dict], None]] = None) -> TrainResult:
    w = model_config.window
    mc = replace(model_config, dropout=config.dropout)
    extractor = _init_extractor(mc, config.seed)
    decoder = Decoder(mc, np.random.default_rng([config.seed, 2]))
    x_train = unlabeled_array(_pretrain_series(split), w)
    x_val = unlabeled_array(validation.series, w)
    if len(x_val) == 0:
        raise ValueError("validation set has no full windows")
    rng = np.random.default_rng([config.seed, 1])
    params = {**extractor.named_parameters("f."), **decoder.named_parameters("decoder.")}
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)

    def run_epoch(epoch: int) -> float:
        extractor.train()
        decoder.train()
        losses = []
        for idx in minibatches(len(x_train), config.batch_size, rng):
            opt.zero_grad()
            loss = reconstruction_loss(extractor, decoder, x_train[idx], rng)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    def validate() -> float:
        extractor.eval()
        decoder.eval()
        return _batched_eval(lambda c: reconstruction_loss(extractor, decoder, c).item(), x_val)

    monitor, history = _fit("val_reconstruction_mse", config, run_epoch, validate,
                            lambda: extractor.state_dict("f."), history_path, checkpoint)
    extractor.load_state_dict(monitor.best_state, "f.")
    extractor.config = replace(extractor.config, dropout=0.0)
    return TrainResult(monitor.best_state, history, monitor.best_epoch, monitor.best_value,
                       monitor.metric, extractor=extractor, normalize=False, method="ae")


# ---------------------------------------------------------------------------
# RBM pre-training of the first layer


def pretrain_rbm(split: ScenarioSplit, validation: SeriesSet, model_config: ExtractorConfig,
                 config: TrainConfig, history_path=None,
                 checkpoint: Optional[Callable[[dict], None]] = None) -> TrainResult:
    extractor = _init_extractor(model_config, config.seed)
    first = extractor.conv[0]
    rbm = ConvRBM.from_block(first)
    v_train = extract_patches([s.readings for s in _pretrain_series(split)])
    v_val = extract_patches([s.readings for s in validation.series])
    if len(v_train) < 2 or len(v_val) == 0:
        raise ValueError("not enough data for RBM pre-training")
    rng = np.random.default_rng([config.seed, 3])
    params = rbm.named_parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)

    def run_epoch(epoch: int) -> float:
        errs = []
        for idx in minibatches(len(v_train), config.batch_size, rng):
            grads = rbm.cd1_gradients(v_train[idx], rng)
            ad.adam_step(params, grads, opt.state)
            errs.append(rbm.reconstruction_error(v_train[idx]))
        return float(np.mean(errs))

    def snapshot() -> dict:
        state = extractor.state_dict("f.")
        state["f.conv1.weight"] = rbm.weight.data.copy()
        state["f.conv1.bias"] = rbm.hidden_bias.data.copy()
        return state

    monitor, history = _fit("val_reconstruction_mse", config, run_epoch,
                            lambda: _batched_eval(rbm.reconstruction_error, v_val, 8192),
                            snapshot, history_path, checkpoint)
    extractor.load_state_dict(monitor.best_state, "f.")
    return TrainResult(monitor.best_state, history, monitor.best_epoch, monitor.best_value,
                       monitor.metric, extractor=extractor, normalize=False, method="rbm")


# ---------------------------------------------------------------------------
# supervised fine-tuning / baseline


def finetune_supervised(init: Optional[TrainResult | Dict[str, np.ndarray]], labeled: SeriesSet | Sequence[EngineSeries],
                        validation: SeriesSet, model_config: ExtractorConfig, config: TrainConfig,
                        normalize: Optional[bool] = None, rul_max: float = RUL_MAX, history_path=None,
                        checkpoint: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """RMSE training of g(f(x)); ``init=None`` is the randomly initialised baseline."""
    labeled = list(labeled)
    if not labeled:
        raise ValueError("fine-tuning needs at least one labeled series")
    w = model_config.window
    if isinstance(init, TrainResult):
        init_state = init.state
        if normalize is None:
            normalize = init.normalize
    else:
        init_state = init
    net = RulNetwork(replace(model_config, dropout=config.dropout), seed=config.seed, normalize=bool(normalize))
    if init_state is not None:
        net.f.load_state_dict(init_state, "f.")
    x_train, y_train = labeled_arrays(labeled, w, rul_max)
    x_val, y_val = labeled_arrays(validation.series, w, rul_max)
    if len(x_train) < 2:
        raise ValueError("labeled data yields fewer than two frames")
    if len(x_val) == 0:
        raise ValueError("validation set has no full windows")
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(net.named_parameters(), config.lr, config.beta1, config.beta2, config.eps)

    def run_epoch(epoch: int) -> float:
        net.train()
        losses = []
        for idx in minibatches(len(x_train), config.batch_size, rng):
            opt.zero_grad()
            loss = ad.rmse_loss(net(Tensor(x_train[idx]), rng), y_train[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    def validate() -> float:
        pred = net.predict(x_val)
        return float(np.sqrt(np.mean((pred - y_val) ** 2)))

    monitor, history = _fit("val_rmse", config, run_epoch, validate, net.state_dict, history_path, checkpoint)
    net.load_state_dict(monitor.best_state)
    net.config = replace(net.config, dropout=0.0)
    net.f.config = net.config
    method = init.method if isinstance(init, TrainResult) else ("none" if init is None else "custom")
    return TrainResult(monitor.best_state, history, monitor.best_epoch, monitor.best_value,
                       monitor.metric, extractor=net.f, network=net, normalize=net.normalize, method=method)


def pretrain(method: str, split: ScenarioSplit, validation: SeriesSet, model_config: ExtractorConfig,
             config: TrainConfig, rul_max: float = RUL_MAX, **kwargs) -> TrainResult:
    if method == "self":
        return pretrain_self_supervised(split, validation, model_config, config, rul_max, **kwargs)
    if method == "ae":
        return pretrain_autoencoder(split, validation, model_config, config, **kwargs)
    if method == "rbm":
        return pretrain_rbm(split, validation, model_config, config, **kwargs)
    raise ValueError(f"unknown pre-training method {method!r}")
