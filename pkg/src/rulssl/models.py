"""Networks built from :mod:`rulssl.autodiff`: the 1d-CNN feature extractor, the
regression head, the siamese distance, the autoencoder decoder and the
first-layer convolutional RBM."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

N_BLOCKS = 6
LATENT_DIM = 64
IN_CHANNELS = 14
PADDING_SCHEDULE = ("same", "valid", "same", "valid", "same", "valid")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias(rng: np.random.Generator, n: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


class Module:
    """Minimal container: named parameters, batchnorm buffers and a train flag."""

    training: bool = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}{i + 1}", item

    def own_parameters(self) -> Dict[str, Tensor]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, BatchNormState):
                out[f"{name}.weight"] = value.weight
                out[f"{name}.bias"] = value.bias
        return out

    def own_buffers(self) -> Dict[str, Tuple[BatchNormState, str]]:
        return {f"{name}.{attr}": (value, attr)
                for name, value in vars(self).items() if isinstance(value, BatchNormState)
                for attr in ("running_mean", "running_var")}

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.own_parameters().items()}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def _named_buffers(self, prefix: str = "") -> Dict[str, Tuple[BatchNormState, str]]:
        out = {prefix + k: v for k, v in self.own_buffers().items()}
        for name, child in self.children():
            out.update(child._named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters(prefix).items()}
        for k, (bn, attr) in self._named_buffers(prefix).items():
            state[k] = getattr(bn, attr).copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        params = self.named_parameters(prefix)
        buffers = self._named_buffers(prefix)
        missing = [k for k in list(params) + list(buffers) if k not in state]
        if strict and missing:
            raise KeyError(f"state is missing {missing}")
        for k, p in params.items():
            if k in state:
                if state[k].shape != p.data.shape:
                    raise ad.ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.data.shape}")
                p.data = np.array(state[k], dtype=ad.DTYPE)
        for k, (bn, attr) in buffers.items():
            if k in state:
                setattr(bn, attr, np.array(state[k], dtype=ad.DTYPE))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))


class ConvBlock(Module):
    """conv1d(kernel 3) -> batchnorm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, padding: str, rng: np.random.Generator):
        self.padding = padding
        fan_in = c_in * ad.KERNEL_SIZE
        self.weight = ad.parameter(_kaiming_uniform(rng, (c_out, c_in, ad.KERNEL_SIZE), fan_in))
        self.bias = ad.parameter(_bias(rng, c_out, fan_in))
        self.bn = BatchNormState(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(ad.batchnorm(ad.conv1d(x, self.weight, self.bias, self.padding), self.bn, self.training))


class TransposedConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, padding: str, rng: np.random.Generator, activate: bool = True):
        self.padding = padding
        self.activate = activate
        fan_in = c_in * ad.KERNEL_SIZE
        self.weight = ad.parameter(_kaiming_uniform(rng, (c_in, c_out, ad.KERNEL_SIZE), fan_in))
        self.bias = ad.parameter(_bias(rng, c_out, fan_in))
        if activate:
            self.bn = BatchNormState(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv_transpose1d(x, self.weight, self.bias, self.padding)
        if self.activate:
            out = ad.relu(ad.batchnorm(out, self.bn, self.training))
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            self.weight = ad.parameter(np.zeros((n_out, n_in)))
            self.bias = ad.parameter(np.zeros(n_out))
        else:
            self.weight = ad.parameter(_kaiming_uniform(rng, (n_out, n_in), n_in))
            self.bias = ad.parameter(_bias(rng, n_out, n_in))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class ExtractorConfig:
    window: int
    filters: int = 32
    in_channels: int = IN_CHANNELS
    latent: int = LATENT_DIM
    dropout: float = 0.0

    def __post_init__(self):
        if self.window - 2 * PADDING_SCHEDULE.count("valid") < 1:
            raise ValueError(f"window {self.window} too small for {N_BLOCKS} ConvBlocks")

    @property
    def out_length(self) -> int:
        return self.window - 2 * PADDING_SCHEDULE.count("valid")

    def fingerprint(self) -> str:
        doc = {"w": self.window, "m": self.filters, "c": self.in_channels,
               "latent": self.latent, "padding": list(PADDING_SCHEDULE)}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def extractor_param_count(window: int, filters: int, in_channels: int = IN_CHANNELS,
                          latent: int = LATENT_DIM) -> int:
    """Closed-form trainable parameter count of the feature extractor."""
    m, k = filters, ad.KERNEL_SIZE
    first = m * in_channels * k + m + 2 * m
    rest = (N_BLOCKS - 1) * (m * m * k + m + 2 * m)
    head = m * (window - 6) * latent + latent
    return first + rest + head


class FeatureExtractor(Module):
    """Six ConvBlocks with time-step dropout in between, then flatten -> linear(64)."""

    def __init__(self, config: ExtractorConfig, rng: np.random.Generator):
        self.config = config
        self.conv: List[ConvBlock] = []
        c_in = config.in_channels
        for padding in PADDING_SCHEDULE:
            self.conv.append(ConvBlock(c_in, config.filters, padding, rng))
            c_in = config.filters
        self.fc = Linear(config.filters * config.out_length, config.latent, rng)

    def _check(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.config.in_channels or x.shape[2] != self.config.window:
            raise ad.ShapeError(
                f"extractor expects [N, {self.config.in_channels}, {self.config.window}], got {x.shape}")
        return x

    def features(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Activation before flattening, [N, m, w - 6]."""
        x = self._check(x)
        for idx, block in enumerate(self.conv):
            x = block(x)
            if idx < N_BLOCKS - 1:
                x = ad.timestep_dropout(x, self.config.dropout, rng, self.training)
        return x

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        squeeze = isinstance(x, Tensor) and x.ndim == 2
        out = self.fc(ad.flatten(self.features(x, rng)))
        return ad.reshape(out, (out.shape[1],)) if squeeze else out


class RegressionHead(Module):
    """[optional l2-normalize] -> batchnorm -> ReLU -> linear(1)."""

    def __init__(self, latent: int, rng: np.random.Generator, normalize: bool = False, zero: bool = False):
        self.normalize = normalize
        self.bn = BatchNormState(latent)
        self.fc = Linear(latent, 1, rng, zero=zero)

    def __call__(self, embedding: Tensor) -> Tensor:
        squeeze = embedding.ndim == 1
        if squeeze:
            embedding = ad.reshape(embedding, (1,) + embedding.shape)
        if self.normalize:
            embedding = ad.l2_normalize(embedding)
        out = self.fc(ad.relu(ad.batchnorm(embedding, self.bn, self.training)))
        out = ad.reshape(out, (out.shape[0],))
        return ad.reshape(out, ()) if squeeze else out


def siamese_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance between l2-normalized embeddings, in [0, 4]."""
    if a.shape != b.shape:
        raise ad.ShapeError(f"siamese_distance: {a.shape} vs {b.shape}")
    diff = ad.sub(ad.l2_normalize(a), ad.l2_normalize(b))
    return ad.reduce_sum(ad.square(diff), axis=-1)


class Decoder(Module):
    """Mirror of the extractor: linear -> six transposed-conv blocks -> [N, 14, w]."""

    def __init__(self, config: ExtractorConfig, rng: np.random.Generator):
        self.config = config
        self.fc = Linear(config.latent, config.filters * config.out_length, rng)
        self.conv: List[TransposedConvBlock] = []
        for pos in reversed(range(N_BLOCKS)):
            last = pos == 0
            c_out = config.in_channels if last else config.filters
            self.conv.append(
                TransposedConvBlock(config.filters, c_out, PADDING_SCHEDULE[pos], rng, activate=not last))

    def __call__(self, embedding: Tensor) -> Tensor:
        squeeze = embedding.ndim == 1
        if squeeze:
            embedding = ad.reshape(embedding, (1,) + embedding.shape)
        if embedding.shape[1] != self.config.latent:
            raise ad.ShapeError(f"decoder expects {self.config.latent}-dim input, got {embedding.shape}")
        x = ad.relu(ad.reshape(self.fc(embedding),
                               (embedding.shape[0], self.config.filters, self.config.out_length)))
        for k, block in enumerate(self.conv):
            before = x.shape[2]
            x = block(x)
            grow = 2 if block.padding == "valid" else 0
            if x.shape[2] != before + grow:
                raise ad.ShapeError(f"decoder block {N_BLOCKS - k}: length {before} -> {x.shape[2]}")
        return ad.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# RBM over the first layer's receptive field


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ConvRBM:
    """Gaussian-visible / rectified-hidden RBM sharing the first ConvBlock's geometry.

    Weights are [m, C, 3]; a visible unit is a [C, 3] patch of the input.
    """

    def __init__(self, weight: np.ndarray, hidden_bias: np.ndarray, visible_bias: np.ndarray | None = None):
        self.weight = ad.parameter(np.array(weight, dtype=ad.DTYPE))
        self.hidden_bias = ad.parameter(np.array(hidden_bias, dtype=ad.DTYPE))
        c = self.weight.shape[1]
        self.visible_bias = ad.parameter(np.zeros(c) if visible_bias is None else np.array(visible_bias))

    @classmethod
    def from_block(cls, block: ConvBlock) -> "ConvRBM":
        return cls(block.weight.data.copy(), block.bias.data.copy())

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "hidden_bias": self.hidden_bias, "visible_bias": self.visible_bias}

    def hidden_preactivation(self, v: np.ndarray) -> np.ndarray:
        m = self.weight.shape[0]
        return v.reshape(len(v), -1) @ self.weight.data.reshape(m, -1).T + self.hidden_bias.data

    def sample_hidden(self, v: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
        pre = self.hidden_preactivation(v)
        if rng is None:
            return np.maximum(pre, 0.0)
        s = _sigmoid(pre)
        return np.maximum(pre + rng.standard_normal(pre.shape) * s * (1.0 - s), 0.0)

    def visible_mean(self, h: np.ndarray) -> np.ndarray:
        m = self.weight.shape[0]
        recon = h @ self.weight.data.reshape(m, -1)
        return recon.reshape((len(h),) + self.weight.shape[1:]) + self.visible_bias.data[None, :, None]

    def cd1_gradients(self, v0: np.ndarray, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Negative CD-1 log-likelihood gradient estimate (descend to train)."""
        n = len(v0)
        h0 = self.sample_hidden(v0, rng)
        v1 = self.visible_mean(h0)
        h1 = np.maximum(self.hidden_preactivation(v1), 0.0)
        pos = h0.T @ v0.reshape(n, -1)
        neg = h1.T @ v1.reshape(n, -1)
        return {
            "weight": -((pos - neg) / n).reshape(self.weight.shape),
            "hidden_bias": -(h0 - h1).mean(axis=0),
            "visible_bias": -(v0 - v1).sum(axis=2).mean(axis=0),
        }

    def reconstruction_error(self, v: np.ndarray) -> float:
        recon = self.visible_mean(self.sample_hidden(v, None))
        return float(np.mean((recon - v) ** 2))


def rbm_energy_step(visible: np.ndarray, rbm: ConvRBM, rng: Optional[np.random.Generator] = None):
    """One up-down pass: (hidden sample, reconstructed visible mean).

    ``rng=None`` switches the hidden noise off.
    """
    v = np.asarray(visible, dtype=ad.DTYPE)
    single = v.ndim == 2
    if single:
        v = v[None]
    h = rbm.sample_hidden(v, rng)
    recon = rbm.visible_mean(h)
    return (h[0], recon[0]) if single else (h, recon)


def extract_patches(series_readings: List[np.ndarray], k: int = ad.KERNEL_SIZE) -> np.ndarray:
    """All length-k patches of [T, C] series as [n, C, k]."""
    out = [np.lib.stride_tricks.sliding_window_view(r, k, axis=0) for r in series_readings if len(r) >= k]
    return np.ascontiguousarray(np.concatenate(out)) if out else np.empty((0, 0, k))


# ---------------------------------------------------------------------------
# full network and checkpoints


class RulNetwork(Module):
    """RUL' = g(f(x))."""

    def __init__(self, config: ExtractorConfig, seed: int = 0, normalize: bool = False):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.f = FeatureExtractor(config, rng)
        self.g = RegressionHead(config.latent, rng, normalize=normalize)

    @property
    def normalize(self) -> bool:
        return self.g.normalize

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.g(self.f(x, rng))

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            out = [self(Tensor(x[s:s + batch_size])).data for s in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(out) if out else np.empty(0)

    def meta(self) -> dict:
        return {"kind": "rul_network", "config": asdict(self.config), "fingerprint": self.config.fingerprint(),
                "seed": self.seed, "normalize": self.normalize}

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.state_dict(), self.meta())


def config_from_meta(meta: dict) -> ExtractorConfig:
    config = ExtractorConfig(**meta["config"])
    if config.fingerprint() != meta.get("fingerprint"):
        raise ValueError("checkpoint fingerprint does not match its architecture config")
    return config


def save_extractor(path, extractor: FeatureExtractor, seed: int, method: str, normalize: bool,
                   extra: Optional[dict] = None) -> None:
    meta = {"kind": "extractor", "config": asdict(extractor.config),
            "fingerprint": extractor.config.fingerprint(), "seed": seed,
            "method": method, "normalize": normalize, **(extra or {})}
    ad.save_checkpoint(path, extractor.state_dict("f."), meta)


def load_network(path, expect: Optional[ExtractorConfig] = None) -> Tuple[RulNetwork, dict]:
    """Load a full network or a bare extractor (head freshly initialised from the stored seed)."""
    arrays, meta = ad.load_checkpoint(path)
    config = config_from_meta(meta)
    if expect is not None and expect.fingerprint() != config.fingerprint():
        raise ValueError("checkpoint architecture does not match the requested configuration")
    net = RulNetwork(config, seed=meta.get("seed", 0), normalize=bool(meta.get("normalize", False)))
    if meta.get("kind") == "extractor":
        net.f.load_state_dict(arrays, "f.")
    else:
        net.load_state_dict(arrays)
    return net, meta
