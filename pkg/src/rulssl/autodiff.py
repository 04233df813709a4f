"""Reverse-mode differentiation over numpy arrays.

Only the operators needed by the RUL networks are provided: kernel-3 1d
convolutions (and their transposes), batch normalization, time-step dropout,
affine layers, ReLU, a handful of elementwise/reduction ops and the losses.
Everything is float64.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64
KERNEL_SIZE = 3
CHECKPOINT_VERSION = 1

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input for which the operation is undefined (zero norm, batch of one...)."""


class Tensor:
    """An array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar, same-shape or scalar operands only
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn)


def square(x: Tensor) -> Tensor:
    return _make(x.data**2, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def reduce_sum(x: Tensor, axis: int | Tuple[int, ...] | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), grad_fn)


def mean(x: Tensor, axis: int | Tuple[int, ...] | None = None) -> Tensor:
    s = reduce_sum(x, axis)
    n = x.data.size // max(s.data.size, 1)
    return mul(s, 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def split_half(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Split along the leading axis into two equal parts."""
    n = x.shape[0]
    if n % 2:
        raise ShapeError(f"cannot halve leading axis of size {n}")
    h = n // 2

    def take(sl):
        def grad_fn(g):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        return _make(x.data[sl], (x,), grad_fn)

    return take(slice(0, h)), take(slice(h, n))


def pad_time(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the last axis by ``pad`` on both sides."""
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[..., pad:-pad],))


def kernel_adjoint(weight: Tensor) -> Tensor:
    """[C_in, C_out, K] transposed-conv weight -> equivalent [C_out, C_in, K] conv weight."""
    out = np.ascontiguousarray(weight.data.transpose(1, 0, 2)[:, :, ::-1])
    return _make(out, (weight,), lambda g: (g[:, :, ::-1].transpose(1, 0, 2),))


# ---------------------------------------------------------------------------
# layers


def _batched(x: Tensor, ndim: int) -> Tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}d or {ndim}d input, got shape {x.shape}")
    return x, False


def _conv_core(x: Tensor, weight: Tensor, bias: Tensor, pad: int) -> Tensor:
    """Zero-padded kernel-3 cross-correlation of [N, C_in, T] input.

    Computed channel-last ([N, T, C]) so each layer is a single GEMM; outputs are
    transposed views, which makes the next layer's channel-last view free.
    """
    c_out, c_in, k = weight.shape
    n, _, t_in = x.shape
    t_pad = t_in + 2 * pad
    t_out = t_pad - k + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {t_in} too short for valid padding")
    xl = x.data.transpose(0, 2, 1)
    if pad:
        padded = np.zeros((n, t_pad, c_in), dtype=DTYPE)
        padded[:, pad:pad + t_in, :] = xl
        xl = padded
    cols = np.concatenate([xl[:, j:j + t_out, :] for j in range(k)], axis=2).reshape(n * t_out, k * c_in)
    wl = weight.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = (cols @ wl + bias.data).reshape(n, t_out, c_out)

    def grad_fn(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * t_out, c_out)
        gw = (cols.T @ gl).reshape(k, c_in, c_out).transpose(2, 1, 0)
        gb = gl.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (gl @ wl.T).reshape(n, t_out, k * c_in)
            gxl = np.zeros((n, t_pad, c_in), dtype=DTYPE)
            for j in range(k):
                gxl[:, j:j + t_out, :] += gcols[:, :, j * c_in:(j + 1) * c_in]
            gx = gxl[:, pad:pad + t_in, :].transpose(0, 2, 1)
        return gx, np.ascontiguousarray(gw), gb

    return _make(out.transpose(0, 2, 1), (x, weight, bias), grad_fn)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Kernel-3 1d convolution (cross-correlation) over [N, C_in, T] or [C_in, T]."""
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    x, squeeze = _batched(x, 3)
    c_out, c_in, k = weight.shape
    if k != KERNEL_SIZE:
        raise ShapeError(f"kernel size must be {KERNEL_SIZE}, got {k}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: input has {x.shape[1]} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    result = _conv_core(x, weight, bias, 1 if padding == "same" else 0)
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Transpose of :func:`conv1d`; weight is [C_in, C_out, 3].

    ``valid`` grows the time axis by two, ``same`` keeps it.
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    x, squeeze = _batched(x, 3)
    if weight.ndim != 3 or weight.shape[0] != x.shape[1] or weight.shape[2] != KERNEL_SIZE:
        raise ShapeError(
            f"conv_transpose1d: input has {x.shape[1]} channels, weight is {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"conv_transpose1d: bias shape {bias.shape} != ({weight.shape[1]},)")
    pad = KERNEL_SIZE - 1 if padding == "valid" else (KERNEL_SIZE - 1) // 2
    result = _conv_core(x, kernel_adjoint(weight), bias, pad)
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for x of shape [N_in] or [batch, N_in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def grad_fn(g):
        if g.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return g @ wd, gw, gb

    return _make(out, (x, weight, bias), grad_fn)


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one normalization layer."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    weight: Tensor = field(init=False)
    bias: Tensor = field(init=False)
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = parameter(np.ones(self.num_features))
        self.bias = parameter(np.zeros(self.num_features))
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of [N, C] or [N, C, T] inputs."""
    if x.ndim not in (2, 3) or x.shape[1] != state.num_features:
        raise ShapeError(f"batchnorm: input {x.shape} does not match {state.num_features} features")
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    gamma, beta = state.weight, state.bias
    xd = x.data

    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

        def eval_grad(g):
            return (g * (gamma.data * inv).reshape(bshape),
                    (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _make(out, (x, gamma, beta), eval_grad)

    if x.shape[0] < 2:
        raise DegenerateInputError("batchnorm in train mode needs a batch of at least 2")
    m = xd.size // x.shape[1]
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
    unbiased = var * m / max(m - 1, 1)
    state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased

    def grad_fn(g):
        gg = g * gamma.data.reshape(bshape)
        gx = (inv.reshape(bshape) / m) * (
            m * gg - gg.sum(axis=axes).reshape(bshape)
            - xhat * (gg * xhat).sum(axis=axes).reshape(bshape))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), grad_fn)


def timestep_dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero whole time steps (all channels at once) of [N, C, T] or [C, T] input."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("timestep_dropout in train mode needs an rng")
    shape = list(x.shape)
    shape[-2] = 1
    mask = (rng.random(shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    vd = v.data
    norm = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError("l2_normalize: zero-norm vector")
    y = vd / norm

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (v,), grad_fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target)
    if pred.data.size != target.data.size:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    if pred.shape != target.shape:
        target = Tensor(target.data.reshape(pred.shape))
    return mean(square(sub(pred, target)))


def rmse_loss(pred: Tensor, target) -> Tensor:
    return sqrt(mse_loss(pred, target))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction over a named parameter map."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update of ``params``."""
    for name in params:
        if grads.get(name) is None:
            raise ValueError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.m[name].shape != p.data.shape:
            raise ShapeError(f"Adam moments for {name!r} do not match parameter shape")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints


def state_to_json(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "tensors": {
            name: {"shape": list(np.shape(a)), "values": np.asarray(a, dtype=DTYPE).ravel().tolist()}
            for name, a in arrays.items()
        },
    }


def state_from_json(doc: Mapping) -> Tuple[Dict[str, np.ndarray], dict]:
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    arrays = {
        name: np.asarray(entry["values"], dtype=DTYPE).reshape(entry["shape"])
        for name, entry in doc["tensors"].items()
    }
    return arrays, dict(doc.get("meta", {}))


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(state_to_json(arrays, meta), fh)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path) as fh:
        return state_from_json(json.load(fh))


def numerical_grad(f: Callable[[], float], arrays: Iterable[np.ndarray], eps: float = 1e-5) -> list:
    """Central differences of scalar ``f`` w.r.t. each array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            fp = f()
            a[idx] = orig - eps
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
