"""Shared oracles for the test-suite."""
import numpy as np

from rulssl import autodiff as ad
from rulssl.data import EngineSeries, SeriesSet

FD_EPS = 1e-5


def gradcheck(fn, arrays, seed=0, eps=FD_EPS):
    """Max relative error between backward() and central differences.

    ``fn`` maps leaf Tensors to a Tensor; the scalar checked is sum(out * R) for a
    fixed random R. Error is ||a - n||_inf / max(||a||_inf, ||n||_inf, 1e-8) over
    the gradients of all inputs taken together.
    """
    leaves = [ad.parameter(np.array(a, dtype=float)) for a in arrays]
    out = fn(*leaves)
    weights = np.random.default_rng(seed).normal(size=out.shape)

    def scalar():
        return float((fn(*leaves).data * weights).sum())

    loss = ad.reduce_sum(ad.mul(out, ad.Tensor(weights)))
    for leaf in leaves:
        leaf.zero_grad()
    loss.backward()
    numeric = ad.numerical_grad(scalar, [leaf.data for leaf in leaves], eps)
    analytic = np.concatenate([leaf.grad.ravel() for leaf in leaves])
    numeric = np.concatenate([n.ravel() for n in numeric])
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 2.0, size=shape)


def ramp_set(lengths, channels=14, subset="FD001", role="train", noise=0.0, seed=0, start_id=1):
    """Series whose channels rise linearly towards failure (a perfectly learnable toy corpus)."""
    rng = np.random.default_rng(seed)
    series = []
    for k, length in enumerate(lengths):
        t = np.arange(1, length + 1)
        rul = length - t
        health = np.clip((125 - rul) / 125, 0, 1)
        slopes = np.linspace(0.5, 1.5, channels)
        readings = np.outer(health, slopes) + noise * rng.normal(size=(length, channels))
        series.append(EngineSeries(start_id + k, readings))
    return SeriesSet(subset, role, series)


# -- loop-based reference forward passes (eval mode) -------------------------

def naive_conv(x, weight, bias, pad):
    """x [C, T], weight [O, C, 3]; zero padding of ``pad`` on both sides."""
    c, t = x.shape
    xp = np.zeros((c, t + 2 * pad))
    xp[:, pad:pad + t] = x
    t_out = t + 2 * pad - 2
    out = np.zeros((weight.shape[0], t_out))
    for o in range(weight.shape[0]):
        for s in range(t_out):
            acc = bias[o]
            for i in range(c):
                for k in range(3):
                    acc += weight[o, i, k] * xp[i, s + k]
            out[o, s] = acc
    return out


def naive_conv_transpose(x, weight, bias, crop):
    """Scatter form: every input step spreads a kernel-wide footprint; ``crop`` trims both ends."""
    c_in, t = x.shape
    full = np.zeros((weight.shape[1], t + 2))
    for i in range(c_in):
        for s in range(t):
            for o in range(weight.shape[1]):
                for k in range(3):
                    full[o, s + k] += weight[i, o, k] * x[i, s]
    full += bias[:, None]
    return full[:, crop:full.shape[1] - crop] if crop else full


def naive_bn_eval(x, bn):
    scale = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
    shape = (-1, 1) if x.ndim == 2 else (-1,)
    return (x - bn.running_mean.reshape(shape)) * scale.reshape(shape) + bn.bias.data.reshape(shape)


def naive_extractor(f, frame):
    x = frame
    for block in f.conv:
        pad = 1 if block.padding == "same" else 0
        x = np.maximum(naive_bn_eval(naive_conv(x, block.weight.data, block.bias.data, pad), block.bn), 0.0)
    return f.fc.weight.data @ x.ravel() + f.fc.bias.data


def naive_decoder(dec, z):
    cfg = dec.config
    x = np.maximum(dec.fc.weight.data @ z + dec.fc.bias.data, 0.0).reshape(cfg.filters, cfg.out_length)
    for block in dec.conv:
        x = naive_conv_transpose(x, block.weight.data, block.bias.data, 1 if block.padding == "same" else 0)
        if block.activate:
            x = np.maximum(naive_bn_eval(x, block.bn), 0.0)
    return x


def naive_head(g, z):
    if g.normalize:
        z = z / np.sqrt(sum(v * v for v in z))
    h = np.maximum(naive_bn_eval(z, g.bn), 0.0)
    return float(g.fc.weight.data[0] @ h + g.fc.bias.data[0])
