"""Real-valued layers with hand-written backward passes.

Activations are float64 arrays laid out as (batch, height, width, channels).
A single example of shape (height, width, channels) is accepted by the
forward functions and returned without the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (b, h, w, c) or (h, w, c), got {x.shape}")
    return x, False


# --------------------------------------------------------------------------- conv

@dataclass
class ConvLayer:
    weight: np.ndarray          # (out_ch, 3, 3, in_ch)
    bias: np.ndarray            # (out_ch,)

    @classmethod
    def init(cls, in_ch: int, out_ch: int, rng: np.random.Generator) -> "ConvLayer":
        """He-uniform weights (bound sqrt(6 / fan_in)), zero bias."""
        bound = np.sqrt(6.0 / (9 * in_ch))
        w = rng.uniform(-bound, bound, size=(out_ch, 3, 3, in_ch))
        return cls(weight=w, bias=np.zeros(out_ch))

    @property
    def in_ch(self) -> int:
        return self.weight.shape[3]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


def im2col(x: np.ndarray) -> np.ndarray:
    """3x3 patches of a zero-padded (b, h, w, c) tensor, shape (b*h*w, 9*c)."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 3, 3, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, 9 * c)


def conv2d_forward(x, layer: ConvLayer, cols: np.ndarray | None = None) -> np.ndarray:
    """Stride-1, same-padded 3x3 cross-correlation plus bias."""
    xb, single = _batched(x)
    if xb.shape[-1] != layer.in_ch:
        raise ShapeError(f"input has {xb.shape[-1]} channels, layer expects {layer.in_ch}")
    b, h, w, _ = xb.shape
    if cols is None:
        cols = im2col(xb)
    y = cols @ layer.weight.reshape(layer.out_ch, -1).T + layer.bias
    y = y.reshape(b, h, w, layer.out_ch)
    return y[0] if single else y


def conv2d_backward(x, layer: ConvLayer, grad_out, cols: np.ndarray | None = None):
    """Return (grad_x, grad_weight, grad_bias)."""
    xb, single = _batched(x)
    gy, _ = _batched(grad_out)
    b, h, w, cin = xb.shape
    if cin != layer.in_ch or gy.shape != (b, h, w, layer.out_ch):
        raise ShapeError(f"grad_out {gy.shape} does not match forward of {xb.shape}")
    if cols is None:
        cols = im2col(xb)
    g = gy.reshape(-1, layer.out_ch)
    grad_w = (g.T @ cols).reshape(layer.weight.shape)
    grad_b = g.sum(axis=0)
    gcols = (g @ layer.weight.reshape(layer.out_ch, -1)).reshape(b, h, w, 3, 3, cin)
    gxp = np.zeros((b, h + 2, w + 2, cin))
    for i in range(3):
        for j in range(3):
            gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, i, j, :]
    grad_x = gxp[:, 1:-1, 1:-1, :]
    return (grad_x[0] if single else grad_x), grad_w, grad_b


# --------------------------------------------------------------------------- batch norm

@dataclass
class BatchNormLayer:
    gain: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def init(cls, channels: int, eps: float = 1e-5, momentum: float = 0.9) -> "BatchNormLayer":
        if eps <= 0 or not 0 < momentum < 1:
            raise ValueError("need eps > 0 and 0 < momentum < 1")
        return cls(gain=np.ones(channels), shift=np.zeros(channels),
                   running_mean=np.zeros(channels), running_var=np.ones(channels),
                   eps=eps, momentum=momentum)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray


def batchnorm_forward(x, layer: BatchNormLayer, mode: str = "train"):
    """Per-channel normalisation over batch and spatial axes.

    Returns ``(y, cache)``; the cache is None in eval mode.  Train mode folds
    the batch statistics into the running estimates:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    xb, single = _batched(x)
    if mode == "train":
        n = xb.shape[0] * xb.shape[1] * xb.shape[2]
        if n < 2:
            raise ShapeError("batch norm in train mode needs at least two values per channel")
        mean = xb.mean(axis=(0, 1, 2))
        var = xb.var(axis=(0, 1, 2))
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        xhat = (xb - mean) * inv_std
        m = layer.momentum
        layer.running_mean *= m
        layer.running_mean += (1 - m) * mean
        layer.running_var *= m
        layer.running_var += (1 - m) * var * n / (n - 1)
        cache = BatchNormCache(xhat=xhat, inv_std=inv_std)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (xb - layer.running_mean) * inv_std
        cache = None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    y = layer.gain * xhat + layer.shift
    return (y[0] if single else y), cache


def batchnorm_backward(x, layer: BatchNormLayer, grad_out, cache: BatchNormCache | None):
    """Gradients of the train-mode forward: (grad_x, grad_gain, grad_shift)."""
    if cache is None:
        raise ValueError("batchnorm_backward needs the train-mode cache")
    gy, single = _batched(grad_out)
    if gy.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out {gy.shape} does not match cached {cache.xhat.shape}")
    axes = (0, 1, 2)
    n = gy.shape[0] * gy.shape[1] * gy.shape[2]
    grad_gain = np.sum(gy * cache.xhat, axis=axes)
    grad_shift = np.sum(gy, axis=axes)
    gxhat = gy * layer.gain
    grad_x = cache.inv_std / n * (
        n * gxhat - gxhat.sum(axis=axes) - cache.xhat * np.sum(gxhat * cache.xhat, axis=axes))
    return (grad_x[0] if single else grad_x), grad_gain, grad_shift


# --------------------------------------------------------------------------- relu

def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


# --------------------------------------------------------------------------- gradient check

def finite_difference_check(fn, point, analytic, step: float = 1e-5, floor: float = 1e-8,
                            mask=None) -> float:
    """Largest elementwise relative error between ``analytic`` and centred differences of ``fn``.

    ``fn`` maps an array shaped like ``point`` to a scalar.  The relative error
    is ``|num - ana| / max(|num|, |ana|, floor)``.  Entries where ``mask`` is
    False (kinks, say) are skipped.
    """
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != point shape {point.shape}")
    flat = point.reshape(-1)
    ana = analytic.reshape(-1)
    keep = np.ones(flat.size, bool) if mask is None else np.asarray(mask).reshape(-1)
    worst = 0.0
    for i in np.flatnonzero(keep):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(point)
        flat[i] = orig - step
        down = fn(point)
        flat[i] = orig
        num = (up - down) / (2 * step)
        err = abs(num - ana[i]) / max(abs(num), abs(ana[i]), floor)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr=None):
    """In-place adaptive-moment update of ``params``; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} / gradient {g.shape} mismatch")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
