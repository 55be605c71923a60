"""Convolutional deep residual network (CDRN) for denoising LS channel estimates.

The network sees the real/imaginary split of the noisy channel matrix and
runs D denoising blocks; block d predicts the noise left in its input and
subtracts it, so the output equals the input minus the sum of all block
residuals.  Inputs are divided by a fixed power-of-two ``scale`` on the way
in and multiplied back on the way out, which keeps activations O(1)
without perturbing any value (power-of-two scaling is exact).
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import denoise_observation
from .nn import (
    AdamState, BatchNormLayer, ConvLayer, ShapeError, adam_step, batchnorm_backward,
    batchnorm_forward, conv2d_backward, conv2d_forward, im2col, relu_backward, relu_forward,
)
from .protocol import ReflectionSchedule

log = logging.getLogger(__name__)

CKPT_MAGIC = b"IRSCDRN\x00"
ACTS_MAGIC = b"IRSACTS\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<IIIIIddd")   # M, N, D, N_l, filters, bn_eps, bn_momentum, scale


class NumericalError(RuntimeError):
    """Training diverged or produced non-finite values."""


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- complex <-> real

def to_real_channels(X) -> np.ndarray:
    """(..., M, N+1) complex -> (..., M, N+1, 2) real with [real, imag] channels."""
    X = np.asarray(X)
    return np.stack([X.real, X.imag], axis=-1).astype(np.float64)


def from_real_channels(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 3 or A.shape[-1] != 2:
        raise ShapeError(f"expected a trailing channel axis of size 2, got {A.shape}")
    return A[..., 0] + 1j * A[..., 1]


# --------------------------------------------------------------------------- model

@dataclass
class DenoisingBlock:
    convs: list[ConvLayer]
    bns: list[BatchNormLayer]

    @classmethod
    def init(cls, n_layers: int, filters: int, rng, bn_eps=1e-5, bn_momentum=0.9):
        if n_layers < 2:
            raise ValueError("a denoising block needs at least two layers")
        chans = [2] + [filters] * (n_layers - 1) + [2]
        convs = [ConvLayer.init(chans[i], chans[i + 1], rng) for i in range(n_layers)]
        bns = [BatchNormLayer.init(filters, bn_eps, bn_momentum) for _ in range(n_layers - 1)]
        return cls(convs=convs, bns=bns)

    @property
    def n_layers(self) -> int:
        return len(self.convs)


@dataclass
class CdrnModel:
    M: int
    N: int
    blocks: list[DenoisingBlock]
    filters: int = 64
    scale: float = 1.0

    @classmethod
    def init(cls, M: int, N: int, D: int = 3, n_layers: int = 5, filters: int = 64,
             seed: int = 0, scale: float = 1.0, bn_eps: float = 1e-5, bn_momentum: float = 0.9):
        if D < 1:
            raise ValueError("need at least one denoising block")
        rng = np.random.default_rng(seed)
        blocks = [DenoisingBlock.init(n_layers, filters, rng, bn_eps, bn_momentum)
                  for _ in range(D)]
        return cls(M=M, N=N, blocks=blocks, filters=filters, scale=float(scale))

    @property
    def D(self) -> int:
        return len(self.blocks)

    @property
    def n_layers(self) -> int:
        return self.blocks[0].n_layers

    @property
    def bn_eps(self) -> float:
        return self.blocks[0].bns[0].eps

    @property
    def bn_momentum(self) -> float:
        return self.blocks[0].bns[0].momentum

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in checkpoint order: per block, per layer, conv w/b then BN gain/shift."""
        out = []
        for blk in self.blocks:
            for i, conv in enumerate(blk.convs):
                out += [conv.weight, conv.bias]
                if i < len(blk.bns):
                    out += [blk.bns[i].gain, blk.bns[i].shift]
        return out

    def running_stats(self) -> list[np.ndarray]:
        out = []
        for blk in self.blocks:
            for bn in blk.bns:
                out += [bn.running_mean, bn.running_var]
        return out

    def zero_(self) -> "CdrnModel":
        """Set every conv weight/bias and BN shift to zero (identity network)."""
        for blk in self.blocks:
            for conv in blk.convs:
                conv.weight[...] = 0.0
                conv.bias[...] = 0.0
            for bn in blk.bns:
                bn.shift[...] = 0.0
        return self


def power_of_two_scale(x) -> float:
    """Nearest power of two to the RMS of ``x`` (1.0 for all-zero input)."""
    rms = float(np.sqrt(np.mean(np.square(x))))
    if rms == 0 or not np.isfinite(rms):
        return 1.0
    return float(2.0 ** np.round(np.log2(rms)))


# --------------------------------------------------------------------------- forward / backward

def _check_input(A, model: CdrnModel):
    A = np.asarray(A, dtype=np.float64)
    single = A.ndim == 3
    Ab = A[None] if single else A
    if Ab.ndim != 4 or Ab.shape[-1] != 2:
        raise ShapeError(f"expected (b, M, N+1, 2) input, got {A.shape}")
    return Ab, single


def _residual_forward(x, blk: DenoisingBlock, mode: str):
    cache = []
    h = x
    for i, conv in enumerate(blk.convs):
        cols = im2col(h)
        z = conv2d_forward(h, conv, cols=cols)
        if i < len(blk.bns):
            y, bn_cache = batchnorm_forward(z, blk.bns[i], mode)
            a = relu_forward(y)
            cache.append((h, cols, bn_cache, y))
            h = a
        else:
            cache.append((h, cols, None, None))
            h = z
    return h, cache


def _residual_backward(blk: DenoisingBlock, cache, grad):
    grads = []
    g = grad
    for i in reversed(range(blk.n_layers)):
        h, cols, bn_cache, y = cache[i]
        layer_grads = []
        if i < len(blk.bns):
            g = relu_backward(y, g)
            g, g_gain, g_shift = batchnorm_backward(None, blk.bns[i], g, bn_cache)
            layer_grads = [g_gain, g_shift]
        g, g_w, g_b = conv2d_backward(h, blk.convs[i], g, cols=cols)
        grads = [g_w, g_b] + layer_grads + grads
    return g, grads


def block_forward(A_prev, blk: DenoisingBlock, mode: str = "eval"):
    """Return ``(A_next, residual)`` with ``A_next = A_prev - residual``."""
    x = np.asarray(A_prev, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or xb.shape[-1] != 2:
        raise ShapeError(f"expected (b, M, N+1, 2) input, got {x.shape}")
    res, _ = _residual_forward(xb, blk, mode)
    nxt = xb - res
    return (nxt[0], res[0]) if single else (nxt, res)


def _forward_scaled(a, model: CdrnModel, mode: str, keep_cache: bool):
    acts = [a]
    residuals = []
    caches = []
    for blk in model.blocks:
        res, cache = _residual_forward(acts[-1], blk, mode)
        residuals.append(res)
        acts.append(acts[-1] - res)
        if keep_cache:
            caches.append(cache)
    return acts, residuals, caches


def cdrn_forward(A, model: CdrnModel, mode: str = "eval"):
    """Return ``(output, [residual_1 .. residual_D])`` in the units of ``A``."""
    Ab, single = _check_input(A, model)
    acts, residuals, _ = _forward_scaled(Ab / model.scale, model, mode, keep_cache=False)
    out = acts[-1] * model.scale
    residuals = [r * model.scale for r in residuals]
    if single:
        return out[0], [r[0] for r in residuals]
    return out, residuals


def block_activations(A, model: CdrnModel, mode: str = "eval") -> list[np.ndarray]:
    """[A, A_1, ..., A_D] in the units of ``A``."""
    Ab, single = _check_input(A, model)
    acts, _, _ = _forward_scaled(Ab / model.scale, model, mode, keep_cache=False)
    acts = [a * model.scale for a in acts]
    return [a[0] for a in acts] if single else acts


def _loss_and_grads(model: CdrnModel, a, t, mode: str = "train"):
    """Loss 1/(2B) sum ||h(a) - t||^2 on already-scaled tensors, plus parameter gradients."""
    acts, _, caches = _forward_scaled(a, model, mode, keep_cache=True)
    diff = acts[-1] - t
    B = a.shape[0]
    loss = 0.5 * float(np.sum(diff * diff)) / B
    g = diff / B
    grads: list[np.ndarray] = []
    for blk, cache in zip(reversed(model.blocks), reversed(caches)):
        # A_d = A_{d-1} - R(A_{d-1})
        g_res, blk_grads = _residual_backward(blk, cache, -g)
        g = g + g_res
        grads = blk_grads + grads
    return loss, grads


def cdrn_loss(model: CdrnModel, inputs, labels, mode: str = "train") -> float:
    """Empirical MSE cost 1/(2B) sum_i ||h(Y_i) - H_i||_F^2 over the batch."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if inputs.shape[0] == 0 or inputs.ndim != 4:
        raise ValueError("need a non-empty (b, M, N+1, 2) batch")
    if inputs.shape != labels.shape:
        raise ShapeError(f"inputs {inputs.shape} and labels {labels.shape} differ")
    out, _ = cdrn_forward(inputs, model, mode)
    diff = out - labels
    return 0.5 * float(np.sum(diff * diff)) / inputs.shape[0]


def cdrn_loss_grads(model: CdrnModel, inputs, labels, mode: str = "train"):
    """Loss and gradients of :func:`cdrn_loss` w.r.t. ``model.parameters()``."""
    s = model.scale
    loss, grads = _loss_and_grads(model, np.asarray(inputs) / s, np.asarray(labels) / s, mode)
    return loss * s * s, [g * s * s for g in grads]


# --------------------------------------------------------------------------- training

@dataclass
class TrainingSet:
    inputs: np.ndarray        # (N_t, M, N+1, 2)
    labels: np.ndarray        # (N_t, M, N+1, 2)

    def __post_init__(self):
        if self.inputs.shape != self.labels.shape or self.inputs.ndim != 4:
            raise ShapeError(f"inputs {self.inputs.shape} / labels {self.labels.shape} mismatch")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TrainConfig:
    epochs: int = 20                 # I_t
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0            # multiplicative, applied once per epoch
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def train(model: CdrnModel, data: TrainingSet, cfg: TrainConfig) -> tuple[CdrnModel, TrainHistory]:
    """Minibatch Adam on the scaled MSE cost for ``cfg.epochs`` passes over the data.

    Losses in the history are in scaled units (physical loss / scale**2).
    """
    hist = TrainHistory()
    if cfg.epochs <= 0:
        return model, hist
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    n_val = int(round(cfg.val_fraction * n)) if n > 1 else 0
    order = rng.permutation(n)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    s = model.scale
    x_all = data.inputs / s
    y_all = data.labels / s
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    params = model.parameters()
    bs = max(1, min(cfg.batch_size, len(tr_idx)))
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        perm = tr_idx[rng.permutation(len(tr_idx))]
        total, seen = 0.0, 0
        for start in range(0, len(perm), bs):
            idx = np.sort(perm[start:start + bs])
            loss, grads = _loss_and_grads(model, x_all[idx], y_all[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"loss became {loss} at epoch {epoch}, step {state.step}")
            adam_step(params, grads, state, lr=lr)
            total += loss * len(idx)
            seen += len(idx)
        hist.train_loss.append(total / seen)
        if n_val:
            hist.val_loss.append(_eval_loss(model, x_all[val_idx], y_all[val_idx]))
        log.info("epoch %d/%d train %.6g val %s", epoch + 1, cfg.epochs, hist.train_loss[-1],
                 f"{hist.val_loss[-1]:.6g}" if n_val else "-")
        lr *= cfg.lr_decay
    return model, hist


def _eval_loss(model, a, t, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, a.shape[0], chunk):
        acts, _, _ = _forward_scaled(a[start:start + chunk], model, "eval", keep_cache=False)
        diff = acts[-1] - t[start:start + chunk]
        total += 0.5 * float(np.sum(diff * diff))
    return total / a.shape[0]


# --------------------------------------------------------------------------- inference

def denoise(A, model: CdrnModel, chunk: int = 1024) -> np.ndarray:
    """Eval-mode network output for real tensors with any leading batch shape."""
    A = np.asarray(A, dtype=np.float64)
    lead = A.shape[:-3]
    flat = A.reshape(-1, *A.shape[-3:])
    out = np.empty_like(flat)
    for start in range(0, flat.shape[0], chunk):
        out[start:start + chunk], _ = cdrn_forward(flat[start:start + chunk], model, "eval")
    return out.reshape(*lead, *A.shape[-3:])


def cdrn_estimate(X, sched: ReflectionSchedule, model: CdrnModel) -> np.ndarray:
    """LS-denoised observation pushed through the trained network, back as complex."""
    Xt = denoise_observation(X, sched)
    return from_real_channels(denoise(to_real_channels(Xt), model))


def export_block_activations(X_tilde, model: CdrnModel, path=None) -> list[np.ndarray]:
    """Activations [A, A_1, ..., A_D] for a noisy channel matrix; optionally written to ``path``."""
    X_tilde = np.asarray(X_tilde)
    A = to_real_channels(X_tilde) if np.iscomplexobj(X_tilde) else X_tilde
    acts = block_activations(A, model, "eval")
    if path is not None:
        write_tensors(path, acts)
    return acts


# --------------------------------------------------------------------------- binary formats

def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(model: CdrnModel) -> bytes:
    head = CKPT_MAGIC + struct.pack("<I", FORMAT_VERSION) + _HEADER.pack(
        model.M, model.N, model.D, model.n_layers, model.filters,
        model.bn_eps, model.bn_momentum, model.scale)
    body = b"".join(_f64(a) for a in model.parameters() + model.running_stats())
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(model: CdrnModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def _verify_crc(raw: bytes, magic: bytes, what: str) -> bytes:
    if len(raw) < len(magic) + 8:
        raise CheckpointError(f"{what} is truncated ({len(raw)} bytes)")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{what} checksum mismatch (truncated or corrupted)")
    if payload[:len(magic)] != magic:
        raise CheckpointError(f"{what} has wrong magic bytes")
    (version,) = struct.unpack_from("<I", payload, len(magic))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported {what} format version {version}")
    return payload


def load_checkpoint(path) -> CdrnModel:
    payload = _verify_crc(Path(path).read_bytes(), CKPT_MAGIC, "checkpoint")
    off = len(CKPT_MAGIC) + 4
    M, N, D, n_layers, filters, eps, mom, scale = _HEADER.unpack_from(payload, off)
    off += _HEADER.size
    model = CdrnModel.init(M, N, D=D, n_layers=n_layers, filters=filters, scale=scale,
                           bn_eps=eps, bn_momentum=mom)
    arrays = model.parameters() + model.running_stats()
    need = sum(a.size for a in arrays) * 8
    if len(payload) - off != need:
        raise CheckpointError(f"checkpoint body has {len(payload) - off} bytes, header implies {need}")
    for a in arrays:
        a[...] = np.frombuffer(payload, dtype="<f8", count=a.size, offset=off).reshape(a.shape)
        off += a.size * 8
    return model


def write_tensors(path, tensors) -> Path:
    """Index, rank, dims and little-endian float64 data per tensor, CRC-32 trailer."""
    parts = [ACTS_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for i, t in enumerate(tensors):
        t = np.asarray(t, dtype=np.float64)
        parts.append(struct.pack("<II", i, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(_f64(t))
    payload = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    return path


def read_tensors(path) -> list[np.ndarray]:
    payload = _verify_crc(Path(path).read_bytes(), ACTS_MAGIC, "activation dump")
    off = len(ACTS_MAGIC) + 4
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    out = []
    for _ in range(count):
        _, ndim = struct.unpack_from("<II", payload, off)
        off += 8
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        out.append(np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(shape).copy())
        off += 8 * size
    return out
