"""Experiment orchestration: datasets, per-SNR training, Monte Carlo NMSE sweeps.

Randomness is organised in disjoint seed domains so that training data can
never overlap the evaluation draws:

* dataset channels: ``(seed, DATASET, 0)``.  The same channels are used at
  every SNR, so one correlation estimate serves the whole grid.
* dataset noise: ``(seed, DATASET, 1, snr_key)``.
* network init: ``(seed, MODEL, snr_key[, user])``.
* sweep trial t at one SNR: ``(seed, SWEEP, snr_key, t)``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cdrn import (
    CdrnModel, NumericalError, TrainingSet, cdrn_estimate, load_checkpoint, power_of_two_scale,
    save_checkpoint, to_real_channels, train,
)
from .channel import ChannelRealization, cn, mean_entry_power, realize_channels
from .config import ConfigError, ExperimentConfig
from .estimators import (
    SLICES, CorrelationEstimate, denoise_observation, estimate_correlation, lmmse_matrix,
    ls_estimate, ratio_to_db, take_slice,
)
from .linalg import fro_norm_sq
from .protocol import build_binary_schedule, build_dft_schedule, build_pilot_book, observe

log = logging.getLogger(__name__)

DATASET, SWEEP, MODEL = 0, 1, 2
CSV_COLUMNS = ("snr_db", "estimator_id", "slice", "nmse_db", "trials", "wall_time")


class MissingCheckpointError(ConfigError):
    pass


def snr_key(snr_db: float) -> int:
    """Non-negative integer tag for an SNR value (milli-dB resolution)."""
    key = int(round((float(snr_db) + 1000.0) * 1000))
    if key < 0:
        raise ConfigError(f"SNR {snr_db} dB out of range")
    return key


def substream(cfg: ExperimentConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=tuple(key)))


def noise_vars(cfg: ExperimentConfig, snr_db: float) -> tuple[float, float]:
    """(sigma_z^2, sigma_v^2) for a transmit SNR in dB.

    sigma_z^2 = P / SNR; with ``snr_reference = received`` the numerator is
    additionally multiplied by the mean per-entry channel power.
    """
    snr = 10 ** (float(snr_db) / 10)
    if not np.isfinite(snr) or snr <= 0:
        raise ConfigError(f"invalid SNR {snr_db} dB")
    sys_ = cfg.system
    ref = mean_entry_power(sys_, cfg.links) if cfg.snr_reference == "received" else 1.0
    sz = sys_.pilot_power * ref / snr
    return sz, sz * sys_.pilot_power * sys_.L


def _pilots(cfg):
    s = cfg.system
    return build_pilot_book(s.K, s.L, s.pilot_power)


def _dft(cfg):
    return build_dft_schedule(cfg.system.N, cfg.system.C)


# --------------------------------------------------------------------------- datasets

@dataclass
class DatasetSplit:
    train: TrainingSet
    test: TrainingSet
    train_users: np.ndarray          # user index of every training example
    test_users: np.ndarray
    H_train: np.ndarray              # complex training labels, (n_train, M, N+1)
    noise_var_z: float


def _n_realizations(cfg: ExperimentConfig) -> int:
    return math.ceil((cfg.n_train + cfg.n_test) / cfg.system.K)


def dataset_channels(cfg: ExperimentConfig, rng=None) -> ChannelRealization:
    rng = substream(cfg, DATASET, 0) if rng is None else rng
    return realize_channels(cfg.system, cfg.links, rng, batch=_n_realizations(cfg))


def generate_dataset(cfg: ExperimentConfig, snr_db: float, rng=None) -> DatasetSplit:
    """Pairs (F(X~), F(H)) for ``n_train`` training and ``n_test`` held-out examples.

    Each realization contributes K examples, one per user, in (realization,
    user) order.  If ``rng`` is given it drives both channels and noise.
    """
    sz, sv = noise_vars(cfg, snr_db)
    ch = dataset_channels(cfg, rng)
    noise_rng = substream(cfg, DATASET, 1, snr_key(snr_db)) if rng is None else rng
    sched = _dft(cfg)
    obs = observe(ch, sched, _pilots(cfg), sv, noise_rng)
    Xt = denoise_observation(obs, sched)
    s = cfg.system
    H = ch.H.reshape(-1, s.M, s.N + 1)
    Xt = Xt.reshape(-1, s.M, s.N + 1)
    users = np.tile(np.arange(s.K), ch.H.shape[0])
    a, b = cfg.n_train, cfg.n_train + cfg.n_test
    inputs, labels = to_real_channels(Xt), to_real_channels(H)
    return DatasetSplit(
        train=TrainingSet(inputs[:a], labels[:a]), test=TrainingSet(inputs[a:b], labels[a:b]),
        train_users=users[:a], test_users=users[a:b], H_train=H[:a], noise_var_z=sz)


def training_correlations(cfg: ExperimentConfig) -> list[CorrelationEstimate]:
    """Per-user R_H from the training split (noise-free channels, SNR independent)."""
    s = cfg.system
    H = dataset_channels(cfg).H.reshape(-1, s.M, s.N + 1)[: cfg.n_train]
    users = np.tile(np.arange(s.K), math.ceil(cfg.n_train / s.K))[: cfg.n_train]
    out = []
    for k in range(s.K):
        Hk = H[users == k]
        if len(Hk) == 0:
            raise ConfigError(f"n_train = {cfg.n_train} leaves no training samples for user {k}")
        out.append(estimate_correlation(Hk))
    return out


# --------------------------------------------------------------------------- training

def checkpoint_name(snr_db: float | None, user: int | None = None) -> str:
    tag = "blind" if snr_db is None else f"snr{float(snr_db):+.2f}dB"
    return f"cdrn_{tag}" + ("" if user is None else f"_user{user}") + ".ckpt"


def _fit(cfg: ExperimentConfig, data: TrainingSet, seed_key: tuple) -> tuple[CdrnModel, dict]:
    p = cfg.cdrn
    init_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=seed_key).generate_state(1)[0])
    model = CdrnModel.init(cfg.system.M, cfg.system.N, D=p.D, n_layers=p.n_layers,
                           filters=p.filters, seed=init_seed,
                           scale=power_of_two_scale(data.inputs),
                           bn_eps=p.bn_eps, bn_momentum=p.bn_momentum)
    model, hist = train(model, data, cfg.train)
    return model, {"train_loss": hist.train_loss, "val_loss": hist.val_loss}


def _subset(ts: TrainingSet, mask) -> TrainingSet:
    return TrainingSet(ts.inputs[mask], ts.labels[mask])


def train_models(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train the configured CDRN(s) and write checkpoints plus loss histories.

    Returns ``{snr_db: model}`` (per-SNR mode) or ``{None: model}`` (blind),
    where ``model`` is a list of K models when ``per_user`` is set.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir) / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    users = range(cfg.system.K) if cfg.per_user else [None]
    jobs = []
    if cfg.train_mode == "blind":
        per = replace(cfg, n_train=math.ceil(cfg.n_train / len(cfg.snr_db)))
        splits = [generate_dataset(per, snr) for snr in cfg.snr_db]
        data = TrainingSet(np.concatenate([d.train.inputs for d in splits]),
                           np.concatenate([d.train.labels for d in splits]))
        uidx = np.concatenate([d.train_users for d in splits])
        jobs.append((None, data, uidx))
    else:
        for snr in cfg.snr_db:
            split = generate_dataset(cfg, snr)
            jobs.append((snr, split.train, split.train_users))

    models, history = {}, {}
    for snr, data, uidx in jobs:
        key = (MODEL,) if snr is None else (MODEL, snr_key(snr))
        fitted = []
        for u in users:
            sub = data if u is None else _subset(data, uidx == u)
            t0 = time.perf_counter()
            model, hist = _fit(cfg, sub, key if u is None else (*key, u))
            log.info("trained %s in %.1f s", checkpoint_name(snr, u), time.perf_counter() - t0)
            save_checkpoint(model, out / checkpoint_name(snr, u))
            history[checkpoint_name(snr, u)] = hist
            fitted.append(model)
        models[snr] = fitted if cfg.per_user else fitted[0]
    (out / "history.json").write_text(json.dumps(history, indent=1))
    return models


def load_models(cfg: ExperimentConfig, ckpt_dir) -> dict:
    """Checkpoints for every SNR in the grid; raises naming the first missing point."""
    ckpt_dir = Path(ckpt_dir)
    users = range(cfg.system.K) if cfg.per_user else [None]
    points = [None] if cfg.train_mode == "blind" else list(cfg.snr_db)
    models = {}
    for snr in points:
        got = []
        for u in users:
            path = ckpt_dir / checkpoint_name(snr, u)
            if not path.is_file():
                where = "blind mode" if snr is None else f"SNR {snr:g} dB"
                raise MissingCheckpointError(f"no CDRN checkpoint for {where}: {path}")
            got.append(load_checkpoint(path))
        models[snr] = got if cfg.per_user else got[0]
    return models


# --------------------------------------------------------------------------- sweep

@dataclass
class SweepRow:
    snr_db: float
    estimator_id: str
    slice: str
    nmse_db: float
    trials: int
    wall_time: float


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def get(self, snr_db, estimator_id, slice_="full") -> SweepRow:
        for r in self.rows:
            if r.snr_db == snr_db and r.estimator_id == estimator_id and r.slice == slice_:
                return r
        raise KeyError((snr_db, estimator_id, slice_))

    def to_csv(self, wall_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([f"{r.snr_db:.10g}", r.estimator_id, r.slice, f"{r.nmse_db:.10g}",
                        r.trials, f"{r.wall_time:.10g}" if wall_time else ""])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read_csv(cls, path) -> "SweepResult":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected header {rd.fieldnames}")
            return cls([SweepRow(float(r["snr_db"]), r["estimator_id"], r["slice"],
                                 float(r["nmse_db"]), int(r["trials"]), float(r["wall_time"]))
                        for r in rd])


def _draw_trials(cfg, snr_db, start, stop, want_binary):
    """Channels and observations for trials [start, stop), each from its own substream."""
    sz, sv = noise_vars(cfg, snr_db)
    sched, pilots = _dft(cfg), _pilots(cfg)
    bsched = build_binary_schedule(cfg.system.N) if want_binary else None
    key = snr_key(snr_db)
    H, X, Xb = [], [], []
    s = cfg.system
    for t in range(start, stop):
        rng = substream(cfg, SWEEP, key, t)
        ch = realize_channels(s, cfg.links, rng)
        # both schedules see the same receiver noise (common random numbers);
        # the binary schedule uses the first N + 1 of the C sub-frames
        noise = cn(rng, (s.C, s.M, s.L))
        H.append(ch.H)
        X.append(observe(ch, sched, pilots, sv, None, noise=noise).X)
        if want_binary:
            Xb.append(observe(ch, bsched, pilots, sv, None, noise=noise).X)
    return np.stack(H), np.stack(X), (np.stack(Xb) if want_binary else None)


def _apply_per_user(X, fn):
    """fn(user, X_user) over the user axis of (T, K, M, C) observations."""
    return np.stack([fn(k, X[:, k]) for k in range(X.shape[1])], axis=1)


def _sweep_chunk(args):
    cfg, snr_db, start, stop, corr, model = args
    sz, _ = noise_vars(cfg, snr_db)
    ests = cfg.estimators
    H, X, Xb = _draw_trials(cfg, snr_db, start, stop, "b-lmmse" in ests)
    sched, M = _dft(cfg), cfg.system.M
    out, times = {}, {}
    for est in ests:
        t0 = time.perf_counter()
        if est == "ls":
            H_hat = ls_estimate(X, sched)
        elif est == "lmmse":
            W = [lmmse_matrix(sched, c, M, sz) for c in corr]
            H_hat = _apply_per_user(X, lambda k, x: x @ W[k])
        elif est == "b-lmmse":
            bsched = build_binary_schedule(cfg.system.N)
            W = [lmmse_matrix(bsched, c, M, sz) for c in corr]
            H_hat = _apply_per_user(Xb, lambda k, x: x @ W[k])
        else:
            if isinstance(model, list):
                H_hat = _apply_per_user(X, lambda k, x: cdrn_estimate(x, sched, model[k]))
            else:
                H_hat = cdrn_estimate(X, sched, model)
        times[est] = time.perf_counter() - t0
        for sl in SLICES:
            err = fro_norm_sq(take_slice(H - H_hat, sl)).reshape(len(H), -1).sum(axis=1)
            out[est, sl] = err
    energy = {sl: fro_norm_sq(take_slice(H, sl)).reshape(len(H), -1).sum(axis=1) for sl in SLICES}
    return out, energy, times


def run_sweep(cfg: ExperimentConfig, models: dict | None = None,
              corr: list[CorrelationEstimate] | None = None) -> SweepResult:
    """NMSE per (SNR, estimator, slice).

    Each trial draws from its own substream and per-trial errors are summed
    with ``math.fsum``, so the numbers do not depend on ``chunk`` or ``workers``.
    """
    needs_model = "cdrn" in cfg.estimators
    if needs_model:
        if models is None:
            models = load_models(cfg, Path(cfg.out_dir) / "checkpoints")
        for snr in cfg.snr_db:
            key = None if cfg.train_mode == "blind" else snr
            if key not in models:
                raise MissingCheckpointError(f"no CDRN model for SNR {snr:g} dB")
    if corr is None and any(e in cfg.estimators for e in ("lmmse", "b-lmmse")):
        corr = training_correlations(cfg)

    result = SweepResult()
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for snr in cfg.snr_db:
            model = None
            if needs_model:
                model = models[None if cfg.train_mode == "blind" else snr]
            tasks = [(cfg, snr, a, min(a + cfg.chunk, cfg.trials), corr, model)
                     for a in range(0, cfg.trials, cfg.chunk)]
            parts = list(pool.map(_sweep_chunk, tasks)) if pool else [_sweep_chunk(t) for t in tasks]
            for est in cfg.estimators:
                wall = sum(p[2][est] for p in parts)
                for sl in SLICES:
                    err = math.fsum(np.concatenate([p[0][est, sl] for p in parts]))
                    energy = math.fsum(np.concatenate([p[1][sl] for p in parts]))
                    db, _ = ratio_to_db(err, energy)
                    if not np.isfinite(db):
                        raise NumericalError(f"non-finite NMSE for {est}/{sl} at {snr:g} dB")
                    result.rows.append(SweepRow(float(snr), est, sl, db, cfg.trials, wall))
            log.info("SNR %g dB done", snr)
    finally:
        if pool:
            pool.shutdown()
    return result


# --------------------------------------------------------------------------- LS MSE check

def ls_mse_comparison(cfg: ExperimentConfig, noise_var_z: float, trials: int, seed: int = 0) -> dict:
    """Empirical LS MSE of the pipeline against an independent brute-force oracle.

    The oracle draws the post-despreading noise directly and applies an
    SVD-based pseudoinverse.  Both closed forms are reported: the exact value
    M s (N+1) / C and the smaller expression M s / ((N+1) C).
    """
    s = cfg.system
    sched, pilots = _dft(cfg), _pilots(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, 0)))
    ch = realize_channels(s, cfg.links, rng, batch=trials)
    obs = observe(ch, sched, pilots, noise_var_z * s.pilot_power * s.L, rng)
    err = fro_norm_sq(ls_estimate(obs, sched) - ch.H)[:, 0]
    orng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7, 1)))
    Z = np.sqrt(noise_var_z / 2) * (orng.standard_normal((trials, s.M, s.C))
                                   + 1j * orng.standard_normal((trials, s.M, s.C)))
    oracle = fro_norm_sq(Z @ np.linalg.pinv(sched.P))
    return {
        "empirical": float(np.mean(err)),
        "oracle": float(np.mean(oracle)),
        "exact_formula": s.M * noise_var_z * (s.N + 1) / s.C,
        "closed_form_reported": s.M * noise_var_z / ((s.N + 1) * s.C),
    }
