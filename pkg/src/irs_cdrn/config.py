"""Experiment configuration: INI-style ``.cfg`` files with strict key checking.

Precedence is CLI flags > config file > built-in defaults.  Every section and
key is listed in ``_SCHEMA``; anything else is rejected.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .cdrn import TrainConfig
from .channel import LINK_NAMES, REF_DISTANCE, REF_LOSS, LinkParams, SystemConfig, default_links
from .estimators import ESTIMATORS

OUT_DIR_ENV = "IRS_CDRN_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CdrnParams:
    D: int = 3
    n_layers: int = 5
    filters: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    links: dict = field(default_factory=default_links)
    snr_reference: str = "transmit"       # or "received"
    estimators: tuple = ("ls", "lmmse", "b-lmmse", "cdrn")
    snr_db: tuple = (10.0,)
    trials: int = 10_000
    chunk: int = 500
    workers: int = 1
    n_train: int = 5000
    n_test: int = 1000
    cdrn: CdrnParams = field(default_factory=CdrnParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_mode: str = "per-snr"           # or "blind"
    per_user: bool = False
    seed: int = 0
    out_dir: Path = Path("out")

    def __post_init__(self):
        if len(self.snr_db) == 0:
            raise ConfigError("SNR grid is empty")
        if self.trials < 1 or self.chunk < 1 or self.workers < 1:
            raise ConfigError("trials, chunk and workers must be >= 1")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown or not self.estimators:
            raise ConfigError(f"unknown estimators {unknown}; known: {ESTIMATORS}")
        if self.snr_reference not in ("transmit", "received"):
            raise ConfigError("snr_reference must be 'transmit' or 'received'")
        if self.train_mode not in ("per-snr", "blind"):
            raise ConfigError("train_mode must be 'per-snr' or 'blind'")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        if set(self.links) != set(LINK_NAMES):
            raise ConfigError(f"links must be exactly {LINK_NAMES}")


def _list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _db_to_lin(s: str) -> float:
    return 10 ** (float(s) / 10)


def _angles(s: str):
    if s.strip().lower() in ("", "none", "random"):
        return None
    vals = [float(x) for x in _list(s)]
    if len(vals) != 2:
        raise ValueError("los_angles needs two comma-separated radians")
    return tuple(vals)


# section -> key -> (target, parser)
_LINK_KEYS = {
    "distance": ("distance", float),
    "exponent": ("exponent", float),
    "rician_factor": ("rician_factor", float),
    "ref_loss_db": ("ref_loss", _db_to_lin),
    "ref_distance": ("ref_distance", float),
    "los_angles": ("los_angles", _angles),
}
_SCHEMA = {
    "system": {
        "M": ("system.M", int), "N": ("system.N", int), "K": ("system.K", int),
        "C": ("system.C", int), "L": ("system.L", int),
        "pilot_power": ("system.pilot_power", float),
        "snr_reference": ("snr_reference", str),
    },
    "estimators": {"use": ("estimators", lambda s: tuple(_list(s)))},
    "training": {
        "n_train": ("n_train", int), "n_test": ("n_test", int),
        "D": ("cdrn.D", int), "n_layers": ("cdrn.n_layers", int),
        "filters": ("cdrn.filters", int), "bn_eps": ("cdrn.bn_eps", float),
        "bn_momentum": ("cdrn.bn_momentum", float),
        "epochs": ("train.epochs", int), "batch_size": ("train.batch_size", int),
        "lr": ("train.lr", float), "lr_decay": ("train.lr_decay", float),
        "beta1": ("train.beta1", float), "beta2": ("train.beta2", float),
        "adam_eps": ("train.adam_eps", float), "val_fraction": ("train.val_fraction", float),
        "mode": ("train_mode", str), "per_user": ("per_user", _bool),
    },
    "sweep": {
        "snr_db": ("snr_db", lambda s: tuple(float(x) for x in _list(s))),
        "trials": ("trials", int), "chunk": ("chunk", int), "workers": ("workers", int),
    },
    "seeds": {"seed": ("seed", int)},
    "output": {"dir": ("out_dir", Path)},
}
# case-sensitive keys (M, N, K, ...) need the raw option names
_KEYS_CI = {sec: {k.lower(): k for k in keys} for sec, keys in _SCHEMA.items()}


def _apply(values: dict, cfg: ExperimentConfig) -> ExperimentConfig:
    groups: dict[str, dict] = {"system": {}, "cdrn": {}, "train": {}}
    top = {}
    for target, val in values.items():
        if "." in target:
            grp, name = target.split(".", 1)
            groups[grp][name] = val
        else:
            top[target] = val
    try:
        system = replace(cfg.system, **groups["system"])
        cdrn = replace(cfg.cdrn, **groups["cdrn"])
        train = replace(cfg.train, **groups["train"])
        return replace(cfg, system=system, cdrn=cdrn, train=train, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a ``.cfg`` file on top of the defaults, then apply ``overrides``.

    ``overrides`` maps top-level ExperimentConfig field names (``seed``,
    ``out_dir``, ...) to values and takes precedence over the file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict = {}
    links = dict(default_links())
    for section in parser.sections():
        if section.startswith("link:"):
            name = section.split(":", 1)[1].strip().upper()
            if name not in LINK_NAMES:
                raise ConfigError(f"unknown link section [{section}]")
            kwargs = {}
            for key, raw in parser.items(section):
                if key not in _LINK_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                attr, conv = _LINK_KEYS[key]
                try:
                    kwargs[attr] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            try:
                links[name] = replace(links[name], **kwargs)
            except ValueError as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            canon = _KEYS_CI[section].get(key.lower())
            if canon is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            target, conv = _SCHEMA[section][canon]
            try:
                values[target] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc

    if "out_dir" not in values and os.environ.get(OUT_DIR_ENV):
        values["out_dir"] = Path(os.environ[OUT_DIR_ENV])
    values["links"] = links
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    cfg = _apply(values, ExperimentConfig())
    if "seed" in values:
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    return cfg


def link_summary(links: dict[str, LinkParams]) -> str:
    return ", ".join(f"{k}: {v.distance} m, exp {v.exponent}, K-factor {v.rician_factor}"
                     for k, v in links.items())


__all__ = ["CdrnParams", "ConfigError", "ExperimentConfig", "load_config", "OUT_DIR_ENV",
           "REF_LOSS", "REF_DISTANCE"]
