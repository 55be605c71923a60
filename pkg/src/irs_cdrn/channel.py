"""Rician link generation and assembly of the composite channel H_k = [d_k, B_k]."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REF_LOSS = 10 ** (-15 / 10)   # -15 dB at the reference distance
REF_DISTANCE = 10.0           # metres

LINK_NAMES = ("UB", "IB", "UI")


@dataclass(frozen=True)
class SystemConfig:
    M: int = 4          # BS antennas
    N: int = 8          # IRS elements
    K: int = 2          # users
    C: int = 9          # sub-frames
    L: int = 2          # pilot length
    pilot_power: float = 1.0
    noise_var_v: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "N", "K", "C", "L"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.C < self.N + 1:
            raise ValueError(f"need C >= N + 1 sub-frames, got C={self.C}, N={self.N}")
        if self.L < self.K:
            raise ValueError(f"need pilot length L >= K, got L={self.L}, K={self.K}")
        if not (self.pilot_power > 0 and self.noise_var_v > 0):
            raise ValueError("pilot_power and noise_var_v must be positive")


@dataclass(frozen=True)
class LinkParams:
    distance: float
    exponent: float
    rician_factor: float = 0.0
    ref_loss: float = REF_LOSS
    ref_distance: float = REF_DISTANCE
    # Fixed (row, col) ULA angles in radians for the LOS term; None draws them per realization.
    los_angles: tuple[float, float] | None = None

    def __post_init__(self):
        if not (self.distance > 0 and self.ref_distance > 0 and self.ref_loss > 0):
            raise ValueError("distance, ref_distance and ref_loss must be positive")
        if self.exponent < 0 or self.rician_factor < 0:
            raise ValueError("exponent and rician_factor must be non-negative")


def default_links() -> dict[str, LinkParams]:
    """User-BS, IRS-BS and user-IRS links of the reference deployment."""
    return {
        "UB": LinkParams(distance=100.0, exponent=3.6, rician_factor=0.0),
        "IB": LinkParams(distance=90.0, exponent=2.3, rician_factor=10.0),
        "UI": LinkParams(distance=16.0, exponent=2.0, rician_factor=0.0),
    }


def path_loss(link: LinkParams) -> float:
    return link.ref_loss * (link.distance / link.ref_distance) ** (-link.exponent)


def ula_response(n: int, angle) -> np.ndarray:
    """Half-wavelength ULA response; ``angle`` may be an array (leading dims kept)."""
    angle = np.asarray(angle, dtype=float)
    idx = np.arange(n)
    return np.exp(1j * np.pi * np.sin(angle)[..., None] * idx)


def cn(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian samples with per-entry variance ``var``."""
    z = rng.standard_normal((*shape, 2))
    return np.sqrt(var / 2) * (z[..., 0] + 1j * z[..., 1])


def _batch(batch) -> tuple:
    if batch is None:
        return ()
    if isinstance(batch, (int, np.integer)):
        return (int(batch),)
    return tuple(int(b) for b in batch)


def rician_parts(rows, cols, beta, rng, batch=(), los_angles=None):
    """Return the scaled LOS and NLOS terms of a Rician draw separately.

    The LOS term is the rank-one outer product of two ULA responses, so every
    entry has unit modulus before scaling.  Angles are drawn uniformly on
    [-pi/2, pi/2) for each draw unless ``los_angles`` pins them.
    """
    if beta < 0:
        raise ValueError("rician factor must be non-negative")
    batch = _batch(batch)
    if los_angles is None:
        ang = rng.uniform(-np.pi / 2, np.pi / 2, size=(*batch, 2))
    else:
        ang = np.broadcast_to(np.asarray(los_angles, dtype=float), (*batch, 2))
    a_r = ula_response(rows, ang[..., 0])
    a_c = ula_response(cols, ang[..., 1])
    los = a_r[..., :, None] * a_c[..., None, :]
    nlos = cn(rng, (*batch, rows, cols))
    return np.sqrt(beta / (beta + 1)) * los, np.sqrt(1 / (beta + 1)) * nlos


def sample_rician(rows, cols, beta, rng, batch=(), los_angles=None) -> np.ndarray:
    los, nlos = rician_parts(rows, cols, beta, rng, batch=batch, los_angles=los_angles)
    return los + nlos


@dataclass(frozen=True)
class ChannelRealization:
    """One (or a batch of) channel draws.

    Shapes, with optional leading batch dims ``...``:
    G (..., M, N), f (..., K, N), d (..., K, M).
    """
    G: np.ndarray
    f: np.ndarray
    d: np.ndarray
    B: np.ndarray = field(init=False, repr=False)
    H: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # B_k[:, n] = G[:, n] * f_k[n]
        B = self.G[..., None, :, :] * self.f[..., :, None, :]
        H = np.concatenate([self.d[..., :, :, None], B], axis=-1)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "H", H)

    @property
    def K(self) -> int:
        return self.f.shape[-2]


def realize_channels(cfg: SystemConfig, links: dict[str, LinkParams] | None, rng,
                     batch=()) -> ChannelRealization:
    """Draw G, then f_1..f_K, then d_1..d_K, each scaled by the link's sqrt path loss.

    Each f_k (N x 1) and d_k (M x 1) is an independent Rician link of its own.
    """
    links = default_links() if links is None else links
    batch = _batch(batch)
    ub, ib, ui = links["UB"], links["IB"], links["UI"]
    G = np.sqrt(path_loss(ib)) * sample_rician(
        cfg.M, cfg.N, ib.rician_factor, rng, batch=batch, los_angles=ib.los_angles)
    per_user = (*batch, cfg.K)
    f = np.sqrt(path_loss(ui)) * sample_rician(
        cfg.N, 1, ui.rician_factor, rng, batch=per_user, los_angles=ui.los_angles)[..., 0]
    d = np.sqrt(path_loss(ub)) * sample_rician(
        cfg.M, 1, ub.rician_factor, rng, batch=per_user, los_angles=ub.los_angles)[..., 0]
    return ChannelRealization(G=G, f=f, d=d)


def mean_entry_power(cfg: SystemConfig, links: dict[str, LinkParams] | None = None) -> float:
    """Average E|H_k[m, n]|^2 over the M x (N+1) entries."""
    links = default_links() if links is None else links
    direct = path_loss(links["UB"])
    cascaded = path_loss(links["IB"]) * path_loss(links["UI"])
    return (direct + cfg.N * cascaded) / (cfg.N + 1)
