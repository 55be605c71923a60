"""Uplink training phase: reflection schedules, pilot book, sub-frame simulation, despreading."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelRealization, cn


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ReflectionSchedule:
    """Training matrix P of shape (N+1, C); column c is p_c = [1, r_c]."""
    P: np.ndarray
    kind: str = "dft"

    @property
    def N(self) -> int:
        return self.P.shape[0] - 1

    @property
    def C(self) -> int:
        return self.P.shape[1]

    def phase_vector(self, c: int) -> np.ndarray:
        return self.P[:, c]

    def irs_pattern(self, c: int) -> np.ndarray:
        """Reflection coefficients r_c of the N IRS elements in sub-frame c."""
        return self.P[1:, c]


@dataclass(frozen=True)
class PilotBook:
    U: np.ndarray        # (L, K), column k is u_k
    power: float

    @property
    def L(self) -> int:
        return self.U.shape[0]

    @property
    def K(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class Observation:
    """Despread observations.  ``X`` is (..., M, C) for one user or (..., K, M, C)."""
    X: np.ndarray
    noise_var_z: float


def build_dft_schedule(N: int, C: int) -> ReflectionSchedule:
    if N < 0 or C < N + 1:
        raise ProtocolError(f"DFT schedule needs C >= N + 1, got N={N}, C={C}")
    n = np.arange(N + 1)[:, None]
    c = np.arange(C)[None, :]
    # reduce the exponent mod C before the exp to keep entries exact-ish for large n*c
    P = np.exp(2j * np.pi * ((n * c) % C) / C)
    return ReflectionSchedule(P=P, kind="dft")


def build_binary_schedule(N: int) -> ReflectionSchedule:
    """One all-off sub-frame for the direct link, then one IRS element on per sub-frame."""
    P = np.zeros((N + 1, N + 1), dtype=np.complex128)
    P[0, :] = 1.0
    P[np.arange(1, N + 1), np.arange(1, N + 1)] = 1.0
    return ReflectionSchedule(P=P, kind="binary")


def build_pilot_book(K: int, L: int, power: float = 1.0) -> PilotBook:
    if L < K:
        raise ProtocolError(f"pilot length L={L} cannot separate K={K} users")
    if power <= 0:
        raise ProtocolError("pilot power must be positive")
    l = np.arange(L)[:, None]
    k = np.arange(K)[None, :]
    U = np.sqrt(power) * np.exp(-2j * np.pi * ((l * k) % L) / L)
    return PilotBook(U=U, power=float(power))


def noise_var_after_despread(noise_var_v: float, pilots: PilotBook) -> float:
    return noise_var_v / (pilots.power * pilots.L)


def simulate_subframe(chan: ChannelRealization, p_c, pilots: PilotBook,
                      noise_var_v: float, rng) -> np.ndarray:
    """Received block S_c = sum_k H_k p_c u_k^H + V_c, shape (..., M, L)."""
    p_c = np.asarray(p_c, dtype=np.complex128).reshape(-1)
    resp = chan.H @ p_c                                   # (..., K, M)
    S = np.einsum("...km,lk->...ml", resp, np.conj(pilots.U))
    if noise_var_v > 0:
        S = S + cn(rng, S.shape, noise_var_v)
    return S


def despread(S_c, u_k, power: float, L: int) -> np.ndarray:
    """x_{c,k} = S_c u_k / (P L), shape (..., M, 1)."""
    u_k = np.asarray(u_k, dtype=np.complex128).reshape(-1, 1)
    return (np.asarray(S_c) @ u_k) / (power * L)


def assemble_observation(x_list, noise_var_z: float) -> Observation:
    """Stack per-sub-frame vectors x_{c,k} (each (..., M, 1)) into X_k (..., M, C)."""
    if len(x_list) == 0:
        raise ProtocolError("need at least one sub-frame")
    X = np.concatenate([np.asarray(x) for x in x_list], axis=-1)
    return Observation(X=X, noise_var_z=noise_var_z)


def observe(chan: ChannelRealization, sched: ReflectionSchedule, pilots: PilotBook,
            noise_var_v: float, rng, noise=None) -> Observation:
    """Run all C sub-frames and despread every user in one vectorised pass.

    Returns X with shape (..., K, M, C).  Noise for all sub-frames is drawn in
    a single call, so the stream differs from calling ``simulate_subframe`` C times.
    ``noise`` optionally supplies unit-variance receiver noise of shape
    (..., C', M, L) with C' >= C; the first C sub-frames are used and scaled by
    sqrt(noise_var_v).  This lets two schedules share one noise realization.
    """
    if chan.K != pilots.K:
        raise ProtocolError(f"channel has {chan.K} users but pilot book has {pilots.K}")
    if chan.H.shape[-1] != sched.P.shape[0]:
        raise ProtocolError("schedule rows do not match N + 1")
    resp = chan.H @ sched.P                               # (..., K, M, C)
    S = np.einsum("...kmc,lk->...cml", resp, np.conj(pilots.U))
    if noise is not None:
        if noise.shape[-2:] != S.shape[-2:] or noise.shape[-3] < S.shape[-3]:
            raise ProtocolError(f"noise shape {noise.shape} cannot cover sub-frames {S.shape}")
        S = S + np.sqrt(noise_var_v) * noise[..., : S.shape[-3], :, :]
    elif noise_var_v > 0:
        S = S + cn(rng, S.shape, noise_var_v)
    X = (S @ pilots.U) / (pilots.power * pilots.L)        # (..., C, M, K)
    X = np.moveaxis(X, (-3, -1), (-1, -3))                # (..., K, M, C)
    return Observation(X=X, noise_var_z=noise_var_after_despread(noise_var_v, pilots))
