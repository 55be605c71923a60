"""LS / LMMSE channel estimators, the correlation estimate they rely on, and NMSE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import LinAlgError, conj_transpose, fro_norm_sq, hermitian_solve, right_pseudoinverse
from .protocol import Observation, ReflectionSchedule

ESTIMATORS = ("ls", "lmmse", "b-lmmse", "cdrn")
SLICES = ("full", "direct", "cascaded")
NMSE_FLOOR_DB = -300.0


@dataclass(frozen=True)
class CorrelationEstimate:
    R_H: np.ndarray       # (N+1, N+1)
    sample_count: int


@dataclass(frozen=True)
class EstimateReport:
    estimator_id: str
    H_hat: np.ndarray
    slice: str = "full"


def _obs_matrix(X) -> np.ndarray:
    return X.X if isinstance(X, Observation) else np.asarray(X, dtype=np.complex128)


def ls_estimate(X, sched: ReflectionSchedule) -> np.ndarray:
    """X P^dagger; ``X`` may carry leading batch/user dims."""
    return _obs_matrix(X) @ right_pseudoinverse(sched.P)


def denoise_observation(X, sched: ReflectionSchedule) -> np.ndarray:
    """The noisy channel matrix X P^dagger = H + Z P^dagger that the denoiser consumes."""
    return ls_estimate(X, sched)


def estimate_correlation(H) -> CorrelationEstimate:
    """Sample mean of H^H H over the leading axes of ``H`` (shape (..., M, N+1))."""
    H = np.asarray(H, dtype=np.complex128)
    if H.ndim < 2 or H.size == 0:
        raise ValueError("need at least one channel sample")
    H = H.reshape(-1, *H.shape[-2:])
    R = np.einsum("smi,smj->ij", np.conj(H), H) / H.shape[0]
    R = 0.5 * (R + conj_transpose(R))
    return CorrelationEstimate(R_H=R, sample_count=H.shape[0])


def lmmse_matrix(sched: ReflectionSchedule, corr: CorrelationEstimate, M: int,
                 noise_var_z: float) -> np.ndarray:
    """W = (P^H R P + M s I)^{-1} P^H R, so that the estimate is X W."""
    P = sched.P
    R = corr.R_H
    PH = conj_transpose(P)
    A = PH @ R @ P + M * noise_var_z * np.eye(P.shape[1])
    A = 0.5 * (A + conj_transpose(A))
    try:
        return hermitian_solve(A, PH @ R)
    except LinAlgError as exc:
        raise LinAlgError(f"LMMSE system is singular: {exc}") from exc


def lmmse_estimate(X, sched: ReflectionSchedule, corr: CorrelationEstimate, M: int,
                   noise_var_z: float | None = None) -> np.ndarray:
    if noise_var_z is None:
        if not isinstance(X, Observation):
            raise ValueError("noise_var_z is required when X is a bare array")
        noise_var_z = X.noise_var_z
    return _obs_matrix(X) @ lmmse_matrix(sched, corr, M, noise_var_z)


def take_slice(H, which: str) -> np.ndarray:
    if which == "full":
        return H
    if which == "direct":
        return H[..., :1]
    if which == "cascaded":
        return H[..., 1:]
    raise ValueError(f"unknown slice {which!r}; expected one of {SLICES}")


def squared_errors(true, est, which: str = "full") -> tuple[float, float]:
    """Return (sum ||est - true||^2, sum ||true||^2) over the selected columns."""
    t = take_slice(np.asarray(true), which)
    e = take_slice(np.asarray(est), which)
    if t.shape != e.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {e.shape}")
    return float(np.sum(fro_norm_sq(e - t))), float(np.sum(fro_norm_sq(t)))


def ratio_to_db(err: float, energy: float) -> tuple[float, bool]:
    """10 log10(err / energy), floored at -300 dB; the flag marks a floored value."""
    if energy <= 0:
        raise ValueError("true channels have zero energy")
    if err <= 0:
        return NMSE_FLOOR_DB, True
    db = 10 * np.log10(err / energy)
    if db < NMSE_FLOOR_DB:
        return NMSE_FLOOR_DB, True
    return float(db), False


def nmse(true_list, est_list, which: str = "full") -> tuple[float, bool]:
    """Ratio of summed squared errors to summed channel energy, in dB."""
    if len(true_list) == 0 or len(true_list) != len(est_list):
        raise ValueError("need equal-length, non-empty lists")
    err, energy = squared_errors(np.stack([np.asarray(t) for t in true_list]),
                                 np.stack([np.asarray(e) for e in est_list]), which)
    return ratio_to_db(err, energy)
