import numpy as np
import pytest

from irs_cdrn.channel import SystemConfig, cn, realize_channels
from irs_cdrn.estimators import (
    NMSE_FLOOR_DB, CorrelationEstimate, denoise_observation, estimate_correlation,
    lmmse_estimate, ls_estimate, nmse, squared_errors,
)
from irs_cdrn.linalg import LinAlgError
from irs_cdrn.protocol import (
    Observation, ReflectionSchedule, build_binary_schedule, build_dft_schedule, build_pilot_book,
    observe,
)


def _setup(T, noise_var_v, seed=0, M=4, N=8, C=9, K=2):
    cfg = SystemConfig(M=M, N=N, K=K, C=C, L=K)
    rng = np.random.default_rng(seed)
    ch = realize_channels(cfg, None, rng, batch=T)
    sched = build_dft_schedule(N, C)
    obs = observe(ch, sched, build_pilot_book(K, K), noise_var_v, rng)
    return cfg, ch, sched, obs


def test_ls_noise_free_exact():
    _, ch, sched, obs = _setup(5, 0.0)
    assert np.max(np.abs(ls_estimate(obs, sched) - ch.H)) < 1e-10
    bsched = build_binary_schedule(8)
    X = ch.H @ bsched.P
    assert np.max(np.abs(ls_estimate(X, bsched) - ch.H)) < 1e-10


def test_ls_dft_uses_scaled_adjoint():
    _, _, sched, obs = _setup(3, 0.2)
    np.testing.assert_allclose(ls_estimate(obs, sched), obs.X @ sched.P.conj().T / sched.C,
                               atol=1e-12)


def test_ls_mse_against_monte_carlo_oracle():
    T = 100_000
    M, N, C = 4, 8, 9
    noise_var_v = 0.3
    _, ch, sched, obs = _setup(T, noise_var_v, seed=1)
    empirical = np.mean(np.sum(np.abs(ls_estimate(obs, sched) - ch.H) ** 2, axis=(-2, -1)))
    # oracle: draw Z_k directly and apply an SVD-based pseudoinverse
    sz = obs.noise_var_z
    Z = cn(np.random.default_rng(99), (T, M, C), sz)
    oracle = np.mean(np.sum(np.abs(Z @ np.linalg.pinv(sched.P)) ** 2, axis=(-2, -1)))
    assert empirical == pytest.approx(oracle, rel=0.02)
    assert oracle == pytest.approx(M * sz * (N + 1) / C, rel=0.02)
    # the closed form M s / ((N+1) C) is off by a factor (N+1)^2
    assert M * sz / ((N + 1) * C) < 0.1 * oracle


def test_denoise_observation_is_ls():
    _, ch, sched, obs = _setup(4, 0.1)
    assert np.array_equal(denoise_observation(obs, sched), ls_estimate(obs, sched))
    _, ch0, sched0, obs0 = _setup(4, 0.0)
    assert np.max(np.abs(denoise_observation(obs0, sched0) - ch0.H)) < 1e-10


def test_denoise_residual_covariance():
    T = 50_000
    _, ch, sched, obs = _setup(T, 0.4, seed=2)
    resid = denoise_observation(obs, sched) - ch.H
    Pd = np.linalg.pinv(sched.P)
    expect = obs.noise_var_z * np.sum(np.abs(Pd) ** 2, axis=0)   # per column j
    got = np.mean(np.abs(resid) ** 2, axis=(0, 1, 2))
    np.testing.assert_allclose(got, expect, rtol=0.02)


def test_estimate_correlation_cases():
    rng = np.random.default_rng(3)
    H = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    np.testing.assert_allclose(estimate_correlation(H[None]).R_H, H.conj().T @ H, atol=1e-12)
    big = cn(rng, (20_000, 4, 5))
    R = estimate_correlation(big).R_H
    np.testing.assert_allclose(R, 4 * np.eye(5), atol=0.02 * 4)
    np.testing.assert_allclose(estimate_correlation(3 * big[:10]).R_H,
                               9 * estimate_correlation(big[:10]).R_H, rtol=1e-12)
    with pytest.raises(ValueError):
        estimate_correlation(np.zeros((0, 3, 4)))


def test_estimate_correlation_hermitian_psd():
    _, ch, _, _ = _setup(200, 0.1)
    R = estimate_correlation(ch.H).R_H
    assert np.max(np.abs(R - R.conj().T)) < 1e-10 * np.max(np.abs(R))
    assert np.min(np.linalg.eigvalsh(R)) >= -1e-10 * np.max(np.abs(R))


def test_lmmse_infinite_noise_shrinks_to_zero():
    _, ch, sched, obs = _setup(10, 0.1)
    corr = estimate_correlation(ch.H)
    H_hat = lmmse_estimate(obs.X, sched, corr, 4, noise_var_z=1e12)
    assert np.max(np.abs(H_hat)) < 1e-9 * np.max(np.abs(obs.X))


def test_lmmse_noise_free_square_schedule_equals_ls():
    rng = np.random.default_rng(4)
    sched = build_dft_schedule(1, 2)
    A = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    corr = CorrelationEstimate(R_H=A.conj().T @ A + np.eye(2), sample_count=1)
    H = rng.standard_normal((3, 2)) + 1j * rng.standard_normal((3, 2))
    X = H @ sched.P
    lm = lmmse_estimate(X, sched, corr, 3, noise_var_z=0.0)
    np.testing.assert_allclose(lm, ls_estimate(X, sched), atol=1e-8)


def test_lmmse_rotation_invariance():
    rng = np.random.default_rng(5)
    sched = build_dft_schedule(2, 4)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    rotated = ReflectionSchedule(P=sched.P @ Q)
    H = cn(rng, (500, 3, 3))
    corr = estimate_correlation(H)
    X = cn(rng, (3, 4))
    a = lmmse_estimate(X, sched, corr, 3, noise_var_z=0.2)
    b = lmmse_estimate(X @ Q, rotated, corr, 3, noise_var_z=0.2)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_lmmse_singular_system():
    sched = build_dft_schedule(1, 2)
    corr = CorrelationEstimate(R_H=np.zeros((2, 2), complex), sample_count=1)
    with pytest.raises(LinAlgError):
        lmmse_estimate(np.ones((2, 2)), sched, corr, 2, noise_var_z=0.0)


@pytest.mark.parametrize("sz", [10.0, 1.0, 0.1, 0.01])
def test_lmmse_beats_ls_on_rayleigh(sz):
    rng = np.random.default_rng(6)
    M, N, C, T = 3, 4, 5, 20_000
    sched = build_dft_schedule(N, C)
    # correlated Rayleigh channel with a random covariance across columns
    A = rng.standard_normal((N + 1, N + 1)) + 1j * rng.standard_normal((N + 1, N + 1))
    Ht = cn(rng, (T, M, N + 1)) @ A / np.sqrt(N + 1)
    corr = estimate_correlation(Ht[: T // 2])
    H = Ht[T // 2:]
    X = H @ sched.P + cn(rng, (T // 2, M, C), sz)
    obs = Observation(X=X, noise_var_z=sz)
    ls_err, energy = squared_errors(H, ls_estimate(obs, sched))
    lm_err, _ = squared_errors(H, lmmse_estimate(obs, sched, corr, M))
    assert lm_err <= ls_err


def test_nmse_cases():
    rng = np.random.default_rng(7)
    H = [cn(rng, (3, 5)) for _ in range(4)]
    db, floored = nmse(H, H)
    assert db == NMSE_FLOOR_DB and floored
    db, floored = nmse(H, [np.zeros_like(h) for h in H])
    assert db == pytest.approx(0.0, abs=1e-12) and not floored
    noise = [cn(rng, h.shape) for h in H]
    total = sum(np.sum(np.abs(h) ** 2) for h in H)
    scale = np.sqrt(0.01 * total / sum(np.sum(np.abs(e) ** 2) for e in noise))
    db, _ = nmse(H, [h + scale * e for h, e in zip(H, noise)])
    assert db == pytest.approx(-20.0, abs=1e-9)


def test_nmse_errors():
    with pytest.raises(ValueError):
        nmse([], [])
    with pytest.raises(ValueError):
        nmse([np.zeros((2, 2))], [np.ones((2, 2))])


def test_slice_errors_add_up():
    rng = np.random.default_rng(8)
    H, E = cn(rng, (6, 3, 5)), cn(rng, (6, 3, 5))
    full, _ = squared_errors(H, E, "full")
    direct, _ = squared_errors(H, E, "direct")
    casc, _ = squared_errors(H, E, "cascaded")
    assert full == pytest.approx(direct + casc, rel=1e-12)
