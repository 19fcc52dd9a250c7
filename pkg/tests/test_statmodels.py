import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bce.statmodels import (
    COV_DIM,
    SNR_CLIP,
    FisherInfo,
    LinearGaussianModel,
    ModelError,
    SnrModel,
    StructuredCovModel,
    cov_build_sigma,
    cov_fim,
    cov_project,
    cov_sample,
    cov_sample_covariance,
    crb_trace,
    lin_fim,
    lin_sample,
    snr_fim_mc,
    snr_grid_init,
    snr_loglik,
    snr_mle,
    snr_moments_estimate,
    snr_sample,
    snr_score,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# --- linear Gaussian ---------------------------------------------------------


def test_lin_sample_zero_signal_is_pure_noise():
    model = LinearGaussianModel(np.eye(2), np.eye(2))
    x = lin_sample(model, np.zeros(2), rng(3))
    z = rng(3).standard_normal(2)
    np.testing.assert_allclose(x, z, atol=1e-14)


def test_lin_sample_noiseless_limit():
    H = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    model = LinearGaussianModel(H, 1e-12 * np.eye(3))
    y = np.array([0.7, -1.3])
    x = lin_sample(model, y, rng(), size=100)
    assert np.max(np.abs(x - H @ y)) < 1e-5


def test_lin_sample_covariance_matches():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    model = LinearGaussianModel(np.eye(2), S)
    x = lin_sample(model, np.zeros(2), rng(1), size=1_000_000)
    np.testing.assert_allclose(x.T @ x / len(x), S, atol=0.01)


def test_lin_sample_dimension_mismatch():
    model = LinearGaussianModel(np.eye(3)[:, :2], np.eye(3))
    with pytest.raises(ModelError):
        lin_sample(model, np.zeros(3), rng())


def test_lin_sample_deterministic():
    model = LinearGaussianModel(np.eye(2), np.eye(2))
    a = lin_sample(model, np.ones(2), rng(9), size=5)
    b = lin_sample(model, np.ones(2), rng(9), size=5)
    assert a.tobytes() == b.tobytes()


def test_lin_fim_hand_values():
    np.testing.assert_array_equal(lin_fim(LinearGaussianModel(np.eye(3), np.eye(3))).matrix, np.eye(3))
    np.testing.assert_allclose(lin_fim(LinearGaussianModel(2 * np.eye(2), np.eye(2))).matrix, 4 * np.eye(2))


def test_lin_fim_matches_score_outer_product():
    H = np.array([[1.0, 0.3], [0.0, 2.0], [1.0, -1.0]])
    S = np.array([[1.0, 0.2, 0.0], [0.2, 2.0, 0.1], [0.0, 0.1, 0.5]])
    model = LinearGaussianModel(H, S)
    y = np.array([0.4, -0.2])
    x = lin_sample(model, y, rng(2), size=1_000_000)
    # score of y: H^T S^{-1} (x - H y)
    score = np.linalg.solve(S, (x - H @ y).T).T @ H
    mc = score.T @ score / len(x)
    F = lin_fim(model).matrix
    assert np.linalg.norm(mc - F) / np.linalg.norm(F) < 0.02


def test_lin_model_rejects_non_spd_noise():
    with pytest.raises(ModelError):
        LinearGaussianModel(np.eye(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


# --- SNR model ----------------------------------------------------------------


def test_snr_sample_noiseless():
    x = snr_sample(SnrModel(40), 1.7, 1e-12, rng())
    assert np.max(np.abs(np.abs(x) - 1.7)) < 1e-5


def test_snr_sample_moments():
    x = snr_sample(SnrModel(1000), 2.0, 1.0, rng(4), size=1000).ravel()
    se = x.std() / math.sqrt(x.size)
    assert abs(x.mean()) < 3 * se
    assert abs(np.mean(x * x) / 5.0 - 1.0) < 0.01


def test_snr_sample_rejects_bad_params():
    with pytest.raises(ModelError):
        snr_sample(SnrModel(4), -1.0, 1.0, rng())
    with pytest.raises(ModelError):
        snr_sample(SnrModel(4), 1.0, 0.0, rng())


def test_snr_loglik_hand_value():
    # 0.5 phi(0; 1, 1) + 0.5 phi(0; -1, 1) = phi(1) = 0.24197
    assert snr_loglik(SnrModel(1), np.array([0.0]), 1.0, 1.0) == pytest.approx(math.log(0.2419707245), abs=1e-9)
    assert snr_loglik(SnrModel(1), np.array([0.0]), 1.0, 1.0) == pytest.approx(-1.4189385, abs=1e-6)


def test_snr_loglik_matches_mixture_density():
    x = rng(5).normal(size=7) * 2
    h, s = 1.3, 0.7
    phi = lambda v, mu: np.exp(-(v - mu) ** 2 / (2 * s)) / math.sqrt(2 * math.pi * s)
    ref = np.sum(np.log(0.5 * phi(x, h) + 0.5 * phi(x, -h)))
    assert snr_loglik(SnrModel(7), x, h, s) == pytest.approx(ref, rel=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.01, 10), st.floats(0.01, 10))
def test_snr_loglik_symmetric_in_x(xs, h, s):
    x = np.array(xs)
    m = SnrModel(len(xs))
    assert snr_loglik(m, x, h, s) == snr_loglik(m, -x, h, s)


def test_snr_loglik_extreme_values_finite():
    x = np.array([1e4, -1e4, 0.0])
    assert np.isfinite(snr_loglik(SnrModel(3), x, 20.0, 1e-3))


def test_snr_score_matches_finite_difference():
    x = rng(6).normal(size=9)
    h, s, eps = 0.8, 1.4, 1e-6
    g = snr_score(x, h, s).sum(axis=0)
    m = SnrModel(9)
    fd_h = (snr_loglik(m, x, h + eps, s) - snr_loglik(m, x, h - eps, s)) / (2 * eps)
    fd_s = (snr_loglik(m, x, h, s + eps) - snr_loglik(m, x, h, s - eps)) / (2 * eps)
    np.testing.assert_allclose(g, [fd_h, fd_s], rtol=1e-6)


def test_snr_score_zero_mean():
    x = snr_sample(SnrModel(1), 1.0, 0.5, rng(7), size=200_000).ravel()
    sc = snr_score(x, 1.0, 0.5)
    se = sc.std(axis=0) / math.sqrt(len(sc))
    assert np.all(np.abs(sc.mean(axis=0)) < 3 * se)


def test_snr_fim_high_snr_approaches_known_symbols():
    p = 50
    res = snr_fim_mc(SnrModel(p), 10.0, 0.01, 20_000, rng(8))
    known = np.diag([p / 0.01, p / (2 * 0.01 ** 2)])
    np.testing.assert_allclose(np.diag(res.fim.matrix), np.diag(known), rtol=0.05)


def test_snr_fim_crb_positive_and_reps_guard():
    for h, s in [(1.0, 1.0), (1.0, 0.05), (3.0, 4.0)]:
        assert snr_fim_mc(SnrModel(20), h, s, 10_000, rng(1)).crb > 0
    with pytest.raises(ValueError):
        snr_fim_mc(SnrModel(20), 1.0, 1.0, 100, rng(1))


def test_snr_crb_depends_on_snr_only():
    # y = h^2/sigma^2 is scale invariant, so its CRB is too
    a = snr_fim_mc(SnrModel(50), 1.0, 0.1, 100_000, rng(11)).crb
    b = snr_fim_mc(SnrModel(50), 3.0, 0.9, 100_000, rng(11)).crb
    assert a == pytest.approx(b, rel=0.03)


def test_snr_mle_noiseless_saturates():
    x = 3.0 * np.where(rng().random(50) < 0.5, -1.0, 1.0)
    assert snr_mle(SnrModel(50), x) >= 1e3


def test_snr_mle_dominates_fine_grid():
    model = SnrModel(30)
    for seed in range(3):
        x = snr_sample(model, 1.0, 0.3, rng(seed))
        _, h, s = snr_mle(model, x, return_params=True)
        best = snr_loglik(model, x, h, s)
        # brute force over a grid 10x finer than the 60x60 search grid
        hs = np.geomspace(0.1, 20, 600)[:, None, None]
        ss = np.geomspace(1e-3, 1e2, 600)[None, :, None]
        logdens = (np.logaddexp(-(x - hs) ** 2 / (2 * ss), -(x + hs) ** 2 / (2 * ss))
                   - np.log(2.0) - 0.5 * np.log(2 * np.pi * ss))
        grid = np.sum(logdens, axis=-1).max()
        assert best >= grid - 1e-6


def test_snr_mle_batched_matches_single():
    model = SnrModel(20)
    x = snr_sample(model, 1.0, 0.5, rng(2), size=4)
    batch = snr_mle(model, x)
    single = [snr_mle(model, xi) for xi in x]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_snr_mle_within_clip():
    model = SnrModel(10)
    x = snr_sample(model, 0.1, 5.0, rng(3), size=50)
    y = snr_mle(model, x)
    assert np.all((y >= SNR_CLIP[0]) & (y <= SNR_CLIP[1]))


def test_snr_moments_oracle_and_grid_init():
    # exact moments of h=2, sigma2=1: m2 = 5, m4 = 16 + 24 + 3 = 43
    h2, s = snr_moments_estimate(5.0, 43.0)
    assert h2 / s == pytest.approx(4.0, rel=1e-12)
    x = snr_sample(SnrModel(5000), 2.0, 1.0, rng(12))
    h0, s0 = snr_grid_init(x)
    assert h0 ** 2 / s0 == pytest.approx(4.0, rel=0.25)


def test_snr_mle_rejects_zero_data():
    with pytest.raises(ModelError):
        snr_mle(SnrModel(5), np.zeros(5))


# --- structured covariance ----------------------------------------------------


def test_cov_build_sigma_identity_and_ones():
    np.testing.assert_array_equal(cov_build_sigma(np.zeros(9)), np.eye(5))
    S = cov_build_sigma(np.ones(9))
    expected = 2.0 * np.eye(5)
    for i, j in [(0, 3), (1, 3), (2, 4), (3, 4)]:
        expected[i, j] = expected[j, i] = 0.5
    np.testing.assert_array_equal(S, expected)


@given(st.lists(st.floats(0, 1), min_size=9, max_size=9), st.floats(0, 1))
def test_cov_build_sigma_linear(y, lam):
    y = np.array(y)
    lhs = cov_build_sigma(lam * y) - np.eye(5)
    np.testing.assert_allclose(lhs, lam * (cov_build_sigma(y) - np.eye(5)), atol=1e-15)


@given(st.lists(st.floats(0, 1), min_size=9, max_size=9))
def test_cov_build_sigma_pd_in_domain(y):
    S = cov_build_sigma(np.array(y))
    assert np.allclose(S, S.T)
    assert np.linalg.eigvalsh(S).min() > 0


def test_cov_build_sigma_out_of_domain():
    with pytest.raises(ModelError):
        cov_build_sigma(np.full(9, 1.5))
    with pytest.raises(ModelError):
        cov_build_sigma(np.zeros(8))


def test_cov_sample_moments():
    model = StructuredCovModel(1)
    x0 = cov_sample(model, np.zeros(9), rng(1), size=1_000_000).reshape(-1, COV_DIM)
    np.testing.assert_allclose(x0.T @ x0 / len(x0), np.eye(5), atol=0.01)
    se = x0.std(axis=0) / math.sqrt(len(x0))
    assert np.all(np.abs(x0.mean(axis=0)) < 3 * se)
    x1 = cov_sample(model, np.ones(9), rng(2), size=1_000_000).reshape(-1, COV_DIM)
    np.testing.assert_allclose(x1.T @ x1 / len(x1), cov_build_sigma(np.ones(9)), atol=0.02)


def test_cov_fim_at_zero():
    F = cov_fim(StructuredCovModel(20), np.zeros(9))
    np.testing.assert_allclose(F.matrix, np.diag([10.0] * 5 + [5.0] * 4), atol=1e-12)
    assert F.crb_trace() == pytest.approx(1.3, abs=1e-12)


def test_cov_fim_scales_with_samples():
    y = rng(3).random(9)
    F1 = cov_fim(StructuredCovModel(7), y).matrix
    F2 = cov_fim(StructuredCovModel(14), y).matrix
    np.testing.assert_allclose(F2, 2 * F1, rtol=1e-14)


def _mean_loglik(y, scatter, p):
    # the Gaussian log-likelihood depends on the data only through the scatter matrix
    S = cov_build_sigma(y)
    _, logdet = np.linalg.slogdet(S)
    return -0.5 * p * (logdet + np.trace(np.linalg.solve(S, scatter)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cov_fim_matches_finite_difference_hessian(seed):
    model = StructuredCovModel(20)
    y = np.full(9, 0.5) if seed == 0 else 0.2 + 0.6 * rng(100 + seed).random(9)
    x = cov_sample(model, y, rng(seed), size=100_000).reshape(-1, COV_DIM)
    scatter = x.T @ x / len(x)
    eps = 1e-3
    E = np.eye(9) * eps
    f = lambda d: _mean_loglik(y + d, scatter, model.p_samples)
    H = np.zeros((9, 9))
    for k in range(9):
        for l in range(k, 9):
            H[k, l] = H[l, k] = (f(E[k] + E[l]) - f(E[k] - E[l]) - f(-E[k] + E[l]) + f(-E[k] - E[l])) / (4 * eps ** 2)
    F = cov_fim(model, y).matrix
    assert np.linalg.norm(-H - F) / np.linalg.norm(F) < 0.05


def test_crb_trace_values():
    assert crb_trace(np.eye(4)) == pytest.approx(4.0)
    assert crb_trace(np.diag([2.0, 4.0])) == pytest.approx(0.75)
    F = np.array([[3.0, 1.0], [1.0, 2.0]])
    assert crb_trace(2.5 * F) == pytest.approx(crb_trace(F) / 2.5, rel=1e-12)
    with pytest.raises(ModelError):
        crb_trace(np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_fisher_info_symmetric_check():
    with pytest.raises(ModelError):
        FisherInfo(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_cov_project_recovers_exact_structure():
    y = rng(4).random(9)
    np.testing.assert_allclose(cov_project(cov_build_sigma(y)), y, atol=1e-12)


def test_cov_sample_covariance_batch():
    x = rng(5).normal(size=(3, 40, 5))
    c = cov_sample_covariance(x)
    np.testing.assert_allclose(c[1], x[1].T @ x[1] / 40)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_samplers_seed_deterministic(seed):
    m = StructuredCovModel(3)
    assert cov_sample(m, np.full(9, 0.3), rng(seed)).tobytes() == cov_sample(m, np.full(9, 0.3), rng(seed)).tobytes()
    s = SnrModel(5)
    assert snr_sample(s, 1.0, 1.0, rng(seed)).tobytes() == snr_sample(s, 1.0, 1.0, rng(seed)).tobytes()
