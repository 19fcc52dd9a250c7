import numpy as np
import pytest

from bce.datagen import GaussianPrior, SnrCompositePrior, UniformPrior, gen_dataset
from bce.linear_bce import lbce_model_form, lmmse
from bce.neuralnet import MlpParams, zero_params
from bce.statmodels import (
    COV_PARAMS,
    LinearGaussianModel,
    SnrModel,
    StructuredCovModel,
    cov_project,
    cov_sample_covariance,
)
from bce.training import (
    CovNetEstimator,
    CovNetSpec,
    MlpEstimator,
    TrainConfig,
    TrainingDiverged,
    _CovTrace,
    covnet_backward,
    covnet_forward,
    covnet_init,
    load_checkpoint,
    save_checkpoint,
    snr_features,
    train_estimator,
)


# -- snr features ------------------------------------------------------------------


def test_snr_features_scale_invariant():
    x = np.random.default_rng(0).normal(size=(4, 50))
    np.testing.assert_allclose(snr_features(7.3 * x), snr_features(x), rtol=0, atol=1e-12)


def test_snr_features_gaussian_moments():
    # sd of the x^6 sample mean is about 0.1 per 1e6 draws, so average four
    f = snr_features(np.random.default_rng(1).normal(size=(4, 1_000_000))).mean(axis=0)
    assert f[0] == pytest.approx(3.0, rel=0.01)
    assert f[1] == pytest.approx(15.0, rel=0.01)


def test_snr_features_two_point():
    f = snr_features(np.random.default_rng(2).choice([-2.5, 2.5], size=100))
    np.testing.assert_allclose(f[:2], [1.0, 1.0], atol=1e-12)
    assert f[5] == pytest.approx(0.0, abs=1e-12)


def test_snr_features_errors():
    with pytest.raises(ValueError):
        snr_features(np.zeros(10))
    with pytest.raises(ValueError):
        snr_features(np.ones(1))


# -- config -----------------------------------------------------------------------------


def test_train_config_validation_and_round_trip():
    cfg = TrainConfig(lam=3.0, milestones=[5, 10])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in [{"lam": -1}, {"n_groups": 0}, {"steps": -1}, {"scheduler": "cos"}, {"data_mode": "x"}]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1.0})


# -- linear problem -------------------------------------------------------------------


def small_linear(noise=1.0):
    H = np.array([[1.0, 0.4], [0.2, -1.0], [0.5, 0.5]])
    return LinearGaussianModel(H, noise * np.eye(3)), GaussianPrior(np.zeros(2), np.eye(2))


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_linear_net_recovers_lmmse():
    model, prior = small_linear()
    cfg = TrainConfig(lam=0.0, n_groups=20, m=20, steps=3000, lr=0.01, milestones=[1500, 2500], seed=3)
    A = train_estimator("linear", cfg, prior, model).estimator.linear_map()
    assert rel_err(A, lmmse(model.H, model.sigma_n, prior.cov).A) < 0.02


def test_linear_net_recovers_large_lambda_closed_form():
    model, prior = small_linear(0.3)
    # the direction left free by the bias term converges slowly, hence the
    # long constant-rate phase
    cfg = TrainConfig(lam=1000.0, n_groups=20, m=100, steps=8000, lr=0.01, milestones=[6000, 7000], seed=4)
    A = train_estimator("linear", cfg, prior, model).estimator.linear_map()
    assert rel_err(A, lbce_model_form(model.H, model.sigma_n, prior.cov, 1000.0).A) < 0.02


def test_linear_net_finite_group_size_target():
    # with M draws per group the expected loss weighs variance by (1 + lam/M)
    # and squared bias by (1 + lam); the minimizer is the closed form at the
    # effective weight lam' with 1/(lam'+1) = (1 + lam/M)/(1 + lam)
    model, prior = small_linear(2.0)
    lam, m = 10.0, 2
    eff = (1 + lam) / (1 + lam / m) - 1
    cfg = TrainConfig(lam=lam, n_groups=50, m=m, steps=4000, lr=0.01, milestones=[2000, 3000], seed=5)
    A = train_estimator("linear", cfg, prior, model).estimator.linear_map()
    near = lbce_model_form(model.H, model.sigma_n, prior.cov, eff).A
    nominal = lbce_model_form(model.H, model.sigma_n, prior.cov, lam).A
    assert rel_err(A, near) < 0.02
    assert rel_err(A, nominal) > 3 * rel_err(A, near)


def test_zero_step_run_returns_initialization():
    model, prior = small_linear()
    res = train_estimator("linear", TrainConfig(steps=0), prior, model)
    np.testing.assert_array_equal(res.estimator.params.flat(), 0.0)
    assert res.history == []


def test_training_is_deterministic():
    model, prior = small_linear()
    cfg = TrainConfig(lam=1.0, n_groups=4, m=5, steps=50, lr=0.01, seed=7)
    a = train_estimator("linear", cfg, prior, model)
    b = train_estimator("linear", cfg, prior, model)
    assert a.estimator.params.flat().tobytes() == b.estimator.params.flat().tobytes()
    assert a.history == b.history


def test_divergence_is_detected():
    model, prior = small_linear()
    cfg = TrainConfig(lam=0.0, n_groups=4, m=5, steps=20, seed=0)
    est = MlpEstimator(*_nan_linear(model))
    with pytest.raises(TrainingDiverged):
        train_estimator("linear", cfg, prior, model, estimator=est)


def _nan_linear(model):
    from bce.neuralnet import MlpSpec
    spec = MlpSpec((model.n, model.param_dim))
    p = zero_params(spec)
    p.weights[0][0, 0] = np.nan
    return spec, p


def test_best_so_far_is_monotone():
    model, prior = small_linear()
    res = train_estimator("linear", TrainConfig(n_groups=4, m=5, steps=200, lr=0.01), prior, model)
    assert np.all(np.diff(res.best_so_far) <= 0)
    assert len(res.lr_history) == 200


def test_fixed_dataset_mode():
    model, prior = small_linear()
    ds = gen_dataset(prior, model, 40, 8, seed=1)
    cfg = TrainConfig(n_groups=10, m=4, steps=100, lr=0.01, data_mode="fixed")
    res = train_estimator("linear", cfg, model=model, dataset=ds)
    assert np.isfinite(res.history[-1])
    with pytest.raises(ValueError):
        train_estimator("linear", cfg, model=model)


def test_plateau_scheduler_runs_validation():
    model, prior = small_linear()
    cfg = TrainConfig(n_groups=4, m=5, steps=100, lr=0.01, scheduler="plateau", eval_every=10, patience=1)
    res = train_estimator("linear", cfg, prior, model)
    assert [s for s, _ in res.val_history] == list(range(10, 101, 10))


# -- snr problem ----------------------------------------------------------------------


def test_snr_training_short_run_and_checkpoint(tmp_path):
    model = SnrModel(20)
    cfg = TrainConfig(lam=10.0, n_groups=4, m=10, steps=30, seed=2)
    for output in ("linear", "exp"):
        est = train_estimator("snr", cfg, SnrCompositePrior(), model, output=output, hidden=8).estimator
        x = model.sample_groups(np.array([[5.0]]), 6, np.random.default_rng(0), np.array([1.0]))[0]
        save_checkpoint(est, tmp_path / "c.bin", {"lam": 10.0})
        back, header = load_checkpoint(tmp_path / "c.bin")
        assert header["lam"] == 10.0 and header["output"] == output
        np.testing.assert_array_equal(back(x), est(x))
    assert np.all(est(x) > 0)


def test_snr_input_clip_holds_edge_value(tmp_path):
    model = SnrModel(50)
    cfg = TrainConfig(steps=0, seed=4)
    est = train_estimator("snr", cfg, SnrCompositePrior(), model, output="exp", hidden=6,
                          clip_inputs=True).estimator
    rng = np.random.default_rng(5)
    # pure noise has kurtosis far outside anything the prior produces
    noise = rng.standard_normal((200, 50))
    feats = snr_features(noise)
    assert np.any(feats[:, 0] > est.in_hi[0])
    clipped = np.clip(feats, est.in_lo, est.in_hi)
    expected = est.from_inputs((clipped - est.in_shift) / est.in_scale)
    np.testing.assert_array_equal(est(noise), expected)
    save_checkpoint(est, tmp_path / "c.bin")
    back, header = load_checkpoint(tmp_path / "c.bin")
    assert header["in_hi"] == est.in_hi.tolist()
    np.testing.assert_array_equal(back(noise), est(noise))


def test_snr_exp_output_gradient():
    model = SnrModel(10)
    cfg = TrainConfig(steps=0, seed=1)
    est = train_estimator("snr", cfg, SnrCompositePrior(), model, output="exp", hidden=5).estimator
    rng = np.random.default_rng(3)
    y = np.array([[3.0], [20.0]])
    z = est.inputs(model.sample_groups(y, 4, rng, np.array([1.0, 2.0])))
    _, grads = est.loss_and_grad(z, y, 5.0, "all")
    flat = est.params.flat()
    h, i = 1e-6, 7
    vals = []
    for s in (h, -h):
        p = flat.copy()
        p[i] += s
        est.params.set_flat(p)
        vals.append(est.loss_and_grad(z, y, 5.0, "all")[0])
    est.params.set_flat(flat)
    analytic = np.concatenate([g.ravel() for g in grads])[i]
    assert analytic == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-5)


# -- covariance network --------------------------------------------------------------------


def test_covnet_zero_weights_stay_at_half():
    spec = CovNetSpec(iterations=5, hidden=8, state=3)
    out = covnet_forward(spec, zero_params(spec.mlp), np.eye(5))
    np.testing.assert_array_equal(out, 0.5)


def test_covnet_outputs_are_clamped():
    spec = CovNetSpec(iterations=10, hidden=8, state=2)
    params = covnet_init(spec, np.random.default_rng(0), out_gain=50.0)
    c = cov_sample_covariance(np.random.default_rng(1).normal(size=(30, 20, 5)))
    out = covnet_forward(spec, params, c)
    assert out.shape == (30, COV_PARAMS)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_covnet_rejects_asymmetric_input():
    spec = CovNetSpec(iterations=2, hidden=4, state=1)
    bad = np.eye(5)
    bad[0, 1] = 0.3
    with pytest.raises(ValueError):
        covnet_forward(spec, zero_params(spec.mlp), bad)


@pytest.mark.parametrize("feed", [False, True])
def test_covnet_backprop_through_iterations(feed):
    spec = CovNetSpec(iterations=4, hidden=6, state=2, feed_sample_cov=feed, clamp_output=False)
    rng = np.random.default_rng(4)
    params = covnet_init(spec, rng, out_gain=1.0)
    c = cov_sample_covariance(rng.normal(size=(3, 20, 5)))
    w = rng.normal(size=(3, COV_PARAMS))

    def loss(p: MlpParams) -> float:
        return float(np.sum(w * covnet_forward(spec, p, c)))

    trace = _CovTrace([], [])
    covnet_forward(spec, params, c, trace)
    assert np.all((np.concatenate(trace.alphas) > 0) & (np.concatenate(trace.alphas) < 1))
    analytic = covnet_backward(spec, params, trace, w).flat()
    base = params.flat()
    h = 1e-6
    for i in rng.choice(base.size, 25, replace=False):
        p = params.copy()
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        p.set_flat(up)
        lu = loss(p)
        p.set_flat(down)
        ld = loss(p)
        num = (lu - ld) / (2 * h)
        assert analytic[i] == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_covnet_estimator_and_checkpoint(tmp_path):
    spec = CovNetSpec(iterations=3, hidden=8, state=2)
    est = CovNetEstimator(spec, covnet_init(spec, np.random.default_rng(5)))
    x = StructuredCovModel(20).sample_groups(np.full((2, 9), 0.3), 4, np.random.default_rng(6))
    out = est(x)
    assert out.shape == (2, 4, 9)
    save_checkpoint(est, tmp_path / "cov.bin")
    back, _ = load_checkpoint(tmp_path / "cov.bin")
    np.testing.assert_array_equal(back(x), out)


@pytest.mark.slow
def test_trained_covnet_beats_projection_at_center():
    model = StructuredCovModel(20)
    cfg = TrainConfig(lam=0.0, n_groups=10, m=10, steps=1500, lr=1e-3, seed=0)
    res = train_estimator("covariance", cfg, UniformPrior.box(0, 1, 9), model,
                          iterations=10, hidden=64, state=8)
    y = np.full(9, 0.5)
    x = model.sample_groups(y[None], 2000, np.random.default_rng(7))[0]
    net = np.mean(np.sum((res.estimator(x) - y) ** 2, axis=-1))
    proj = np.mean(np.sum((cov_project(cov_sample_covariance(x)) - y) ** 2, axis=-1))
    assert net < proj
