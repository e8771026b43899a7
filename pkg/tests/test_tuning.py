import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from laplace_kit import curvature as cv
from laplace_kit import nn, posterior, tuning
from laplace_kit.errors import InvalidInput, MissingData, UnsupportedMode

from conftest import classification_batch, linear_regression_problem


def conjugate_problem(seed=0, m=3, n=30, sigma=0.5):
    """Linear-Gaussian problem plus the closed-form evidence-optimal precision."""
    rng = np.random.default_rng(seed)
    spec, batch, lik, _, _ = linear_regression_problem(rng, m, n, sigma, 1.0)
    X, y = batch.inputs, batch.targets[:, 0]

    def log_z(lam):
        cov = sigma**2 * np.eye(n) + X @ X.T / lam
        return -0.5 * (y @ np.linalg.solve(cov, y) + np.linalg.slogdet(cov)[1] + n * math.log(2 * math.pi))

    def theta_map(lam):
        return np.linalg.solve(X.T @ X / sigma**2 + lam * np.eye(m), X.T @ y / sigma**2)

    res = minimize_scalar(lambda t: -log_z(math.exp(t)), bounds=(-10, 10), method="bounded", options={"xatol": 1e-10})
    return spec, batch, lik, theta_map, math.exp(res.x)


def _fit(spec, theta, batch, lik, lam, structure="full"):
    ce = cv.estimate(spec, theta, batch, lik, "ggn", structure)
    return posterior.fit(spec, theta, ce, nn.ScalarPrior(lam))


def test_singleton_grid(rng):
    spec, batch, lik, theta_map, _ = conjugate_problem()
    res = tuning.tune_posthoc(spec, theta_map(1.0), batch, lik, "full", subset=cv.Subset.all(), grid=[3.0])
    assert res.prior_precision == 3.0


def test_ties_resolve_to_smallest():
    spec = nn.MlpSpec((2, 3, 2))
    empty = nn.empty_batch(spec, nn.Categorical())
    res = tuning.tune_posthoc(spec, np.zeros(spec.n_params), empty, nn.Categorical(), "kfac",
                              subset=cv.Subset.all(), grid=[5.0, 0.5, 2.0])
    np.testing.assert_array_equal(res.scores, 0.0)
    assert res.prior_precision == 0.5


def test_grid_argmax_near_closed_form_optimum():
    spec, batch, lik, theta_map, lam_star = conjugate_problem()
    grid = tuning.default_grid()
    res = tuning.tune_posthoc(spec, theta_map(lam_star), batch, lik, "full", subset=cv.Subset.all(), grid=grid)
    step = math.log(grid[1] / grid[0])
    assert abs(math.log(res.prior_precision / lam_star)) <= step


def test_sigma_grid_for_regression():
    spec, batch, lik, theta_map, _ = conjugate_problem(sigma=0.5)
    res = tuning.tune_posthoc(spec, theta_map(1.0), batch, lik, "full", subset=cv.Subset.all(),
                              grid=[0.1, 1.0, 10.0], sigma_grid=[0.05, 0.5, 5.0])
    assert res.scores.shape == (3, 3)
    assert res.sigma_noise == 0.5
    with pytest.raises(InvalidInput):
        tuning.tune_posthoc(spec, theta_map(1.0), batch, nn.Categorical(), "full", sigma_grid=[1.0])


def test_validation_objectives(rng):
    spec = nn.MlpSpec((2, 4, 3))
    theta = rng.standard_normal(spec.n_params)
    train, val, ood = (classification_batch(rng, spec, 12) for _ in range(3))
    res = tuning.tune_posthoc(spec, theta, train, nn.Categorical(), objective="val_nll", val=val, grid=[0.1, 1.0, 10.0])
    assert res.prior_precision in (0.1, 1.0, 10.0)
    res = tuning.tune_posthoc(spec, theta, train, nn.Categorical(), objective="val_nll_ood", val=val, ood=ood,
                              grid=[0.1, 1.0, 10.0])
    assert np.all(np.isfinite(res.scores))
    with pytest.raises(MissingData):
        tuning.tune_posthoc(spec, theta, train, nn.Categorical(), objective="val_nll")
    with pytest.raises(MissingData):
        tuning.tune_posthoc(spec, theta, train, nn.Categorical(), objective="val_nll_ood", val=val)
    with pytest.raises(InvalidInput):
        tuning.tune_posthoc(spec, theta, train, nn.Categorical(), objective="val_nll_ood", val=val, ood=ood,
                            lambda_ood=2.0)


def test_scores_reproducible(rng):
    spec = nn.MlpSpec((2, 4, 3))
    theta = rng.standard_normal(spec.n_params)
    train = classification_batch(rng, spec, 12)
    a = tuning.tune_posthoc(spec, theta, train, nn.Categorical())
    b = tuning.tune_posthoc(spec, theta, train, nn.Categorical())
    np.testing.assert_array_equal(a.scores, b.scores)


def test_marglik_grad_zero_on_empty_batch():
    spec = nn.MlpSpec((2, 3, 2))
    ce = cv.zeros(spec, "full")
    for lam in (0.1, 1.0, 30.0):
        post = posterior.fit(spec, np.zeros(spec.n_params), ce, nn.ScalarPrior(lam))
        assert tuning.marglik_grad(post) == pytest.approx(0.0, abs=1e-12)


def _fd_log_grad(post, batch, lik, h=1e-5):
    lam = post.prior.precision

    def f(t):
        return posterior.log_marginal_likelihood(post.with_prior(nn.ScalarPrior(lam * math.exp(t))), batch, lik).log_evidence

    return (f(h) - f(-h)) / (2 * h)


@pytest.mark.parametrize("structure", ["full", "diag", "kfac", "lowrank"])
def test_marglik_grad_fd_toy_net(rng, structure):
    spec = nn.MlpSpec((2, 4, 3))
    theta = rng.standard_normal(spec.n_params)
    batch = classification_batch(rng, spec, 10)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", structure, rank=5)
    post = posterior.fit(spec, theta, ce, nn.ScalarPrior(0.8))
    g = tuning.marglik_grad(post, batch, nn.Categorical())
    assert g == pytest.approx(_fd_log_grad(post, batch, nn.Categorical()), rel=1e-6)


def test_marglik_grad_vanishes_at_conjugate_optimum():
    spec, batch, lik, theta_map, lam_star = conjugate_problem()
    post = _fit(spec, theta_map(lam_star), batch, lik, lam_star)
    assert abs(tuning.marglik_grad(post, batch, lik)) <= 1e-6


def test_marglik_grad_unsupported_modes(rng):
    spec = nn.MlpSpec((2, 3, 2))
    theta = rng.standard_normal(spec.n_params)
    batch = classification_batch(rng, spec, 4)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "kfac")
    with pytest.raises(UnsupportedMode):
        tuning.marglik_grad(posterior.fit(spec, theta, ce, nn.ScalarPrior(1.0), "sqrt_split"))
    with pytest.raises(UnsupportedMode):
        tuning.marglik_grad(posterior.fit(spec, theta, ce, nn.PerLayerPrior((1.0, 2.0))))


def test_optimize_marglik_fixed_point():
    spec, batch, lik, theta_map, lam_star = conjugate_problem()
    post = _fit(spec, theta_map(lam_star), batch, lik, lam_star)
    lam, _ = tuning.optimize_marglik(post, batch, lik, steps=50)
    assert abs(lam - lam_star) <= 1e-6


def test_optimize_marglik_converges_and_ascends():
    spec, batch, lik, theta_map, lam_star = conjugate_problem()
    post = _fit(spec, theta_map(lam_star), batch, lik, 20.0)
    lam, history = tuning.optimize_marglik(post, batch, lik, steps=200, lr=0.1)
    assert abs(math.log(lam / lam_star)) <= 1e-3
    assert history[-1][1] >= history[0][1]
    values = [v for _, v in history]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_grid_and_ascent_agree():
    spec, batch, lik, theta_map, lam_star = conjugate_problem(seed=2)
    theta = theta_map(lam_star)
    grid = tuning.default_grid()
    res = tuning.tune_posthoc(spec, theta, batch, lik, "full", subset=cv.Subset.all(), grid=grid)
    lam, _ = tuning.optimize_marglik(_fit(spec, theta, batch, lik, 1.0), batch, lik, steps=200)
    assert abs(math.log(res.prior_precision / lam)) <= math.log(grid[1] / grid[0])


def test_online_without_hyper_steps_equals_train_map(rng):
    spec = nn.MlpSpec((2, 4, 3))
    batch = classification_batch(rng, spec, 20)
    cfg = tuning.OnlineConfig(map_lr=1e-2, map_steps=100, frequency=101, seed=5)
    res = tuning.online_laplace_train(spec, batch, nn.Categorical(), cfg, init_precision=2.0)
    theta = nn.train_map(spec, batch, nn.Categorical(), nn.ScalarPrior(2.0), nn.TrainConfig(1e-2, 0.9, 100, 5))
    np.testing.assert_array_equal(res.theta, theta)
    assert res.prior_precision == 2.0 and res.log == []


def test_online_conjugate_and_deterministic():
    spec, batch, lik, _, lam_star = conjugate_problem()
    cfg = tuning.OnlineConfig(map_lr=1e-3, map_steps=2000, hyper_lr=0.5, hyper_steps=20, frequency=50)
    a = tuning.online_laplace_train(spec, batch, lik, cfg, structure="full", init_precision=1.0)
    assert abs(a.prior_precision / lam_star - 1) <= 0.1
    b = tuning.online_laplace_train(spec, batch, lik, cfg, structure="full", init_precision=1.0)
    assert a.log == b.log


def test_online_config_validation():
    with pytest.raises(InvalidInput):
        tuning.OnlineConfig(frequency=0)
