"""Prior-precision selection: post-hoc grid search, evidence ascent, online Laplace."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from laplace_kit import curvature as cv
from laplace_kit import metrics, nn, posterior, predictive
from laplace_kit.errors import InvalidInput, MissingData, UnsupportedMode

OBJECTIVES = ("val_nll", "val_nll_ood", "marglik")
MAX_BACKTRACK = 10


def default_grid(n=31, low=1e-4, high=1e4):
    return np.logspace(math.log10(low), math.log10(high), n)


@dataclass
class TuneResult:
    prior_precision: float
    sigma_noise: Optional[float]
    grid: np.ndarray
    sigma_grid: Optional[np.ndarray]
    scores: np.ndarray  # (len(sigma_grid) or 1, len(grid))


def _val_log_lik(post, batch, likelihood, pred_type, link, n_samples, seed):
    pred = predictive.predict(post, batch.inputs, likelihood, pred_type, link, n_samples, seed)
    if isinstance(likelihood, nn.Categorical):
        y = nn._targets(batch, post.spec, likelihood)
        p = pred[np.arange(len(y)), y]
        return float(np.sum(np.log(np.maximum(p, metrics.LOG_FLOOR)))), pred
    y = nn._targets(batch, post.spec, likelihood)
    resid = y - pred.mean
    chol = np.linalg.cholesky(pred.cov)
    z = np.linalg.solve(chol, resid[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    c = y.shape[1]
    return float(np.sum(-0.5 * (np.sum(z * z, axis=-1) + logdet + c * nn.LOG_2PI))), pred


def score(post, objective, likelihood, train=None, val=None, ood=None, lambda_ood=0.5,
          pred_type="glm", link="probit", n_samples=20, seed=0):
    """Objective value (larger is better) for one fitted posterior."""
    if objective == "marglik":
        return posterior.log_marginal_likelihood(post, train, likelihood).log_evidence
    value, _ = _val_log_lik(post, val, likelihood, pred_type, link, n_samples, seed)
    if objective == "val_nll_ood":
        p_ood = predictive.predict(post, ood.inputs, likelihood, pred_type, link, n_samples, seed)
        value += lambda_ood * float(np.sum(metrics.entropy(p_ood)))
    return value


def tune_posthoc(
    spec,
    theta_map,
    train,
    likelihood,
    structure="kfac",
    kind="ggn",
    subset=cv.Subset.last_layer(),
    objective="marglik",
    grid=None,
    val=None,
    ood=None,
    lambda_ood=0.5,
    sigma_grid=None,
    pred_type="glm",
    link="probit",
    n_samples=20,
    seed=0,
    rank=None,
    kfac_prior_mode="exact_eigen",
):
    """Grid search over the prior precision (and optionally the observation noise).

    Ties resolve to the smaller precision, then the smaller noise.
    """
    if objective not in OBJECTIVES:
        raise InvalidInput(f"unknown objective {objective!r}")
    if objective in ("val_nll", "val_nll_ood") and val is None:
        raise MissingData(f"objective {objective!r} needs validation data")
    if objective == "val_nll_ood":
        if ood is None:
            raise MissingData("objective 'val_nll_ood' needs out-of-distribution data")
        if not 0 < lambda_ood <= 1:
            raise InvalidInput("lambda_ood must be in (0, 1]")
    grid = np.sort(np.asarray(default_grid() if grid is None else grid, dtype=np.float64))
    if grid.size == 0 or np.any(grid <= 0):
        raise InvalidInput("grid must be non-empty and positive")
    regression = isinstance(likelihood, nn.GaussianRegression)
    if sigma_grid is not None and not regression:
        raise InvalidInput("a noise grid needs a regression likelihood")
    sigmas = [None] if sigma_grid is None else list(np.sort(np.asarray(sigma_grid, dtype=np.float64)))

    scores = np.empty((len(sigmas), grid.size))
    best = (-math.inf, None, None)
    for i, sigma in enumerate(sigmas):
        lik = likelihood if sigma is None else nn.GaussianRegression(float(sigma))
        ce = cv.estimate(spec, theta_map, train, lik, kind, structure, subset, rank=rank)
        base = posterior.fit(spec, theta_map, ce, nn.ScalarPrior(float(grid[0])), kfac_prior_mode)
        for j, lam in enumerate(grid):
            post = base.with_prior(nn.ScalarPrior(float(lam)))
            s = score(post, objective, lik, train, val, ood, lambda_ood, pred_type, link, n_samples, seed)
            scores[i, j] = s
            if s > best[0]:
                best = (s, float(lam), sigma)
    if best[1] is None:
        raise InvalidInput("every grid candidate produced a non-finite score")
    return TuneResult(best[1], None if best[2] is None else float(best[2]), grid,
                      None if sigma_grid is None else np.asarray(sigmas), scores)


def _check_grad_support(post):
    if not post.scalar_prior:
        raise UnsupportedMode("evidence gradients need a scalar prior")
    if post.structure == "kfac" and post.kfac_prior_mode != "exact_eigen":
        raise UnsupportedMode("evidence gradients need kfac_prior_mode='exact_eigen'")


def marglik_grad(post, batch=None, likelihood=None):
    """``d log Z / d log(prior precision)``; the data term does not depend on the prior."""
    _check_grad_support(post)
    lam = post.prior.precision
    theta = post.theta_map
    d = post.spec.n_params
    return 0.5 * d - 0.5 * lam * float(theta @ theta) - 0.5 * lam * post.trace_covariance()


def ascend_log(value_fn, grad_fn, log_init, steps, lr, tol=1e-10):
    """Gradient ascent on a scalar in log space with step halving; returns the best iterate."""
    x = float(log_init)
    fx = value_fn(x)
    history = [(x, fx)]
    for _ in range(steps):
        g = grad_fn(x)
        if abs(g) < tol:
            break
        step = lr * g
        for _ in range(MAX_BACKTRACK + 1):
            cand = x + step
            fc = value_fn(cand)
            if fc >= fx:
                break
            step *= 0.5
        else:
            break
        x, fx = cand, fc
        history.append((x, fx))
    return x, fx, history


def optimize_marglik(post, batch, likelihood, init_precision=None, steps=100, lr=0.1):
    """Maximize the Laplace evidence over a scalar prior precision (curvature held fixed).

    Returns the best precision and the ``(log precision, log evidence)`` history.
    """
    if steps < 1:
        raise InvalidInput("steps must be at least 1")
    _check_grad_support(post)
    lam0 = post.prior.precision if init_precision is None else float(init_precision)

    def refit(log_lam):
        return post.with_prior(nn.ScalarPrior(math.exp(log_lam)))

    def value(log_lam):
        return posterior.log_marginal_likelihood(refit(log_lam), batch, likelihood).log_evidence

    def grad(log_lam):
        return marglik_grad(refit(log_lam), batch, likelihood)

    log_lam, _, history = ascend_log(value, grad, math.log(lam0), steps, lr)
    return math.exp(log_lam), history


@dataclass(frozen=True)
class OnlineConfig:
    map_lr: float = 1e-2
    map_steps: int = 1000
    hyper_lr: float = 0.1
    hyper_steps: int = 10
    frequency: int = 100
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.frequency < 1:
            raise InvalidInput("frequency must be at least 1")
        if self.map_steps < 0 or self.hyper_steps < 0:
            raise InvalidInput("step counts must be non-negative")


@dataclass
class OnlineResult:
    theta: np.ndarray
    prior_precision: float
    log: list = field(default_factory=list)  # (step, prior precision, log evidence)


def online_laplace_train(
    spec,
    batch,
    likelihood,
    cfg: OnlineConfig = OnlineConfig(),
    structure="kfac",
    kind="ggn",
    subset=cv.Subset.all(),
    init_precision=1.0,
    kfac_prior_mode="exact_eigen",
    rank=None,
):
    """Joint MAP training and evidence-based prior tuning.

    Every ``cfg.frequency`` descent steps a Laplace posterior is fitted at the
    current iterate and ``cfg.hyper_steps`` ascent steps on the log precision
    follow. The returned weights are the lowest-loss iterate since the last
    precision change.
    """
    state = {"lam": float(init_precision)}
    state["fn"] = nn.joint_loss_and_grad(spec, batch, likelihood, nn.ScalarPrior(state["lam"]))
    log = []

    def loss_and_grad(theta):
        return state["fn"](theta)

    def on_step(t, theta):
        if t % cfg.frequency:
            return False
        ce = cv.estimate(spec, theta, batch, likelihood, kind, structure, subset, rank=rank)
        post = posterior.fit(spec, theta, ce, nn.ScalarPrior(state["lam"]), kfac_prior_mode)

        def value(log_lam):
            p = post.with_prior(nn.ScalarPrior(math.exp(log_lam)))
            return posterior.log_marginal_likelihood(p, batch, likelihood).log_evidence

        def grad(log_lam):
            return marglik_grad(post.with_prior(nn.ScalarPrior(math.exp(log_lam))))

        log_lam, log_z, _ = ascend_log(value, grad, math.log(state["lam"]), cfg.hyper_steps, cfg.hyper_lr)
        new_lam = math.exp(log_lam)
        log.append((t, new_lam, log_z))
        if new_lam == state["lam"]:
            return False
        state["lam"] = new_lam
        state["fn"] = nn.joint_loss_and_grad(spec, batch, likelihood, nn.ScalarPrior(new_lam))
        return True

    theta0 = nn.init_params(spec, cfg.seed)
    theta, _ = nn.gradient_descent(loss_and_grad, theta0, cfg.map_lr, cfg.momentum, cfg.map_steps, on_step)
    return OnlineResult(theta, state["lam"], log)
