"""Predictive distributions from a Laplace posterior.

The linearized network gives a Gaussian over outputs; classification then needs
one more approximation of the softmax-Gaussian integral (probit, Laplace
bridge, delta method or Monte Carlo).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from laplace_kit import nn
from laplace_kit.errors import BridgeDegenerate, InvalidInput, InvalidVariance, UnsupportedCombination
from laplace_kit.posterior import LaplacePosterior

PRED_TYPES = ("glm", "nn")
LINKS = ("mc", "probit", "bridge", "delta", "exact")
DELTA_FLOOR = 1e-12


@dataclass
class OutputGaussian:
    """Gaussian over network outputs; ``mean`` is (..., C), ``cov`` is (..., C, C)."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self):
        return np.diagonal(self.cov, axis1=-2, axis2=-1)


def psd_project(cov):
    """Clip negative eigenvalues (round-off from the quadratic form) to zero."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    vals, vecs = np.linalg.eigh(cov)
    if np.all(vals >= 0):
        return cov
    vals = np.clip(vals, 0.0, None)
    return np.einsum("...ik,...k,...jk->...ij", vecs, vals, vecs)


def output_distribution(post: LaplacePosterior, x):
    """Linearized output Gaussian ``N(f_MAP(x), J^T Sigma J)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    mean = nn.predict_logits(post.spec, post.theta_map, X)
    cov = psd_project(post.functional_covariance(post.subset_jacobians(X)))
    if single:
        return OutputGaussian(mean[0], cov[0])
    return OutputGaussian(mean, cov)


def predict_regression(og: OutputGaussian, sigma_noise):
    c = og.mean.shape[-1]
    return OutputGaussian(og.mean, og.cov + sigma_noise**2 * np.eye(c))


def probit_binary(mu, var):
    """``E[sigmoid(f)]`` for ``f ~ N(mu, var)`` via the probit approximation."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise InvalidVariance("variance must be non-negative")
    out = expit(mu / np.sqrt(1.0 + math.pi / 8.0 * var))
    return float(out) if out.ndim == 0 else out


def probit_multiclass(og: OutputGaussian):
    """Extended probit: softmax of variance-scaled logits (diagonal of the covariance only)."""
    if og.mean.shape[-1] < 2:
        raise InvalidInput("multiclass probit needs at least two classes")
    kappa = 1.0 / np.sqrt(1.0 + math.pi / 8.0 * og.var)
    return softmax(og.mean * kappa, axis=-1)


def laplace_bridge(og: OutputGaussian):
    """Dirichlet concentrations matching the output Gaussian."""
    mu = og.mean
    var = og.var
    c = mu.shape[-1]
    if np.any(var <= 0):
        raise BridgeDegenerate("Laplace bridge needs strictly positive output variances")
    # exp(mu_i) * sum_j exp(-mu_j), computed in log space
    cross = np.exp(mu + logsumexp(-mu, axis=-1, keepdims=True))
    alpha = (1.0 - 2.0 / c + cross / c**2) / var
    if np.any(~(alpha > 0)):
        raise BridgeDegenerate("Laplace bridge produced non-positive concentrations")
    return alpha


def dirichlet_mean(alpha):
    return alpha / alpha.sum(axis=-1, keepdims=True)


def softmax_hessian(mu):
    """``B[i, j, k] = d^2 softmax_i / d mu_j d mu_k``."""
    p = softmax(np.asarray(mu, dtype=np.float64))
    eye = np.eye(p.size)
    d = eye - p  # d[i, j] = delta_ij - p_j
    return p[:, None, None] * (d[:, :, None] * d[:, None, :] - p[None, :, None] * d[None, :, :])


def delta_method(og: OutputGaussian, return_clamped=False):
    """Second-order Taylor expansion of ``E[softmax(f)]``, projected back onto the simplex."""
    mu = np.atleast_2d(og.mean)
    cov = og.cov.reshape(mu.shape + (mu.shape[-1],))
    if mu.shape[-1] < 2:
        raise InvalidInput("delta method needs at least two classes")
    out = np.empty_like(mu)
    clamped = np.zeros(len(mu), dtype=bool)
    for n in range(len(mu)):
        B = softmax_hessian(mu[n])
        p = softmax(mu[n]) + 0.5 * np.einsum("ijk,jk->i", B, cov[n])
        clamped[n] = bool(np.any(p < DELTA_FLOOR))
        p = np.maximum(p, DELTA_FLOOR)
        out[n] = p / p.sum()
    if og.mean.ndim == 1:
        out, clamped = out[0], bool(clamped[0])
    return (out, clamped) if return_clamped else out


def _link(F, likelihood):
    if isinstance(likelihood, nn.Categorical):
        if F.shape[-1] == 1:
            p = expit(F[..., 0])
            return np.stack([1.0 - p, p], axis=-1)
        return softmax(F, axis=-1)
    return F


def sample_outputs(og: OutputGaussian, n_samples, seed=0):
    """``(S, ..., C)`` draws from the output Gaussian (singular covariances allowed)."""
    rng = np.random.default_rng(seed)
    vals, vecs = np.linalg.eigh(og.cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]
    z = rng.standard_normal((n_samples,) + og.mean.shape)
    return og.mean + np.einsum("...ij,s...j->s...i", root, z)


def mc_predictive(source, x=None, n_samples=100, seed=0, likelihood=nn.Categorical()):
    """Monte Carlo predictive.

    ``source`` is either a posterior (samples parameters, needs ``x``) or an
    :class:`OutputGaussian` (samples logits). For classification returns the
    averaged probability vector(s); for regression returns the sampled outputs.
    A single-logit classifier yields ``[P(y=0), P(y=1)]``.
    """
    if n_samples < 1:
        raise InvalidInput("need at least one sample")
    if isinstance(source, LaplacePosterior):
        if x is None:
            raise InvalidInput("parameter-space Monte Carlo needs inputs")
        X = np.atleast_2d(x)
        thetas = source.sample(n_samples, seed)
        F = np.stack([nn.predict_logits(source.spec, t, X) for t in thetas])
        if np.ndim(x) == 1:
            F = F[:, 0]
    else:
        F = sample_outputs(source, n_samples, seed)
    if not isinstance(likelihood, nn.Categorical):
        return F
    return _link(F, likelihood).mean(axis=0)


def validate_config(likelihood, pred_type, link):
    if pred_type not in PRED_TYPES:
        raise InvalidInput(f"unknown pred_type {pred_type!r}")
    if link not in LINKS:
        raise InvalidInput(f"unknown link approximation {link!r}")
    regression = isinstance(likelihood, nn.GaussianRegression)
    if pred_type == "glm":
        if regression and link != "exact":
            raise UnsupportedCombination(f"link {link!r} is for classification; use 'exact' for regression")
        if not regression and link == "exact":
            raise UnsupportedCombination("the exact Gaussian predictive needs a regression likelihood")


def predict(post, X, likelihood, pred_type="glm", link="probit", n_samples=20, seed=0):
    """Predictive for a batch of inputs.

    Classification: ``(N, C)`` probabilities. Regression: an
    :class:`OutputGaussian` over ``y`` including observation noise.
    """
    validate_config(likelihood, pred_type, link)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    regression = isinstance(likelihood, nn.GaussianRegression)
    if pred_type == "nn":
        F = mc_predictive(post, X, n_samples, seed, nn.GaussianRegression() if regression else likelihood)
        if not regression:
            return F
        mean = F.mean(axis=0)
        dev = F - mean
        cov = np.einsum("snc,snd->ncd", dev, dev) / n_samples
        return predict_regression(OutputGaussian(mean, cov), likelihood.sigma_noise)
    og = output_distribution(post, X)
    if regression:
        return predict_regression(og, likelihood.sigma_noise)
    if link == "probit":
        if og.mean.shape[-1] == 1:
            p = probit_binary(og.mean[:, 0], og.var[:, 0])
            return np.stack([1.0 - p, p], axis=-1)
        return probit_multiclass(og)
    if link == "bridge":
        return dirichlet_mean(laplace_bridge(og))
    if link == "delta":
        return delta_method(og)
    return mc_predictive(og, n_samples=n_samples, seed=seed, likelihood=likelihood)


def map_predict(spec, theta, X, likelihood):
    F = nn.predict_logits(spec, theta, X)
    if isinstance(likelihood, nn.Categorical):
        return _link(F, likelihood)
    c = F.shape[-1]
    return OutputGaussian(F, np.broadcast_to(likelihood.sigma_noise**2 * np.eye(c), F.shape + (c,)).copy())
