import math

import numpy as np
import pytest

from laplace_kit import nn


def fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(f, x, h=1e-6):
    """Columns are d f / d x_i; ``f`` returns a 1-D array."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=0)


def fd_hessian_from_grad(grad, x, h=1e-5):
    H = fd_jacobian(grad, x, h)
    return 0.5 * (H + H.T)


def random_spd(rng, n, shift=1.0):
    A = rng.standard_normal((n, n))
    return A @ A.T + shift * np.eye(n)


def random_net(rng, max_params=500, activations=("tanh", "relu", "identity")):
    """A random MLP with at most ``max_params`` weights."""
    while True:
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(1, 6))] + [int(rng.integers(2, 9)) for _ in range(depth - 1)] + [int(rng.integers(1, 5))]
        spec = nn.MlpSpec(tuple(dims), str(rng.choice(activations)), bool(rng.random() < 0.8))
        if spec.n_params <= max_params:
            return spec


def classification_batch(rng, spec, n):
    X = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.output_dim, size=n)
    return nn.Batch(X, y)


def regression_batch(rng, spec, n):
    X = rng.standard_normal((n, spec.input_dim))
    y = rng.standard_normal((n, spec.output_dim))
    return nn.Batch(X, y)


def linear_regression_problem(rng, m, n, sigma, lam):
    """Bayesian linear regression without bias; returns spec, batch, likelihood, theta_map and closed-form log Z."""
    spec = nn.MlpSpec((m, 1), "identity", use_bias=False)
    X = rng.standard_normal((n, m))
    y = X @ rng.standard_normal(m) + sigma * rng.standard_normal(n)
    theta = np.linalg.solve(X.T @ X / sigma**2 + lam * np.eye(m), X.T @ y / sigma**2)
    cov = sigma**2 * np.eye(n) + X @ X.T / lam
    sign, logdet = np.linalg.slogdet(cov)
    log_z = -0.5 * (y @ np.linalg.solve(cov, y) + logdet + n * math.log(2 * math.pi))
    return spec, nn.Batch(X, y[:, None]), nn.GaussianRegression(sigma), theta, log_z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed once at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
