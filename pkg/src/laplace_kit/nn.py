"""Minimal fully connected network with exact derivatives.

Parameters live in one flat float64 vector. Layer ``l`` contributes its weight
matrix (out x in, row-major) followed by its bias vector, layers in order.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from laplace_kit import kernels
from laplace_kit.errors import InvalidInput, InvalidPrior, TrainingDiverged

LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = {
    "identity": kernels.ACT_IDENTITY,
    "relu": kernels.ACT_RELU,
    "tanh": kernels.ACT_TANH,
}


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple
    activation: str = "tanh"
    use_bias: bool = True

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or min(dims) < 1:
            raise InvalidInput(f"invalid layer dims {dims}")
        if self.activation not in _ACTIVATIONS:
            raise InvalidInput(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    @property
    def act_code(self):
        return _ACTIVATIONS[self.activation]

    def layer_size(self, l):
        fan_in, fan_out = self.layer_dims[l], self.layer_dims[l + 1]
        return fan_out * fan_in + (fan_out if self.use_bias else 0)

    @property
    def n_params(self):
        return sum(self.layer_size(l) for l in range(self.n_layers))

    def layer_offset(self, l):
        return sum(self.layer_size(k) for k in range(l))

    def layer_slice(self, l):
        off = self.layer_offset(l)
        return slice(off, off + self.layer_size(l))

    def layer_params(self, theta, l):
        """Views ``(W, b)`` into ``theta`` for layer ``l``; ``b`` is None without bias."""
        fan_in, fan_out = self.layer_dims[l], self.layer_dims[l + 1]
        off = self.layer_offset(l)
        W = theta[off : off + fan_out * fan_in].reshape(fan_out, fan_in)
        b = theta[off + fan_out * fan_in : off + self.layer_size(l)] if self.use_bias else None
        return W, b

    def layer_index(self):
        """Layer id of every parameter, shape ``(D,)``."""
        return np.concatenate(
            [np.full(self.layer_size(l), l, dtype=np.int64) for l in range(self.n_layers)]
        )

    def last_layer_mask(self):
        mask = np.zeros(self.n_params, dtype=bool)
        mask[self.layer_slice(self.n_layers - 1)] = True
        return mask

    def to_dict(self):
        return {"dims": list(self.layer_dims), "activation": self.activation, "use_bias": self.use_bias}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), d.get("activation", "tanh"), d.get("use_bias", True))


# ---------------------------------------------------------------------------
# likelihoods and priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Categorical:
    name = "classification"


@dataclass(frozen=True)
class GaussianRegression:
    sigma_noise: float = 1.0
    name = "regression"

    def __post_init__(self):
        if not self.sigma_noise > 0:
            raise InvalidInput("sigma_noise must be positive")


@dataclass(frozen=True)
class ScalarPrior:
    precision: float

    def __post_init__(self):
        if not (np.isfinite(self.precision) and self.precision > 0):
            raise InvalidPrior(f"prior precision must be positive, got {self.precision}")

    def vector(self, spec):
        return np.full(spec.n_params, float(self.precision))


@dataclass(frozen=True)
class PerLayerPrior:
    precisions: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.precisions)
        object.__setattr__(self, "precisions", p)
        if not p or not all(np.isfinite(v) and v > 0 for v in p):
            raise InvalidPrior(f"prior precisions must be positive, got {p}")

    def vector(self, spec):
        if len(self.precisions) != spec.n_layers:
            raise InvalidPrior(
                f"need {spec.n_layers} per-layer precisions, got {len(self.precisions)}"
            )
        return np.asarray(self.precisions)[spec.layer_index()]


def prior_from_value(value):
    if isinstance(value, (list, tuple)):
        return PerLayerPrior(tuple(value))
    return ScalarPrior(float(value))


def prior_to_value(prior):
    if isinstance(prior, PerLayerPrior):
        return list(prior.precisions)
    return prior.precision


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        t = np.asarray(self.targets)
        if t.ndim == 0:
            t = t.reshape(1)
        self.targets = t
        if self.inputs.shape[0] != len(self.targets):
            raise InvalidInput("inputs and targets disagree on the number of rows")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], self.targets[idx])


def empty_batch(spec, likelihood):
    X = np.zeros((0, spec.input_dim))
    if isinstance(likelihood, Categorical):
        return Batch(X, np.zeros(0, dtype=np.int64))
    return Batch(X, np.zeros((0, spec.output_dim)))


def _targets(batch, spec, likelihood):
    y = batch.targets
    if isinstance(likelihood, Categorical):
        y = np.asarray(y).astype(np.int64).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= spec.output_dim):
            raise InvalidInput("class label out of range")
        return y
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape[1] != spec.output_dim:
        raise InvalidInput("regression targets do not match output dimension")
    return y


def _check_theta(spec, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise InvalidInput(f"expected {spec.n_params} parameters, got shape {theta.shape}")
    return theta


def _check_inputs(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != spec.input_dim:
        raise InvalidInput(f"expected input dimension {spec.input_dim}, got {X.shape[-1]}")
    return X


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    activations: list  # a^(0) (= input) .. a^(L-1), post-activation
    pre_activations: list  # z^(1) .. z^(L)
    output: np.ndarray = field(repr=False)


def _act(spec, z):
    return kernels._act_numpy(z, spec.act_code)


def _act_grad(spec, z, h):
    return kernels._act_grad_numpy(z, h, spec.act_code)


def forward(spec, theta, x):
    """Forward pass for one input vector ``(M,)`` or a batch ``(N, M)``."""
    theta = _check_theta(spec, theta)
    x = _check_inputs(spec, x)
    acts, pres = [x], []
    h = x
    for l in range(spec.n_layers):
        W, b = spec.layer_params(theta, l)
        z = h @ W.T
        if b is not None:
            z = z + b
        pres.append(z)
        if l < spec.n_layers - 1:
            h = _act(spec, z)
            acts.append(h)
    return ForwardTrace(acts, pres, pres[-1])


def predict_logits(spec, theta, X):
    return forward(spec, theta, np.atleast_2d(X)).output


def output_loss_grad(likelihood, F, y):
    """Per-sample gradient of ``-log p(y | f)`` w.r.t. ``f``, shape ``(N, C)``."""
    if isinstance(likelihood, Categorical):
        P = softmax(F, axis=-1)
        P[np.arange(len(y)), y] -= 1.0
        return P
    return (F - y) / likelihood.sigma_noise**2


def _nll_from_outputs(likelihood, F, y):
    if isinstance(likelihood, Categorical):
        if len(y) == 0:
            return 0.0
        lse = logsumexp(F, axis=1)
        return float(np.sum(lse - F[np.arange(len(y)), y]))
    s2 = likelihood.sigma_noise**2
    n, c = F.shape
    resid = F - y
    return float(0.5 * np.sum(resid * resid) / s2 + 0.5 * n * c * (LOG_2PI + math.log(s2)))


def neg_log_lik(spec, theta, batch, likelihood):
    y = _targets(batch, spec, likelihood)
    F = forward(spec, theta, batch.inputs).output
    return _nll_from_outputs(likelihood, F, y)


def neg_log_prior(spec, theta, prior):
    """``-log N(theta; 0, diag(1/precision))`` including the normalizer."""
    theta = _check_theta(spec, theta)
    lam = prior.vector(spec)
    return float(0.5 * np.sum(lam * theta * theta) + 0.5 * np.sum(LOG_2PI - np.log(lam)))


def neg_log_joint(spec, theta, batch, likelihood, prior):
    """``-log p(D | theta) - log p(theta)`` with all normalizing constants."""
    return neg_log_lik(spec, theta, batch, likelihood) + neg_log_prior(spec, theta, prior)


def _backprop(spec, theta, trace, seed):
    """Gradient of ``sum_n seed_n . f_n`` w.r.t. ``theta`` for ``seed`` of shape (N, C)."""
    grad = np.zeros(spec.n_params)
    delta = seed
    for l in range(spec.n_layers - 1, -1, -1):
        W, _ = spec.layer_params(theta, l)
        off = spec.layer_offset(l)
        gW = delta.T @ trace.activations[l]
        grad[off : off + gW.size] = gW.ravel()
        if spec.use_bias:
            grad[off + gW.size : off + spec.layer_size(l)] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W) * _act_grad(spec, trace.pre_activations[l - 1], trace.activations[l])
    return grad


def nll_and_grad(spec, theta, batch, likelihood):
    theta = _check_theta(spec, theta)
    y = _targets(batch, spec, likelihood)
    trace = forward(spec, theta, batch.inputs)
    F = trace.output
    value = _nll_from_outputs(likelihood, F, y)
    if len(y) == 0:
        return value, np.zeros(spec.n_params)
    return value, _backprop(spec, theta, trace, output_loss_grad(likelihood, F, y))


def grad_neg_log_lik(spec, theta, batch, likelihood):
    return nll_and_grad(spec, theta, batch, likelihood)[1]


def grad_neg_log_joint(spec, theta, batch, likelihood, prior):
    theta = _check_theta(spec, theta)
    return grad_neg_log_lik(spec, theta, batch, likelihood) + prior.vector(spec) * theta


def jacobians(spec, theta, X):
    """Per-sample Jacobians ``d f / d theta``, shape ``(N, D, C)``."""
    theta = _check_theta(spec, theta)
    X = np.atleast_2d(_check_inputs(spec, X))
    return kernels.jacobians(theta, spec.layer_dims, spec.act_code, spec.use_bias, X)


def jacobian(spec, theta, x):
    """Jacobian ``J(x)`` of shape ``(D, C)`` for a single input."""
    x = _check_inputs(spec, x)
    if x.ndim != 1:
        raise InvalidInput("jacobian expects a single input vector")
    return jacobians(spec, theta, x[None, :])[0]


def last_layer_jacobians(spec, theta, X):
    """Jacobians restricted to the last layer without touching earlier layers."""
    trace = forward(spec, theta, np.atleast_2d(X))
    h = trace.activations[-1]
    n, c = h.shape[0], spec.output_dim
    eye = np.eye(c)
    jw = np.einsum("ic,nj->nijc", eye, h).reshape(n, -1, c)
    if spec.use_bias:
        jw = np.concatenate([jw, np.broadcast_to(eye, (n, c, c))], axis=1)
    return jw


def layer_deltas(spec, theta, X):
    """Per-layer ``d f / d z^(l)`` (shape ``(N, N_l, C)``) plus the layer inputs."""
    theta = _check_theta(spec, theta)
    trace = forward(spec, theta, np.atleast_2d(X))
    n, c = trace.output.shape
    delta = np.broadcast_to(np.eye(c), (n, c, c)).copy()
    deltas = [None] * spec.n_layers
    for l in range(spec.n_layers - 1, -1, -1):
        deltas[l] = delta
        if l > 0:
            W, _ = spec.layer_params(theta, l)
            g = _act_grad(spec, trace.pre_activations[l - 1], trace.activations[l])
            delta = np.einsum("ij,nic->njc", W, delta) * g[:, :, None]
    return trace, deltas


def augment(a, use_bias=True):
    """Append the homogeneous coordinate used for bias terms."""
    if not use_bias:
        return a
    ones = np.ones(a.shape[:-1] + (1,))
    return np.concatenate([a, ones], axis=-1)


def output_hessians(likelihood, F):
    """``-d^2 log p(y | f) / d f^2`` for each row of ``F``, shape ``(N, C, C)``."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    n, c = F.shape
    if isinstance(likelihood, Categorical):
        P = softmax(F, axis=1)
        H = -np.einsum("ni,nj->nij", P, P)
        H[:, np.arange(c), np.arange(c)] += P
        return H
    return np.broadcast_to(np.eye(c) / likelihood.sigma_noise**2, (n, c, c)).copy()


def output_hessian(likelihood, f, y=None):
    """C x C output-space Hessian of the negative log-likelihood; independent of ``y``."""
    return output_hessians(likelihood, np.asarray(f, dtype=np.float64)[None, :])[0]


def backprop_stats(spec, theta, x, y, likelihood):
    """Per-layer ``(a_aug, g)`` with ``g a_aug^T`` the per-sample NLL gradient of ``[W | b]``."""
    x = _check_inputs(spec, x)
    trace, deltas = layer_deltas(spec, theta, x[None, :])
    if isinstance(likelihood, Categorical):
        y_arr = np.asarray([int(y)])
    else:
        y_arr = np.asarray(y, dtype=np.float64).reshape(1, -1)
    r = output_loss_grad(likelihood, trace.output, _targets(Batch(x[None, :], y_arr), spec, likelihood))[0]
    stats = []
    for l in range(spec.n_layers):
        a = augment(trace.activations[l][0], spec.use_bias)
        stats.append((a, deltas[l][0] @ r))
    return stats


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 1000
    seed: int = 0


def init_params(spec, seed):
    """Uniform in +-1/sqrt(fan_in) per layer, biases included."""
    rng = np.random.default_rng(seed)
    theta = np.empty(spec.n_params)
    for l in range(spec.n_layers):
        bound = 1.0 / math.sqrt(spec.layer_dims[l])
        sl = spec.layer_slice(l)
        theta[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return theta


def gradient_descent(
    loss_and_grad: Callable,
    theta0: np.ndarray,
    lr: float,
    momentum: float,
    steps: int,
    callback: Optional[Callable] = None,
):
    """Full-batch heavy-ball descent returning the lowest-loss iterate seen.

    ``callback(t, theta)`` runs after update ``t`` (1-based); if it returns
    True the best-iterate tracking restarts, since the objective changed.
    """
    if steps < 0:
        raise InvalidInput("steps must be non-negative")
    theta = np.array(theta0, dtype=np.float64)
    velocity = np.zeros_like(theta)
    best_theta, best_loss = theta.copy(), math.inf
    for t in range(steps + 1):
        loss, grad = loss_and_grad(theta)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite loss at step {t}")
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()
        if t == steps:
            break
        velocity = momentum * velocity - lr * grad
        theta = theta + velocity
        if callback is not None and callback(t + 1, theta):
            best_theta, best_loss = theta.copy(), math.inf
    return best_theta, best_loss


def joint_loss_and_grad(spec, batch, likelihood, prior):
    lam = prior.vector(spec)
    log_norm = 0.5 * float(np.sum(LOG_2PI - np.log(lam)))

    def fn(theta):
        nll, g = nll_and_grad(spec, theta, batch, likelihood)
        return nll + 0.5 * float(np.sum(lam * theta * theta)) + log_norm, g + lam * theta

    return fn


def train_map(spec, batch, likelihood, prior, opt: TrainConfig = TrainConfig(), init: Optional[Sequence] = None):
    """Deterministic MAP estimate by full-batch momentum descent on the summed loss."""
    theta0 = init_params(spec, opt.seed) if init is None else _check_theta(spec, init)
    fn = joint_loss_and_grad(spec, batch, likelihood, prior)
    theta, _ = gradient_descent(fn, theta0, opt.lr, opt.momentum, opt.steps)
    return theta
