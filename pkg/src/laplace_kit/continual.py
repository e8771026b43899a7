"""Sequential Bayesian updates with Laplace posteriors (online Laplace / EWC-style).

After each task the posterior N(theta_t, (H_1 + ... + H_t + lambda I)^-1) becomes
the prior of the next one. Each H_t is evaluated at its own task's optimum and
added to the running sum: element-wise for diagonals, factor-wise for
Kronecker factors.
"""

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from laplace_kit import curvature as cv
from laplace_kit import nn, posterior
from laplace_kit.errors import InvalidInput, InvalidState
from laplace_kit.tuning import ascend_log

STRUCTURES = ("diag", "kfac")


@dataclass
class RunningPosterior:
    theta: np.ndarray
    curvature: cv.CurvatureEstimate
    prior_precision: float
    task_count: int = 0

    @property
    def structure(self):
        return self.curvature.structure

    def precision_matvec(self, v):
        return cv.matvec(self.curvature, v) + self.prior_precision * v

    def posterior(self, kfac_prior_mode="exact_eigen"):
        return posterior.fit(self.curvature.spec, self.theta, self.curvature,
                             nn.ScalarPrior(self.prior_precision), kfac_prior_mode)


def initial_state(spec, structure="diag", prior_precision=1.0, kind="ggn"):
    if structure not in STRUCTURES:
        raise InvalidInput(f"continual learning supports {STRUCTURES}, got {structure!r}")
    nn.ScalarPrior(prior_precision)
    return RunningPosterior(np.zeros(spec.n_params), cv.zeros(spec, structure, kind=kind), float(prior_precision))


def penalized_loss_and_grad(spec, running, batch, likelihood):
    """Task NLL plus ``0.5 (theta - m)^T Lambda_prev (theta - m)``."""
    anchor = running.theta

    def fn(theta):
        nll, g = nn.nll_and_grad(spec, theta, batch, likelihood)
        delta = theta - anchor
        hv = running.precision_matvec(delta)
        return nll + 0.5 * float(delta @ hv), g + hv

    return fn


def task_log_evidence(spec, running, theta, new_curv, batch, likelihood, lam):
    """Laplace estimate of ``log p(D_t | D_1..D_{t-1})`` at prior precision ``lam``."""
    prior = nn.ScalarPrior(lam)
    prev = posterior.fit(spec, running.theta, running.curvature, prior)
    new = posterior.fit(spec, theta, new_curv, prior)
    delta = theta - running.theta
    quad = float(delta @ cv.matvec(running.curvature, delta)) + lam * float(delta @ delta)
    nll = nn.neg_log_lik(spec, theta, batch, likelihood)
    return -nll - 0.5 * quad + 0.5 * (prev.logdet_precision() - new.logdet_precision())


def _task_evidence_grad(spec, running, theta, new_curv, lam):
    prior = nn.ScalarPrior(lam)
    prev = posterior.fit(spec, running.theta, running.curvature, prior)
    new = posterior.fit(spec, theta, new_curv, prior)
    delta = theta - running.theta
    return lam * (-0.5 * float(delta @ delta) + 0.5 * prev.trace_covariance() - 0.5 * new.trace_covariance())


def consolidate(
    running: RunningPosterior,
    spec,
    task,
    likelihood,
    opt: nn.TrainConfig = nn.TrainConfig(),
    tune_gamma=False,
    kind="ggn",
    hyper_steps=20,
    hyper_lr=0.1,
):
    """Absorb one task into the running posterior."""
    if running.curvature.spec != spec or running.curvature.subset.kind != "all":
        raise InvalidState("running posterior does not match the network")
    if running.structure not in STRUCTURES:
        raise InvalidState(f"unsupported running structure {running.structure!r}")
    if running.task_count == 0:
        theta = nn.train_map(spec, task, likelihood, nn.ScalarPrior(running.prior_precision), opt)
    else:
        fn = penalized_loss_and_grad(spec, running, task, likelihood)
        theta, _ = nn.gradient_descent(fn, running.theta, opt.lr, opt.momentum, opt.steps)
    task_curv = cv.estimate(spec, theta, task, likelihood, kind, running.structure, cv.Subset.all())
    new_curv = running.curvature + task_curv
    lam = running.prior_precision
    if tune_gamma:
        log_lam, _, _ = ascend_log(
            lambda x: task_log_evidence(spec, running, theta, new_curv, task, likelihood, math.exp(x)),
            lambda x: _task_evidence_grad(spec, running, theta, new_curv, math.exp(x)),
            math.log(lam),
            hyper_steps,
            hyper_lr,
        )
        lam = math.exp(log_lam)
    return RunningPosterior(theta, new_curv, lam, running.task_count + 1)


@dataclass
class TaskStream:
    tasks: List[nn.Batch]
    permutations: List[np.ndarray]


def permuted_tasks(base, n_tasks, seed=0):
    """Task 1 is ``base``; later tasks permute the feature columns with seeded permutations."""
    if n_tasks < 1:
        raise InvalidInput("need at least one task")
    rng = np.random.default_rng(seed)
    m = base.inputs.shape[1]
    perms = [np.arange(m)] + [rng.permutation(m) for _ in range(n_tasks - 1)]
    return TaskStream([apply_permutation(base, p) for p in perms], perms)


def apply_permutation(batch, perm):
    return nn.Batch(batch.inputs[:, perm], batch.targets.copy())


def accuracy(spec, theta, batch):
    pred = np.argmax(nn.predict_logits(spec, theta, batch.inputs), axis=1)
    return float(np.mean(pred == np.asarray(batch.targets).astype(np.int64)))


def evaluate_stream(spec, thetas, tasks):
    """Entry ``(t, tau)`` is the accuracy after task ``t`` on task ``tau <= t``; NaN above the diagonal."""
    T = len(tasks)
    if len(thetas) != T:
        raise InvalidInput("need one parameter vector per task")
    out = np.full((T, T), np.nan)
    for t in range(T):
        for tau in range(t + 1):
            out[t, tau] = accuracy(spec, thetas[t], tasks[tau])
    return out


def run_stream(spec, tasks, likelihood, structure="diag", prior_precision=1.0, opt=nn.TrainConfig(),
               tune_gamma=False, penalty=True, kind="ggn"):
    """Parameters after each task. ``penalty=False`` is plain sequential MAP training."""
    thetas = []
    if not penalty:
        theta = None
        for task in tasks:
            theta = nn.train_map(spec, task, likelihood, nn.ScalarPrior(prior_precision), opt, init=theta)
            thetas.append(theta)
        return thetas, None
    running = initial_state(spec, structure, prior_precision, kind)
    for task in tasks:
        running = consolidate(running, spec, task, likelihood, opt, tune_gamma, kind)
        thetas.append(running.theta)
    return thetas, running
