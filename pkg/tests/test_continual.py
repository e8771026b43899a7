import numpy as np
import pytest

from laplace_kit import continual, nn
from laplace_kit import curvature as cv
from laplace_kit.errors import InvalidInput, InvalidState

from conftest import classification_batch

OPT = nn.TrainConfig(lr=1e-2, momentum=0.9, steps=2000, seed=0)


def linear_tasks(rng, n_tasks=2, n=15, sigma=0.5):
    spec = nn.MlpSpec((1, 1), "identity", use_bias=False)
    tasks = []
    for _ in range(n_tasks):
        x = rng.standard_normal((n, 1))
        tasks.append(nn.Batch(x, 0.7 * x + sigma * rng.standard_normal((n, 1))))
    return spec, tasks, nn.GaussianRegression(sigma)


@pytest.mark.parametrize("split", [5, 15, 25])
def test_sequential_equals_batch_1d(split):
    rng = np.random.default_rng(split)
    spec, (task,), lik = linear_tasks(rng, 1, n=30)
    sigma, lam = lik.sigma_noise, 2.0
    first, second = task.subset(slice(0, split)), task.subset(slice(split, 30))
    running = continual.initial_state(spec, "diag", lam)
    for t in (first, second):
        running = continual.consolidate(running, spec, t, lik, OPT)
    x, y = task.inputs[:, 0], task.targets[:, 0]
    precision = lam + x @ x / sigma**2
    mean = (x @ y / sigma**2) / precision
    assert abs(running.theta[0] - mean) <= 1e-8
    assert abs(running.curvature.diagonal[0] + lam - precision) <= 1e-8 * precision


def test_first_task_is_map_plus_laplace(rng):
    spec = nn.MlpSpec((3, 5, 3))
    batch = classification_batch(rng, spec, 20)
    opt = nn.TrainConfig(1e-2, 0.9, 50, 3)
    running = continual.consolidate(continual.initial_state(spec, "kfac", 1.5), spec, batch, nn.Categorical(), opt)
    theta = nn.train_map(spec, batch, nn.Categorical(), nn.ScalarPrior(1.5), opt)
    np.testing.assert_array_equal(running.theta, theta)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "kfac", cv.Subset.all())
    for (A1, G1), (A2, G2) in zip(running.curvature.factors, ce.factors):
        np.testing.assert_allclose(A1, A2, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(G1, G2, rtol=1e-13, atol=1e-15)
    assert running.task_count == 1


def test_diag_precision_accumulates(rng):
    spec = nn.MlpSpec((3, 4, 3))
    tasks = [classification_batch(rng, spec, 10) for _ in range(3)]
    opt = nn.TrainConfig(1e-2, 0.9, 30, 0)
    running = continual.initial_state(spec, "diag", 0.7)
    total = np.zeros(spec.n_params)
    for task in tasks:
        running = continual.consolidate(running, spec, task, nn.Categorical(), opt)
        total += cv.estimate(spec, running.theta, task, nn.Categorical(), "ggn", "diag").diagonal
    np.testing.assert_allclose(running.posterior().precision_dense().diagonal(), 0.7 + total, rtol=1e-12)
    assert running.prior_precision == 0.7


def test_kfac_factors_stay_psd(rng):
    spec = nn.MlpSpec((3, 4, 3))
    tasks = [classification_batch(rng, spec, 10) for _ in range(3)]
    _, running = continual.run_stream(spec, tasks, nn.Categorical(), "kfac", opt=nn.TrainConfig(1e-2, 0.9, 20, 0))
    for A, G in running.curvature.factors:
        assert np.linalg.eigvalsh(A).min() >= -1e-10
        assert np.linalg.eigvalsh(G).min() >= -1e-10


def test_tune_gamma_moves_prior(rng):
    spec = nn.MlpSpec((3, 4, 3))
    tasks = [classification_batch(rng, spec, 15) for _ in range(2)]
    _, running = continual.run_stream(spec, tasks, nn.Categorical(), "diag", 1.0,
                                      nn.TrainConfig(1e-2, 0.9, 30, 0), tune_gamma=True)
    assert running.prior_precision != 1.0 and running.prior_precision > 0


def test_structure_mismatch(rng):
    spec = nn.MlpSpec((3, 4, 3))
    other = nn.MlpSpec((3, 5, 3))
    batch = classification_batch(rng, spec, 4)
    with pytest.raises(InvalidState):
        continual.consolidate(continual.initial_state(other, "diag"), spec, batch, nn.Categorical())
    running = continual.initial_state(spec, "diag")
    running.curvature = cv.zeros(spec, "full")
    with pytest.raises(InvalidState):
        continual.consolidate(running, spec, batch, nn.Categorical())
    with pytest.raises(InvalidInput):
        continual.initial_state(spec, "full")


def test_permuted_tasks(rng):
    base = nn.Batch(rng.standard_normal((6, 5)), np.arange(6) % 2)
    stream = continual.permuted_tasks(base, 4, seed=11)
    assert len(stream.tasks) == 4
    np.testing.assert_array_equal(stream.tasks[0].inputs, base.inputs)
    for perm, task in zip(stream.permutations, stream.tasks):
        np.testing.assert_array_equal(np.sort(perm), np.arange(5))
        np.testing.assert_array_equal(task.inputs, base.inputs[:, perm])
        np.testing.assert_array_equal(task.targets, base.targets)
    again = continual.permuted_tasks(base, 4, seed=11)
    for a, b in zip(stream.permutations, again.permutations):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(InvalidInput):
        continual.permuted_tasks(base, 0)


def test_evaluate_stream_shape(rng):
    spec = nn.MlpSpec((3, 4, 3))
    tasks = [classification_batch(rng, spec, 8) for _ in range(3)]
    thetas = [rng.standard_normal(spec.n_params) for _ in range(3)]
    acc = continual.evaluate_stream(spec, thetas, tasks)
    assert np.all(np.isnan(acc[np.triu_indices(3, 1)]))
    assert np.all(np.isfinite(acc[np.tril_indices(3)]))
    for t in range(3):
        assert acc[t, t] == continual.accuracy(spec, thetas[t], tasks[t])
    with pytest.raises(InvalidInput):
        continual.evaluate_stream(spec, thetas[:2], tasks)
