import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laplace_kit import curvature as cv
from laplace_kit import nn
from laplace_kit.errors import InvalidInput, InvalidRank, TooLarge, UnsupportedCombination

from conftest import classification_batch, fd_hessian_from_grad, random_net, regression_batch


def _net(rng, dims=(3, 4, 3), activation="tanh"):
    spec = nn.MlpSpec(dims, activation)
    return spec, rng.standard_normal(spec.n_params)


def test_linear_regression_ggn_is_xtx(rng):
    spec = nn.MlpSpec((3, 1), "identity", use_bias=False)
    batch = regression_batch(rng, spec, 8)
    theta = rng.standard_normal(3)
    ce = cv.estimate(spec, theta, batch, nn.GaussianRegression(1.0), "ggn", "full")
    X = batch.inputs
    np.testing.assert_allclose(ce.matrix, X.T @ X, rtol=1e-13)
    fd = fd_hessian_from_grad(lambda t: nn.grad_neg_log_lik(spec, t, batch, nn.GaussianRegression(1.0)), theta)
    np.testing.assert_allclose(ce.matrix, fd, rtol=1e-7, atol=1e-8)


def test_diag_is_diag_of_full(rng):
    spec, theta = _net(rng)
    batch = classification_batch(rng, spec, 6)
    full = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full")
    diag = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "diag")
    np.testing.assert_allclose(diag.diagonal, np.diag(full.matrix), rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("use_bias", [True, False])
@pytest.mark.parametrize("c", [1, 3])
def test_kfac_single_datum_single_layer_exact(rng, use_bias, c):
    spec = nn.MlpSpec((4, c), "identity", use_bias)
    theta = rng.standard_normal(spec.n_params)
    if c == 1:
        batch, lik = regression_batch(rng, spec, 1), nn.GaussianRegression(0.7)
    else:
        batch, lik = classification_batch(rng, spec, 1), nn.Categorical()
    full = cv.estimate(spec, theta, batch, lik, "ggn", "full")
    kfac = cv.estimate(spec, theta, batch, lik, "ggn", "kfac")
    np.testing.assert_allclose(cv.materialize(kfac), full.matrix, atol=1e-12)


def test_kfac_layer_blocks_single_datum_deep(rng):
    # for one datum, each KFAC block equals the matching diagonal block of the GGN
    spec, theta = _net(rng, (3, 5, 4, 2))
    batch = classification_batch(rng, spec, 1)
    full = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full").matrix
    dense = cv.materialize(cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "kfac"))
    for l in range(spec.n_layers):
        sl = spec.layer_slice(l)
        np.testing.assert_allclose(dense[sl, sl], full[sl, sl], atol=1e-12)


def test_kfac_matvec_matches_materialized(rng):
    spec, theta = _net(rng, (3, 5, 3))
    batch = classification_batch(rng, spec, 9)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "kfac")
    v = rng.standard_normal(spec.n_params)
    np.testing.assert_allclose(cv.matvec(ce, v), cv.materialize(ce) @ v, rtol=1e-12, atol=1e-13)


def test_last_layer_kfac_scalar_count(rng):
    H, C = 7, 4
    spec, theta = _net(rng, (3, 6, H, C))
    batch = classification_batch(rng, spec, 10)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "kfac", cv.Subset.last_layer())
    assert ce.n_scalars() == (H + 1) ** 2 + C**2


def test_low_rank_truncate_examples(rng):
    spec, theta = _net(rng, (2, 3, 2))
    batch = classification_batch(rng, spec, 10)
    full = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full")
    d = spec.n_params
    lr = cv.low_rank_truncate(full, d)
    np.testing.assert_allclose(cv.materialize(lr), full.matrix, atol=1e-8)
    # eigen-tail: Frobenius error^2 equals the sum of the dropped squared eigenvalues
    k = 2
    ev = np.sort(np.linalg.eigvalsh(full.matrix))[::-1]
    err = np.linalg.norm(cv.materialize(cv.low_rank_truncate(full, k)) - full.matrix)
    assert err == pytest.approx(np.sqrt(np.sum(np.clip(ev[k:], 0, None) ** 2)), rel=1e-8, abs=1e-12)


def test_low_rank_rank_one_exact():
    spec = nn.MlpSpec((3, 1), "identity", use_bias=False)
    x = np.array([[1.0, -2.0, 0.5]])
    full = cv.estimate(spec, np.zeros(3), nn.Batch(x, [[0.0]]), nn.GaussianRegression(1.0), "ggn", "full")
    np.testing.assert_allclose(cv.materialize(cv.low_rank_truncate(full, 1)), x.T @ x, atol=1e-14)


def test_low_rank_estimate_and_bad_rank(rng):
    spec, theta = _net(rng, (2, 3, 2))
    batch = classification_batch(rng, spec, 5)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "lowrank", rank=3)
    assert ce.eigvecs.shape == (spec.n_params, 3)
    assert np.all(np.diff(ce.eigvals) <= 0)
    with pytest.raises(InvalidRank):
        cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "lowrank", rank=0)


def test_materialize_diag():
    spec = nn.MlpSpec((1, 1), "identity", use_bias=True)
    ce = cv.CurvatureEstimate("ggn", "diag", cv.Subset.all(), spec, 0, diagonal=np.array([1.0, 2.0]))
    np.testing.assert_array_equal(cv.materialize(ce), [[1.0, 0.0], [0.0, 2.0]])


def test_materialize_cap():
    spec = nn.MlpSpec((10, 10))
    ce = cv.zeros(spec, "diag")
    with pytest.raises(TooLarge):
        cv.materialize(ce, cap=50)


@pytest.mark.parametrize("structure", ["full", "diag", "kfac"])
def test_additive_over_partition(rng, structure):
    spec, theta = _net(rng)
    batch = classification_batch(rng, spec, 10)
    a = cv.estimate(spec, theta, batch.subset(slice(0, 4)), nn.Categorical(), "ggn", structure)
    b = cv.estimate(spec, theta, batch.subset(slice(4, 10)), nn.Categorical(), "ggn", structure)
    whole = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", structure)
    s = a + b
    if structure == "kfac":
        for (A1, G1), (A2, G2) in zip(s.factors, whole.factors):
            np.testing.assert_allclose(A1, A2, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(G1, G2, rtol=1e-12, atol=1e-14)
    else:
        np.testing.assert_allclose(cv.materialize(s), cv.materialize(whole), rtol=1e-12, atol=1e-14)


def test_empirical_fisher_rank_bounded(rng):
    spec, theta = _net(rng, (3, 6, 3))
    batch = classification_batch(rng, spec, 4)
    ce = cv.estimate(spec, theta, batch, nn.Categorical(), "empirical_fisher", "full")
    assert np.linalg.matrix_rank(ce.matrix, tol=1e-10) <= 4


def test_fisher_equals_ggn_and_mc_fisher_converges(rng):
    spec, theta = _net(rng, (2, 3, 3))
    batch = classification_batch(rng, spec, 3)
    ggn = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full").matrix
    fisher = cv.estimate(spec, theta, batch, nn.Categorical(), "fisher", "full").matrix
    np.testing.assert_array_equal(ggn, fisher)
    mc = cv.estimate(spec, theta, batch, nn.Categorical(), "fisher", "full", mc_samples=20000, seed=1).matrix
    assert np.linalg.norm(mc - ggn) / np.linalg.norm(ggn) < 0.05


def test_last_layer_and_subnetwork_select_rows(rng):
    spec, theta = _net(rng)
    batch = classification_batch(rng, spec, 5)
    full = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full").matrix
    ll = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full", cv.Subset.last_layer())
    m = spec.last_layer_mask()
    np.testing.assert_allclose(ll.matrix, full[np.ix_(m, m)], rtol=1e-13, atol=1e-15)
    mask = np.zeros(spec.n_params, dtype=bool)
    mask[[0, 5, 17]] = True
    sub = cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "full", cv.Subset.subnetwork(mask))
    np.testing.assert_allclose(sub.matrix, full[np.ix_(mask, mask)], rtol=1e-13, atol=1e-15)


def test_kfac_subnetwork_rejected(rng):
    spec, theta = _net(rng)
    mask = np.ones(spec.n_params, dtype=bool)
    with pytest.raises(UnsupportedCombination):
        cv.estimate(spec, theta, classification_batch(rng, spec, 2), nn.Categorical(), "ggn", "kfac",
                    cv.Subset.subnetwork(mask))


def test_bad_names(rng):
    spec, theta = _net(rng)
    batch = classification_batch(rng, spec, 2)
    with pytest.raises(InvalidInput):
        cv.estimate(spec, theta, batch, nn.Categorical(), "hessian", "full")
    with pytest.raises(InvalidInput):
        cv.estimate(spec, theta, batch, nn.Categorical(), "ggn", "block")
    with pytest.raises(InvalidInput):
        cv.Subset.subnetwork(np.zeros(3, dtype=bool))


def test_subset_dict_round_trip():
    s = cv.Subset.subnetwork([True, False, True])
    assert cv.Subset.from_dict(s.to_dict()) == s
    assert cv.Subset.from_dict({"kind": "last_layer"}) == cv.Subset.last_layer()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["full", "diag", "kfac"]), st.sampled_from(cv.KINDS))
def test_estimates_are_psd(seed, structure, kind):
    rng = np.random.default_rng(seed)
    spec = random_net(rng, 120, ("tanh", "relu"))
    if spec.output_dim == 1:
        batch, lik = regression_batch(rng, spec, 5), nn.GaussianRegression(0.5)
    else:
        batch, lik = classification_batch(rng, spec, 5), nn.Categorical()
    theta = rng.standard_normal(spec.n_params)
    M = cv.materialize(cv.estimate(spec, theta, batch, lik, kind, structure))
    assert np.linalg.eigvalsh(M).min() >= -1e-8 * max(np.trace(M), 1.0)
