import numpy as np
import pytest

from laplace_kit import _accel, kernels, nn

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def both_backends():
    previous = _accel.get_backend()

    def run(fn):
        out = {}
        for backend in ("numpy", "numba"):
            _accel.set_backend(backend)
            out[backend] = fn()
        _accel.set_backend(previous)
        return out["numpy"], out["numba"]

    yield run
    _accel.set_backend(previous)


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
@pytest.mark.parametrize("use_bias", [True, False])
def test_jacobians_agree(rng, both_backends, activation, use_bias):
    spec = nn.MlpSpec((3, 5, 4, 2), activation, use_bias)
    theta = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((6, 3))
    a, b = both_backends(lambda: kernels.jacobians(theta, spec.layer_dims, spec.act_code, spec.use_bias, X))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_ggn_kernels_agree(rng, both_backends):
    J = rng.standard_normal((7, 11, 3))
    F = rng.standard_normal((7, 3))
    Lam = nn.output_hessians(nn.Categorical(), F)
    a, b = both_backends(lambda: kernels.ggn_full(J, Lam))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    a, b = both_backends(lambda: kernels.ggn_diag(J, Lam))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_kfac_factors_agree(rng, both_backends):
    acts = rng.standard_normal((9, 4))
    deltas = rng.standard_normal((9, 5, 3))
    Lam = nn.output_hessians(nn.Categorical(), rng.standard_normal((9, 3)))
    (A1, G1), (A2, G2) = both_backends(lambda: kernels.kfac_factors(acts, deltas, Lam))
    np.testing.assert_allclose(A1, A2, rtol=1e-12)
    np.testing.assert_allclose(G1, G2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(A1, acts.T @ acts, rtol=1e-12)


def test_empty_inputs(both_backends):
    a, b = both_backends(lambda: kernels.ggn_full(np.zeros((0, 4, 2)), np.zeros((0, 2, 2))))
    np.testing.assert_array_equal(a, np.zeros((4, 4)))
    np.testing.assert_array_equal(b, np.zeros((4, 4)))


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")


def test_env_flag_selects_numpy():
    import os
    import subprocess
    import sys

    env = dict(os.environ, LAPLACE_KIT_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", "from laplace_kit import _accel; print(_accel.get_backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
