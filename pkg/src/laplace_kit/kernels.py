"""Hot per-sample loops, each with a numba kernel and a vectorized numpy twin.

The public functions dispatch on :func:`laplace_kit._accel.get_backend`. Both
paths take flat float64 arrays so the numba versions compile once per dtype.

Parameter layout (shared with :mod:`laplace_kit.nn`): for each layer, the
weight matrix ``W`` (out x in) row-major, then the bias ``b`` (out) if present.
"""

import numpy as np

from laplace_kit._accel import get_backend, njit

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_TANH = 2


# ---------------------------------------------------------------------------
# per-sample Jacobians of the network output w.r.t. all parameters
# ---------------------------------------------------------------------------


@njit(cache=True)
def _act(z, code):
    if code == 1:
        return z if z > 0.0 else 0.0
    if code == 2:
        return np.tanh(z)
    return z


@njit(cache=True)
def _act_grad(z, h, code):
    if code == 1:
        return 1.0 if z > 0.0 else 0.0
    if code == 2:
        return 1.0 - h * h
    return 1.0


@njit(cache=True)
def _jacobians_numba(theta, dims, act_code, use_bias, X):
    n_layers = dims.shape[0] - 1
    n = X.shape[0]
    n_out = dims[n_layers]
    n_params = theta.shape[0]
    width = 0
    for k in range(dims.shape[0]):
        if dims[k] > width:
            width = dims[k]
    offsets = np.empty(n_layers, dtype=np.int64)
    off = 0
    for l in range(n_layers):
        offsets[l] = off
        off += dims[l + 1] * dims[l]
        if use_bias:
            off += dims[l + 1]

    out = np.zeros((n, n_params, n_out))
    z = np.zeros((n_layers + 1, width))
    h = np.zeros((n_layers + 1, width))
    delta = np.zeros((width, n_out))
    prev = np.zeros((width, n_out))
    for s in range(n):
        for j in range(dims[0]):
            h[0, j] = X[s, j]
        for l in range(n_layers):
            fan_in = dims[l]
            fan_out = dims[l + 1]
            w0 = offsets[l]
            b0 = w0 + fan_out * fan_in
            for i in range(fan_out):
                acc = theta[b0 + i] if use_bias else 0.0
                for j in range(fan_in):
                    acc += theta[w0 + i * fan_in + j] * h[l, j]
                z[l + 1, i] = acc
                if l == n_layers - 1:
                    h[l + 1, i] = acc
                else:
                    h[l + 1, i] = _act(acc, act_code)
        # seed: d f / d z_L = identity
        for i in range(n_out):
            for c in range(n_out):
                delta[i, c] = 1.0 if i == c else 0.0
        for l in range(n_layers - 1, -1, -1):
            fan_in = dims[l]
            fan_out = dims[l + 1]
            w0 = offsets[l]
            b0 = w0 + fan_out * fan_in
            for i in range(fan_out):
                for j in range(fan_in):
                    hj = h[l, j]
                    for c in range(n_out):
                        out[s, w0 + i * fan_in + j, c] = delta[i, c] * hj
                if use_bias:
                    for c in range(n_out):
                        out[s, b0 + i, c] = delta[i, c]
            if l > 0:
                for j in range(fan_in):
                    g = _act_grad(z[l, j], h[l, j], act_code)
                    for c in range(n_out):
                        acc = 0.0
                        for i in range(fan_out):
                            acc += theta[w0 + i * fan_in + j] * delta[i, c]
                        prev[j, c] = acc * g
                for j in range(fan_in):
                    for c in range(n_out):
                        delta[j, c] = prev[j, c]
    return out


def _act_numpy(z, code):
    if code == ACT_RELU:
        return np.maximum(z, 0.0)
    if code == ACT_TANH:
        return np.tanh(z)
    return z


def _act_grad_numpy(z, h, code):
    if code == ACT_RELU:
        return (z > 0.0).astype(np.float64)
    if code == ACT_TANH:
        return 1.0 - h * h
    return np.ones_like(z)


def _unpack(theta, dims, use_bias):
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(theta[off : off + fan_out * fan_in].reshape(fan_out, fan_in))
        off += fan_out * fan_in
        if use_bias:
            biases.append(theta[off : off + fan_out])
            off += fan_out
        else:
            biases.append(None)
    return weights, biases


def _jacobians_numpy(theta, dims, act_code, use_bias, X):
    weights, biases = _unpack(theta, [int(d) for d in dims], use_bias)
    n_layers = len(weights)
    hs, zs = [X], [X]
    for l, (W, b) in enumerate(zip(weights, biases)):
        z = hs[-1] @ W.T
        if b is not None:
            z = z + b
        zs.append(z)
        hs.append(z if l == n_layers - 1 else _act_numpy(z, act_code))
    n, n_out = X.shape[0], int(dims[-1])
    delta = np.broadcast_to(np.eye(n_out), (n, n_out, n_out))
    blocks = []
    for l in range(n_layers - 1, -1, -1):
        W = weights[l]
        jw = np.einsum("nic,nj->nijc", delta, hs[l]).reshape(n, -1, n_out)
        blocks.append((jw, delta if use_bias else None))
        if l > 0:
            delta = np.einsum("ij,nic->njc", W, delta)
            delta = delta * _act_grad_numpy(zs[l], hs[l], act_code)[:, :, None]
    parts = []
    for jw, jb in reversed(blocks):
        parts.append(jw)
        if jb is not None:
            parts.append(np.asarray(jb))
    return np.concatenate(parts, axis=1)


def jacobians(theta, dims, act_code, use_bias, X):
    """Per-sample Jacobians, shape ``(N, D, C)``."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    dims = np.ascontiguousarray(dims, dtype=np.int64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if get_backend() == "numba":
        return _jacobians_numba(theta, dims, int(act_code), bool(use_bias), X)
    return _jacobians_numpy(theta, dims, int(act_code), bool(use_bias), X)


# ---------------------------------------------------------------------------
# GGN accumulation: sum_n J_n Lam_n J_n^T
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ggn_full_numba(J, Lam):
    # stack J_n Lam_n and J_n side by side as (D, N*C), then one BLAS product
    n, d, c = J.shape
    left = np.empty((d, n * c))
    right = np.empty((d, n * c))
    for s in range(n):
        for i in range(d):
            for b in range(c):
                acc = 0.0
                for a in range(c):
                    acc += J[s, i, a] * Lam[s, a, b]
                left[i, s * c + b] = acc
                right[i, s * c + b] = J[s, i, b]
    out = np.dot(left, right.T)
    return 0.5 * (out + out.T)


def _ggn_full_numpy(J, Lam):
    JL = np.matmul(J, Lam)
    out = np.tensordot(JL, J, axes=([0, 2], [0, 2]))
    return 0.5 * (out + out.T)


@njit(cache=True)
def _ggn_diag_numba(J, Lam):
    n, d, c = J.shape
    out = np.zeros(d)
    for s in range(n):
        for i in range(d):
            acc = 0.0
            for a in range(c):
                ja = J[s, i, a]
                if ja == 0.0:
                    continue
                for b in range(c):
                    acc += ja * Lam[s, a, b] * J[s, i, b]
            out[i] += acc
    return out


def _ggn_diag_numpy(J, Lam):
    return np.einsum("nda,nab,ndb->d", J, Lam, J, optimize=True)


def ggn_full(J, Lam):
    """Dense ``sum_n J_n Lam_n J_n^T`` for ``J`` of shape ``(N, D, C)``."""
    J = np.ascontiguousarray(J, dtype=np.float64)
    Lam = np.ascontiguousarray(Lam, dtype=np.float64)
    if J.shape[0] == 0:
        return np.zeros((J.shape[1], J.shape[1]))
    if get_backend() == "numba":
        return _ggn_full_numba(J, Lam)
    return _ggn_full_numpy(J, Lam)


def ggn_diag(J, Lam):
    J = np.ascontiguousarray(J, dtype=np.float64)
    Lam = np.ascontiguousarray(Lam, dtype=np.float64)
    if J.shape[0] == 0:
        return np.zeros(J.shape[1])
    if get_backend() == "numba":
        return _ggn_diag_numba(J, Lam)
    return _ggn_diag_numpy(J, Lam)


# ---------------------------------------------------------------------------
# Kronecker factor accumulation for one layer
# ---------------------------------------------------------------------------


@njit(cache=True)
def _kfac_factors_numba(acts, deltas, Lam):
    n, p = acts.shape
    q = deltas.shape[1]
    c = deltas.shape[2]
    A = np.zeros((p, p))
    G = np.zeros((q, q))
    dl = np.empty((q, c))
    for s in range(n):
        for i in range(p):
            ai = acts[s, i]
            for j in range(i + 1):
                A[i, j] += ai * acts[s, j]
        for i in range(q):
            for b in range(c):
                acc = 0.0
                for a in range(c):
                    acc += deltas[s, i, a] * Lam[s, a, b]
                dl[i, b] = acc
        for i in range(q):
            for j in range(i + 1):
                acc = 0.0
                for b in range(c):
                    acc += dl[i, b] * deltas[s, j, b]
                G[i, j] += acc
    for i in range(p):
        for j in range(i):
            A[j, i] = A[i, j]
    for i in range(q):
        for j in range(i):
            G[j, i] = G[i, j]
    return A, G


def _kfac_factors_numpy(acts, deltas, Lam):
    A = acts.T @ acts
    DL = np.matmul(deltas, Lam)
    G = np.tensordot(DL, deltas, axes=([0, 2], [0, 2]))
    return 0.5 * (A + A.T), 0.5 * (G + G.T)


def kfac_factors(acts, deltas, Lam):
    """Summed factors ``sum_n a a^T`` and ``sum_n D_n Lam_n D_n^T`` for one layer.

    ``acts`` is ``(N, P)`` (already bias-augmented), ``deltas`` is ``(N, Q, C)``
    holding d f / d z for the layer's pre-activations.
    """
    acts = np.ascontiguousarray(acts, dtype=np.float64)
    deltas = np.ascontiguousarray(deltas, dtype=np.float64)
    Lam = np.ascontiguousarray(Lam, dtype=np.float64)
    if acts.shape[0] == 0:
        return np.zeros((acts.shape[1], acts.shape[1])), np.zeros((deltas.shape[1],) * 2)
    if get_backend() == "numba":
        return _kfac_factors_numba(acts, deltas, Lam)
    return _kfac_factors_numpy(acts, deltas, Lam)
