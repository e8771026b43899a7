"""Gaussian posterior N(theta_MAP, (H + prior precision)^-1) and the Laplace evidence.

One class per curvature structure. Each keeps whatever eigen-information makes
log-determinants, traces, marginal variances and sampling cheap, and can be
re-fitted with a new prior without touching the curvature.
"""

import math
from dataclasses import dataclass

import numpy as np

from laplace_kit import curvature as cv
from laplace_kit import linalg, nn
from laplace_kit.errors import InvalidInput, InvalidPrior, InvalidSize, UnsupportedCombination

KFAC_PRIOR_MODES = ("exact_eigen", "sqrt_split")


@dataclass
class EvidenceReport:
    log_evidence: float
    neg_loss_at_map: float
    half_logdet_sigma: float
    d_half_log_2pi: float

    @property
    def components(self):
        return {
            "neg_loss_at_map": self.neg_loss_at_map,
            "half_logdet_sigma": self.half_logdet_sigma,
            "d_half_log_2pi": self.d_half_log_2pi,
        }


class LaplacePosterior:
    """Base class; use :func:`fit` to construct."""

    structure = None

    def __init__(self, spec, theta_map, curvature, prior, kfac_prior_mode="exact_eigen", _cache=None):
        self.spec = spec
        self.theta_map = np.asarray(theta_map, dtype=np.float64)
        self.curvature = curvature
        self.prior = prior
        self.kfac_prior_mode = kfac_prior_mode
        self.subset = curvature.subset
        self.mask = curvature.mask
        self.full_prior_vector = prior.vector(spec)
        self.prior_vector = self.full_prior_vector[self.mask]
        self._cache = {} if _cache is None else _cache
        self._setup()

    def _setup(self):
        pass

    @property
    def dim(self):
        return int(np.count_nonzero(self.mask))

    @property
    def scalar_prior(self):
        return isinstance(self.prior, nn.ScalarPrior)

    def with_prior(self, prior):
        """Same curvature, new prior; cached decompositions of the curvature are reused."""
        return type(self)(self.spec, self.theta_map, self.curvature, prior, self.kfac_prior_mode, self._cache)

    # subclass API -------------------------------------------------------
    def logdet_precision(self):
        raise NotImplementedError

    def trace_covariance(self):
        raise NotImplementedError

    def marginal_variances(self):
        raise NotImplementedError

    def precision_dense(self):
        raise NotImplementedError

    def sample_offsets(self, count, rng):
        """``(count, D_s)`` draws from N(0, Sigma)."""
        raise NotImplementedError

    def functional_covariance(self, J):
        """``J^T Sigma J`` for subset Jacobians ``J`` of shape ``(N, D_s, C)``."""
        raise NotImplementedError

    # shared -------------------------------------------------------------
    def covariance_dense(self):
        return linalg.psd_inverse(self.precision_dense())

    def sample(self, count, seed=0):
        """Full-length parameter samples; coordinates outside the subset stay at theta_MAP."""
        rng = np.random.default_rng(seed)
        out = np.tile(self.theta_map, (count, 1))
        out[:, self.mask] += self.sample_offsets(count, rng)
        return out

    def subset_jacobians(self, X):
        return cv._subset_jacobians(self.spec, self.theta_map, np.atleast_2d(X), self.subset)


class _EigenPosterior(LaplacePosterior):
    """Precision stored as ``Q diag(ev) Q^T``."""

    def _decompose(self):
        raise NotImplementedError

    def _setup(self):
        self.eigvecs, self.eigvals = self._decompose()

    def logdet_precision(self):
        return float(np.sum(np.log(self.eigvals)))

    def trace_covariance(self):
        return float(np.sum(1.0 / self.eigvals))

    def marginal_variances(self):
        return (self.eigvecs**2) @ (1.0 / self.eigvals)

    def precision_dense(self):
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T

    def sample_offsets(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        return (z / np.sqrt(self.eigvals)) @ self.eigvecs.T

    def functional_covariance(self, J):
        Y = np.einsum("dk,ndc->nkc", self.eigvecs, J)
        return np.einsum("nkc,k,nke->nce", Y, 1.0 / self.eigvals, Y)


class FullLaplace(_EigenPosterior):
    structure = "full"

    def _decompose(self):
        H = self.curvature.matrix
        if self.scalar_prior:
            if "eig" not in self._cache:
                vals, vecs = linalg.sym_eig(H)
                self._cache["eig"] = (np.clip(vals, 0.0, None), vecs)
            vals, vecs = self._cache["eig"]
            return vecs, vals + self.prior.precision
        vals, vecs = linalg.sym_eig(H + np.diag(self.prior_vector))
        return vecs, vals

    def precision_dense(self):
        return self.curvature.matrix + np.diag(self.prior_vector)


class DiagLaplace(LaplacePosterior):
    structure = "diag"

    def _setup(self):
        self.precision_diag = self.curvature.diagonal + self.prior_vector

    def logdet_precision(self):
        return float(np.sum(np.log(self.precision_diag)))

    def trace_covariance(self):
        return float(np.sum(1.0 / self.precision_diag))

    def marginal_variances(self):
        return 1.0 / self.precision_diag

    def precision_dense(self):
        return np.diag(self.precision_diag)

    def sample_offsets(self, count, rng):
        return rng.standard_normal((count, self.dim)) / np.sqrt(self.precision_diag)

    def functional_covariance(self, J):
        return np.einsum("ndc,d,nde->nce", J, 1.0 / self.precision_diag, J)


class LowRankLaplace(LaplacePosterior):
    """``Q diag(l) Q^T + lambda I`` handled with Woodbury for a scalar prior."""

    structure = "lowrank"

    def _setup(self):
        self.Q = self.curvature.eigvecs
        self.l = self.curvature.eigvals
        if not self.scalar_prior:
            vals, vecs = linalg.sym_eig(self.precision_dense())
            self._dense = (vecs, vals)

    def _lam(self):
        return self.prior.precision

    def logdet_precision(self):
        if not self.scalar_prior:
            return float(np.sum(np.log(self._dense[1])))
        lam = self._lam()
        k = len(self.l)
        return float(np.sum(np.log(self.l + lam)) + (self.dim - k) * math.log(lam))

    def trace_covariance(self):
        if not self.scalar_prior:
            return float(np.sum(1.0 / self._dense[1]))
        lam = self._lam()
        return float(np.sum(1.0 / (self.l + lam)) + (self.dim - len(self.l)) / lam)

    def marginal_variances(self):
        if not self.scalar_prior:
            vecs, vals = self._dense
            return (vecs**2) @ (1.0 / vals)
        lam = self._lam()
        shrink = self.l / (lam * (self.l + lam))
        return 1.0 / lam - (self.Q**2) @ shrink

    def precision_dense(self):
        return (self.Q * self.l) @ self.Q.T + np.diag(self.prior_vector)

    def sample_offsets(self, count, rng):
        z = rng.standard_normal((count, self.dim))
        if not self.scalar_prior:
            vecs, vals = self._dense
            return (z / np.sqrt(vals)) @ vecs.T
        lam = self._lam()
        coef = 1.0 / np.sqrt(self.l + lam) - 1.0 / math.sqrt(lam)
        return z / math.sqrt(lam) + ((z @ self.Q) * coef) @ self.Q.T

    def functional_covariance(self, J):
        if not self.scalar_prior:
            vecs, vals = self._dense
            Y = np.einsum("dk,ndc->nkc", vecs, J)
            return np.einsum("nkc,k,nke->nce", Y, 1.0 / vals, Y)
        lam = self._lam()
        base = np.einsum("ndc,nde->nce", J, J) / lam
        Y = np.einsum("dk,ndc->nkc", self.Q, J)
        return base - np.einsum("nkc,k,nke->nce", Y, self.l / (lam * (self.l + lam)), Y)


class KronLaplace(LaplacePosterior):
    """Block-diagonal Kronecker precision, one block per layer.

    In each block's joint eigenbasis ``Q_G (x) Q_A`` the precision is diagonal;
    the eigenvalue grid has shape (out, in[+1]), matching the augmented weight
    matrix. ``exact_eigen`` uses ``g_i a_j + lambda``; ``sqrt_split`` uses
    ``(g_i + sqrt(lambda)) (a_j + sqrt(lambda))``.
    """

    structure = "kfac"

    def _setup(self):
        if self.kfac_prior_mode not in KFAC_PRIOR_MODES:
            raise InvalidInput(f"unknown kfac prior mode {self.kfac_prior_mode!r}")
        if "eig" not in self._cache:
            eigs = []
            for A, G in self.curvature.factors:
                ea, qa = linalg.sym_eig(A)
                eg, qg = linalg.sym_eig(G)
                eigs.append((np.clip(ea, 0.0, None), qa, np.clip(eg, 0.0, None), qg))
            self._cache["eig"] = eigs
        self.blocks = []
        for (sl, l, A, G), (ea, qa, eg, qg) in zip(cv._kfac_blocks(self.curvature), self._cache["eig"]):
            lam = float(self.prior_vector[sl][0])
            if self.kfac_prior_mode == "exact_eigen":
                grid = np.outer(eg, ea) + lam
            else:
                root = math.sqrt(lam)
                grid = np.outer(eg + root, ea + root)
            self.blocks.append((sl, l, qa, qg, grid, lam))

    def _per_param(self, fn):
        """Map each block's (out, in[+1]) grid through ``fn`` into subset coordinates."""
        out = np.empty(self.dim)
        for sl, l, qa, qg, grid, lam in self.blocks:
            out[sl] = cv.matrix_as_layer(self.spec, l, fn(qa, qg, grid))
        return out

    def logdet_precision(self):
        return float(np.sum(self._per_param(lambda qa, qg, grid: np.log(grid))))

    def trace_covariance(self):
        return float(np.sum(self._per_param(lambda qa, qg, grid: 1.0 / grid)))

    def marginal_variances(self):
        return self._per_param(lambda qa, qg, grid: (qg**2) @ (1.0 / grid) @ (qa**2).T)

    def precision_dense(self):
        out = np.zeros((self.dim, self.dim))
        for (sl, l, A, G), (_, _, _, _, _, lam) in zip(cv._kfac_blocks(self.curvature), self.blocks):
            if self.kfac_prior_mode == "exact_eigen":
                K = np.kron(A, G) + lam * np.eye(A.shape[0] * G.shape[0])
            else:
                root = math.sqrt(lam)
                K = np.kron(A + root * np.eye(A.shape[0]), G + root * np.eye(G.shape[0]))
            idx = cv.kron_index(self.spec, l)
            out[sl, sl] = K[np.ix_(idx, idx)]
        return out

    def sample_offsets(self, count, rng):
        out = np.empty((count, self.dim))
        for sl, l, qa, qg, grid, lam in self.blocks:
            Z = rng.standard_normal((count,) + grid.shape) / np.sqrt(grid)
            E = qg @ Z @ qa.T
            out[:, sl] = cv.matrix_as_layer(self.spec, l, E)
        return out

    def functional_covariance(self, J):
        n, _, c = J.shape
        out = np.zeros((n, c, c))
        for sl, l, qa, qg, grid, lam in self.blocks:
            V = cv.layer_as_matrix(self.spec, l, np.swapaxes(J[:, sl, :], 1, 2))
            Y = qg.T @ V @ qa
            out += np.einsum("ncij,ij,ndij->ncd", Y, 1.0 / grid, Y)
        return out


_CLASSES = {"full": FullLaplace, "diag": DiagLaplace, "lowrank": LowRankLaplace, "kfac": KronLaplace}


def fit(spec, theta_map, curvature, prior, kfac_prior_mode="exact_eigen"):
    """Laplace posterior from a curvature estimate and a zero-mean Gaussian prior."""
    if not isinstance(prior, (nn.ScalarPrior, nn.PerLayerPrior)):
        raise InvalidPrior("prior must be a ScalarPrior or PerLayerPrior")
    if isinstance(prior, nn.PerLayerPrior) and curvature.subset.kind == "subnetwork":
        raise UnsupportedCombination("per-layer priors need the 'all' or 'last_layer' subset")
    theta_map = np.asarray(theta_map, dtype=np.float64)
    if theta_map.shape != (spec.n_params,):
        raise InvalidInput("theta_map has the wrong length")
    return _CLASSES[curvature.structure](spec, theta_map, curvature, prior, kfac_prior_mode)


def marginal_variances(post):
    return post.marginal_variances()


def select_subnetwork(variances, size):
    """Mask of the ``size`` largest variances; ties go to the lower index."""
    variances = np.asarray(variances, dtype=np.float64).ravel()
    if not 1 <= size <= variances.size:
        raise InvalidSize(f"subnetwork size must be in [1, {variances.size}], got {size}")
    order = np.argsort(-variances, kind="stable")[:size]
    mask = np.zeros(variances.size, dtype=bool)
    mask[order] = True
    return cv.Subset.subnetwork(mask)


def sample(post, count, seed=0):
    return post.sample(count, seed)


def log_marginal_likelihood(post, batch, likelihood):
    """Laplace approximation of ``log p(D)``.

    The loss term uses the full network's log-joint (prior over all weights);
    the Gaussian integral runs over the subset coordinates only.
    """
    spec, theta = post.spec, post.theta_map
    nll = nn.neg_log_lik(spec, theta, batch, likelihood)
    lam = post.full_prior_vector
    quad = 0.5 * float(np.sum(lam * theta * theta))
    prior_logdet = float(np.sum(np.log(lam)))
    post_logdet = post.logdet_precision()
    d, d_s = spec.n_params, post.dim
    log_z = -nll - quad + 0.5 * (prior_logdet - post_logdet) + 0.5 * (d_s - d) * nn.LOG_2PI
    neg_loss = -(nll + quad + 0.5 * (d * nn.LOG_2PI - prior_logdet))
    return EvidenceReport(float(log_z), neg_loss, -0.5 * post_logdet, 0.5 * d_s * nn.LOG_2PI)
