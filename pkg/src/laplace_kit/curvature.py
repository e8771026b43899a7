"""Curvature of the summed log-likelihood: GGN / Fisher / empirical Fisher.

Every estimate is a positive semi-definite surrogate for
``-sum_n d^2 log p(y_n | f(x_n)) / d theta^2`` restricted to a subset of the
weights, stored as a dense matrix, a diagonal, per-layer Kronecker factors or
a truncated eigendecomposition.

Kronecker factors: for layer ``l`` with ``W`` (out x in) and bias ``b`` we
use the augmented weight ``[W | b]`` and its column-major vectorization,
so that the layer block is ``kron(A, G)`` with ``A`` acting on the
(bias-augmented) inputs and ``G`` on the outputs. ``A`` is the mean of
``a a^T`` over the data and ``G`` the sum of the backpropagated output
curvature, which makes ``kron(A, G)`` scale like a sum over data points.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from laplace_kit import kernels, nn
from laplace_kit.errors import InvalidInput, InvalidRank, TooLarge, UnsupportedCombination

KINDS = ("ggn", "fisher", "empirical_fisher")
STRUCTURES = ("full", "diag", "kfac", "lowrank")
MATERIALIZE_CAP = 4096


@dataclass(frozen=True)
class Subset:
    kind: str = "all"
    mask: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("all", "last_layer", "subnetwork"):
            raise InvalidInput(f"unknown subset {self.kind!r}")
        if self.kind == "subnetwork":
            if self.mask is None:
                raise InvalidInput("subnetwork subset needs a mask")
            m = tuple(bool(v) for v in np.asarray(self.mask).ravel())
            if not any(m):
                raise InvalidInput("subnetwork mask selects no weights")
            object.__setattr__(self, "mask", m)

    @classmethod
    def all(cls):
        return cls("all")

    @classmethod
    def last_layer(cls):
        return cls("last_layer")

    @classmethod
    def subnetwork(cls, mask):
        return cls("subnetwork", tuple(bool(v) for v in np.asarray(mask).ravel()))

    def mask_for(self, spec):
        if self.kind == "all":
            return np.ones(spec.n_params, dtype=bool)
        if self.kind == "last_layer":
            return spec.last_layer_mask()
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (spec.n_params,):
            raise InvalidInput(f"mask has length {mask.size}, expected {spec.n_params}")
        return mask

    def kfac_layers(self, spec):
        if self.kind == "all":
            return tuple(range(spec.n_layers))
        if self.kind == "last_layer":
            return (spec.n_layers - 1,)
        raise UnsupportedCombination("kfac requires the 'all' or 'last_layer' subset")

    def to_dict(self):
        d = {"kind": self.kind}
        if self.mask is not None:
            d["mask"] = [int(v) for v in self.mask]
        return d

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], tuple(bool(v) for v in d["mask"]) if "mask" in d else None)


@dataclass
class CurvatureEstimate:
    kind: str
    structure: str
    subset: Subset
    spec: nn.MlpSpec
    n_data: int
    matrix: Optional[np.ndarray] = None  # full
    diagonal: Optional[np.ndarray] = None  # diag
    factors: list = field(default_factory=list)  # kfac: [(A, G)] per layer in kfac_layers
    eigvecs: Optional[np.ndarray] = None  # lowrank, columns by descending eigenvalue
    eigvals: Optional[np.ndarray] = None

    @property
    def mask(self):
        return self.subset.mask_for(self.spec)

    @property
    def dim(self):
        return int(np.count_nonzero(self.mask))

    @property
    def kfac_layers(self):
        return self.subset.kfac_layers(self.spec)

    @property
    def rank(self):
        return None if self.eigvals is None else len(self.eigvals)

    def n_scalars(self):
        """Number of stored curvature scalars."""
        if self.structure == "full":
            return self.matrix.size
        if self.structure == "diag":
            return self.diagonal.size
        if self.structure == "kfac":
            return sum(A.size + G.size for A, G in self.factors)
        return self.eigvecs.size + self.eigvals.size

    def __add__(self, other):
        """Sum of curvatures over disjoint data sets; Kronecker factors are merged factor-wise."""
        if (self.structure, self.subset, self.spec) != (other.structure, other.subset, other.spec):
            raise InvalidInput("cannot add curvature estimates of different shape")
        n = self.n_data + other.n_data
        if self.structure == "full":
            return replace(self, n_data=n, matrix=self.matrix + other.matrix)
        if self.structure == "diag":
            return replace(self, n_data=n, diagonal=self.diagonal + other.diagonal)
        if self.structure == "kfac":
            merged = []
            for (A1, G1), (A2, G2) in zip(self.factors, other.factors):
                A = (self.n_data * A1 + other.n_data * A2) / n if n else A1 + A2
                merged.append((A, G1 + G2))
            return replace(self, n_data=n, factors=merged)
        raise UnsupportedCombination("low-rank estimates are not additive")


def zeros(spec, structure, subset=Subset.all(), kind="ggn"):
    """An empty-data estimate."""
    return estimate(spec, np.zeros(spec.n_params), nn.empty_batch(spec, nn.Categorical()),
                    nn.Categorical(), kind, structure if structure != "lowrank" else "full", subset)


def _output_curvature(likelihood, kind, F, y, mc_samples, seed):
    """Per-sample C x C matrices sandwiched between Jacobians."""
    if kind == "empirical_fisher":
        r = nn.output_loss_grad(likelihood, F, y)
        return np.einsum("na,nb->nab", r, r)
    if kind == "fisher" and mc_samples:
        rng = np.random.default_rng(seed)
        n, c = F.shape
        out = np.zeros((n, c, c))
        for _ in range(mc_samples):
            if isinstance(likelihood, nn.Categorical):
                P = np.exp(F - F.max(axis=1, keepdims=True))
                P /= P.sum(axis=1, keepdims=True)
                u = rng.random((n, 1))
                y_hat = np.minimum((np.cumsum(P, axis=1) < u).sum(axis=1), c - 1)
            else:
                y_hat = F + likelihood.sigma_noise * rng.standard_normal(F.shape)
            r = nn.output_loss_grad(likelihood, F, y_hat)
            out += np.einsum("na,nb->nab", r, r)
        return out / mc_samples
    return nn.output_hessians(likelihood, F)


def _subset_jacobians(spec, theta, X, subset):
    if subset.kind == "last_layer":
        return nn.last_layer_jacobians(spec, theta, X)
    J = nn.jacobians(spec, theta, X)
    if subset.kind == "all":
        return J
    return J[:, subset.mask_for(spec), :]


def estimate(
    spec,
    theta,
    batch,
    likelihood,
    kind="ggn",
    structure="full",
    subset=Subset.all(),
    rank=None,
    mc_samples=None,
    seed=0,
):
    """Curvature of the summed negative log-likelihood at ``theta``.

    ``kind="fisher"`` uses the exact GGN identity unless ``mc_samples`` is
    given, in which case labels are sampled from the model.
    """
    if kind not in KINDS:
        raise InvalidInput(f"unknown curvature kind {kind!r}")
    if structure not in STRUCTURES:
        raise InvalidInput(f"unknown structure {structure!r}")
    theta = np.asarray(theta, dtype=np.float64)
    d_s = int(np.count_nonzero(subset.mask_for(spec)))
    if structure == "lowrank":
        if rank is None or not 1 <= rank <= d_s:
            raise InvalidRank(f"rank must be in [1, {d_s}], got {rank}")
    layers = subset.kfac_layers(spec) if structure == "kfac" else None

    X = batch.inputs
    y = nn._targets(batch, spec, likelihood)
    n = len(y)
    if n:
        F = nn.predict_logits(spec, theta, X)
        Lam = _output_curvature(likelihood, kind, F, y, mc_samples, seed)
    else:
        c = spec.output_dim
        Lam = np.zeros((0, c, c))

    if structure == "kfac":
        factors = []
        if n:
            trace, deltas = nn.layer_deltas(spec, theta, X)
        for l in layers:
            p = spec.layer_dims[l] + (1 if spec.use_bias else 0)
            q = spec.layer_dims[l + 1]
            if not n:
                factors.append((np.zeros((p, p)), np.zeros((q, q))))
                continue
            acts = nn.augment(trace.activations[l], spec.use_bias)
            A, G = kernels.kfac_factors(acts, deltas[l], Lam)
            factors.append((A / n, G))
        return CurvatureEstimate(kind, "kfac", subset, spec, n, factors=factors)

    if n:
        J = _subset_jacobians(spec, theta, X, subset)
    else:
        J = np.zeros((0, d_s, spec.output_dim))
    if structure == "diag":
        return CurvatureEstimate(kind, "diag", subset, spec, n, diagonal=kernels.ggn_diag(J, Lam))
    full = CurvatureEstimate(kind, "full", subset, spec, n, matrix=kernels.ggn_full(J, Lam))
    if structure == "lowrank":
        return low_rank_truncate(full, rank)
    return full


def low_rank_truncate(full, k):
    """Keep the ``k`` leading eigenpairs of a dense estimate."""
    if full.structure != "full":
        raise InvalidInput("low-rank truncation needs a full estimate")
    d_s = full.matrix.shape[0]
    if not 1 <= k <= d_s:
        raise InvalidRank(f"rank must be in [1, {d_s}], got {k}")
    vals, vecs = np.linalg.eigh(full.matrix)
    order = np.argsort(vals, kind="stable")[::-1][:k]
    return replace(
        full,
        structure="lowrank",
        matrix=None,
        eigvals=np.clip(vals[order], 0.0, None),
        eigvecs=vecs[:, order],
    )


def kron_index(spec, l):
    """Position in ``kron(A, G)`` of each layer parameter in flat-vector order."""
    fan_in, fan_out = spec.layer_dims[l], spec.layer_dims[l + 1]
    i, j = np.divmod(np.arange(fan_out * fan_in), fan_in)
    idx = j * fan_out + i
    if spec.use_bias:
        idx = np.concatenate([idx, fan_in * fan_out + np.arange(fan_out)])
    return idx


def layer_as_matrix(spec, l, v):
    """Flat layer parameters -> augmented ``[W | b]`` matrix (out x in[+1])."""
    fan_in, fan_out = spec.layer_dims[l], spec.layer_dims[l + 1]
    W = v[..., : fan_out * fan_in].reshape(v.shape[:-1] + (fan_out, fan_in))
    if not spec.use_bias:
        return W
    b = v[..., fan_out * fan_in :][..., :, None]
    return np.concatenate([W, b], axis=-1)


def matrix_as_layer(spec, l, M):
    fan_in = spec.layer_dims[l]
    W = M[..., :fan_in].reshape(M.shape[:-2] + (-1,))
    if not spec.use_bias:
        return W
    return np.concatenate([W, M[..., fan_in]], axis=-1)


def _kfac_blocks(ce):
    """Yield ``(slice into subset coordinates, layer id, A, G)``."""
    spec = ce.spec
    start = 0
    for l, (A, G) in zip(ce.kfac_layers, ce.factors):
        size = spec.layer_size(l)
        yield slice(start, start + size), l, A, G
        start += size


def kfac_matvec(ce, v):
    """``H v`` for a Kronecker estimate without forming ``kron(A, G)``."""
    out = np.zeros_like(v, dtype=np.float64)
    for sl, l, A, G in _kfac_blocks(ce):
        V = layer_as_matrix(ce.spec, l, v[sl])
        out[sl] = matrix_as_layer(ce.spec, l, G @ V @ A)
    return out


def matvec(ce, v):
    if ce.structure == "full":
        return ce.matrix @ v
    if ce.structure == "diag":
        return ce.diagonal * v
    if ce.structure == "kfac":
        return kfac_matvec(ce, v)
    return ce.eigvecs @ (ce.eigvals * (ce.eigvecs.T @ v))


def materialize(ce, cap=MATERIALIZE_CAP):
    """Dense ``D_s x D_s`` matrix in subset coordinates."""
    d_s = ce.dim
    if d_s > cap:
        raise TooLarge(f"subset dimension {d_s} exceeds cap {cap}")
    if ce.structure == "full":
        return ce.matrix.copy()
    if ce.structure == "diag":
        return np.diag(ce.diagonal)
    if ce.structure == "lowrank":
        return (ce.eigvecs * ce.eigvals) @ ce.eigvecs.T
    out = np.zeros((d_s, d_s))
    for sl, l, A, G in _kfac_blocks(ce):
        idx = kron_index(ce.spec, l)
        out[sl, sl] = np.kron(A, G)[np.ix_(idx, idx)]
    return out
