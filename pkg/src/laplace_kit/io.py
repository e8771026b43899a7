"""Versioned JSON artifacts: model checkpoints, posteriors, reports."""

import json

import numpy as np

from laplace_kit import curvature as cv
from laplace_kit import nn, posterior
from laplace_kit.errors import InvalidInput

VERSION = 1


def _likelihood_to_dict(likelihood):
    if isinstance(likelihood, nn.GaussianRegression):
        return {"kind": "regression", "sigma_noise": likelihood.sigma_noise}
    return {"kind": "classification"}


def likelihood_from_dict(d):
    if d["kind"] == "regression":
        return nn.GaussianRegression(float(d["sigma_noise"]))
    return nn.Categorical()


def _floats(a):
    return np.asarray(a, dtype=np.float64).tolist()


def _check_version(d, what):
    if d.get("version") != VERSION:
        raise InvalidInput(f"unsupported {what} version {d.get('version')!r}")


def model_to_dict(spec, theta, likelihood, extra=None):
    d = {"version": VERSION, "spec": spec.to_dict(), "theta": _floats(theta),
         "likelihood": _likelihood_to_dict(likelihood)}
    if extra:
        d.update(extra)
    return d


def model_from_dict(d):
    _check_version(d, "model")
    spec = nn.MlpSpec.from_dict(d["spec"])
    theta = np.asarray(d["theta"], dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise InvalidInput("checkpoint theta does not match its spec")
    return spec, theta, likelihood_from_dict(d.get("likelihood", {"kind": "classification"}))


def curvature_payload(ce):
    if ce.structure == "full":
        return {"matrix": _floats(ce.matrix)}
    if ce.structure == "diag":
        return {"diagonal": _floats(ce.diagonal)}
    if ce.structure == "kfac":
        return {"factors": [{"A": _floats(A), "G": _floats(G)} for A, G in ce.factors]}
    return {"eigvecs": _floats(ce.eigvecs), "eigvals": _floats(ce.eigvals)}


def curvature_from_payload(spec, structure, kind, subset, n_data, payload):
    def arr(x):
        return np.asarray(x, dtype=np.float64)

    if structure == "full":
        return cv.CurvatureEstimate(kind, structure, subset, spec, n_data, matrix=arr(payload["matrix"]))
    if structure == "diag":
        return cv.CurvatureEstimate(kind, structure, subset, spec, n_data, diagonal=arr(payload["diagonal"]))
    if structure == "kfac":
        factors = [(arr(f["A"]), arr(f["G"])) for f in payload["factors"]]
        return cv.CurvatureEstimate(kind, structure, subset, spec, n_data, factors=factors)
    if structure == "lowrank":
        d_s = int(np.count_nonzero(subset.mask_for(spec)))
        vecs = arr(payload["eigvecs"]).reshape(d_s, -1)
        return cv.CurvatureEstimate(kind, structure, subset, spec, n_data, eigvecs=vecs, eigvals=arr(payload["eigvals"]))
    raise InvalidInput(f"unknown structure {structure!r}")


def posterior_to_dict(post, likelihood, extra=None):
    ce = post.curvature
    d = {
        "version": VERSION,
        "spec": post.spec.to_dict(),
        "likelihood": _likelihood_to_dict(likelihood),
        "subset": ce.subset.to_dict(),
        "structure": ce.structure,
        "kind": ce.kind,
        "prior": nn.prior_to_value(post.prior),
        "kfac_prior_mode": post.kfac_prior_mode,
        "n_data": ce.n_data,
        "theta_map": _floats(post.theta_map),
        "payload": curvature_payload(ce),
    }
    if extra:
        d.update(extra)
    return d


def posterior_from_dict(d):
    _check_version(d, "posterior")
    spec = nn.MlpSpec.from_dict(d["spec"])
    subset = cv.Subset.from_dict(d["subset"])
    ce = curvature_from_payload(spec, d["structure"], d["kind"], subset, int(d.get("n_data", 0)), d["payload"])
    prior = nn.prior_from_value(d["prior"])
    post = posterior.fit(spec, np.asarray(d["theta_map"], dtype=np.float64), ce, prior,
                         d.get("kfac_prior_mode", "exact_eigen"))
    return post, likelihood_from_dict(d["likelihood"])


def dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(obj))


def read_json(path):
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"{path}: {exc}") from exc
