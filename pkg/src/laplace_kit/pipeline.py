"""End-to-end workflows driven by a :class:`RunConfig`: train, fit, tune, predict, evaluate."""

import math

import numpy as np

from laplace_kit import continual, data, metrics, nn, posterior, predictive, tuning
from laplace_kit import curvature as cv
from laplace_kit.config import RunConfig, sub_seed
from laplace_kit.errors import InvalidInput, MissingData, UnsupportedMode


def n_outputs(cfg: RunConfig, batch):
    y = np.asarray(batch.targets)
    if cfg.regression:
        return 1 if y.ndim == 1 else y.shape[1]
    if y.size == 0:
        raise MissingData("cannot infer the number of classes from an empty data set")
    return int(y.max()) + 1


def make_spec(cfg: RunConfig, batch, n_out=None):
    dims = (batch.inputs.shape[1], *[int(h) for h in cfg.hidden], n_out or n_outputs(cfg, batch))
    return nn.MlpSpec(dims, cfg.activation)


def train(cfg: RunConfig, batch):
    spec = make_spec(cfg, batch)
    opt = nn.TrainConfig(cfg.lr, cfg.momentum, cfg.steps, sub_seed(cfg.seed, "init"))
    theta = nn.train_map(spec, batch, cfg.likelihood(), nn.ScalarPrior(cfg.prior_precision), opt)
    return spec, theta


def subset_for(cfg: RunConfig, spec, theta, batch):
    if cfg.subset == "all":
        return cv.Subset.all()
    if cfg.subset == "last_layer":
        return cv.Subset.last_layer()
    # largest marginal variances under a diagonal LA over all weights
    ce = cv.estimate(spec, theta, batch, cfg.likelihood(), cfg.kind, "diag", cv.Subset.all())
    diag = posterior.fit(spec, theta, ce, nn.ScalarPrior(cfg.prior_precision))
    return posterior.select_subnetwork(diag.marginal_variances(), cfg.subnetwork_size)


def fit(cfg: RunConfig, spec, theta, batch, val=None, ood=None):
    """Fitted posterior, tuned post hoc when ``cfg.tune == 'posthoc'``. Returns ``(post, TuneResult | None)``."""
    if batch.inputs.shape[0] == 0:
        raise MissingData("cannot fit a posterior on an empty data set")
    lik = cfg.likelihood()
    subset = subset_for(cfg, spec, theta, batch)
    ce = cv.estimate(spec, theta, batch, lik, cfg.kind, cfg.structure, subset, rank=cfg.rank)
    post = posterior.fit(spec, theta, ce, nn.ScalarPrior(cfg.prior_precision), cfg.kfac_prior_mode)
    if cfg.tune == "none":
        return post, None
    return tune(cfg, post, batch, val, ood)


def tune(cfg: RunConfig, post, batch, val=None, ood=None):
    """Grid search over the prior precision, refined by evidence ascent for the marglik objective."""
    lik = cfg.likelihood()
    if cfg.objective in ("val_nll", "val_nll_ood") and val is None:
        raise MissingData(f"objective {cfg.objective!r} needs validation data")
    if cfg.objective == "val_nll_ood" and ood is None:
        raise MissingData("objective 'val_nll_ood' needs out-of-distribution data")
    grid = cfg.grid()
    scores = np.empty(grid.size)
    for j, lam in enumerate(grid):
        p = post.with_prior(nn.ScalarPrior(float(lam)))
        scores[j] = tuning.score(p, cfg.objective, lik, batch, val, ood, cfg.lambda_ood,
                                 cfg.pred_type, cfg.link, cfg.n_samples, sub_seed(cfg.seed, "sample"))
    best = float(grid[int(np.argmax(scores))])
    if cfg.objective == "marglik":
        try:
            best, _ = tuning.optimize_marglik(post.with_prior(nn.ScalarPrior(best)), batch, lik, steps=50)
        except UnsupportedMode:
            pass
    result = tuning.TuneResult(best, None, grid, None, scores[None, :])
    return post.with_prior(nn.ScalarPrior(best)), result


def predict(cfg: RunConfig, model, X):
    """``model`` is a posterior or a ``(spec, theta)`` pair for the MAP predictive."""
    lik = cfg.likelihood()
    if isinstance(model, posterior.LaplacePosterior):
        return predictive.predict(model, X, lik, cfg.pred_type, cfg.link, cfg.n_samples,
                                  sub_seed(cfg.seed, "sample"))
    spec, theta = model
    return predictive.map_predict(spec, theta, np.atleast_2d(X), lik)


def evaluate(cfg: RunConfig, model, batch):
    if batch.inputs.shape[0] == 0:
        raise MissingData("no samples to evaluate")
    pred = predict(cfg, model, batch.inputs)
    if not cfg.regression:
        return metrics.evaluate_classification(pred, batch.targets, cfg.ece_bins).to_dict()
    y = np.asarray(batch.targets, dtype=np.float64).reshape(pred.mean.shape)
    var = np.diagonal(pred.cov, axis1=-2, axis2=-1)
    return {"nll": metrics.regression_nll(pred.mean, var, y),
            "rmse": float(math.sqrt(np.mean((pred.mean - y) ** 2)))}


def shift_sweep(cfg: RunConfig, model, batch, angles):
    """One metrics row per rotation angle, in input order."""
    if cfg.regression:
        raise InvalidInput("rotation sweeps need a classification config")
    rows = []
    for a in angles:
        m = evaluate(cfg, model, data.rotate(batch, float(a)))
        rows.append({"shift": float(a), "nll": m["nll"], "ece": m["ece"], "acc": m["accuracy"], "brier": m["brier"]})
    return rows


# Bundled synthetic benchmarks.

SHIFT_ANGLES = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 120.0, 150.0, 180.0)


def shift_benchmark(seed, angles=SHIFT_ANGLES, cfg=None):
    """Rotation sweep on three 2-D Gaussian clusters for MAP and the default LA.

    Returns ``{"map": rows, "la": rows}``.
    """
    cfg = cfg or RunConfig(seed=seed, steps=500)
    train_set = data.gaussian_clusters(300, noise=0.6, seed=sub_seed(seed, "data"), means_seed=0)
    test_set = data.gaussian_clusters(600, noise=0.6, seed=sub_seed(seed, "data") + 1, means_seed=0)
    spec, theta = train(cfg, train_set)
    post, _ = fit(cfg, spec, theta, train_set)
    return {"map": shift_sweep(cfg, (spec, theta), test_set, angles),
            "la": shift_sweep(cfg, post, test_set, angles)}


def continual_stream(seed, n_tasks=5, n_train=400, n_test=400, dim=20, n_classes=5):
    """Permuted-feature stream over Gaussian clusters; returns ``(train_stream, test_tasks)``."""
    base = data.gaussian_clusters(n_train, noise=0.7, seed=seed, n_classes=n_classes, dim=dim,
                                  radius=3.0, means_seed=seed)
    test = data.gaussian_clusters(n_test, noise=0.7, seed=seed + 10_000, n_classes=n_classes, dim=dim,
                                  radius=3.0, means_seed=seed)
    stream = continual.permuted_tasks(base, n_tasks, seed)
    tests = [continual.apply_permutation(test, p) for p in stream.permutations]
    return stream, tests


def continual_benchmark(seed, n_tasks=5, structures=("diag", "kfac"), hidden=32, prior_precision=1.0,
                        opt=nn.TrainConfig(lr=2e-3, momentum=0.9, steps=300, seed=0), tune_gamma=False):
    """Accuracy matrices for LA consolidation per structure and for the zero-penalty control."""
    stream, tests = continual_stream(seed, n_tasks)
    x0, y0 = stream.tasks[0].inputs, stream.tasks[0].targets
    spec = nn.MlpSpec((x0.shape[1], hidden, int(np.max(y0)) + 1), "tanh")
    lik = nn.Categorical()
    opt = nn.TrainConfig(opt.lr, opt.momentum, opt.steps, sub_seed(seed, "init"))
    out = {}
    for s in structures:
        thetas, running = continual.run_stream(spec, stream.tasks, lik, s, prior_precision, opt, tune_gamma)
        acc = continual.evaluate_stream(spec, thetas, tests)
        out[s] = {"matrix": acc, "final_mean": float(np.mean(acc[-1])), "prior_precision": running.prior_precision}
    thetas, _ = continual.run_stream(spec, stream.tasks, lik, penalty=False, prior_precision=prior_precision, opt=opt)
    acc = continual.evaluate_stream(spec, thetas, tests)
    out["control"] = {"matrix": acc, "final_mean": float(np.mean(acc[-1])), "prior_precision": prior_precision}
    return out
