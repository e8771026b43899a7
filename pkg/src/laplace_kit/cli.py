"""Command-line driver: ``laplace-kit <verb> ...``.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical failure.
"""

import argparse
import csv
import io as _io
import json
import sys

import numpy as np

from laplace_kit import data, io, nn, pipeline, posterior, tuning
from laplace_kit.config import RunConfig, load_config, sub_seed
from laplace_kit.errors import ConfigError, InvalidInput, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SHIFT_COLUMNS = ("shift", "nll", "ece", "acc", "brier")


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_config_flags(p):
    g = p.add_argument_group("run configuration (a --config file overrides these)")
    g.add_argument("--config", help="JSON file with RunConfig fields")
    g.add_argument("--task", choices=("classification", "regression"))
    g.add_argument("--hidden", type=_ints, help="comma-separated hidden widths, e.g. 32,32")
    g.add_argument("--activation", choices=("tanh", "relu", "identity"))
    g.add_argument("--sigma-noise", type=float)
    g.add_argument("--prior-precision", type=float)
    g.add_argument("--kind", help="ggn | fisher | empirical_fisher")
    g.add_argument("--structure", help="full | diag | kfac | lowrank")
    g.add_argument("--subset", help="all | last_layer | subnetwork")
    g.add_argument("--rank", type=int)
    g.add_argument("--subnetwork-size", type=int)
    g.add_argument("--kfac-prior-mode", help="exact_eigen | sqrt_split")
    g.add_argument("--pred-type", help="glm | nn")
    g.add_argument("--link", help="probit | bridge | delta | mc | exact")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--tune", help="posthoc | none")
    g.add_argument("--objective", help="marglik | val_nll | val_nll_ood")
    g.add_argument("--lambda-ood", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int, help="top-level seed (fallback: LAPLACE_KIT_SEED, then 0)")
    g.add_argument("--deterministic", action="store_true",
                   help="accepted for compatibility; accumulation is always serial")


_CONFIG_FIELDS = ("task", "hidden", "activation", "sigma_noise", "prior_precision", "kind", "structure", "subset",
                  "rank", "subnetwork_size", "kfac_prior_mode", "pred_type", "link", "n_samples", "tune",
                  "objective", "lambda_ood", "lr", "momentum", "steps", "seed")


def _config(args, **fixed):
    overrides = {k: getattr(args, k, None) for k in _CONFIG_FIELDS}
    overrides.update({k: v for k, v in fixed.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _read_data(path, cfg: RunConfig):
    return data.read_csv(path, classification=not cfg.regression)


def _task_of(likelihood):
    return "regression" if isinstance(likelihood, nn.GaussianRegression) else "classification"


def _sigma_of(likelihood):
    return likelihood.sigma_noise if isinstance(likelihood, nn.GaussianRegression) else None


def _load_model(path, args):
    """Posterior or MAP model plus the config matching its likelihood."""
    d = io.read_json(path)
    if "payload" in d:
        post, lik = io.posterior_from_dict(d)
        cfg = _config(args, task=_task_of(lik), sigma_noise=_sigma_of(lik))
        return post, cfg
    spec, theta, lik = io.model_from_dict(d)
    cfg = _config(args, task=_task_of(lik), sigma_noise=_sigma_of(lik))
    return (spec, theta), cfg


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _emit(path, obj):
    _write_text(path, io.dumps(obj))


def cmd_generate(args):
    if args.n < 0:
        raise InvalidInput("n must be non-negative")
    if args.noise < 0:
        raise InvalidInput("noise must be non-negative")
    seed = load_config(None, {"seed": args.seed}).seed
    if args.kind == "clusters":
        batch = data.gaussian_clusters(args.n, args.noise, sub_seed(seed, "data"), args.classes, args.dim,
                                       means_seed=seed)
        _write_text(args.out, data.batch_to_csv(batch, classification=True))
    else:
        batch = data.sinusoid(args.n, args.noise, sub_seed(seed, "data"))
        _write_text(args.out, data.batch_to_csv(batch, classification=False))


def cmd_train(args):
    cfg = _config(args)
    batch = _read_data(args.data, cfg)
    spec, theta = pipeline.train(cfg, batch)
    _emit(args.out, io.model_to_dict(spec, theta, cfg.likelihood()))


def _maybe_read(path, cfg):
    return None if path is None else _read_data(path, cfg)


def _tuning_record(result):
    if result is None:
        return {}
    return {"tuning": {"prior_precision": result.prior_precision, "grid": result.grid.tolist(),
                       "scores": result.scores[0].tolist()}}


def cmd_fit(args):
    d = io.read_json(args.model)
    spec, theta, lik = io.model_from_dict(d)
    cfg = _config(args, task=_task_of(lik), sigma_noise=_sigma_of(lik))
    batch = _read_data(args.data, cfg)
    post, result = pipeline.fit(cfg, spec, theta, batch, _maybe_read(args.val, cfg), _maybe_read(args.ood, cfg))
    _emit(args.out, io.posterior_to_dict(post, cfg.likelihood(), _tuning_record(result)))


def cmd_tune(args):
    post, lik = io.posterior_from_dict(io.read_json(args.posterior))
    cfg = _config(args, task=_task_of(lik), sigma_noise=_sigma_of(lik))
    batch = _read_data(args.data, cfg)
    post, result = pipeline.tune(cfg, post, batch, _maybe_read(args.val, cfg), _maybe_read(args.ood, cfg))
    _emit(args.out, io.posterior_to_dict(post, lik, _tuning_record(result)))


def cmd_predict(args):
    model, cfg = _load_model(args.model, args)
    X = _read_data(args.data, cfg).inputs
    pred = pipeline.predict(cfg, model, X)
    if cfg.regression:
        out = {"mean": pred.mean.tolist(), "variance": np.diagonal(pred.cov, axis1=-2, axis2=-1).tolist()}
    else:
        out = {"probs": np.asarray(pred).tolist()}
    _emit(args.out, out)


def cmd_evaluate(args):
    model, cfg = _load_model(args.model, args)
    _emit(args.out, pipeline.evaluate(cfg, model, _read_data(args.data, cfg)))


def cmd_shift_eval(args):
    model, cfg = _load_model(args.model, args)
    if args.method == "map" and isinstance(model, posterior.LaplacePosterior):
        model = (model.spec, model.theta_map)
    if args.method == "la" and not isinstance(model, posterior.LaplacePosterior):
        raise InvalidInput("--method la needs a posterior file")
    rows = pipeline.shift_sweep(cfg, model, _read_data(args.data, cfg), args.angles)
    buf = _io.StringIO()
    w = csv.DictWriter(buf, SHIFT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(r[k])) for k in SHIFT_COLUMNS})
    _write_text(args.out, buf.getvalue())


def cmd_continual(args):
    if args.tasks < 1:
        raise InvalidInput("need at least one task")
    seed = load_config(None, {"seed": args.seed}).seed
    structures = tuple(args.structures.split(","))
    res = pipeline.continual_benchmark(seed, args.tasks, structures, tune_gamma=args.tune_gamma)

    def rows(m):
        return [[None if np.isnan(v) else float(v) for v in row] for row in m]

    out = {"version": io.VERSION, "tasks": args.tasks, "seed": seed,
           "la": {s: {"accuracy": rows(res[s]["matrix"]), "mean_final_accuracy": res[s]["final_mean"],
                      "prior_precision": res[s]["prior_precision"]} for s in structures},
           "control": {"accuracy": rows(res["control"]["matrix"]),
                       "mean_final_accuracy": res["control"]["final_mean"]}}
    _emit(args.out, out)


def cmd_marglik(args):
    post, lik = io.posterior_from_dict(io.read_json(args.posterior))
    cfg = _config(args, task=_task_of(lik), sigma_noise=_sigma_of(lik))
    batch = _read_data(args.data, cfg)
    if args.optimize:
        lam, _ = tuning.optimize_marglik(post, batch, lik, steps=args.optimize_steps)
        post = post.with_prior(nn.ScalarPrior(lam))
    rep = posterior.log_marginal_likelihood(post, batch, lik)
    out = {"log_evidence": rep.log_evidence, "components": rep.components,
           "prior": nn.prior_to_value(post.prior)}
    if post.scalar_prior and not (post.structure == "kfac" and post.kfac_prior_mode != "exact_eigen"):
        out["grad_log_prior_precision"] = tuning.marglik_grad(post, batch, lik)
    _emit(args.out, out)


def build_parser():
    parser = argparse.ArgumentParser(prog="laplace-kit", description="Laplace approximations for small MLPs.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="write a synthetic CSV data set")
    p.add_argument("--kind", choices=("clusters", "sinusoid"), default="clusters")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="MAP training; writes a model checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit (and by default tune) a Laplace posterior")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--ood")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", help="re-select the prior precision of a posterior")
    p.add_argument("--posterior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--ood")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_tune)

    for name, func, helptext in (("predict", cmd_predict, "predictive probabilities or Gaussians"),
                                 ("evaluate", cmd_evaluate, "metrics JSON")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True, help="posterior or MAP checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--out", default="-")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("shift-eval", help="metrics under input rotation; CSV output")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--angles", type=_floats, default=list(pipeline.SHIFT_ANGLES))
    p.add_argument("--method", choices=("la", "map"), default="la")
    p.add_argument("--out", default="-")
    _add_config_flags(p)
    p.set_defaults(func=cmd_shift_eval)

    p = sub.add_parser("continual", help="permuted-feature continual benchmark")
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--structures", default="diag,kfac")
    p.add_argument("--tune-gamma", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("marglik", help="Laplace log evidence of a posterior")
    p.add_argument("--posterior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--optimize", action="store_true", help="maximize over the prior precision first")
    p.add_argument("--optimize-steps", type=int, default=100)
    p.add_argument("--out", default="-")
    _add_config_flags(p)
    p.set_defaults(func=cmd_marglik)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
