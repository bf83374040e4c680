"""Command line front end.

Verbs mirror the one-shot exchange workflow: each site runs ``fit-local``
and ships the resulting ``.fedmodel`` file; the target site runs
``ensemble`` over the received files, then ``predict`` / ``weights`` /
``evaluate-policy`` against the combined model.  ``simulate`` drives the
synthetic benchmark.

Exit codes: 0 success, 2 invalid input or file format, 3 fit failure,
4 integrity or version rejection.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .dataset import SeedSpec, fmt_real, load_csv, split_site1
from .ensemble import build_augmented, fit_et, fit_ef, predict_star, weights as site_weights_at
from .errors import (
    FedtreeError,
    FitError,
    IntegrityError,
    ValidationError,
    VersionError,
)
from .exchange import export_model, import_model
from .local import LocalModel, fit_local, fit_propensity, predict_tau, site_size_weights
from .sim import load_config, policy_value, run_experiment, write_results_csv, write_summary_csv
from .tree import FitParams

_PROPENSITY_CLI = {"constant": "constant", "logit": "logistic"}


def _parse_point(text: str) -> np.ndarray:
    try:
        vals = [float(tok) for tok in text.split(",")]
    except ValueError as exc:
        raise ValidationError(f"bad query point {text!r}: {exc}") from None
    if not vals or not all(np.isfinite(vals)):
        raise ValidationError(f"query point {text!r} must be finite numbers")
    return np.array(vals)


def _cmd_fit_local(args) -> int:
    data = load_csv(args.data, site_id=args.site_id)
    local = fit_local(
        data,
        learner=args.learner,
        propensity=_PROPENSITY_CLI[args.propensity],
        seed=args.seed,
        b=args.b,
    )
    export_model(local, args.out)
    print(f"wrote {args.out} ({local.kind}, site {local.site_id}, n={local.n_rows})")
    return 0


def _load_model_dir(path: str) -> list:
    if not os.path.isdir(path):
        raise ValidationError(f"--models must name a directory, got {path!r}")
    files = sorted(f for f in os.listdir(path) if f.endswith(".fedmodel"))
    if not files:
        raise ValidationError(f"no .fedmodel files in {path!r}")
    models = []
    for f in files:
        m = import_model(os.path.join(path, f))
        if not isinstance(m, LocalModel):
            raise ValidationError(f"{f} is not a local model")
        models.append(m)
    return models


def _cmd_ensemble(args) -> int:
    target = load_csv(args.target, site_id=1)
    remote = _load_model_dir(args.models)
    if any(m.site_id == 1 for m in remote):
        raise ValidationError("--models must not contain a site-1 model; it is fit here")
    spec = SeedSpec(args.seed)
    split = split_site1(target, args.split_frac, seed=spec.derive("split"))
    own = fit_local(
        split.train,
        learner=args.learner,
        propensity=_PROPENSITY_CLI[args.propensity],
        seed=spec.derive("fit", 1),
        b=args.b,
    )
    models = [own] + remote
    eta = None
    if args.site_weights == "on":
        ordered = sorted(models, key=lambda m: m.site_id)
        eta = site_size_weights([m.n_rows for m in ordered])
    table = build_augmented(split.estimation.x, models, site_weights=eta)
    if args.method == "et":
        em = fit_et(table, seed=spec.derive("et"))
    else:
        em = fit_ef(
            table,
            params=FitParams(honest=True, prune=False),
            seed=spec.derive("ef"),
            b=args.b,
        )
    export_model(em, args.out)
    print(
        f"wrote {args.out} ({em.method}, {em.k_sites} sites, "
        f"{em.n_subjects} estimation subjects)"
    )
    return 0


def _cmd_predict(args) -> int:
    model = import_model(args.model)
    x = _parse_point(args.x)
    if isinstance(model, LocalModel):
        out = predict_tau(model, x.reshape(1, -1))
        print(fmt_real(float(out[0])))
    else:
        print(fmt_real(predict_star(model, x)))
    return 0


def _cmd_weights(args) -> int:
    model = import_model(args.model)
    if isinstance(model, LocalModel):
        raise ValidationError("weights needs an ensemble model, got a local model")
    profile = site_weights_at(model, _parse_point(args.x))
    print(" ".join(fmt_real(w) for w in profile.omega))
    return 0


def _cmd_simulate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    result = run_experiment(config, jobs=args.jobs)
    write_results_csv(args.out, result)
    print(
        f"wrote {args.out} ({config.replicates} replicates, {result.n_failed} failed)"
    )
    if args.summary_out:
        write_summary_csv(args.summary_out, result)
        print(f"wrote {args.summary_out}")
    return 0


def _cmd_evaluate_policy(args) -> int:
    data = load_csv(args.data, site_id=args.site_id)
    model = import_model(args.model)
    prop = fit_propensity(data, kind=_PROPENSITY_CLI[args.propensity])
    if isinstance(model, LocalModel):
        tau_hat = lambda X: predict_tau(model, X)
    else:
        tau_hat = lambda X: predict_star(model, X)
    value = policy_value(data, tau_hat, prop)
    print(fmt_real(value))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtree", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit-local", help="fit one site's effect model and export it")
    f.add_argument("--data", required=True, help="site CSV (y,z,x1..xD)")
    f.add_argument("--learner", choices=("ct", "cf"), default="ct")
    f.add_argument("--propensity", choices=("constant", "logit"), default="constant")
    f.add_argument("--out", required=True, help="output .fedmodel path")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--site-id", type=int, default=1, dest="site_id")
    f.add_argument("--b", type=int, default=500, help="forest size for --learner cf")
    f.set_defaults(fn=_cmd_fit_local)

    e = sub.add_parser("ensemble", help="combine received models on the target site")
    e.add_argument("--target", required=True, help="target site CSV")
    e.add_argument("--models", required=True, help="directory of received .fedmodel files")
    e.add_argument("--method", choices=("et", "ef"), default="ef")
    e.add_argument("--b", type=int, default=500, help="forest size for --method ef")
    e.add_argument("--split-frac", type=float, default=0.5, dest="split_frac")
    e.add_argument("--site-weights", choices=("on", "off"), default="off", dest="site_weights")
    e.add_argument("--learner", choices=("ct", "cf"), default="ct", help="target-site local learner")
    e.add_argument("--propensity", choices=("constant", "logit"), default="constant")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=_cmd_ensemble)

    q = sub.add_parser("predict", help="evaluate a model at one covariate point")
    q.add_argument("--model", required=True)
    q.add_argument("--x", required=True, help="comma-separated covariates v1,...,vD")
    q.set_defaults(fn=_cmd_predict)

    w = sub.add_parser("weights", help="per-site weights of an ensemble at one point")
    w.add_argument("--model", required=True)
    w.add_argument("--x", required=True, help="comma-separated covariates v1,...,vD")
    w.set_defaults(fn=_cmd_weights)

    s = sub.add_parser("simulate", help="run the synthetic benchmark from a config file")
    s.add_argument("--config", required=True, help="flat TOML config")
    s.add_argument("--out", required=True, help="per-replicate results CSV")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--summary-out", default=None, dest="summary_out")
    s.set_defaults(fn=_cmd_simulate)

    v = sub.add_parser("evaluate-policy", help="IPW value of treating where the model says so")
    v.add_argument("--data", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--propensity", choices=("constant", "logit"), default="constant")
    v.add_argument("--site-id", type=int, default=1, dest="site_id")
    v.set_defaults(fn=_cmd_evaluate_policy)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (IntegrityError, VersionError) as exc:
        print(f"fedtree: {exc}", file=sys.stderr)
        return 4
    except FitError as exc:
        print(f"fedtree: {exc}", file=sys.stderr)
        return 3
    except FedtreeError as exc:
        print(f"fedtree: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
