"""Score treatment rules on held-out data with the IPW policy value.

Fits a local tree and an ensemble forest on synthetic sites, turns each
into the rule "treat when the estimated effect is positive", and compares
their values against treat-everyone and treat-no-one.  The effect is
tau(x) = x1 (negative effects exist), so a good rule beats both blankets.
"""

import argparse

import numpy as np

from fedtree import (
    FitParams,
    SiteDataset,
    build_augmented,
    fit_ef,
    fit_local,
    fit_propensity,
    policy_value,
    predict_star,
    predict_tau,
    split_site1,
)


def draw_site(site_id, n, rng):
    x = rng.standard_normal((n, 3))
    z = (rng.random(n) < 0.5).astype(np.int64)
    tau = x[:, 0]
    y = 0.5 * x[:, 1] + (z - 0.5) * tau + rng.standard_normal(n)
    return SiteDataset(site_id, y, z, x)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=1000, help="subjects per site")
    ap.add_argument("--sites", type=int, default=5)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    params = FitParams(min_leaf=max(5, args.n // 8), prune=False, honest=False)

    sites = [draw_site(k, args.n, rng) for k in range(1, args.sites + 1)]
    split = split_site1(sites[0], 0.5, seed=1)

    models = [fit_local(split.train, learner="ct", params=params, seed=1)]
    models += [fit_local(s, learner="ct", params=params, seed=s.site_id)
               for s in sites[1:]]
    table = build_augmented(split.estimation.x, models)
    ensemble = fit_ef(table, seed=2, b=200)

    local = fit_local(sites[0], learner="ct", params=params, seed=9)

    holdout = draw_site(1, args.n, rng)
    prop = fit_propensity(holdout, kind="constant")

    rules = {
        "treat nobody": lambda X: -np.ones(len(X)),
        "treat everyone": lambda X: np.ones(len(X)),
        "local tree rule": lambda X: predict_tau(local, X),
        "ensemble rule": lambda X: predict_star(ensemble, X),
    }
    print(f"IPW policy value on a fresh draw of n={args.n} (higher is better)")
    for name, rule in rules.items():
        print(f"  {name:16s} {policy_value(holdout, rule, prop):+.4f}")

    oracle = policy_value(holdout, lambda X: X[:, 0], prop)
    print(f"  {'oracle rule':16s} {oracle:+.4f}")


if __name__ == "__main__":
    main()
