"""One round-trip of the federation workflow, entirely on disk.

Five sites fit local models and export them as .fedmodel files; the target
site imports the files, audits them, grows an ensemble forest over their
predictions and reports per-site weights at a few covariate points.  Site 3
is given a shifted effect so the weights have something to react to.
"""

import argparse
import os
import tempfile

import numpy as np

from fedtree import (
    FitParams,
    SiteDataset,
    audit_privacy,
    build_augmented,
    export_model,
    fit_ef,
    fit_local,
    import_model,
    predict_star,
    read_envelope,
    split_site1,
    weights,
)


def draw_site(site_id, n, rng, shift=0.0):
    x = rng.standard_normal((n, 3))
    z = (rng.random(n) < 0.5).astype(np.int64)
    tau = np.maximum(x[:, 0], 0.0) + shift
    y = x[:, 1] + (z - 0.5) * tau + rng.standard_normal(n)
    return SiteDataset(site_id, y, z, x)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=600, help="subjects per site")
    ap.add_argument("--b", type=int, default=200, help="ensemble forest size")
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    params = FitParams(min_leaf=max(5, args.n // 8), prune=False, honest=False)

    with tempfile.TemporaryDirectory() as inbox:
        # --- each remote site, independently -------------------------
        for k in (2, 3, 4, 5):
            shift = 1.5 if k == 3 else 0.0
            site = draw_site(k, args.n, rng, shift=shift)
            model = fit_local(site, learner="ct", params=params, seed=k)
            path = os.path.join(inbox, f"site{k}.fedmodel")
            export_model(model, path)
            print(f"site {k}: exported {os.path.basename(path)} "
                  f"({os.path.getsize(path)} bytes{', shifted effect' if shift else ''})")

        # --- the target site ------------------------------------------
        target = draw_site(1, args.n, rng)
        split = split_site1(target, 0.5, seed=1)
        own = fit_local(split.train, learner="ct", params=params, seed=1)

        received = []
        for f in sorted(os.listdir(inbox)):
            path = os.path.join(inbox, f)
            report = audit_privacy(read_envelope(path), FitParams(min_leaf=5))
            print(f"audit {f}: {'ok' if report.ok else report.violations}")
            received.append(import_model(path))

        table = build_augmented(split.estimation.x, [own] + received)
        ensemble = fit_ef(table, seed=2, b=args.b)

        print(f"\nensemble forest: {args.b} trees on {table.n_subjects} subjects "
              f"x {table.k_sites} sites = {len(table.values)} rows")

        print("\n  x1    prediction   per-site weights (site 3 is the odd one out)")
        for x1 in (-1.5, 0.0, 1.5):
            q = np.array([x1, 0.0, 0.0])
            w = weights(ensemble, q).omega
            ws = " ".join(f"{v:.2f}" for v in w)
            print(f"{x1:+5.1f}  {predict_star(ensemble, q):+10.3f}   [{ws}]")


if __name__ == "__main__":
    main()
