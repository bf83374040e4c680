"""Fixed-weight combinations of the site models.

These are the non-adaptive references the tree ensembles are compared
against: the purely local fit (LOC), the uniform average (MA), exponential
weighting by in-sample discrepancy (EWMA), and stacked regression (STACK).
Each produces one weight vector over sites; predictions are the weighted sum
of the site models evaluated at the query point.  The -oracle variants are
obtained by passing ground-truth reference values instead of a fitted
reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SiteDataset
from .errors import ValidationError
from .local import LocalModel, fit_local, predict_tau
from .tree import FitParams


@dataclass
class BaselineModel:
    """One baseline estimator: either a single local fit (kind "loc") or a
    weight vector over the K site models."""

    kind: str
    models: list
    weights: np.ndarray | None = None
    rank_deficient: bool = False


def _sorted_models(models) -> list:
    ms = sorted(models, key=lambda m: m.site_id)
    ids = [m.site_id for m in ms]
    if ids != list(range(1, len(ms) + 1)):
        raise ValidationError(f"model site ids must be exactly 1..K, got {ids}")
    if len(ms) < 2:
        raise ValidationError("combination baselines need at least 2 site models")
    return ms


def _prediction_matrix(models, est_x) -> np.ndarray:
    est_x = np.asarray(est_x, dtype=np.float64)
    cols = [predict_tau(m, est_x) for m in models]
    P = np.column_stack(cols)
    if not np.all(np.isfinite(P)):
        raise ValidationError("a site model produced non-finite predictions")
    return P


def _check_ref(ref_values, n) -> np.ndarray:
    ref = np.asarray(ref_values, dtype=np.float64)
    if ref.shape != (n,):
        raise ValidationError(f"reference values must have shape ({n},)")
    if not np.all(np.isfinite(ref)):
        raise ValidationError("reference values must be finite")
    return ref


def fit_loc(
    data: SiteDataset,
    learner: str = "ct",
    propensity: str = "constant",
    covariates=None,
    params: FitParams | None = None,
    seed=0,
    b: int = 500,
) -> BaselineModel:
    """Local-only baseline: one model fitted on all of the target site's rows."""
    local = fit_local(
        data,
        learner=learner,
        propensity=propensity,
        covariates=covariates,
        params=params,
        seed=seed,
        b=b,
    )
    return BaselineModel(kind="loc", models=[local])


def fit_ma(models, literal_one_over_k: bool = False) -> BaselineModel:
    """Uniform model average, weight 1/K per site.

    literal_one_over_k swaps in weights proportional to 1/k (k the site id),
    normalized to sum to 1; kept for auditing the non-uniform reading.
    """
    ms = _sorted_models(models)
    k = len(ms)
    if literal_one_over_k:
        raw = 1.0 / np.arange(1, k + 1)
        w = raw / raw.sum()
    else:
        w = np.full(k, 1.0 / k)
    return BaselineModel(kind="ma", models=ms, weights=w)


def fit_ewma(models, est_x, ref_values) -> BaselineModel:
    """Exponential weighting by summed squared discrepancy on the estimation
    rows: w_k proportional to exp(-sum_i (tau_hat_k(x_i) - ref_i)^2).

    Computed in log space with max subtraction, so a model whose loss exceeds
    the others by thousands simply gets weight 0 instead of overflowing.
    """
    ms = _sorted_models(models)
    P = _prediction_matrix(ms, est_x)
    ref = _check_ref(ref_values, len(P))
    resid = P - ref[:, None]
    losses = np.sum(resid * resid, axis=0)
    shifted = losses - np.min(losses)
    w = np.exp(-shifted)
    w = w / w.sum()
    return BaselineModel(kind="ewma", models=ms, weights=w)


def fit_stack(models, est_x, ref_values) -> BaselineModel:
    """Stacked regression: least squares of the reference on the K prediction
    columns, no intercept.  A rank-deficient design falls back to the
    minimum-norm solution (flagged), which splits weight equally across
    duplicated columns."""
    ms = _sorted_models(models)
    P = _prediction_matrix(ms, est_x)
    ref = _check_ref(ref_values, len(P))
    coef, _, rank, _ = np.linalg.lstsq(P, ref, rcond=None)
    return BaselineModel(
        kind="stack", models=ms, weights=coef, rank_deficient=int(rank) < len(ms)
    )


def predict_baseline(bm: BaselineModel, X) -> np.ndarray:
    """Evaluate a baseline at new covariate rows."""
    X = np.asarray(X, dtype=np.float64)
    if bm.kind == "loc":
        return predict_tau(bm.models[0], X)
    acc = np.zeros(len(X))
    for k, m in enumerate(bm.models):
        acc += bm.weights[k] * predict_tau(m, X)
    return acc
