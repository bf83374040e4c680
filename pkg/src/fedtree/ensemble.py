"""Cross-site ensembling on the augmented prediction table.

Site 1 evaluates every site's fitted effect model on its own estimation rows
and stacks the results into a long table: one row per (subject, site) pair,
with the site id as an extra categorical predictor.  A regression tree (ET)
or honest subsampled forest (EF) fitted to this table learns where each
site's model is trustworthy; predictions for site 1 are read off at
(x, site=1).

Because tree predictions are leaf averages, the ensemble is an adaptive
weighted average of the site models: the per-site weights at a query point
are the (row-weight) shares of each site among the leaf's estimation rows,
they are non-negative and sum to one, and the row-level kernel reproduces the
prediction exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, SchemaError, ValidationError
from .local import LocalModel, predict_tau
from .tree import (
    Categorical,
    FeatureSchema,
    FitParams,
    ForestModel,
    Numeric,
    TreeModel,
    apply_tree,
    fit_forest,
    fit_tree,
    predict,
    _seq_sum,
)

TARGET_SITE = 1


# ============================================================
# Augmented table
# ============================================================


@dataclass
class AugmentedTable:
    """Long table of local-model predictions on site 1's estimation rows.

    Rows are subject-major, site-minor: the K rows of subject i precede those
    of subject i+1.  ``X`` holds the subject's covariates with the site id
    appended as the last (categorical) column.
    """

    X: np.ndarray  # (n_subjects * K, base_dim + 1)
    values: np.ndarray  # predictions tau_hat_k(x_i)
    weights: np.ndarray  # row weights (eta_k or 1)
    subjects: np.ndarray  # subject index per row, 0..n_subjects-1
    sites: np.ndarray  # site id per row, 1..K
    schema: FeatureSchema
    k_sites: int
    n_subjects: int
    base_dim: int
    eta: np.ndarray | None

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n_subjects).tobytes())
        h.update(np.int64(self.k_sites).tobytes())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()


def augmented_schema(base_dim: int, k_sites: int) -> FeatureSchema:
    """Covariate features plus the site id as a trailing categorical."""
    return FeatureSchema(
        tuple(Numeric() for _ in range(base_dim)) + (Categorical(k_sites),)
    )


def build_augmented(est_x: np.ndarray, models, site_weights=None) -> AugmentedTable:
    """Assemble the augmented table from site 1's estimation covariates and
    the K local models (site ids must be exactly 1..K).

    Args:
        est_x: (n_subjects, base_dim) covariates of site 1's estimation rows.
        models: LocalModel per site; order is normalized by site id.
        site_weights: optional per-site multipliers eta (length K); rows of
            site k then carry weight eta_k instead of 1.

    Raises:
        ValidationError: duplicate/missing site ids, or a model produced a
            non-finite prediction (the message names subject and site).
    """
    est_x = np.asarray(est_x, dtype=np.float64)
    if est_x.ndim != 2 or len(est_x) == 0:
        raise ValidationError("est_x must be a non-empty (n, dim) matrix")
    n_sub, base_dim = est_x.shape

    by_site = {}
    for m in models:
        if not isinstance(m, LocalModel):
            raise ValidationError(f"expected LocalModel, got {type(m).__name__}")
        if m.site_id in by_site:
            raise ValidationError(f"duplicate model for site {m.site_id}")
        by_site[m.site_id] = m
    k = len(by_site)
    if k < 2:
        raise ValidationError("ensembling needs models from at least 2 sites")
    if sorted(by_site) != list(range(1, k + 1)):
        raise ValidationError(
            f"model site ids must be exactly 1..{k}, got {sorted(by_site)}"
        )

    eta = None
    if site_weights is not None:
        eta = np.asarray(site_weights, dtype=np.float64)
        if eta.shape != (k,) or np.any(eta <= 0) or not np.all(np.isfinite(eta)):
            raise ValidationError(f"site_weights must be {k} positive finite values")

    preds = np.empty((n_sub, k))
    for site in range(1, k + 1):
        col = predict_tau(by_site[site], est_x)
        if not np.all(np.isfinite(col)):
            i = int(np.flatnonzero(~np.isfinite(col))[0])
            raise ValidationError(
                f"non-finite prediction for subject {i} from site {site}"
            )
        preds[:, site - 1] = col

    sites_row = np.tile(np.arange(1, k + 1), n_sub)
    subjects = np.repeat(np.arange(n_sub), k)
    X = np.column_stack([est_x[subjects], sites_row.astype(np.float64)])
    values = preds.reshape(-1)  # subject-major, site-minor
    weights = eta[sites_row - 1] if eta is not None else np.ones(n_sub * k)
    return AugmentedTable(
        X=X,
        values=values,
        weights=weights,
        subjects=subjects,
        sites=sites_row,
        schema=augmented_schema(base_dim, k),
        k_sites=k,
        n_subjects=n_sub,
        base_dim=base_dim,
        eta=eta,
    )


# ============================================================
# Ensemble models
# ============================================================


@dataclass
class EnsembleModel:
    """Fitted ensemble tree ("et") or ensemble forest ("ef").

    ``site_counts[t][nid]`` holds, for tree t's node nid, the summed row
    weights of its estimation rows by site; per-site weights at a query point
    are read from these histograms, so they survive export (which never
    carries row-level data).  ``row_weights`` and the models' leaf cohorts
    power the row-level kernel and exist only on in-memory fits.
    """

    method: str
    model: object  # TreeModel | ForestModel
    k_sites: int
    n_subjects: int
    base_dim: int
    honest: bool
    subject_mode: bool
    eta: np.ndarray | None
    site_counts: list  # per tree: (n_nodes, K) array
    table_fingerprint: str | None = None
    row_weights: np.ndarray | None = None


@dataclass
class WeightProfile:
    """Per-site simplex weights at one query point, with the row-level kernel
    when the model still carries its cohorts."""

    omega: np.ndarray
    x: np.ndarray
    site: int
    lam: np.ndarray | None
    table_fingerprint: str | None


def _leaf_site_counts(tree: TreeModel, table: AugmentedTable) -> np.ndarray:
    sc = np.zeros((tree.n_nodes, table.k_sites))
    for nid in range(tree.n_nodes):
        members = tree.leaf_members[nid]
        if members is None:
            continue
        sc[nid] = np.bincount(
            table.sites[members],
            weights=table.weights[members],
            minlength=table.k_sites + 1,
        )[1:]
    return sc


def fit_et(table: AugmentedTable, params: FitParams | None = None, seed=0) -> EnsembleModel:
    """Ensemble tree: one pruned regression tree on the augmented table.

    Cross-validation folds are stratified by subject so a subject's K rows
    never straddle train and validation.
    """
    if params is None:
        params = FitParams(honest=False, prune=True)
    tree = fit_tree(
        table.X,
        table.values,
        table.schema,
        params=params,
        seed=seed,
        weights=table.weights,
        cv_groups=table.subjects,
    )
    return EnsembleModel(
        method="et",
        model=tree,
        k_sites=table.k_sites,
        n_subjects=table.n_subjects,
        base_dim=table.base_dim,
        honest=params.honest,
        subject_mode=False,
        eta=table.eta,
        site_counts=[_leaf_site_counts(tree, table)],
        table_fingerprint=table.fingerprint,
        row_weights=table.weights,
    )


def fit_ef(
    table: AugmentedTable,
    params: FitParams | None = None,
    seed=0,
    b: int = 2000,
) -> EnsembleModel:
    """Ensemble forest: honest subsampled trees on the augmented table.

    Subsampling is subject-mode by default: each tree draws a fraction of the
    subjects and exactly one site-row per drawn subject.
    """
    if params is None:
        params = FitParams(honest=True, prune=False)
    forest = fit_forest(
        table.X,
        table.values,
        table.schema,
        params=params,
        seed=seed,
        b=b,
        weights=table.weights,
        subject_groups=table.subjects,
    )
    return EnsembleModel(
        method="ef",
        model=forest,
        k_sites=table.k_sites,
        n_subjects=table.n_subjects,
        base_dim=table.base_dim,
        honest=params.honest,
        subject_mode=params.subsample_by_subject,
        eta=table.eta,
        site_counts=[_leaf_site_counts(t, table) for t in forest.trees],
        table_fingerprint=table.fingerprint,
        row_weights=table.weights,
    )


# ============================================================
# Prediction, weights, kernel
# ============================================================


def _query_matrix(em: EnsembleModel, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != em.base_dim:
        raise SchemaError(
            f"query needs {em.base_dim} covariates, got shape {np.shape(x)}"
        )
    Xq = np.column_stack([X, np.full(len(X), float(TARGET_SITE))])
    return Xq, single


def predict_star(em: EnsembleModel, x):
    """Ensemble prediction for site 1 at covariates x (vector or matrix)."""
    Xq, single = _query_matrix(em, x)
    out = predict(em.model, Xq)
    return float(out[0]) if single else out


def _trees_of(em: EnsembleModel):
    if isinstance(em.model, ForestModel):
        return em.model.trees
    return [em.model]


def weights(em: EnsembleModel, x) -> WeightProfile:
    """Per-site weights at one query point.

    For a tree, the weight of site k is the share of site-k rows (by row
    weight) among the estimation rows of the leaf containing (x, site=1); for
    a forest, those shares are averaged over trees.  Weights are non-negative
    and sum to 1 up to rounding.
    """
    Xq, single = _query_matrix(em, x)
    if not single:
        raise ValidationError("weights() expects a single query point")
    trees = _trees_of(em)
    b = len(trees)
    omega = np.zeros(em.k_sites)
    lam = None
    have_members = all(t.leaf_members is not None for t in trees)
    if have_members and em.row_weights is not None:
        lam = np.zeros(em.n_subjects * em.k_sites)
    for t, tree in enumerate(trees):
        nid = int(apply_tree(tree, Xq)[0])
        counts = em.site_counts[t][nid]
        total = counts.sum()
        omega += counts / total
        if lam is not None:
            members = tree.leaf_members[nid]
            wm = em.row_weights[members]
            lam[members] += wm / _seq_sum(wm)
    omega /= b
    if lam is not None:
        lam /= b
    return WeightProfile(
        omega=omega,
        x=np.asarray(x, dtype=np.float64),
        site=TARGET_SITE,
        lam=lam,
        table_fingerprint=em.table_fingerprint,
    )


def reconstruct_from_weights(profile: WeightProfile, table: AugmentedTable, x) -> float:
    """Rebuild the ensemble prediction from the row-level kernel:
    sum_i sum_k lambda_ik(x) * tau_hat_k(x_i).

    Must match predict_star at the same point to ~1e-10; raises
    ConsistencyError when the profile and table do not belong together or the
    profile was produced by an imported model (no row-level kernel).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.array_equal(profile.x, x):
        raise ConsistencyError("query point differs from the one in the profile")
    if profile.table_fingerprint != table.fingerprint:
        raise ConsistencyError("profile was not produced from this table")
    if profile.lam is None:
        raise ConsistencyError(
            "profile carries no row-level kernel (model was rebuilt from an envelope)"
        )
    if profile.lam.shape != table.values.shape:
        raise ConsistencyError("kernel length does not match the table")
    return _seq_sum(profile.lam * table.values)
