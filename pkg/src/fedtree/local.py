"""Treatment effect learners fitted entirely within one site.

The local estimate is a regression of the transformed outcome
``Y* = (z - e(x)) * y / (e(x) * (1 - e(x)))`` on the covariates; under
unconfoundedness E[Y* | X = x] equals the treatment effect tau(x), so an
honest regression tree or forest on (x, Y*) estimates it directly.  The
propensity e(x) is either the empirical treated fraction or a logistic model
fitted by damped Newton, with predictions clipped away from 0 and 1.

Only the fitted LocalModel ever leaves the site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import SiteDataset
from .errors import (
    ConfigError,
    ConvergenceError,
    SeparationError,
    ValidationError,
)
from .tree import (
    FitParams,
    ForestModel,
    TreeModel,
    fit_forest,
    fit_tree,
    numeric_schema,
    predict,
)

DEFAULT_CLIP = (0.01, 0.99)
BETA_BOUND = 1e3


# ============================================================
# Propensity
# ============================================================


@dataclass
class PropensityModel:
    """Estimated treatment assignment probability e(x).

    kind "constant" stores the empirical treated fraction; kind "logistic"
    stores coefficients (intercept first) over a covariate subset.
    Predictions are clipped to the open interval given by ``clip``.
    """

    kind: str
    p: float | None = None
    beta: np.ndarray | None = None
    covariates: tuple | None = None
    clip: tuple = DEFAULT_CLIP

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValidationError("X must be 2-d")
        if self.kind == "constant":
            e = np.full(len(X), self.p)
        else:
            cols = X[:, list(self.covariates)]
            e = expit(self.beta[0] + cols @ self.beta[1:])
        return np.clip(e, self.clip[0], self.clip[1])


def _log_likelihood(eta: np.ndarray, z: np.ndarray) -> float:
    return float(np.sum(z * eta - np.logaddexp(0.0, eta)))


def fit_propensity(
    data: SiteDataset,
    kind: str = "constant",
    covariates=None,
    clip=DEFAULT_CLIP,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Fit the treatment assignment model for one site.

    Args:
        data: site rows (both arms present by construction).
        kind: "constant" for the empirical treated fraction, "logistic" for a
            logistic regression with intercept.
        covariates: 0-based covariate column indices for the logistic model;
            None means all columns.
        clip: open interval to which predictions are clipped.
        max_iter / tol: damped-Newton iteration cap and gradient-norm target.

    Raises:
        SeparationError: coefficient norm exceeded 1e3 (separated classes).
        ConvergenceError: iteration cap hit; carries the last iterate.
        ConfigError: bad kind, clip, or covariate indices.
    """
    if not (0.0 < clip[0] < clip[1] < 1.0):
        raise ConfigError(f"clip bounds must satisfy 0 < lo < hi < 1, got {clip}")
    if kind == "constant":
        return PropensityModel(kind="constant", p=float(np.mean(data.z)), clip=tuple(clip))
    if kind != "logistic":
        raise ConfigError(f"unknown propensity kind {kind!r}")

    if covariates is None:
        covariates = tuple(range(data.dim))
    else:
        covariates = tuple(int(c) for c in covariates)
        if any(c < 0 or c >= data.dim for c in covariates) or not covariates:
            raise ConfigError(f"covariate indices out of range for dim {data.dim}")
    X1 = np.column_stack([np.ones(data.n), data.x[:, list(covariates)]])
    z = data.z.astype(np.float64)

    beta = np.zeros(X1.shape[1])
    for _ in range(max_iter):
        eta = X1 @ beta
        mu = expit(eta)
        grad = X1.T @ (z - mu)
        if float(np.linalg.norm(grad)) <= tol:
            return PropensityModel(
                kind="logistic", beta=beta, covariates=covariates, clip=tuple(clip)
            )
        wdiag = mu * (1.0 - mu)
        hess = X1.T @ (X1 * wdiag[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(f"singular information matrix: {exc}") from exc
        # Damping: halve the step until the log-likelihood stops decreasing.
        ll_old = _log_likelihood(eta, z)
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            if _log_likelihood(X1 @ cand, z) >= ll_old:
                break
            scale *= 0.5
        beta = beta + scale * step
        if float(np.linalg.norm(beta)) > BETA_BOUND:
            raise SeparationError(
                f"coefficient norm {np.linalg.norm(beta):.3g} exceeds {BETA_BOUND:g}; "
                "treatment arms look separated"
            )
    eta = X1 @ beta
    if float(np.linalg.norm(X1.T @ (z - expit(eta)))) <= tol:
        return PropensityModel(
            kind="logistic", beta=beta, covariates=covariates, clip=tuple(clip)
        )
    raise ConvergenceError(
        f"propensity fit did not reach gradient norm {tol:g} in {max_iter} iterations",
        last_iterate=beta,
    )


def transform_outcome(y: np.ndarray, z: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Transformed outcome Y* = (z - e) * y / (e * (1 - e)).

    E[Y* | X] equals the treatment effect when assignment is unconfounded.
    With e = 0.5 this is 2y for treated rows and -2y for control rows.
    """
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise ValidationError("propensities must lie strictly inside (0, 1)")
    return (z - e) * y / (e * (1.0 - e))


# ============================================================
# Local models
# ============================================================


@dataclass
class LocalModel:
    """A site's fitted effect model, the only artifact that leaves the site.

    kind is "ct" (pruned honest tree), "cf" (honest subsampled forest) or
    "oracle" (wraps a ground-truth effect function; simulation use only).
    """

    site_id: int
    kind: str
    model: object | None
    propensity: PropensityModel | None
    n_rows: int
    tau_fn: object | None = None


def fit_local(
    data: SiteDataset,
    learner: str = "ct",
    propensity: str = "constant",
    covariates=None,
    params: FitParams | None = None,
    seed=0,
    b: int = 500,
    clip=DEFAULT_CLIP,
) -> LocalModel:
    """Fit one site's effect model on its own rows.

    learner "ct" fits a pruned honest regression tree on the transformed
    outcome; "cf" fits an honest subsampled forest of ``b`` trees.

    Raises:
        ConfigError: unknown learner.
        FitError / SeparationError / ConvergenceError: propagated from the
            underlying fits.
    """
    if learner not in ("ct", "cf"):
        raise ConfigError(f"unknown learner {learner!r}; expected 'ct' or 'cf'")
    prop = fit_propensity(data, kind=propensity, covariates=covariates, clip=clip)
    e = prop.predict(data.x)
    ystar = transform_outcome(data.y, data.z, e)
    schema = numeric_schema(data.dim)
    if params is None:
        params = FitParams(honest=True, prune=(learner == "ct"))
    if learner == "ct":
        model = fit_tree(data.x, ystar, schema, params=params, seed=seed)
    else:
        model = fit_forest(data.x, ystar, schema, params=params, seed=seed, b=b)
    return LocalModel(
        site_id=data.site_id,
        kind=learner,
        model=model,
        propensity=prop,
        n_rows=data.n,
    )


def oracle_local(site_id: int, tau_fn, n_rows: int = 0) -> LocalModel:
    """Wrap a ground-truth effect function as a local model (simulations)."""
    return LocalModel(
        site_id=site_id, kind="oracle", model=None, propensity=None,
        n_rows=n_rows, tau_fn=tau_fn,
    )


def predict_tau(local: LocalModel, X: np.ndarray) -> np.ndarray:
    """Evaluate a site's effect estimate at new covariate rows."""
    X = np.asarray(X, dtype=np.float64)
    if local.kind == "oracle":
        out = np.asarray(local.tau_fn(X), dtype=np.float64)
        if out.shape != (len(X),):
            raise ValidationError("oracle effect function must return one value per row")
        return out
    return predict(local.model, X)


def site_size_weights(n_rows) -> np.ndarray:
    """Per-site multipliers eta_k = K * n_k / sum(n_j); they average to 1."""
    n = np.asarray(n_rows, dtype=np.float64)
    if n.ndim != 1 or len(n) == 0 or np.any(n <= 0):
        raise ValidationError("site sizes must be a non-empty vector of positive counts")
    return len(n) * n / n.sum()
