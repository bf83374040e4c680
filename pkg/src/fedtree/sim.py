"""Synthetic multi-site experiments.

Data generating process
-----------------------
Site ``k`` draws ``n_k`` subjects with covariates ``X ~ N(0, I_D)``,
treatment ``Z ~ Bernoulli(e(X))`` and outcome::

    Y = m(X, k) + (Z - e(X)) * tau(X, k) + eps,   eps ~ N(0, 1)

where the conditional effect is ``tau(x, k) = 1{x1 > 0} * x1 + (x1 - 3) * h_k``
and the main effect is ``m(x, k) = 0.5 * x1 + x2 + x3 + x4 + (x1 - 3) * h_k``.
The site term ``h_k`` controls cross-site heterogeneity:

* ``grouping="discrete"``:   ``h_k = c * 1{k even}``
* ``grouping="continuous"``: ``h_k = c * U_k`` with ``U_k ~ Unif[0, 1]``
* ``grouping="nonlinear"``:  ``h_k = U_k ** c`` with ``U_k ~ Unif[0, 3]``

Treatment assignment is randomized (``e = 0.5``) or observational
(``e(x) = expit(0.6 * x1)``).

Each replicate fits local models at every site, ships them to site 1 and
evaluates ten estimators on a fresh test draw labeled with site 1's true
effect.  Mean squared errors are reported as ratios over the local
site-1 model, so values below one mean borrowing helped.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .baselines import fit_ewma, fit_loc, fit_ma, fit_stack, predict_baseline
from .dataset import SeedSpec, SiteDataset, fmt_real, round_half_up, split_site1
from .ensemble import build_augmented, fit_ef, fit_et, predict_star
from .errors import ConfigError, DegenerateEstimandError, FedtreeError, FitError, PositivityError
from .local import (
    LocalModel,
    PropensityModel,
    fit_local,
    oracle_local,
    predict_tau,
    site_size_weights,
)
from .tree import DEFAULT_COMPLEXITY_GRID, FitParams

GROUPINGS = ("discrete", "continuous", "nonlinear")
PROPENSITIES = ("rct", "observational")
PROPENSITY_MODELS = ("constant", "logistic_correct", "logistic_misspecified")
LOCAL_LEARNERS = ("ct", "cf", "oracle")

#: Estimator keys in reporting order.
ESTIMATORS = (
    "loc",
    "ma",
    "ewma",
    "ewma_oracle",
    "stack",
    "stack_oracle",
    "et",
    "et_oracle",
    "ef",
    "ef_oracle",
)

RESULTS_COLUMNS = ("estimator", "c", "grouping", "n", "replicate", "mse", "ratio")
SUMMARY_COLUMNS = ("estimator", "c", "grouping", "n", "mean_ratio", "sd_ratio", "n_ok")
PLOT_COLUMNS = ("grouping", "c", "n", "estimator", "replicate", "ratio")


@dataclass(frozen=True)
class SimulationConfig:
    """Full description of one experiment cell.

    Args:
        K: number of sites.
        n_k: per-site sample size, a single int or one int per site.
        D: covariate dimension, at least 4.
        c: heterogeneity level, nonnegative.
        grouping: site-effect family, one of ``GROUPINGS``.
        propensity: assignment mechanism, one of ``PROPENSITIES``.
        propensity_model: estimator of e(x), one of ``PROPENSITY_MODELS``.
        local_learner: per-site learner, one of ``LOCAL_LEARNERS``.
        n_te: test-set size.
        replicates: Monte Carlo repetitions.
        B: ensemble-forest size.
        seed: master seed for every stream in the experiment.
        split_fraction: site-1 train share for the sample split.
        site_weights: weight ensemble rows by source-site size.
        min_leaf: smallest admissible leaf for every fitted tree.
        cv_folds: folds for cost-complexity pruning.
        subsample_fraction: per-tree subject subsample share of a ``cf``
            local learner.
        local_b: forest size of a ``cf`` local learner.
        local_leaf_rows: row floor per leaf of a ``ct`` local learner;
            the effective minimum leaf is the larger of this and
            ``min_leaf``, capped at half the smallest fitted piece so a
            split half of site 1 can still be fit.
        et_grid_size: number of leading entries of the pruning grid the
            ensemble tree may use; small values keep the penalty floor
            high.
        ef_fraction: per-tree subject subsample share of the ensemble
            forest.
        ef_mtry: features tried per split in the ensemble forest; by
            default every feature is tried.
    """

    K: int = 20
    n_k: int | tuple[int, ...] = 500
    D: int = 5
    c: float = 1.0
    grouping: str = "discrete"
    propensity: str = "rct"
    propensity_model: str = "constant"
    local_learner: str = "ct"
    n_te: int = 2000
    replicates: int = 100
    B: int = 500
    seed: int = 1
    split_fraction: float = 0.5
    site_weights: bool = False
    min_leaf: int = 5
    cv_folds: int = 10
    subsample_fraction: float = 0.5
    local_b: int = 200
    local_leaf_rows: int = 70
    et_grid_size: int = 3
    ef_fraction: float = 0.95
    ef_mtry: int | None = None

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"unknown grouping {self.grouping!r}")
        if self.grouping == "discrete" and self.K % 2 != 0:
            raise ConfigError("discrete grouping needs an even K")
        if self.propensity not in PROPENSITIES:
            raise ConfigError(f"unknown propensity {self.propensity!r}")
        if self.propensity_model not in PROPENSITY_MODELS:
            raise ConfigError(f"unknown propensity_model {self.propensity_model!r}")
        if self.local_learner not in LOCAL_LEARNERS:
            raise ConfigError(f"unknown local_learner {self.local_learner!r}")
        if not np.isfinite(self.c) or self.c < 0:
            raise ConfigError("c must be finite and nonnegative")
        if self.D < 4:
            raise ConfigError("D must be at least 4, the main effect uses x1..x4")
        sizes = self.site_sizes()
        if len(sizes) != self.K:
            raise ConfigError(f"n_k lists {len(sizes)} sizes for K={self.K} sites")
        if any(n < 20 for n in sizes):
            raise ConfigError("every site needs at least 20 subjects")
        if self.n_te < 1:
            raise ConfigError("n_te must be positive")
        if self.replicates < 1:
            raise ConfigError("replicates must be positive")
        if self.B < 1:
            raise ConfigError("B must be positive")
        if self.local_b < 1:
            raise ConfigError("local_b must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be positive")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ConfigError("subsample_fraction must lie in (0, 1]")
        if self.local_leaf_rows < 1:
            raise ConfigError("local_leaf_rows must be positive")
        if not 1 <= self.et_grid_size <= len(DEFAULT_COMPLEXITY_GRID):
            raise ConfigError(
                f"et_grid_size must lie in 1..{len(DEFAULT_COMPLEXITY_GRID)}"
            )
        if not 0.0 < self.ef_fraction <= 1.0:
            raise ConfigError("ef_fraction must lie in (0, 1]")
        if self.ef_mtry is not None and not 1 <= self.ef_mtry <= self.D + 1:
            raise ConfigError("ef_mtry must lie in 1..D+1")

    def site_sizes(self) -> tuple[int, ...]:
        """Per-site sample sizes as a K-tuple."""
        if isinstance(self.n_k, (int, np.integer)):
            return (int(self.n_k),) * self.K
        return tuple(int(n) for n in self.n_k)


def load_config(path: str) -> SimulationConfig:
    """Read a flat key/value TOML file into a :class:`SimulationConfig`.

    Keys match the config field names one to one.  Unknown keys raise
    :class:`ConfigError` rather than being silently dropped.
    """
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    from .errors import IoError

    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc

    known = set(SimulationConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "n_k" in raw and isinstance(raw["n_k"], list):
        raw["n_k"] = tuple(raw["n_k"])
    try:
        return SimulationConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def _site_term(config: SimulationConfig, u_k: float) -> float:
    if config.grouping == "nonlinear":
        return float(u_k) ** config.c
    return config.c * float(u_k)


def draw_site_effects(config: SimulationConfig, seed: int) -> np.ndarray:
    """Draw the site-level heterogeneity variables ``U_1..U_K``.

    Discrete grouping is deterministic (parity of the site id), the other
    two draw uniforms from the replicate's own stream.
    """
    if config.grouping == "discrete":
        return np.array([float((k + 1) % 2 == 0) for k in range(config.K)])
    rng = SeedSpec(seed).stream("site-effects")
    if config.grouping == "continuous":
        return rng.uniform(0.0, 1.0, size=config.K)
    return rng.uniform(0.0, 3.0, size=config.K)


def true_tau(
    x: np.ndarray, k: int, config: SimulationConfig, site_effects: np.ndarray
) -> np.ndarray:
    """Evaluate the true conditional effect of site ``k`` at rows of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if not 1 <= k <= config.K:
        raise ConfigError(f"site {k} outside 1..{config.K}")
    h = _site_term(config, site_effects[k - 1])
    x1 = x[:, 0]
    return np.where(x1 > 0.0, x1, 0.0) + (x1 - 3.0) * h


def _main_effect(
    x: np.ndarray, k: int, config: SimulationConfig, site_effects: np.ndarray
) -> np.ndarray:
    h = _site_term(config, site_effects[k - 1])
    x1 = x[:, 0]
    return 0.5 * x1 + x[:, 1] + x[:, 2] + x[:, 3] + (x1 - 3.0) * h


def _true_propensity(config: SimulationConfig, x: np.ndarray) -> np.ndarray:
    if config.propensity == "rct":
        return np.full(x.shape[0], 0.5)
    from scipy.special import expit

    return expit(0.6 * x[:, 0])


def generate_site(
    k: int, config: SimulationConfig, site_effects: np.ndarray, seed: int
) -> SiteDataset:
    """Draw one site's sample.

    The draw order is fixed (covariates, assignments, noise) so a given
    seed always produces the same table.  A degenerate assignment vector
    (all treated or all control) is redrawn once; a second failure raises
    :class:`PositivityError`.
    """
    if not 1 <= k <= config.K:
        raise ConfigError(f"site {k} outside 1..{config.K}")
    n = config.site_sizes()[k - 1]
    rng = SeedSpec(seed).stream("gen", k)
    x = rng.standard_normal((n, config.D))
    e = _true_propensity(config, x)
    z = (rng.random(n) < e).astype(np.int64)
    if z.min() == z.max():
        z = (rng.random(n) < e).astype(np.int64)
        if z.min() == z.max():
            raise PositivityError(f"site {k} drew a single-arm sample twice")
    eps = rng.standard_normal(n)
    tau = true_tau(x, k, config, site_effects)
    y = _main_effect(x, k, config, site_effects) + (z - e) * tau + eps
    return SiteDataset(site_id=k, x=x, y=y, z=z)


def make_test_set(config: SimulationConfig, seed: int) -> np.ndarray:
    """Fresh covariate draw used to score every estimator."""
    rng = SeedSpec(seed).stream("test")
    return rng.standard_normal((config.n_te, config.D))


def policy_value(
    data: SiteDataset, tau_hat: Callable[[np.ndarray], np.ndarray], prop: PropensityModel
) -> float:
    """Inverse-propensity estimate of the value of treating when ``tau_hat > 0``.

    Averages outcomes over subjects whose observed assignment agrees with
    the rule, weighting each by the inverse probability of that
    assignment.  Raises :class:`DegenerateEstimandError` when no subject
    agrees with the rule.
    """
    tau = np.asarray(tau_hat(data.x), dtype=float).reshape(-1)
    if tau.shape[0] != data.n:
        raise ConfigError(f"tau_hat returned {tau.shape[0]} values for {data.n} subjects")
    e = prop.predict(data.x)
    pi = np.where(data.z == 1, e, 1.0 - e)
    rule = (tau > 0.0).astype(np.int64)
    agree = data.z == rule
    if not agree.any():
        raise DegenerateEstimandError("no subject's assignment matches the rule")
    w = 1.0 / pi[agree]
    num = float(np.sum(data.y[agree] * w))
    den = float(np.sum(w))
    return num / den


@dataclass
class ReplicateResult:
    """Outcome of a single replicate.

    ``mse`` and ``ratio`` map estimator keys to test-set errors and to
    ratios over the ``loc`` baseline.  A failed replicate carries the
    stage and cause instead and has empty maps.
    """

    replicate: int
    mse: dict[str, float] = field(default_factory=dict)
    ratio: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    failure: tuple[str, str] | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def _local_fit_params(config: SimulationConfig) -> FitParams:
    if config.local_learner == "cf":
        return FitParams(
            min_leaf=config.min_leaf,
            cv_folds=config.cv_folds,
            prune=False,
            honest=True,
            subsample_fraction=config.subsample_fraction,
        )
    # The transformed outcome is far noisier than y itself, so local trees
    # hold a fixed row floor per leaf instead of trusting cross-validated
    # pruning to find the right size; resolution then grows with the site.
    sizes = config.site_sizes()
    m1 = round_half_up(config.split_fraction * sizes[0])
    piece = min(min(sizes), m1, sizes[0] - m1)
    floor = min(config.local_leaf_rows, piece // 2)
    return FitParams(
        min_leaf=max(config.min_leaf, floor),
        cv_folds=config.cv_folds,
        prune=False,
        honest=False,
    )


def _propensity_kwargs(config: SimulationConfig) -> dict:
    if config.propensity_model == "constant":
        return {"propensity": "constant"}
    if config.propensity_model == "logistic_correct":
        return {"propensity": "logistic", "covariates": (0,)}
    return {"propensity": "logistic", "covariates": None}


def _fit_site_model(
    data: SiteDataset, config: SimulationConfig, seed: int, learner: str
) -> LocalModel:
    return fit_local(
        data,
        learner=learner,
        params=_local_fit_params(config),
        b=config.local_b,
        seed=seed,
        **_propensity_kwargs(config),
    )


def _oracle_models(
    config: SimulationConfig, site_effects: np.ndarray, sizes: Sequence[int]
) -> list[LocalModel]:
    models = []
    for k in range(1, config.K + 1):
        fn = partial(true_tau, k=k, config=config, site_effects=site_effects)
        models.append(oracle_local(k, fn, n_rows=int(sizes[k - 1])))
    return models


def run_replicate(config: SimulationConfig, r: int) -> ReplicateResult:
    """Run replicate ``r``: draw data, fit everything, score on the test set.

    Any :class:`FedtreeError` raised along the way aborts the replicate
    and is recorded as ``(stage, cause)`` on the result; other exceptions
    propagate since they indicate bugs rather than unlucky draws.
    """
    t0 = time.perf_counter()
    rep = SeedSpec(config.seed).child("rep", r)
    out = ReplicateResult(replicate=r)
    stage = "generate"
    try:
        u = draw_site_effects(config, rep.derive("sites-u"))
        sites = [
            generate_site(k, config, u, rep.derive("site", k)) for k in range(1, config.K + 1)
        ]
        x_te = make_test_set(config, rep.derive("test"))
        tau_te = true_tau(x_te, 1, config, u)

        stage = "split"
        split = split_site1(sites[0], config.split_fraction, rep.derive("split"))

        stage = "local-fit"
        oracle = config.local_learner == "oracle"
        sizes = [s.n for s in sites]
        if oracle:
            shared = _oracle_models(config, u, sizes)
        else:
            shared = [_fit_site_model(split.train, config, rep.derive("fit", 1), config.local_learner)]
            for k in range(2, config.K + 1):
                shared.append(
                    _fit_site_model(sites[k - 1], config, rep.derive("fit", k), config.local_learner)
                )

        stage = "loc-fit"
        loc_learner = "ct" if oracle else config.local_learner
        loc = fit_loc(
            sites[0],
            learner=loc_learner,
            params=_local_fit_params(config),
            b=config.local_b,
            seed=rep.derive("fit-loc"),
            **_propensity_kwargs(config),
        )

        stage = "ref-fit"
        ref_learner = "ct" if oracle else config.local_learner
        ref = _fit_site_model(split.estimation, config, rep.derive("fit-ref"), ref_learner)
        est_x = split.estimation.x
        ref_hat = predict_tau(ref, est_x)
        ref_true = true_tau(est_x, 1, config, u)

        stage = "baselines"
        ma = fit_ma(shared)
        ewma = fit_ewma(shared, est_x, ref_hat)
        ewma_o = fit_ewma(shared, est_x, ref_true)
        stack = fit_stack(shared, est_x, ref_hat)
        stack_o = fit_stack(shared, est_x, ref_true)

        stage = "ensemble"
        eta = site_size_weights(sizes) if config.site_weights else None
        table = build_augmented(est_x, shared, site_weights=eta)
        oracles = _oracle_models(config, u, sizes)
        table_o = build_augmented(est_x, oracles, site_weights=eta)
        # Augmented rows repeat each fitted value across a whole site-leaf
        # cluster, so cross-validation alone cannot see that a split chased
        # shared noise; a high penalty floor blocks those splits.
        et_params = FitParams(
            min_leaf=config.min_leaf,
            cv_folds=config.cv_folds,
            prune=True,
            honest=False,
            complexity_grid=DEFAULT_COMPLEXITY_GRID[: config.et_grid_size],
        )
        # Trying every feature keeps the site column available to each tree.
        ef_params = FitParams(
            min_leaf=config.min_leaf,
            prune=False,
            honest=True,
            subsample_fraction=config.ef_fraction,
            features_tried_per_split=(
                config.D + 1 if config.ef_mtry is None else config.ef_mtry
            ),
        )
        et = fit_et(table, params=et_params, seed=rep.derive("et"))
        ef = fit_ef(table, params=ef_params, seed=rep.derive("ef"), b=config.B)
        et_o = fit_et(table_o, params=et_params, seed=rep.derive("et-oracle"))
        ef_o = fit_ef(table_o, params=ef_params, seed=rep.derive("ef-oracle"), b=config.B)

        stage = "evaluate"
        preds = {
            "loc": predict_baseline(loc, x_te),
            "ma": predict_baseline(ma, x_te),
            "ewma": predict_baseline(ewma, x_te),
            "ewma_oracle": predict_baseline(ewma_o, x_te),
            "stack": predict_baseline(stack, x_te),
            "stack_oracle": predict_baseline(stack_o, x_te),
            "et": predict_star(et, x_te),
            "et_oracle": predict_star(et_o, x_te),
            "ef": predict_star(ef, x_te),
            "ef_oracle": predict_star(ef_o, x_te),
        }
        mse = {key: float(np.mean((p - tau_te) ** 2)) for key, p in preds.items()}
        base = mse["loc"]
        if base <= 0.0:
            raise FitError("loc baseline has zero test error, ratios are undefined")
        out.mse = mse
        out.ratio = {key: v / base for key, v in mse.items()}
    except FedtreeError as exc:
        out.failure = (stage, f"{type(exc).__name__}: {exc}")
        out.mse = {}
        out.ratio = {}
    out.seconds = time.perf_counter() - t0
    return out


@dataclass
class ExperimentResult:
    """All replicates of one config plus the aggregated summary rows."""

    config: SimulationConfig
    results: list[ReplicateResult]
    summary: list[dict]

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if not r.ok)


def _summarize(config: SimulationConfig, results: list[ReplicateResult]) -> list[dict]:
    rows = []
    ok = [r for r in results if r.ok]
    n1 = config.site_sizes()[0]
    for key in ESTIMATORS:
        ratios = np.array([r.ratio[key] for r in ok], dtype=float)
        mean = float(np.mean(ratios)) if ratios.size else float("nan")
        sd = float(np.std(ratios, ddof=1)) if ratios.size > 1 else 0.0
        rows.append(
            {
                "estimator": key,
                "c": config.c,
                "grouping": config.grouping,
                "n": n1,
                "mean_ratio": mean,
                "sd_ratio": sd,
                "n_ok": int(ratios.size),
            }
        )
    return rows


def run_experiment(config: SimulationConfig, jobs: int = 1) -> ExperimentResult:
    """Run every replicate of ``config`` and aggregate ratio summaries.

    Replicates are independent and keyed by their index, so the output is
    identical for any ``jobs`` value.  Failed replicates are recorded and
    skipped in the summary; more than 5 percent of them failing raises
    :class:`FitError`.
    """
    if jobs < 1:
        raise ConfigError("jobs must be positive")
    indices = range(config.replicates)
    if jobs == 1:
        results = [run_replicate(config, r) for r in indices]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(partial(run_replicate, config), indices))
    failed = [r for r in results if not r.ok]
    if len(failed) > 0.05 * config.replicates:
        detail = "; ".join(f"rep {r.replicate} at {r.failure[0]}: {r.failure[1]}" for r in failed[:5])
        raise FitError(
            f"{len(failed)} of {config.replicates} replicates failed ({detail})"
        )
    return ExperimentResult(config=config, results=results, summary=_summarize(config, results))


def _format_cell(value) -> str:
    if isinstance(value, float):
        return fmt_real(value)
    return str(value)


def _write_rows(path: str, columns: tuple[str, ...], rows: list[dict]) -> None:
    from .errors import IoError

    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_cell(row[c]) for c in columns])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_results_csv(path: str, experiment: ExperimentResult) -> None:
    """Per-replicate long table: one row per estimator and successful replicate."""
    config = experiment.config
    n1 = config.site_sizes()[0]
    rows = []
    for res in experiment.results:
        if not res.ok:
            continue
        for key in ESTIMATORS:
            rows.append(
                {
                    "estimator": key,
                    "c": config.c,
                    "grouping": config.grouping,
                    "n": n1,
                    "replicate": res.replicate,
                    "mse": res.mse[key],
                    "ratio": res.ratio[key],
                }
            )
    _write_rows(path, RESULTS_COLUMNS, rows)


def write_summary_csv(path: str, experiment: ExperimentResult) -> None:
    """One aggregated row per estimator (mean and sd of the MSE ratio)."""
    _write_rows(path, SUMMARY_COLUMNS, experiment.summary)


def write_plot_csv(path: str, experiments: Sequence[ExperimentResult]) -> None:
    """Plot-ready long table over several experiment cells."""
    rows = []
    for experiment in experiments:
        config = experiment.config
        n1 = config.site_sizes()[0]
        for res in experiment.results:
            if not res.ok:
                continue
            for key in ESTIMATORS:
                rows.append(
                    {
                        "grouping": config.grouping,
                        "c": config.c,
                        "n": n1,
                        "estimator": key,
                        "replicate": res.replicate,
                        "ratio": res.ratio[key],
                    }
                )
    _write_rows(path, PLOT_COLUMNS, rows)
