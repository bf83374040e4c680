"""Covariate-adaptive combination of treatment effect models across sites.

Each site fits an effect model on its own subjects; only those fitted
models are exchanged.  The target site grows an ensemble tree or forest
over the models' predictions at its own subjects, yielding a combined
estimate plus interpretable per-site weights at any covariate point.
"""

from .baselines import (
    BaselineModel,
    fit_ewma,
    fit_loc,
    fit_ma,
    fit_stack,
    predict_baseline,
)
from .dataset import (
    SeedSpec,
    SiteDataset,
    SiteSplit,
    load_csv,
    save_csv,
    split_site1,
)
from .ensemble import (
    AugmentedTable,
    EnsembleModel,
    WeightProfile,
    build_augmented,
    fit_ef,
    fit_et,
    predict_star,
    reconstruct_from_weights,
    weights,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    ConvergenceError,
    DegenerateEstimandError,
    FedtreeError,
    FitError,
    FormatError,
    IntegrityError,
    IoError,
    PositivityError,
    SchemaError,
    SeparationError,
    ValidationError,
    VersionError,
)
from .exchange import (
    ModelEnvelope,
    PrivacyReport,
    audit_privacy,
    export_model,
    import_model,
    read_envelope,
)
from .local import (
    LocalModel,
    PropensityModel,
    fit_local,
    fit_propensity,
    oracle_local,
    predict_tau,
    site_size_weights,
    transform_outcome,
)
from .sim import (
    ExperimentResult,
    ReplicateResult,
    SimulationConfig,
    draw_site_effects,
    generate_site,
    load_config,
    make_test_set,
    policy_value,
    run_experiment,
    run_replicate,
    true_tau,
    write_results_csv,
    write_summary_csv,
)
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
    leaf_cohort,
    numeric_schema,
    predict,
)

__version__ = "0.1.0"
