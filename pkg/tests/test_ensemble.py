"""Augmented table construction, ET/EF fitting, weights and the kernel identity."""

import numpy as np
import pytest

from fedtree import (
    AugmentedTable,
    ConsistencyError,
    FitParams,
    SchemaError,
    ValidationError,
    build_augmented,
    fit_ef,
    fit_et,
    oracle_local,
    predict_star,
    predict_tau,
    reconstruct_from_weights,
    weights,
)
from fedtree.ensemble import augmented_schema
from fedtree.tree import Categorical, Numeric


def constant_models(levels):
    """One oracle per site, each predicting a constant."""
    return [
        oracle_local(k, lambda X, v=v: np.full(len(X), float(v)), n_rows=50)
        for k, v in enumerate(levels, start=1)
    ]


def test_augmented_table_shape_and_order(model_family):
    rng = np.random.default_rng(5)
    est_x = rng.normal(size=(17, 3))
    table = build_augmented(est_x, model_family)

    k = len(model_family)
    assert table.k_sites == k
    assert table.n_subjects == 17
    assert table.base_dim == 3
    assert table.X.shape == (17 * k, 4)
    assert table.values.shape == (17 * k,)

    # subject-major, site-minor rows
    assert np.array_equal(table.subjects, np.repeat(np.arange(17), k))
    assert np.array_equal(table.sites, np.tile(np.arange(1, k + 1), 17))
    assert np.array_equal(table.X[:, -1], table.sites.astype(float))
    assert np.array_equal(table.X[:, :3], est_x[table.subjects])

    for i in (0, 7, 16):
        for site, model in enumerate(model_family, start=1):
            row = i * k + (site - 1)
            expect = predict_tau(model, est_x[i : i + 1])[0]
            assert table.values[row] == expect

    assert np.all(table.weights == 1.0)
    assert table.eta is None


def test_augmented_schema_is_numeric_plus_site():
    schema = augmented_schema(3, 7)
    assert len(schema.features) == 4
    assert all(isinstance(f, Numeric) for f in schema.features[:3])
    assert isinstance(schema.features[3], Categorical)
    assert schema.features[3].n_levels == 7


def test_augmented_site_id_validation():
    est_x = np.zeros((4, 2))
    good = constant_models([1.0, 2.0])
    with pytest.raises(ValidationError, match="at least 2"):
        build_augmented(est_x, good[:1])
    dup = [good[0], oracle_local(1, lambda X: np.zeros(len(X)), n_rows=10)]
    with pytest.raises(ValidationError, match="duplicate"):
        build_augmented(est_x, dup)
    gap = [good[0], oracle_local(3, lambda X: np.zeros(len(X)), n_rows=10)]
    with pytest.raises(ValidationError, match="exactly 1..2"):
        build_augmented(est_x, gap)
    with pytest.raises(ValidationError, match="LocalModel"):
        build_augmented(est_x, [good[0], "not a model"])


def test_augmented_rejects_nonfinite_prediction():
    def bad(X):
        out = np.zeros(len(X))
        out[2] = np.inf
        return out

    models = [
        oracle_local(1, lambda X: np.ones(len(X)), n_rows=10),
        oracle_local(2, bad, n_rows=10),
    ]
    with pytest.raises(ValidationError, match="subject 2 from site 2"):
        build_augmented(np.zeros((5, 2)), models)


def test_augmented_site_weights_rows():
    est_x = np.zeros((3, 2))
    models = constant_models([0.0, 0.0, 0.0, 0.0])
    table = build_augmented(est_x, models, site_weights=[3.0, 1.0, 1.0, 1.0])
    assert np.array_equal(table.weights, np.tile([3.0, 1.0, 1.0, 1.0], 3))
    assert np.array_equal(table.eta, [3.0, 1.0, 1.0, 1.0])

    with pytest.raises(ValidationError, match="positive finite"):
        build_augmented(est_x, models, site_weights=[1.0, -1.0, 1.0, 1.0])
    with pytest.raises(ValidationError, match="positive finite"):
        build_augmented(est_x, models, site_weights=[1.0, 1.0, 1.0])


def test_fingerprint_tracks_content(model_family):
    est_x = np.random.default_rng(9).normal(size=(8, 3))
    a = build_augmented(est_x, model_family)
    b = build_augmented(est_x, model_family)
    assert a.fingerprint == b.fingerprint
    b.values = b.values.copy()
    b.values[0] += 1e-9
    assert a.fingerprint != b.fingerprint


def toy_grouped_table(eta=None):
    """Sites 1 and 3 predict 0, sites 2 and 4 predict 10, for every subject."""
    est_x = np.random.default_rng(3).normal(size=(12, 2))
    models = constant_models([0.0, 10.0, 0.0, 10.0])
    return build_augmented(est_x, models, site_weights=eta)


def test_et_toy_weights_are_site_shares():
    table = toy_grouped_table()
    em = fit_et(table, params=FitParams(min_leaf=2, prune=False, honest=False), seed=0)
    # the only strict-improvement split separates sites {1,3} from {2,4}
    assert predict_star(em, np.zeros(2)) == 0.0
    prof = weights(em, np.zeros(2))
    assert np.allclose(prof.omega, [0.5, 0.0, 0.5, 0.0], atol=0)
    assert prof.site == 1


def test_et_toy_weights_respect_eta():
    table = toy_grouped_table(eta=[3.0, 1.0, 1.0, 1.0])
    em = fit_et(table, params=FitParams(min_leaf=2, prune=False, honest=False), seed=0)
    prof = weights(em, np.zeros(2))
    assert np.allclose(prof.omega, [0.75, 0.0, 0.25, 0.0], atol=1e-12)


def test_ef_weights_simplex_and_kernel(model_family):
    rng = np.random.default_rng(11)
    est_x = rng.normal(size=(40, 3))
    table = build_augmented(est_x, model_family)
    em = fit_ef(table, params=FitParams(min_leaf=5, honest=True, prune=False), seed=4, b=25)

    assert len(em.site_counts) == 25
    for sc, tree in zip(em.site_counts, em.model.trees):
        assert sc.shape == (tree.n_nodes, 5)

    for q in rng.normal(size=(50, 3)):
        prof = weights(em, q)
        assert np.all(prof.omega >= 0.0)
        assert abs(prof.omega.sum() - 1.0) <= 1e-10
        rebuilt = reconstruct_from_weights(prof, table, q)
        assert abs(rebuilt - predict_star(em, q)) <= 1e-10


def test_et_kernel_identity(model_family):
    rng = np.random.default_rng(12)
    est_x = rng.normal(size=(30, 3))
    table = build_augmented(est_x, model_family)
    em = fit_et(table, seed=2)
    for q in rng.normal(size=(20, 3)):
        prof = weights(em, q)
        assert abs(prof.omega.sum() - 1.0) <= 1e-10
        rebuilt = reconstruct_from_weights(prof, table, q)
        assert abs(rebuilt - predict_star(em, q)) <= 1e-10


def test_reconstruct_consistency_errors(model_family):
    rng = np.random.default_rng(13)
    est_x = rng.normal(size=(15, 3))
    table = build_augmented(est_x, model_family)
    em = fit_et(table, seed=0)
    q = rng.normal(size=3)
    prof = weights(em, q)

    with pytest.raises(ConsistencyError, match="query point"):
        reconstruct_from_weights(prof, table, q + 1.0)

    other = build_augmented(rng.normal(size=(15, 3)), model_family)
    with pytest.raises(ConsistencyError, match="not produced from this table"):
        reconstruct_from_weights(prof, other, q)

    stripped = weights(em, q)
    stripped.lam = None
    with pytest.raises(ConsistencyError, match="no row-level kernel"):
        reconstruct_from_weights(stripped, table, q)

    short = weights(em, q)
    short.lam = short.lam[:-1]
    with pytest.raises(ConsistencyError, match="length"):
        reconstruct_from_weights(short, table, q)


def test_query_validation(model_family):
    est_x = np.random.default_rng(14).normal(size=(10, 3))
    table = build_augmented(est_x, model_family)
    em = fit_et(table, seed=0)
    with pytest.raises(SchemaError, match="3 covariates"):
        predict_star(em, np.zeros(5))
    with pytest.raises(ValidationError, match="single query"):
        weights(em, np.zeros((4, 3)))


def test_predict_star_matrix_and_vector_agree(model_family):
    rng = np.random.default_rng(15)
    est_x = rng.normal(size=(20, 3))
    table = build_augmented(est_x, model_family)
    em = fit_ef(table, seed=1, b=10)
    Q = rng.normal(size=(6, 3))
    batch = predict_star(em, Q)
    single = np.array([predict_star(em, q) for q in Q])
    assert np.array_equal(batch, single)
