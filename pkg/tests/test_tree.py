"""Tree fitting against the brute-force oracle, plus structural invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fedtree import (
    Categorical,
    ConfigError,
    FeatureSchema,
    FitParams,
    FitError,
    Numeric,
    SchemaError,
    SeedSpec,
    ValidationError,
    apply_tree,
    fit_forest,
    fit_tree,
    numeric_schema,
    predict,
)
from fedtree.dataset import round_half_up

LEAF = -1


def random_case(rng, max_rows=12, max_feat=3):
    """Small dataset with ties and mixed feature kinds to stress tie-breaks."""
    n = int(rng.integers(4, max_rows + 1))
    d = int(rng.integers(1, max_feat + 1))
    feats = []
    cols = []
    for _ in range(d):
        if rng.random() < 0.4:
            n_levels = int(rng.integers(2, 6))
            feats.append(Categorical(n_levels))
            cols.append(rng.integers(1, n_levels + 1, size=n).astype(np.float64))
        else:
            feats.append(Numeric())
            # Few distinct values so equal-loss splits actually occur.
            cols.append(rng.choice([-1.0, 0.0, 0.5, 2.0], size=n))
    X = np.column_stack(cols)
    if rng.random() < 0.5:
        t = rng.choice([0.0, 1.0], size=n)  # discrete targets force loss ties
    else:
        t = rng.normal(size=n)
    w = rng.choice([1.0, 1.0, 2.0, 0.5], size=n) if rng.random() < 0.5 else np.ones(n)
    return X, t, w, FeatureSchema(tuple(feats))


def struct_est_rows(n, honest, seed):
    if not honest:
        return np.arange(n), None
    rng = SeedSpec(seed).stream("honest")
    perm = rng.permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2 :])


def assert_same_tree(model, oracle):
    assert list(model.feature) == oracle.feature
    for a, b in zip(model.threshold, oracle.threshold):
        assert (math.isnan(a) and math.isnan(b)) or a == b
    assert list(model.levels) == oracle.levels
    assert list(model.left) == oracle.left
    assert list(model.right) == oracle.right
    assert list(model.value) == oracle.value
    assert list(model.count) == oracle.count


def test_oracle_equivalence_200_random_datasets():
    rng = np.random.default_rng(2024)
    for case in range(200):
        X, t, w, schema = random_case(rng)
        min_leaf = int(rng.integers(1, 3))
        honest = bool(rng.random() < 0.4) and len(X) >= 4 * min_leaf
        seed = int(rng.integers(0, 10_000))
        params = FitParams(min_leaf=min_leaf, prune=False, honest=honest)
        model = fit_tree(X, t, schema, params=params, seed=seed, weights=w)
        sidx, eidx = struct_est_rows(len(X), honest, seed)
        oracle = oracles.fit_tree_oracle(
            X.tolist(), t.tolist(), w.tolist(), schema, min_leaf,
            struct_idx=list(sidx), est_idx=None if eidx is None else list(eidx),
        )
        assert_same_tree(model, oracle)
        Xq = np.column_stack(
            [
                rng.integers(1, f.n_levels + 1, size=25).astype(np.float64)
                if isinstance(f, Categorical)
                else rng.normal(size=25)
                for f in schema.features
            ]
        )
        assert list(predict(model, Xq)) == oracles.predict_oracle(oracle, Xq.tolist())


def test_categorical_prefix_scan_equals_subset_enumeration():
    # Exact rational losses: the scanned prefix family must attain the
    # optimum over all 2^(L-1) level subsets.
    rng = np.random.default_rng(7)
    checked = 0
    for case in range(200):
        n_levels = int(rng.integers(2, 9))
        n = int(rng.integers(n_levels, 3 * n_levels + 1))
        lv = rng.integers(1, n_levels + 1, size=n).astype(float).tolist()
        t = rng.normal(size=n).tolist()
        w = rng.choice([1.0, 2.0], size=n).tolist()
        minima = oracles.categorical_minima_exact(lv, t, w, n_levels, 1)
        if minima is None:
            continue
        best_prefix, best_subset = minima
        assert best_prefix == best_subset
        checked += 1
    assert checked > 150


def test_max_depth_zero_is_single_leaf():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    t = rng.normal(size=30)
    model = fit_tree(X, t, numeric_schema(2),
                     params=FitParams(min_leaf=1, prune=False, max_depth=0))
    assert model.n_nodes == 1 and model.n_leaves == 1
    expected = oracles.node_value(t.tolist(), [1.0] * 30, range(30))
    assert model.value[0] == expected


def test_midpoint_guard_falls_back_to_lower_value():
    lo = 1.0
    hi = np.nextafter(1.0, 2.0)  # midpoint rounds onto hi, guard must kick in
    X = np.array([[lo], [lo], [hi], [hi]])
    t = np.array([0.0, 0.0, 5.0, 5.0])
    model = fit_tree(X, t, numeric_schema(1), params=FitParams(min_leaf=1, prune=False))
    assert model.feature[0] == 0
    assert model.threshold[0] == lo
    assert predict(model, X).tolist() == [0.0, 0.0, 5.0, 5.0]


def test_two_level_categorical_split_uses_smaller_side():
    X = np.array([[2.0], [1.0], [2.0], [1.0]])
    t = np.array([3.0, 0.0, 3.0, 0.0])
    schema = FeatureSchema((Categorical(2),))
    model = fit_tree(X, t, schema, params=FitParams(min_leaf=1, prune=False))
    assert model.levels[0] == (1,)
    assert predict(model, X).tolist() == [3.0, 0.0, 3.0, 0.0]


def test_honest_halves_are_disjoint_and_fill_values():
    rng = np.random.default_rng(3)
    n = 60
    X = rng.normal(size=(n, 3))
    t = X[:, 0] + rng.normal(size=n)
    model = fit_tree(X, t, numeric_schema(3),
                     params=FitParams(min_leaf=5, prune=False, honest=True), seed=9)
    sr = set(model.struct_rows.tolist())
    vr = set(model.value_rows.tolist())
    assert not (sr & vr)
    assert sorted(sr | vr) == list(range(n))
    leaves = apply_tree(model, X[model.value_rows])
    for nid in range(model.n_nodes):
        if model.feature[nid] != LEAF:
            continue
        rows = model.value_rows[leaves == nid]
        assert model.count[nid] == len(rows) >= 5
        assert model.value[nid] == oracles.node_value(
            t.tolist(), [1.0] * n, rows.tolist()
        )


def test_min_leaf_respected_on_both_halves():
    rng = np.random.default_rng(4)
    n = 80
    X = rng.normal(size=(n, 2))
    t = rng.normal(size=n)
    model = fit_tree(X, t, numeric_schema(2),
                     params=FitParams(min_leaf=7, prune=False, honest=True), seed=2)
    struct_leaf = apply_tree(model, X[model.struct_rows])
    est_leaf = apply_tree(model, X[model.value_rows])
    for nid in range(model.n_nodes):
        if model.feature[nid] == LEAF:
            assert np.sum(struct_leaf == nid) >= 7
            assert np.sum(est_leaf == nid) >= 7


def penalized_cost(model, X, t, w, lam):
    # Same left+right association as the pruning recursion, so the float
    # result is comparable bit for bit.
    sidx = model.struct_rows
    leaves = apply_tree(model, X[sidx])

    def rec(nid):
        if model.feature[nid] == LEAF:
            rows = sidx[leaves == nid]
            return oracles.node_sse(t.tolist(), w.tolist(), rows.tolist()) + lam
        return rec(model.left[nid]) + rec(model.right[nid])

    return rec(0)


def test_pruning_minimizes_penalized_cost():
    rng = np.random.default_rng(11)
    for case in range(30):
        n = int(rng.integers(10, 26))
        X = rng.choice([-1.0, 0.0, 1.0, 2.0], size=(n, 2))
        t = rng.normal(size=n)
        w = np.ones(n)
        full = fit_tree(X, t, numeric_schema(2),
                        params=FitParams(min_leaf=1, prune=False), seed=case)
        oracle = oracles.fit_tree_oracle(X.tolist(), t.tolist(), w.tolist(),
                                         numeric_schema(2), 1)
        root_sse = oracles.node_sse(t.tolist(), w.tolist(), range(n))
        for alpha in (0.5, 0.1, 0.01):
            lam = alpha * root_sse
            pruned = fit_tree(X, t, numeric_schema(2),
                              params=FitParams(min_leaf=1, prune=True,
                                               complexity_grid=(alpha,)),
                              seed=case)
            best = oracles.min_penalized_cost(
                oracle.feature, oracle.left, oracle.right, oracle.struct_sse, lam
            )
            assert penalized_cost(pruned, X, t, w, lam) == best
            assert pruned.n_leaves <= full.n_leaves


def test_pruned_trees_are_nested_partitions():
    rng = np.random.default_rng(12)
    n = 120
    X = rng.normal(size=(n, 2))
    t = np.where(X[:, 0] > 0, 2.0, -1.0) + 0.5 * rng.normal(size=n)
    grid = (0.3, 0.05, 0.005)
    probes = rng.normal(size=(400, 2))
    prev = None
    # Descending alpha: partitions may only get finer.
    for alpha in grid:
        model = fit_tree(X, t, numeric_schema(2),
                         params=FitParams(min_leaf=5, prune=True,
                                          complexity_grid=(alpha,)), seed=1)
        part = apply_tree(model, probes)
        if prev is not None:
            # Probes sharing a fine cell must share every coarser cell.
            fine, coarse = part, prev
            for cell in np.unique(fine):
                assert len(np.unique(coarse[fine == cell])) == 1
        prev = part


def test_same_seed_same_tree_different_seed_differs():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(100, 3))
    t = rng.normal(size=100)
    params = FitParams(min_leaf=5, prune=False, honest=True)
    a = fit_tree(X, t, numeric_schema(3), params=params, seed=1)
    b = fit_tree(X, t, numeric_schema(3), params=params, seed=1)
    c = fit_tree(X, t, numeric_schema(3), params=params, seed=2)
    assert np.array_equal(a.value, b.value)
    assert np.array_equal(a.struct_rows, b.struct_rows)
    assert not np.array_equal(a.struct_rows, c.struct_rows)


def test_forest_prediction_is_sequential_tree_mean():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(90, 3))
    t = X[:, 1] + rng.normal(size=90)
    forest = fit_forest(X, t, numeric_schema(3),
                        params=FitParams(min_leaf=3, honest=True), seed=4, b=7)
    Xq = rng.normal(size=(40, 3))
    acc = np.zeros(40)
    for tree in forest.trees:
        acc += tree.value[apply_tree(tree, Xq)]
    assert np.array_equal(predict(forest, Xq), acc / 7)


def test_forest_subject_mode_draws_one_row_per_subject():
    rng = np.random.default_rng(8)
    n_subjects, reps = 40, 3
    groups = np.repeat(np.arange(n_subjects), reps)
    X = rng.normal(size=(n_subjects * reps, 2))
    t = rng.normal(size=n_subjects * reps)
    forest = fit_forest(X, t, numeric_schema(2),
                        params=FitParams(min_leaf=2, honest=True,
                                         subsample_fraction=0.5),
                        seed=3, b=10, subject_groups=groups)
    m = round_half_up(0.5 * n_subjects)
    for tree in forest.trees:
        rows = np.concatenate([tree.struct_rows, tree.value_rows])
        assert len(rows) == m
        assert len(np.unique(groups[rows])) == m


def test_forest_row_mode_draws_fraction_of_rows():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(50, 2))
    t = rng.normal(size=50)
    forest = fit_forest(X, t, numeric_schema(2),
                        params=FitParams(min_leaf=2, honest=True,
                                         subsample_fraction=0.6,
                                         subsample_by_subject=False),
                        seed=3, b=5, subject_groups=np.arange(50))
    for tree in forest.trees:
        assert len(tree.struct_rows) + len(tree.value_rows) == round_half_up(0.6 * 50)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=25, deadline=None)
def test_fitted_tree_never_beats_root_sse_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 30))
    X = rng.normal(size=(n, 2))
    t = rng.normal(size=n)
    model = fit_tree(X, t, numeric_schema(2),
                     params=FitParams(min_leaf=2, prune=False), seed=seed)
    leaves = apply_tree(model, X)
    sse = sum(
        oracles.node_sse(t.tolist(), [1.0] * n,
                         np.flatnonzero(leaves == nid).tolist())
        for nid in range(model.n_nodes)
        if model.feature[nid] == LEAF
    )
    root = oracles.node_sse(t.tolist(), [1.0] * n, range(n))
    assert sse <= root + 1e-9
    assert all(model.count[nid] >= 2
               for nid in range(model.n_nodes) if model.feature[nid] == LEAF)


def test_input_validation_errors():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(20, 2))
    t = rng.normal(size=20)
    schema = numeric_schema(2)
    with pytest.raises(SchemaError):
        fit_tree(X[:, :1], t, schema)
    with pytest.raises(ValidationError):
        fit_tree(X, t[:10], schema)
    with pytest.raises(ValidationError):
        fit_tree(X, t, schema, weights=-np.ones(20))
    with pytest.raises(FitError):
        fit_tree(X[:4], t[:4], schema, params=FitParams(min_leaf=5))
    with pytest.raises(SchemaError):
        bad = X.copy()
        bad[3, 1] = np.nan
        fit_tree(bad, t, schema)
    with pytest.raises(ConfigError):
        FitParams(min_leaf=0)
    with pytest.raises(ConfigError):
        FitParams(complexity_grid=(0.01, 0.1))
    with pytest.raises(ConfigError):
        FitParams(subsample_fraction=0.0)
    with pytest.raises(ConfigError):
        fit_forest(X, t, schema, b=0)
    with pytest.raises(SchemaError):
        cat = FeatureSchema((Categorical(3),))
        fit_tree(np.array([[1.0], [2.0], [4.0], [1.0]]), t[:4], cat,
                 params=FitParams(min_leaf=1))


def test_categorical_schema_validation():
    with pytest.raises(ConfigError):
        FeatureSchema((Categorical(1),))
    with pytest.raises(ConfigError):
        FeatureSchema(())
