"""Deterministic least-squares regression trees and subsampled forests.

The split search is exact greedy CART: numeric features try midpoints between
consecutive distinct sorted values, categorical features scan contiguous
prefixes of the levels sorted by mean target (optimal for squared error).
Ties are broken toward the lower feature index, the lower threshold, and the
lexicographically smaller level subset, so a fit is a pure function of
(data, params, seed).

Honest trees place splits with one half of the rows and fill leaf values with
the other half; a split is admissible only if both halves leave at least
``min_leaf`` rows in each child.  Single trees support cost-complexity
pruning: the penalty per leaf is ``alpha * root_loss`` and alpha is selected
from a descending grid by k-fold cross-validation.  Forest trees are honest
and unpruned, built on subsamples drawn either by row or by subject (one row
per drawn subject).

All sums that feed split losses, node values, and forest means are
accumulated sequentially (the np.cumsum / np.bincount operation order), which
makes results reproducible to the last bit and lets brute-force oracles match
them exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import SeedSpec, round_half_up
from .errors import ConfigError, FitError, SchemaError, ValidationError

LEAF = -1

# Geometric grid from 1e-1 down to 1e-5 in half-decade steps; the extra
# resolution matters because the best subtree often sits between decades.
DEFAULT_COMPLEXITY_GRID = tuple(10.0 ** (-e / 2.0) for e in range(2, 11))


# ============================================================
# Feature schema
# ============================================================


@dataclass(frozen=True)
class Numeric:
    """Real-valued feature; a split sends x <= threshold to the left child."""


@dataclass(frozen=True)
class Categorical:
    """Integer-coded feature with levels 1..n_levels; a split sends a level
    subset to the left child."""

    n_levels: int


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature declarations for a model's input matrix."""

    features: tuple

    def __post_init__(self):
        if not self.features:
            raise ConfigError("schema needs at least one feature")
        for j, f in enumerate(self.features):
            if isinstance(f, Numeric):
                continue
            if isinstance(f, Categorical):
                if f.n_levels < 2:
                    raise ConfigError(
                        f"feature {j}: categorical needs >= 2 levels, got {f.n_levels}"
                    )
                continue
            raise ConfigError(f"feature {j}: expected Numeric or Categorical, got {f!r}")

    @property
    def n_features(self) -> int:
        return len(self.features)

    def is_categorical(self, j: int) -> bool:
        return isinstance(self.features[j], Categorical)

    def n_levels(self, j: int) -> int:
        return self.features[j].n_levels

    def validate_matrix(self, X: np.ndarray, name: str = "X") -> np.ndarray:
        """Check an input matrix against the schema.

        Returns the matrix as float64.  Raises SchemaError on shape mismatch,
        non-finite entries, or categorical values outside 1..n_levels.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise SchemaError(f"{name} must be 2-d, got shape {X.shape}")
        if X.shape[1] != self.n_features:
            raise SchemaError(
                f"{name} has {X.shape[1]} columns, schema declares {self.n_features}"
            )
        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise SchemaError(f"{name} row {bad}: non-finite value")
        for j, f in enumerate(self.features):
            if isinstance(f, Categorical):
                col = X[:, j]
                ok = (col == np.floor(col)) & (col >= 1) & (col <= f.n_levels)
                if not np.all(ok):
                    bad = int(np.flatnonzero(~ok)[0])
                    raise SchemaError(
                        f"{name} row {bad}: feature {j} must be an integer level "
                        f"in 1..{f.n_levels}, got {col[bad]!r}"
                    )
        return X


def numeric_schema(dim: int) -> FeatureSchema:
    """Schema of ``dim`` numeric features."""
    return FeatureSchema(tuple(Numeric() for _ in range(dim)))


# ============================================================
# Fit parameters
# ============================================================


@dataclass(frozen=True)
class FitParams:
    """Tuning knobs shared by single trees and forests.

    features_tried_per_split=None means "all features" for single trees and
    ceil(sqrt(n_features)) for forests.
    """

    min_leaf: int = 5
    max_depth: int | None = None
    cv_folds: int = 10
    complexity_grid: tuple = DEFAULT_COMPLEXITY_GRID
    prune: bool = True
    honest: bool = False
    subsample_fraction: float = 0.5
    features_tried_per_split: int | None = None
    subsample_by_subject: bool = True

    def __post_init__(self):
        if self.min_leaf < 1:
            raise ConfigError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be >= 2, got {self.cv_folds}")
        grid = tuple(float(a) for a in self.complexity_grid)
        if not grid or any(a <= 0 for a in grid):
            raise ConfigError("complexity_grid must hold positive values")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("complexity_grid must be strictly decreasing")
        if not (0.0 < self.subsample_fraction <= 1.0):
            raise ConfigError(
                f"subsample_fraction must be in (0, 1], got {self.subsample_fraction}"
            )
        if self.features_tried_per_split is not None and self.features_tried_per_split < 1:
            raise ConfigError("features_tried_per_split must be >= 1 or None")


# ============================================================
# Models
# ============================================================


@dataclass
class TreeModel:
    """Fitted regression tree in flat-array form, node ids in pre-order.

    ``value`` and ``count`` describe the rows that back each node's estimate
    (the estimation half for honest trees).  ``leaf_members`` keeps those row
    indices per leaf for in-memory use; they are never serialized.
    """

    schema: FeatureSchema
    feature: np.ndarray  # int32, LEAF for leaves
    threshold: np.ndarray  # float64, nan unless numeric split
    levels: tuple  # per node: tuple of levels going left, or None
    left: np.ndarray  # int32 child ids, LEAF for leaves
    right: np.ndarray
    value: np.ndarray  # float64 per node
    count: np.ndarray  # int64 per node
    leaf_members: list | None = None  # per node: np.ndarray of row ids, leaves only
    struct_rows: np.ndarray | None = None  # training rows that placed splits
    value_rows: np.ndarray | None = None  # training rows that filled values

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))


@dataclass
class ForestModel:
    """Bag of trees; prediction is the mean over trees in index order."""

    schema: FeatureSchema
    trees: list

    @property
    def b(self) -> int:
        return len(self.trees)


# ============================================================
# Canonical sums
# ============================================================


def _seq_sum(a: np.ndarray) -> float:
    """Left-to-right sequential sum (identical operation order to np.cumsum)."""
    if a.size == 0:
        return 0.0
    return float(np.cumsum(a)[-1])


def _weighted_mean(t: np.ndarray, w: np.ndarray, idx: np.ndarray) -> float:
    sw = _seq_sum(w[idx])
    swt = _seq_sum(w[idx] * t[idx])
    return swt / sw


def _node_sse(t: np.ndarray, w: np.ndarray, idx: np.ndarray) -> float:
    ws = w[idx]
    ts = t[idx]
    s0 = _seq_sum(ws)
    s1 = _seq_sum(ws * ts)
    s2 = _seq_sum(ws * ts * ts)
    return s2 - s1 * s1 / s0


# ============================================================
# Split search
# ============================================================


def _scan_numeric(v, t, w, v_est, min_leaf):
    """Best threshold for one numeric feature.

    Returns (loss, threshold) or None if no admissible split.  v_est is the
    estimation-half feature column (None when not honest).
    """
    order = np.argsort(v, kind="stable")
    vs = v[order]
    ws = w[order]
    ts = t[order]
    cut = np.flatnonzero(vs[1:] > vs[:-1])
    if cut.size == 0:
        return None
    pw = np.cumsum(ws)
    pwt = np.cumsum(ws * ts)
    pwt2 = np.cumsum(ws * ts * ts)
    tot_w, tot_wt, tot_wt2 = pw[-1], pwt[-1], pwt2[-1]

    n = len(vs)
    n_left = cut + 1
    feasible = (n_left >= min_leaf) & (n - n_left >= min_leaf)

    lo = vs[cut]
    hi = vs[cut + 1]
    thr = (lo + hi) / 2.0
    # Midpoints can round onto a boundary value or overflow; fall back to the
    # lower value so routing (x <= thr) still separates the two sides.
    bad = ~((thr >= lo) & (thr < hi))
    if np.any(bad):
        thr = np.where(bad, lo, thr)

    if v_est is not None:
        es = np.sort(v_est)
        n_left_est = np.searchsorted(es, thr, side="right")
        feasible &= (n_left_est >= min_leaf) & (len(es) - n_left_est >= min_leaf)
    if not np.any(feasible):
        return None

    wl = pw[cut]
    wtl = pwt[cut]
    wt2l = pwt2[cut]
    loss_l = wt2l - wtl * wtl / wl
    wr = tot_w - wl
    wtr = tot_wt - wtl
    wt2r = tot_wt2 - wt2l
    loss_r = wt2r - wtr * wtr / wr
    loss = loss_l + loss_r
    loss = np.where(feasible, loss, np.inf)
    j = int(np.argmin(loss))
    return float(loss[j]), float(thr[j])


def _scan_categorical(lv, t, w, lv_est, n_levels, min_leaf):
    """Best level subset for one categorical feature.

    Levels are sorted by weighted mean target (ties by level id) and only
    contiguous prefixes are scanned, which is optimal for squared error.
    Returns (loss, levels_left) or None; levels_left is the lexicographically
    smaller side of the chosen partition (levels absent from this node's rows
    are implicit right-side members).
    """
    lvi = lv.astype(np.int64)
    cnt = np.bincount(lvi, minlength=n_levels + 1)
    sw = np.bincount(lvi, weights=w, minlength=n_levels + 1)
    swt = np.bincount(lvi, weights=w * t, minlength=n_levels + 1)
    swt2 = np.bincount(lvi, weights=w * t * t, minlength=n_levels + 1)
    present = np.flatnonzero(cnt[1:]) + 1
    if present.size < 2:
        return None
    means = swt[present] / sw[present]
    order = np.lexsort((present, means))
    lv_sorted = present[order]

    c_cnt = np.cumsum(cnt[lv_sorted])
    c_sw = np.cumsum(sw[lv_sorted])
    c_swt = np.cumsum(swt[lv_sorted])
    c_swt2 = np.cumsum(swt2[lv_sorted])
    tot_cnt, tot_w, tot_wt, tot_wt2 = c_cnt[-1], c_sw[-1], c_swt[-1], c_swt2[-1]

    p = np.arange(len(lv_sorted) - 1)
    n_left = c_cnt[p]
    feasible = (n_left >= min_leaf) & (tot_cnt - n_left >= min_leaf)
    if lv_est is not None:
        ecnt = np.bincount(lv_est.astype(np.int64), minlength=n_levels + 1)
        c_ecnt = np.cumsum(ecnt[lv_sorted])
        tot_e = c_ecnt[-1]
        e_left = c_ecnt[p]
        feasible &= (e_left >= min_leaf) & (tot_e - e_left >= min_leaf)
    if not np.any(feasible):
        return None

    wl = c_sw[p]
    wtl = c_swt[p]
    wt2l = c_swt2[p]
    loss_l = wt2l - wtl * wtl / wl
    wr = tot_w - wl
    wtr = tot_wt - wtl
    wt2r = tot_wt2 - wt2l
    loss_r = wt2r - wtr * wtr / wr
    loss = np.where(feasible, loss_l + loss_r, np.inf)

    j = int(np.argmin(loss))
    best_loss = float(loss[j])
    ties = np.flatnonzero(loss == loss[j])

    def canonical(jj):
        left = tuple(sorted(int(l) for l in lv_sorted[: jj + 1]))
        right = tuple(sorted(int(l) for l in lv_sorted[jj + 1 :]))
        return left if left < right else right

    best_set = canonical(j)
    for jj in ties[1:] if len(ties) > 1 else ():
        cand = canonical(int(jj))
        if cand < best_set:
            best_set = cand
    return best_loss, best_set


def _best_split(X, t, w, schema, candidates, struct_idx, est_idx, min_leaf):
    """Best admissible split over candidate features, with deterministic
    tie-breaking (lower feature index wins on equal loss)."""
    best = None
    for j in candidates:
        col = X[struct_idx, j]
        col_est = X[est_idx, j] if est_idx is not None else None
        if schema.is_categorical(j):
            res = _scan_categorical(
                col, t[struct_idx], w[struct_idx], col_est, schema.n_levels(j), min_leaf
            )
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], int(j), None, res[1])
        else:
            res = _scan_numeric(col, t[struct_idx], w[struct_idx], col_est, min_leaf)
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], int(j), res[1], None)
    return best


# ============================================================
# Growth
# ============================================================


class _RawTree:
    """Mutable parallel arrays filled during growth; pre-order node ids."""

    __slots__ = ("feature", "threshold", "levels", "left", "right", "struct_sse")

    def __init__(self):
        self.feature = []
        self.threshold = []
        self.levels = []
        self.left = []
        self.right = []
        self.struct_sse = []

    def new_node(self, sse):
        nid = len(self.feature)
        self.feature.append(LEAF)
        self.threshold.append(math.nan)
        self.levels.append(None)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.struct_sse.append(sse)
        return nid


def _grow(X, t, w, schema, params, rng, struct_idx, est_idx):
    """Grow a full (unpruned) tree; iterative DFS keeps recursion bounded."""
    raw = _RawTree()
    n_feat = schema.n_features
    m_try = params.features_tried_per_split
    honest = est_idx is not None
    all_features = np.arange(n_feat)

    # Work items: (struct rows, est rows, depth, parent id, is_left)
    stack = [(struct_idx, est_idx, 0, -2, False)]
    while stack:
        sidx, eidx, depth, parent, is_left = stack.pop()
        sse = _node_sse(t, w, sidx)
        nid = raw.new_node(sse)
        if parent >= 0:
            if is_left:
                raw.left[parent] = nid
            else:
                raw.right[parent] = nid

        can_split = (
            len(sidx) >= 2 * params.min_leaf
            and (not honest or len(eidx) >= 2 * params.min_leaf)
            and (params.max_depth is None or depth < params.max_depth)
        )
        if not can_split:
            continue
        if m_try is not None and m_try < n_feat:
            candidates = np.sort(rng.choice(n_feat, size=m_try, replace=False))
        else:
            candidates = all_features
        best = _best_split(
            X, t, w, schema, candidates, sidx, eidx if honest else None, params.min_leaf
        )
        if best is None or not best[0] < sse:
            continue

        loss, j, thr, lvset = best
        raw.feature[nid] = j
        if lvset is None:
            raw.threshold[nid] = thr
            smask = X[sidx, j] <= thr
            emask = X[eidx, j] <= thr if honest else None
        else:
            raw.levels[nid] = lvset
            arr = np.asarray(lvset, dtype=np.float64)
            smask = np.isin(X[sidx, j], arr)
            emask = np.isin(X[eidx, j], arr) if honest else None
        # Push right first so the left child is processed next (pre-order).
        stack.append(
            (sidx[~smask], eidx[~emask] if honest else None, depth + 1, nid, False)
        )
        stack.append((sidx[smask], eidx[emask] if honest else None, depth + 1, nid, True))
    return raw


# ============================================================
# Pruning
# ============================================================


def _collapse_flags(raw: _RawTree, lam: float) -> np.ndarray:
    """Cost-complexity DP: True where a subtree should collapse into a leaf.

    Children always carry larger pre-order ids than their parent, so a single
    reverse pass visits children first.  Collapsing wins ties, which keeps the
    subtree sequence nested as lam grows.
    """
    n = len(raw.feature)
    cost = np.empty(n)
    collapse = np.zeros(n, dtype=bool)
    for nid in range(n - 1, -1, -1):
        own = raw.struct_sse[nid] + lam
        if raw.feature[nid] == LEAF:
            cost[nid] = own
        else:
            sub = cost[raw.left[nid]] + cost[raw.right[nid]]
            if own <= sub:
                collapse[nid] = True
                cost[nid] = own
            else:
                cost[nid] = sub
    return collapse


def _extract_pruned(raw: _RawTree, collapse: np.ndarray) -> _RawTree:
    """Copy of the tree with collapsed nodes turned into leaves (ids renumbered)."""
    out = _RawTree()
    stack = [(0, -2, False)]
    while stack:
        old, parent, is_left = stack.pop()
        nid = out.new_node(raw.struct_sse[old])
        if parent >= 0:
            if is_left:
                out.left[parent] = nid
            else:
                out.right[parent] = nid
        if raw.feature[old] == LEAF or collapse[old]:
            continue
        out.feature[nid] = raw.feature[old]
        out.threshold[nid] = raw.threshold[old]
        out.levels[nid] = raw.levels[old]
        stack.append((raw.right[old], nid, False))
        stack.append((raw.left[old], nid, True))
    return out


def _penalized_loss(raw: _RawTree, lam: float) -> float:
    """Sum of leaf struct losses plus lam per leaf (diagnostic for tests)."""
    total = 0.0
    for nid in range(len(raw.feature)):
        if raw.feature[nid] == LEAF:
            total += raw.struct_sse[nid] + lam
    return total


# ============================================================
# Value assignment and prediction
# ============================================================


def _route_mask(raw, nid, X, idx):
    j = raw.feature[nid]
    if raw.levels[nid] is not None:
        return np.isin(X[idx, j], np.asarray(raw.levels[nid], dtype=np.float64))
    return X[idx, j] <= raw.threshold[nid]


def _finalize(raw: _RawTree, schema, X, t, w, value_idx, struct_idx) -> TreeModel:
    """Drop the value rows through the tree and fill value/count/members."""
    n = len(raw.feature)
    value = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    members: list = [None] * n
    stack = [(0, value_idx)]
    while stack:
        nid, idx = stack.pop()
        if idx.size == 0:
            raise FitError(f"node {nid} received no value rows")
        value[nid] = _weighted_mean(t, w, idx)
        count[nid] = idx.size
        if raw.feature[nid] == LEAF:
            members[nid] = idx
            continue
        mask = _route_mask(raw, nid, X, idx)
        stack.append((raw.right[nid], idx[~mask]))
        stack.append((raw.left[nid], idx[mask]))
    return TreeModel(
        schema=schema,
        feature=np.asarray(raw.feature, dtype=np.int32),
        threshold=np.asarray(raw.threshold, dtype=np.float64),
        levels=tuple(raw.levels),
        left=np.asarray(raw.left, dtype=np.int32),
        right=np.asarray(raw.right, dtype=np.int32),
        value=value,
        count=count,
        leaf_members=members,
        struct_rows=struct_idx,
        value_rows=value_idx,
    )


def apply_tree(tree: TreeModel, X: np.ndarray) -> np.ndarray:
    """Leaf node id for every row of X (X must already fit the schema)."""
    out = np.zeros(len(X), dtype=np.int64)
    if len(X) == 0:
        return out
    stack = [(0, np.arange(len(X)))]
    while stack:
        nid, idx = stack.pop()
        if idx.size == 0:
            continue
        j = tree.feature[nid]
        if j == LEAF:
            out[idx] = nid
            continue
        if tree.levels[nid] is not None:
            mask = np.isin(X[idx, j], np.asarray(tree.levels[nid], dtype=np.float64))
        else:
            mask = X[idx, j] <= tree.threshold[nid]
        stack.append((tree.right[nid], idx[~mask]))
        stack.append((tree.left[nid], idx[mask]))
    return out


def predict(model, X: np.ndarray) -> np.ndarray:
    """Predictions for a TreeModel or ForestModel.

    Forest predictions are the per-tree means accumulated in tree-index
    order, so repeated calls are bit-identical.
    """
    if isinstance(model, TreeModel):
        X = model.schema.validate_matrix(X)
        return model.value[apply_tree(model, X)]
    if isinstance(model, ForestModel):
        X = model.schema.validate_matrix(X)
        acc = np.zeros(len(X))
        for tree in model.trees:
            acc += tree.value[apply_tree(tree, X)]
        return acc / len(model.trees)
    raise ValidationError(f"cannot predict with {type(model).__name__}")


def leaf_cohort(model, x: np.ndarray):
    """Training rows whose leaf contains x: an id array for a tree, a list of
    id arrays (one per tree) for a forest.  Requires an in-memory fit; models
    rebuilt from an envelope no longer carry cohorts."""
    if isinstance(model, ForestModel):
        return [leaf_cohort(tree, x) for tree in model.trees]
    if not isinstance(model, TreeModel):
        raise ValidationError(f"cannot extract cohorts from {type(model).__name__}")
    if model.leaf_members is None:
        raise ValidationError("leaf cohorts are not available on imported models")
    X = model.schema.validate_matrix(np.asarray(x, dtype=np.float64).reshape(1, -1))
    nid = int(apply_tree(model, X)[0])
    return model.leaf_members[nid]


# ============================================================
# Fitting
# ============================================================


def _as_seedspec(seed) -> SeedSpec:
    return seed if isinstance(seed, SeedSpec) else SeedSpec(seed)


def _check_training_inputs(X, target, weights, schema):
    X = schema.validate_matrix(X)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (len(X),):
        raise ValidationError(f"target shape {t.shape} does not match {len(X)} rows")
    if not np.all(np.isfinite(t)):
        raise ValidationError("targets must be finite")
    if not np.all(np.isfinite(t * t)):
        raise ValidationError("squared targets overflow; rescale the targets")
    if weights is None:
        w = np.ones(len(X))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(X),):
            raise ValidationError(f"weights shape {w.shape} does not match {len(X)} rows")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("weights must be finite and positive")
    return X, t, w


def _honest_halves(n, rng):
    perm = rng.permutation(n)
    n_struct = n // 2
    return np.sort(perm[:n_struct]), np.sort(perm[n_struct:])


def _grow_finalized(X, t, w, schema, params, rng, struct_idx, est_idx):
    raw = _grow(X, t, w, schema, params, rng, struct_idx, est_idx)
    value_idx = est_idx if est_idx is not None else struct_idx
    return raw, value_idx


def _cv_fold_of_rows(groups, n_folds, rng):
    """Fold id per row; whole groups are assigned to folds round-robin after a
    seeded shuffle, so one subject never straddles train and validation."""
    ug, inv = np.unique(groups, return_inverse=True)
    perm = rng.permutation(len(ug))
    fold_of_group = np.empty(len(ug), dtype=np.int64)
    fold_of_group[perm] = np.arange(len(ug)) % n_folds
    return fold_of_group[inv], len(ug)


def _select_alpha(X, t, w, schema, params, seedspec, groups):
    """Pick alpha from the grid by k-fold cross-validated squared error.

    The grid is scanned in its declared (descending) order and replaced only
    on strict improvement, so ties favor the larger alpha / smaller tree.
    """
    n = len(X)
    if groups is None:
        groups = np.arange(n)
    rng = seedspec.stream("cv")
    n_groups = len(np.unique(groups))
    n_folds = min(params.cv_folds, n_groups)
    if n_folds < 2:
        return params.complexity_grid[-1]
    fold_of_row, _ = _cv_fold_of_rows(groups, n_folds, rng)

    grid = params.complexity_grid
    err = np.zeros(len(grid))
    for f in range(n_folds):
        val = np.flatnonzero(fold_of_row == f)
        trn = np.flatnonzero(fold_of_row != f)
        if val.size == 0 or trn.size < 2:
            continue
        if params.honest:
            h_rng = seedspec.stream("cv-honest", f)
            s_loc, e_loc = _honest_halves(len(trn), h_rng)
            sidx, eidx = trn[s_loc], trn[e_loc]
        else:
            sidx, eidx = trn, None
        g_rng = seedspec.stream("cv-grow", f)
        raw = _grow(X, t, w, schema, params, g_rng, sidx, eidx)
        root_loss = raw.struct_sse[0]
        vidx = eidx if eidx is not None else sidx
        for a, alpha in enumerate(grid):
            pruned = _extract_pruned(raw, _collapse_flags(raw, alpha * root_loss))
            model = _finalize(pruned, schema, X, t, w, vidx, sidx)
            pred = model.value[apply_tree(model, X[val])]
            resid = pred - t[val]
            err[a] += _seq_sum(w[val] * resid * resid)

    best_a = 0
    for a in range(1, len(grid)):
        if err[a] < err[best_a]:
            best_a = a
    return grid[best_a]


def fit_tree(
    X,
    target,
    schema: FeatureSchema,
    params: FitParams = FitParams(),
    seed=0,
    weights=None,
    cv_groups=None,
) -> TreeModel:
    """Fit a single regression tree.

    With ``params.honest`` the rows are split in half: one half places the
    splits, the other fills leaf values.  With ``params.prune`` the tree is
    cost-complexity pruned at an alpha selected by cross-validation from
    ``params.complexity_grid`` (folds stratified by ``cv_groups`` when given).

    Raises:
        FitError: fewer than 2*min_leaf rows.
        SchemaError / ValidationError: inputs that do not fit the schema.
    """
    X, t, w = _check_training_inputs(X, target, weights, schema)
    n = len(X)
    if n < 2 * params.min_leaf:
        raise FitError(f"need at least {2 * params.min_leaf} rows, got {n}")
    seedspec = _as_seedspec(seed)

    if params.honest:
        struct_idx, est_idx = _honest_halves(n, seedspec.stream("honest"))
    else:
        struct_idx, est_idx = np.arange(n), None

    grow_rng = seedspec.stream("grow")
    raw = _grow(X, t, w, schema, params, grow_rng, struct_idx, est_idx)
    if params.prune:
        alpha = _select_alpha(X, t, w, schema, params, seedspec, cv_groups)
        raw = _extract_pruned(raw, _collapse_flags(raw, alpha * raw.struct_sse[0]))
    value_idx = est_idx if est_idx is not None else struct_idx
    return _finalize(raw, schema, X, t, w, value_idx, struct_idx)


class _GroupIndex:
    """Rows of each subject, precomputed once per forest."""

    def __init__(self, groups: np.ndarray):
        order = np.argsort(groups, kind="stable")
        ug, starts = np.unique(groups[order], return_index=True)
        self.order = order
        self.starts = starts
        self.sizes = np.diff(np.append(starts, len(groups)))
        self.n_groups = len(ug)


def _draw_subsample(n, gindex, params, rng):
    """Rows for one forest tree: round(fraction*n) rows, or in subject mode
    round(fraction*n_subjects) distinct subjects with one row drawn per
    subject.  Returned ascending."""
    if gindex is not None:
        m = max(round_half_up(params.subsample_fraction * gindex.n_groups), 1)
        chosen = rng.choice(gindex.n_groups, size=m, replace=False)
        offsets = rng.integers(0, gindex.sizes[chosen])
        return np.sort(gindex.order[gindex.starts[chosen] + offsets])
    m = max(round_half_up(params.subsample_fraction * n), 1)
    return np.sort(rng.choice(n, size=m, replace=False))


def fit_forest(
    X,
    target,
    schema: FeatureSchema,
    params: FitParams = FitParams(honest=True),
    seed=0,
    b: int = 500,
    weights=None,
    subject_groups=None,
) -> ForestModel:
    """Fit a subsampled forest of honest, unpruned trees.

    Tree ``i`` draws all of its randomness from the stream (seed, "tree", i),
    so the forest is reproducible regardless of build order.  When
    ``subject_groups`` is given and subject-mode subsampling is on, each tree
    sees at most one row per subject.

    Raises:
        FitError: subsample too small for min_leaf.
        ConfigError: b < 1.
    """
    X, t, w = _check_training_inputs(X, target, weights, schema)
    if b < 1:
        raise ConfigError(f"forest needs b >= 1 trees, got {b}")
    n = len(X)
    gindex = None
    if subject_groups is not None and params.subsample_by_subject:
        groups = np.asarray(subject_groups)
        if groups.shape != (n,):
            raise ValidationError("subject_groups must give one group per row")
        gindex = _GroupIndex(groups)
    m = round_half_up(
        params.subsample_fraction * (gindex.n_groups if gindex is not None else n)
    )
    if m < 2 * params.min_leaf:
        raise FitError(
            f"subsample of {m} rows cannot satisfy min_leaf={params.min_leaf}; "
            "raise subsample_fraction or lower min_leaf"
        )

    mtry = params.features_tried_per_split
    if mtry is None:
        mtry = max(1, math.ceil(math.sqrt(schema.n_features)))
    tree_params = replace(params, prune=False, features_tried_per_split=mtry)

    seedspec = _as_seedspec(seed)
    trees = []
    for i in range(b):
        rng = seedspec.stream("tree", i)
        rows = _draw_subsample(n, gindex, params, rng)
        if params.honest:
            s_loc, e_loc = _honest_halves(len(rows), rng)
            sidx, eidx = rows[s_loc], rows[e_loc]
        else:
            sidx, eidx = rows, None
        raw = _grow(X, t, w, schema, tree_params, rng, sidx, eidx)
        vidx = eidx if eidx is not None else sidx
        trees.append(_finalize(raw, schema, X, t, w, vidx, sidx))
    return ForestModel(schema=schema, trees=trees)
