"""Random forests of CART trees for churn classification and
percentile regression.

Splits minimise the summed child impurity: Gini for classification,
squared error for regression.  For 0/1 targets Gini is exactly twice the
squared error, so one scan serves both tasks.  Missing values (NaN) are
left out of the threshold search and then follow the child that received
more of the non-missing rows.  Categorical columns split on category
subsets found by ordering categories on their mean target.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence

import numba
import numpy as np

from .errors import DataError
from .io import read_bundle, write_bundle

MAX_CATEGORIES = 64
_LEAF = -1


class Task(str, Enum):
    CHURN = "ChurnClassifier"
    PERCENTILE = "PercentileRegressor"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: int = 12
    min_samples_leaf: int = 25
    features_per_split: str | int | float | None = None
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def mtry(self, n_features: int, task: Task) -> int:
        rule = self.features_per_split
        if rule is None:
            rule = "sqrt" if Task(task) is Task.CHURN else "one-third"
        if rule == "sqrt":
            k = int(math.sqrt(n_features))
        elif rule == "one-third":
            k = n_features // 3
        elif rule == "all":
            k = n_features
        elif isinstance(rule, float):
            k = int(rule * n_features)
        elif isinstance(rule, int):
            k = rule
        else:
            raise ValueError(f"unknown features_per_split {rule!r}")
        return max(1, min(n_features, k))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    """Flat binary tree.  ``left[i] == -1`` marks a leaf.

    A row goes left when ``x <= threshold`` (numeric) or when its category
    bit is set in ``cat_left`` (categorical).  NaN, and categories not seen
    at the node, follow ``missing_left``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    cat_left: np.ndarray
    cat_seen: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray
    gain: np.ndarray
    is_categorical: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_leaves(self) -> int:
        return int((self.left == _LEAF).sum())

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.left[i] != _LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tree(X, self.feature, self.threshold, self.cat_left, self.cat_seen,
                             self.missing_left, self.left, self.right, self.value,
                             self.is_categorical)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _apply_tree(X, self.feature, self.threshold, self.cat_left, self.cat_seen,
                           self.missing_left, self.left, self.right, self.is_categorical)

    def to_dict(self, names: Sequence[str] | None = None, node: int = 0) -> dict:
        if self.left[node] == _LEAF:
            return {"leaf": float(self.value[node]), "n": int(self.n_samples[node])}
        f = int(self.feature[node])
        out = {"feature": names[f] if names is not None else f,
               "n": int(self.n_samples[node]),
               "missing": "left" if self.missing_left[node] else "right"}
        if self.is_categorical[f]:
            mask = int(self.cat_left[node])
            out["categories_left"] = [b for b in range(MAX_CATEGORIES) if mask >> b & 1]
        else:
            out["threshold"] = float(self.threshold[node])
        out["left"] = self.to_dict(names, int(self.left[node]))
        out["right"] = self.to_dict(names, int(self.right[node]))
        return out


# -- numba kernels -----------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _splitmix(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def _goes_left(x, f, thr, cat_left, cat_seen, miss_left, is_cat):
    if math.isnan(x):
        return miss_left
    if is_cat[f]:
        if x < 0 or x >= 64:
            return miss_left
        bit = np.uint64(1) << np.uint64(int(x))
        if (cat_seen & bit) == 0:
            return miss_left
        return (cat_left & bit) != 0
    return x <= thr


@numba.njit(cache=True, nogil=True)
def _child_cost(n, s, s2):
    if n == 0:
        return 0.0
    c = s2 - s * s / n
    return c if c > 0.0 else 0.0


@numba.njit(cache=True, nogil=True)
def _build_tree(X, y, rows, is_cat, max_depth, min_leaf, mtry, state):
    n_rows = rows.shape[0]
    n_feat = X.shape[1]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    cat_left = np.zeros(cap, dtype=np.uint64)
    cat_seen = np.zeros(cap, dtype=np.uint64)
    miss_left = np.zeros(cap, dtype=np.bool_)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    n_node = np.zeros(cap, dtype=np.int64)
    cost_node = np.zeros(cap)
    gain_node = np.zeros(cap)

    work = rows.copy()
    buf = np.empty(n_rows, dtype=np.int64)
    feats = np.arange(n_feat)
    xs = np.empty(n_rows)
    ys = np.empty(n_rows)
    c_n = np.zeros(MAX_CATEGORIES)
    c_s = np.zeros(MAX_CATEGORIES)
    c_s2 = np.zeros(MAX_CATEGORIES)
    c_mean = np.zeros(MAX_CATEGORIES)

    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n_rows
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        m = hi - lo
        s = 0.0
        s2 = 0.0
        for t in range(lo, hi):
            v = y[work[t]]
            s += v
            s2 += v * v
        cost = _child_cost(m, s, s2)
        value[node] = s / m
        n_node[node] = m
        cost_node[node] = cost
        if depth >= max_depth or m < 2 * min_leaf or cost <= 1e-12:
            continue

        # partial Fisher-Yates draw of mtry features, then ascending order
        for a in range(mtry):
            b = a + int(_splitmix(state) % np.uint64(n_feat - a))
            tmp = feats[a]
            feats[a] = feats[b]
            feats[b] = tmp
        chosen = np.sort(feats[:mtry])

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        best_mask = np.uint64(0)
        best_seen = np.uint64(0)
        best_mleft = False

        for f in chosen:
            nn = 0
            ms = 0.0
            ms2 = 0.0
            nm = 0
            for t in range(lo, hi):
                r = work[t]
                x = X[r, f]
                if math.isnan(x):
                    ms += y[r]
                    ms2 += y[r] * y[r]
                    nm += 1
                else:
                    xs[nn] = x
                    ys[nn] = y[r]
                    nn += 1
            if nn < 2:
                continue
            if is_cat[f]:
                for c in range(MAX_CATEGORIES):
                    c_n[c] = 0.0
                    c_s[c] = 0.0
                    c_s2[c] = 0.0
                seen = np.uint64(0)
                for t in range(nn):
                    c = int(xs[t])
                    if c < 0 or c >= MAX_CATEGORIES:
                        continue
                    c_n[c] += 1.0
                    c_s[c] += ys[t]
                    c_s2[c] += ys[t] * ys[t]
                    seen |= np.uint64(1) << np.uint64(c)
                n_present = 0
                for c in range(MAX_CATEGORIES):
                    if c_n[c] > 0:
                        c_mean[n_present] = c_s[c] / c_n[c]
                        buf[n_present] = c
                        n_present += 1
                if n_present < 2:
                    continue
                order = np.argsort(c_mean[:n_present], kind="mergesort")
                tot_n = 0.0
                tot_s = 0.0
                tot_s2 = 0.0
                for q in range(n_present):
                    c = buf[q]
                    tot_n += c_n[c]
                    tot_s += c_s[c]
                    tot_s2 += c_s2[c]
                ln = 0.0
                ls = 0.0
                ls2 = 0.0
                mask = np.uint64(0)
                for q in range(n_present - 1):
                    c = buf[order[q]]
                    ln += c_n[c]
                    ls += c_s[c]
                    ls2 += c_s2[c]
                    mask |= np.uint64(1) << np.uint64(c)
                    rn = tot_n - ln
                    ml = ln >= rn
                    if ml:
                        nl = ln + nm
                        sl = ls + ms
                        sl2 = ls2 + ms2
                        nr = rn
                        sr = tot_s - ls
                        sr2 = tot_s2 - ls2
                    else:
                        nl = ln
                        sl = ls
                        sl2 = ls2
                        nr = rn + nm
                        sr = tot_s - ls + ms
                        sr2 = tot_s2 - ls2 + ms2
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    g = cost - _child_cost(nl, sl, sl2) - _child_cost(nr, sr, sr2)
                    if g > best_gain:
                        best_gain = g
                        best_f = f
                        best_thr = float(q + 1)
                        best_mask = mask
                        best_seen = seen
                        best_mleft = ml
            else:
                order = np.argsort(xs[:nn])
                tot_s = 0.0
                tot_s2 = 0.0
                for t in range(nn):
                    tot_s += ys[t]
                    tot_s2 += ys[t] * ys[t]
                ls = 0.0
                ls2 = 0.0
                for q in range(nn - 1):
                    v = ys[order[q]]
                    ls += v
                    ls2 += v * v
                    xa = xs[order[q]]
                    xb = xs[order[q + 1]]
                    if xa == xb:
                        continue
                    ln = q + 1
                    rn = nn - ln
                    ml = ln >= rn
                    if ml:
                        nl = ln + nm
                        sl = ls + ms
                        sl2 = ls2 + ms2
                        nr = rn
                        sr = tot_s - ls
                        sr2 = tot_s2 - ls2
                    else:
                        nl = ln
                        sl = ls
                        sl2 = ls2
                        nr = rn + nm
                        sr = tot_s - ls + ms
                        sr2 = tot_s2 - ls2 + ms2
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    g = cost - _child_cost(nl, sl, sl2) - _child_cost(nr, sr, sr2)
                    if g > best_gain:
                        thr = 0.5 * (xa + xb)
                        if thr >= xb:
                            thr = xa
                        best_gain = g
                        best_f = f
                        best_thr = thr
                        best_mask = np.uint64(0)
                        best_seen = np.uint64(0)
                        best_mleft = ml

        if best_f < 0:
            continue

        # stable partition of work[lo:hi]
        nl = 0
        nr = 0
        for t in range(lo, hi):
            r = work[t]
            if _goes_left(X[r, best_f], best_f, best_thr, best_mask, best_seen, best_mleft, is_cat):
                work[lo + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for t in range(nr):
            work[lo + nl + t] = buf[t]

        feature[node] = best_f
        threshold[node] = best_thr
        cat_left[node] = best_mask
        cat_seen[node] = best_seen
        miss_left[node] = best_mleft
        gain_node[node] = best_gain
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is expanded first
        st_node[top] = rc
        st_lo[top] = lo + nl
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_lo[top] = lo
        st_hi[top] = lo + nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), cat_left[:n_nodes].copy(),
            cat_seen[:n_nodes].copy(), miss_left[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), n_node[:n_nodes].copy(),
            cost_node[:n_nodes].copy(), gain_node[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _apply_tree(X, feature, threshold, cat_left, cat_seen, miss_left, left, right, is_cat):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while left[node] != -1:
            f = feature[node]
            if _goes_left(X[i, f], f, threshold[node], cat_left[node], cat_seen[node],
                          miss_left[node], is_cat):
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@numba.njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, cat_left, cat_seen, miss_left, left, right, value, is_cat):
    leaves = _apply_tree(X, feature, threshold, cat_left, cat_seen, miss_left, left, right, is_cat)
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = value[leaves[i]]
    return out


@numba.njit(cache=True, nogil=True)
def _predict_packed(X, offsets, feature, threshold, cat_left, cat_seen, miss_left, left,
                    right, value, is_cat):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while left[base + node] != -1:
                k = base + node
                f = feature[k]
                if _goes_left(X[i, f], f, threshold[k], cat_left[k], cat_seen[k],
                              miss_left[k], is_cat):
                    node = left[k]
                else:
                    node = right[k]
            acc += value[base + node]
        out[i] = acc / n_trees
    return out


# -- tree and forest fitting -------------------------------------------------

def _check_X(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    if np.isinf(X).any():
        raise ValueError("X contains infinite values")
    return X


def fit_tree(X, y, *, max_depth: int, min_samples_leaf: int, mtry: int | None = None,
             categorical=None, rows=None, rng: np.random.Generator | None = None,
             classification: bool = False) -> Tree:
    """Grow one CART tree on ``rows`` of ``X`` (all rows by default)."""
    X = _check_X(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    is_cat = np.zeros(p, dtype=np.bool_) if categorical is None else np.asarray(categorical, dtype=np.bool_)
    rows = np.arange(n, dtype=np.int64) if rows is None else np.ascontiguousarray(rows, dtype=np.int64)
    mtry = p if mtry is None else int(mtry)
    rng = rng or np.random.default_rng(0)
    state = rng.integers(0, 2**63, size=1, dtype=np.uint64)
    parts = _build_tree(np.asfortranarray(X), y, rows, is_cat, int(max_depth), int(min_samples_leaf),
                        mtry, state)
    feature, threshold, cat_left, cat_seen, miss_left, left, right, value, n_node, cost, gain = parts
    scale = 2.0 if classification else 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        impurity = np.where(n_node > 0, scale * cost / np.maximum(n_node, 1), 0.0)
    return Tree(feature, threshold, cat_left, cat_seen, miss_left, left, right, value,
                n_node, impurity, scale * gain, is_cat.copy())


class ForestModel:
    """Fitted forest.  ``importances`` are normalised mean impurity decreases."""

    def __init__(self, task: Task, trees: list[Tree], feature_names: Sequence[str],
                 categorical: np.ndarray, config: ForestConfig):
        self.task = Task(task)
        self.trees = trees
        self.feature_names = list(feature_names)
        self.categorical = np.asarray(categorical, dtype=np.bool_)
        self.config = config
        self.importances = _importances(trees, len(self.feature_names))
        self._pack()

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _pack(self):
        offsets = np.zeros(len(self.trees) + 1, dtype=np.int64)
        for i, t in enumerate(self.trees):
            offsets[i + 1] = offsets[i] + t.n_nodes
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])
        self._packed = (offsets, cat("feature"), cat("threshold"), cat("cat_left"),
                        cat("cat_seen"), cat("missing_left"), cat("left"), cat("right"),
                        cat("value"))

    def predict(self, X) -> np.ndarray:
        """Mean leaf value over trees for every row of ``X``."""
        X = _check_X(X, self.n_features)
        o, f, th, cl, cs, ml, le, ri, va = self._packed
        out = _predict_packed(X, o, f, th, cl, cs, ml, le, ri, va, self.categorical)
        if self.task is Task.PERCENTILE:
            out = np.clip(out, 0.0, 1.0)
        return out


def _importances(trees: list[Tree], p: int) -> np.ndarray:
    total = np.zeros(p)
    used = 0
    for t in trees:
        imp = np.zeros(p)
        split = t.left != _LEAF
        np.add.at(imp, t.feature[split], t.gain[split])
        s = imp.sum()
        if s > 0:
            total += imp / s
            used += 1
    if used == 0 or total.sum() <= 0:
        return np.full(p, 1.0 / p)
    return total / total.sum()


def _check_labels(y, task: Task) -> np.ndarray:
    y = np.asarray(y)
    if task is Task.CHURN:
        if y.dtype != bool and not np.isin(y, (0, 1)).all():
            raise ValueError("churn labels must be boolean")
        return y.astype(np.float64)
    y = y.astype(np.float64)
    if not np.isfinite(y).all() or (y < 0).any() or (y > 1).any():
        raise ValueError("percentile labels must lie in [0, 1]")
    return y


def fit(features, labels, config: ForestConfig = ForestConfig(), task: Task | str | None = None,
        categorical=None, feature_names: Sequence[str] | None = None) -> ForestModel:
    """Bagged CART forest.

    ``features`` is a 2-D array or a :class:`~cltv.features.DesignMatrix`.
    The task defaults to churn classification for boolean labels and to
    percentile regression otherwise.
    """
    if hasattr(features, "X") and hasattr(features, "columns"):
        categorical = features.categorical if categorical is None else categorical
        feature_names = features.columns if feature_names is None else feature_names
        features = features.X
    X = np.asfortranarray(_check_X(features))
    n, p = X.shape
    if task is None:
        task = Task.CHURN if np.asarray(labels).dtype == bool else Task.PERCENTILE
    task = Task(task)
    y = _check_labels(labels, task)
    if y.shape[0] != n:
        raise ValueError("features and labels differ in length")
    if n < 2 * config.min_samples_leaf:
        raise DataError(f"need at least {2 * config.min_samples_leaf} rows, got {n}")
    if categorical is None:
        categorical = np.zeros(p, dtype=np.bool_)
    categorical = np.asarray(categorical, dtype=np.bool_)
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(p)]
    mtry = config.mtry(p, task)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_trees)

    def grow(ss):
        rng = np.random.default_rng(ss)
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        return fit_tree(X, y, max_depth=config.max_depth, min_samples_leaf=config.min_samples_leaf,
                        mtry=mtry, categorical=categorical, rows=rows, rng=rng,
                        classification=task is Task.CHURN)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            trees = list(pool.map(grow, seeds))
    else:
        trees = [grow(ss) for ss in seeds]
    return ForestModel(task, trees, names, categorical, config)


def predict_proba(model: ForestModel, features) -> np.ndarray | float:
    """Mean positive-class leaf fraction; scalar for a single vector."""
    if model.task is not Task.CHURN:
        raise ValueError("predict_proba needs a churn classifier")
    single = np.ndim(features) == 1
    out = model.predict(features)
    return float(out[0]) if single else out


def predict_percentile(model: ForestModel, features) -> np.ndarray | float:
    """Mean leaf percentile clipped to [0, 1]; scalar for a single vector."""
    if model.task is not Task.PERCENTILE:
        raise ValueError("predict_percentile needs a percentile regressor")
    single = np.ndim(features) == 1
    out = model.predict(features)
    return float(out[0]) if single else out


def importance(model: ForestModel) -> list[tuple[str, float]]:
    """Features by descending importance (ties in column order)."""
    order = sorted(range(model.n_features), key=lambda i: (-model.importances[i], i))
    return [(model.feature_names[i], float(model.importances[i])) for i in order]


# -- cross validation --------------------------------------------------------

def fold_assignment(labels, folds: int, seed: int, stratified: bool) -> np.ndarray:
    """Fold id per row; within each class (if stratified) rows are shuffled
    and dealt round-robin."""
    n = len(labels)
    rng = np.random.default_rng(seed)
    out = np.empty(n, dtype=np.int64)
    if stratified:
        labels = np.asarray(labels)
        offset = 0
        for cls in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == cls))
            out[idx] = (np.arange(idx.size) + offset) % folds
            offset += idx.size
    else:
        idx = rng.permutation(n)
        out[idx] = np.arange(n) % folds
    return out


@dataclass
class CVResult:
    best: ForestConfig
    fold_metrics: list[list[float]]
    metric: str
    grid: list[ForestConfig]

    @property
    def mean_metrics(self) -> list[float]:
        return [float(np.mean(m)) for m in self.fold_metrics]


def cross_validate(features, labels, grid: Sequence[ForestConfig], folds: int = 10,
                   task: Task | str | None = None, seed: int = 0, categorical=None) -> CVResult:
    """k-fold model selection: best mean AUC (churn) or lowest mean RMSE
    (percentiles).  Ties keep the earlier grid entry."""
    from .evaluation import auc, rmse

    grid = list(grid)
    if not grid:
        raise ValueError("config grid is empty")
    if hasattr(features, "X"):
        categorical = features.categorical if categorical is None else categorical
        features = features.X
    X = _check_X(features)
    if task is None:
        task = Task.CHURN if np.asarray(labels).dtype == bool else Task.PERCENTILE
    task = Task(task)
    y = np.asarray(labels)
    if X.shape[0] < 2 * folds:
        raise DataError(f"need at least {2 * folds} rows for {folds}-fold CV")
    fold = fold_assignment(y, folds, seed, stratified=task is Task.CHURN)
    results = []
    for cfg in grid:
        scores = []
        for k in range(folds):
            tr, va = fold != k, fold == k
            model = fit(X[tr], y[tr], cfg, task, categorical)
            pred = model.predict(X[va])
            if task is Task.CHURN:
                scores.append(auc(pred, y[va].astype(bool)))
            else:
                scores.append(rmse(pred, y[va].astype(float)))
        results.append(scores)
    means = [np.mean(s) for s in results]
    best = int(np.argmax(means)) if task is Task.CHURN else int(np.argmin(means))
    return CVResult(grid[best], results, "auc" if task is Task.CHURN else "rmse", grid)


# -- persistence -------------------------------------------------------------

_TREE_FIELDS = ("feature", "threshold", "cat_left", "cat_seen", "missing_left", "left",
                "right", "value", "n_samples", "impurity", "gain")


def forest_arrays(model: ForestModel, prefix: str = "") -> tuple[dict, dict]:
    """Metadata and concatenated node arrays for a bundle."""
    offsets = np.zeros(len(model.trees) + 1, dtype=np.int64)
    for i, t in enumerate(model.trees):
        offsets[i + 1] = offsets[i] + t.n_nodes
    arrays = {prefix + "offsets": offsets, prefix + "categorical": model.categorical.astype(np.bool_)}
    for name in _TREE_FIELDS:
        a = np.concatenate([getattr(t, name) for t in model.trees])
        if a.dtype == np.bool_:
            a = a.astype(np.bool_)
        arrays[prefix + name] = a
    meta = {"task": model.task.value, "feature_names": model.feature_names,
            "config": model.config.to_dict()}
    return meta, arrays


def forest_from_arrays(meta: dict, arrays: dict, prefix: str = "") -> ForestModel:
    offsets = arrays[prefix + "offsets"]
    cat = arrays[prefix + "categorical"].astype(np.bool_)
    trees = []
    for i in range(offsets.size - 1):
        sl = slice(int(offsets[i]), int(offsets[i + 1]))
        parts = {name: np.ascontiguousarray(arrays[prefix + name][sl]) for name in _TREE_FIELDS}
        parts["cat_left"] = parts["cat_left"].astype(np.uint64)
        parts["cat_seen"] = parts["cat_seen"].astype(np.uint64)
        parts["missing_left"] = parts["missing_left"].astype(np.bool_)
        trees.append(Tree(**parts, is_categorical=cat))
    cfg = dict(meta["config"])
    return ForestModel(Task(meta["task"]), trees, meta["feature_names"], cat, ForestConfig(**cfg))


def save_forest(path, model: ForestModel) -> None:
    meta, arrays = forest_arrays(model)
    write_bundle(path, {"kind": "forest", **meta}, arrays)


def load_forest(path) -> ForestModel:
    meta, arrays = read_bundle(path)
    if meta.get("kind") != "forest":
        raise DataError(f"{path}: bundle does not hold a forest")
    return forest_from_arrays(meta, arrays)


def dump_json(model: ForestModel, max_trees: int = 3) -> str:
    """Readable tree structure for small models."""
    payload = {"task": model.task.value,
               "importances": dict(importance(model)),
               "trees": [t.to_dict(model.feature_names) for t in model.trees[:max_trees]]}
    return json.dumps(payload, indent=2, sort_keys=True)
