"""Bagged regression trees for predicting response-curve parameters from
geospatial features.

Each tree sees a bootstrap resample of the rows drawn from its own seed
``SeedSequence([master_seed, tree_index])``, so an ensemble is fully
determined by (data, hyperparameters, seed) no matter how the trees are
scheduled across threads.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError
from .raster import GeoGrid, require_same_spec

MODEL_FORMAT_VERSION = 1

DEFAULT_PARAM_GRID = {
    "n_trees": [50, 100, 200],
    "max_depth": [8, 16, None],
    "min_leaf_size": [1, 5, 20],
    "feature_subsample": [1.0, 0.5],
}


@dataclass
class FeatureTable:
    feature_names: list
    rows: np.ndarray
    row_ids: list = field(default_factory=list)
    lon: np.ndarray | None = None
    lat: np.ndarray | None = None

    def __post_init__(self):
        self.feature_names = list(self.feature_names)
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.feature_names):
            raise ValueError("rows must be N x (number of feature names)")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("feature values must be finite")
        if not self.row_ids:
            self.row_ids = [str(i) for i in range(len(self.rows))]
        if len(self.row_ids) != len(self.rows):
            raise ValueError("row_ids length does not match rows")

    def __len__(self):
        return len(self.rows)

    def subset(self, idx):
        idx = np.asarray(idx)
        return FeatureTable(
            self.feature_names, self.rows[idx], [self.row_ids[i] for i in idx],
            None if self.lon is None else np.asarray(self.lon)[idx],
            None if self.lat is None else np.asarray(self.lat)[idx],
        )


def load_feature_table(text: str, source=None) -> FeatureTable:
    """CSV with ``cpt_id,lon,lat`` followed by one column per feature."""
    reader = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if not reader:
        raise InputError("empty feature table", source=source)
    header = [h.strip() for h in reader[0]]
    if [h.lower() for h in header[:3]] != ["cpt_id", "lon", "lat"] or len(header) < 4:
        raise InputError("feature table header must be cpt_id,lon,lat,<features...>",
                         source=source, line=1)
    ids, lon, lat, rows = [], [], [], []
    for lineno, r in enumerate(reader[1:], start=2):
        if len(r) != len(header):
            raise InputError(f"expected {len(header)} fields, got {len(r)}", source=source, line=lineno)
        try:
            vals = [float(v) for v in r[1:]]
        except ValueError:
            raise InputError("non-numeric feature value", source=source, line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise InputError("non-finite feature value", source=source, line=lineno)
        ids.append(r[0].strip())
        lon.append(vals[0])
        lat.append(vals[1])
        rows.append(vals[2:])
    if len(set(ids)) != len(ids):
        raise InputError("duplicate cpt_id in feature table", source=source)
    return FeatureTable(header[3:], np.array(rows).reshape(len(rows), len(header) - 3),
                        ids, np.array(lon), np.array(lat))


@dataclass(frozen=True)
class TreeParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf_size: int = 1
    feature_subsample: float = 1.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_leaf_size < 1:
            raise ValueError("min_leaf_size must be >= 1")
        if not (0 < self.feature_subsample <= 1):
            raise ValueError("feature_subsample must lie in (0, 1]")


class RegressionTree:
    """Binary CART tree in flat-array form.

    ``feature[i] == -1`` marks a leaf; otherwise samples with
    ``x[feature] <= threshold`` go to ``left[i]``.
    """

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)

    @property
    def n_nodes(self):
        return len(self.feature)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"])


def _node_value(y):
    # clipping keeps a constant node's mean bit-identical to its targets
    return float(np.clip(np.mean(y), y.min(), y.max()))


def _best_split(X, y, features, min_leaf):
    """Highest-gain split; ties go to the lowest feature, then threshold."""
    n = len(y)
    total = y.sum()
    parent = total * total / n
    best_gain, best = 0.0, None
    tol = 1e-12 * max(float(np.dot(y, y)), 1e-300)
    i = np.arange(1, n)
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        csum = np.cumsum(ys)[:-1]
        ok = (xs[1:] > xs[:-1]) & (i >= min_leaf) & (n - i >= min_leaf)
        if not ok.any():
            continue
        score = csum ** 2 / i + (total - csum) ** 2 / (n - i) - parent
        score = np.where(ok, score, -np.inf)
        k = int(np.argmax(score))
        gain = float(score[k])
        if gain > tol and gain > best_gain:
            best_gain = gain
            lo, hi = xs[k], xs[k + 1]
            thr = 0.5 * (lo + hi)
            if not (lo <= thr < hi):
                thr = lo
            best = (f, float(thr))
    return best


def fit_tree(X, y, params: TreeParams, rng: np.random.Generator) -> RegressionTree:
    n_features = X.shape[1]
    n_try = max(1, int(round(params.feature_subsample * n_features)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        value[node] = _node_value(yn)
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        if len(idx) < 2 * params.min_leaf_size or yn.min() == yn.max():
            continue
        if n_try < n_features:
            feats = rng.choice(n_features, size=n_try, replace=False)
        else:
            feats = range(n_features)
        split = _best_split(X[idx], yn, feats, params.min_leaf_size)
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        l_node, r_node = new_node(), new_node()
        feature[node], threshold[node] = f, thr
        left[node], right[node] = l_node, r_node
        # right pushed first so the left subtree is numbered first
        stack.append((r_node, idx[~mask], depth + 1))
        stack.append((l_node, idx[mask], depth + 1))
    return RegressionTree(feature, threshold, left, right, value)


def tree_rng(master_seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(tree_index)]))


@dataclass
class TreeEnsemble:
    trees: list
    params: TreeParams
    master_seed: int
    feature_names: list
    mi_type: str = ""
    target: str = ""
    log_target: bool = False

    @property
    def n_features(self):
        return len(self.feature_names)

    def predict_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        per_tree = np.stack([t.predict(X) for t in self.trees])
        total = np.zeros(len(X))
        for row in per_tree:  # summed in tree-index order
            total = total + row
        mean = np.clip(total / len(self.trees), per_tree.min(axis=0), per_tree.max(axis=0))
        return np.exp(mean) if self.log_target else mean

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("predict takes a single feature vector")
        return float(self.predict_batch(x[None, :])[0])

    def predict_grid(self, feature_grids: Sequence[GeoGrid]) -> GeoGrid:
        """Predict per cell from stacked feature rasters (in feature order)."""
        if len(feature_grids) != self.n_features:
            raise ValueError(f"expected {self.n_features} feature grids, got {len(feature_grids)}")
        spec = require_same_spec(feature_grids)
        stack = np.stack([g.masked().ravel() for g in feature_grids], axis=1)
        ok = np.all(np.isfinite(stack), axis=1)
        out = np.full(len(stack), np.nan)
        if ok.any():
            out[ok] = self.predict_batch(stack[ok])
        return GeoGrid.from_array(spec, out.reshape(spec.shape))

    def to_dict(self):
        return {
            "version": MODEL_FORMAT_VERSION,
            "mi_type": self.mi_type,
            "target": self.target,
            "feature_names": list(self.feature_names),
            "hyperparams": asdict(self.params),
            "master_seed": int(self.master_seed),
            "log_target": bool(self.log_target),
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != MODEL_FORMAT_VERSION:
            raise InputError(f"unsupported model version {d.get('version')!r}")
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            params=TreeParams(**d["hyperparams"]),
            master_seed=d["master_seed"],
            feature_names=list(d["feature_names"]),
            mi_type=d.get("mi_type", ""),
            target=d.get("target", ""),
            log_target=bool(d.get("log_target", False)),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _as_matrix(table):
    if isinstance(table, FeatureTable):
        return table.rows, table.feature_names
    X = np.atleast_2d(np.asarray(table, dtype=float))
    return X, [f"f{i}" for i in range(X.shape[1])]


def train_bagged_trees(table, targets, params: TreeParams = TreeParams(), seed: int = 0,
                       n_jobs: int = 1, log_target: bool = False, mi_type: str = "",
                       target: str = "") -> TreeEnsemble:
    """Fit a bagged ensemble of CART regression trees.

    Parameters
    ----------
    table : FeatureTable or array-like, shape (N, F)
    targets : array-like, shape (N,)
    params : TreeParams
    seed : int
        Master seed; tree ``i`` draws from ``SeedSequence([seed, i])``.
    n_jobs : int
        Worker threads; the result does not depend on it.
    log_target : bool
        Fit on ``log(targets)`` and exponentiate predictions.
    """
    X, names = _as_matrix(table)
    y = np.asarray(targets, dtype=float)
    if y.shape != (len(X),):
        raise ValueError("targets must have one value per row")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if log_target:
        if np.any(y <= 0):
            raise ValueError("log-space training needs positive targets")
        y = np.log(y)
    n = len(y)
    if n < 2 * params.min_leaf_size or n < 1:
        raise ValueError(f"need at least {2 * params.min_leaf_size} rows, got {n}")

    def build(i):
        rng = tree_rng(seed, i)
        idx = rng.integers(0, n, size=n)
        return fit_tree(X[idx], y[idx], params, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build, range(params.n_trees)))
    else:
        trees = [build(i) for i in range(params.n_trees)]
    return TreeEnsemble(trees, params, int(seed), list(names), mi_type, target, log_target)


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------

def holdout_split(n: int, rng: np.random.Generator, test_fraction: float = 0.1):
    """Shuffled (train, test) index arrays."""
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def kfold_indices(n: int, k: int, rng: np.random.Generator):
    """Shuffled partition of ``range(n)`` into ``k`` folds."""
    if k < 2 or n < k:
        raise ValueError(f"k-fold needs 2 <= k <= n (k={k}, n={n})")
    return [np.sort(f) for f in np.array_split(rng.permutation(n), k)]


def expand_grid(param_grid):
    keys = ("n_trees", "max_depth", "min_leaf_size", "feature_subsample")
    unknown = set(param_grid) - set(keys)
    if unknown:
        raise ValueError(f"unknown hyperparameters {sorted(unknown)}")
    defaults = asdict(TreeParams())
    axes = [list(param_grid.get(k, [defaults[k]])) for k in keys]
    if any(len(a) == 0 for a in axes):
        raise ValueError("hyperparameter grid is empty")
    return [TreeParams(**dict(zip(keys, combo))) for combo in itertools.product(*axes)]


@dataclass
class CvResult:
    best: TreeParams
    table: list                 # [(TreeParams, mean cv mse, per-fold mses)]
    train_idx: np.ndarray
    test_idx: np.ndarray
    folds: list


def _selection_key(entry):
    p, mse, _ = entry
    depth = math.inf if p.max_depth is None else p.max_depth
    return (mse, p.n_trees, depth)


def grid_search_cv(table, targets, param_grid=None, k: int = 10, seed: int = 0,
                   test_fraction: float = 0.1, n_jobs: int = 1,
                   log_target: bool = False) -> CvResult:
    """Pick hyperparameters by k-fold CV MSE on a shuffled training split.

    A holdout of ``test_fraction`` of the rows is carved off first; folds are
    then drawn from the same generator. Ties in CV MSE go to fewer trees,
    then the shallower depth.
    """
    X, _ = _as_matrix(table)
    y = np.asarray(targets, dtype=float)
    candidates = expand_grid(DEFAULT_PARAM_GRID if param_grid is None else param_grid)
    n = len(y)
    rng = np.random.default_rng(seed)
    if test_fraction > 0:
        train_idx, test_idx = holdout_split(n, rng, test_fraction)
    else:
        train_idx, test_idx = np.arange(n), np.array([], dtype=int)
    if len(train_idx) < k:
        raise ValueError(f"need at least k={k} training rows, got {len(train_idx)}")
    folds = kfold_indices(len(train_idx), k, rng)
    Xt, yt = X[train_idx], y[train_idx]
    results = []
    for p in candidates:
        mses = []
        for fi, held in enumerate(folds):
            fit_mask = np.ones(len(yt), dtype=bool)
            fit_mask[held] = False
            model = train_bagged_trees(Xt[fit_mask], yt[fit_mask], p, seed=seed + fi,
                                       n_jobs=n_jobs, log_target=log_target)
            err = model.predict_batch(Xt[held]) - yt[held]
            mses.append(float(np.mean(err ** 2)))
        results.append((p, float(np.mean(mses)), mses))
    best = min(results, key=_selection_key)[0]
    return CvResult(best, results, train_idx, test_idx, folds)


def out_of_fold_predictions(table, targets, params: TreeParams, k: int = 10, seed: int = 0,
                            n_jobs: int = 1, log_target: bool = False):
    """Prediction for every row from a model that never saw it."""
    X, _ = _as_matrix(table)
    y = np.asarray(targets, dtype=float)
    folds = kfold_indices(len(y), min(k, len(y)), np.random.default_rng(seed))
    pred = np.empty(len(y))
    for fi, held in enumerate(folds):
        mask = np.ones(len(y), dtype=bool)
        mask[held] = False
        model = train_bagged_trees(X[mask], y[mask], params, seed=seed + fi,
                                   n_jobs=n_jobs, log_target=log_target)
        pred[held] = model.predict_batch(X[held])
    return pred


def cv_table_csv(result: CvResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_trees", "max_depth", "min_leaf_size", "feature_subsample", "cv_mse", "selected"])
    for p, mse, _ in result.table:
        w.writerow([p.n_trees, "" if p.max_depth is None else p.max_depth, p.min_leaf_size,
                    p.feature_subsample, repr(mse), int(p == result.best)])
    return buf.getvalue()
