"""Random-forest regression, cross-validation and evaluation metrics."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import _kernels as K
from .errors import UndefinedMetricError, ValidationError
from .geo import Raster

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters.

    ``max_features`` is an int count, a float fraction of p, or None for
    ceil(p/3). ``bootstrap=False`` fits every tree on the full table, which is
    only useful for testing.
    """

    n_trees: int = 100
    max_features: Union[int, float, None] = None
    min_samples_leaf: int = 1
    max_depth: Optional[int] = None
    bootstrap_size: float = 1.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValidationError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValidationError("max_depth must be >= 0")
        if not self.bootstrap_size > 0:
            raise ValidationError("bootstrap_size must be > 0")
        if not (0 <= self.seed <= MASK64):
            raise ValidationError("seed must fit in 64 unsigned bits")

    def resolve_max_features(self, p: int) -> int:
        mf = self.max_features
        if mf is None:
            m = math.ceil(p / 3)
        elif isinstance(mf, float):
            if not 0 < mf <= 1:
                raise ValidationError(f"max_features fraction must be in (0, 1], got {mf}")
            m = max(1, math.ceil(mf * p))
        else:
            m = int(mf)
        if not 1 <= m <= p:
            raise ValidationError(f"max_features={m} outside [1, {p}]")
        return m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ForestParams":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Binary regression tree as parallel node arrays; leaves have feature -1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    def __post_init__(self):
        for name, dtype in (("feature", np.int64), ("threshold", np.float64), ("left", np.int64),
                            ("right", np.int64), ("value", np.float64), ("n_samples", np.int64)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.feature)
        if n == 0:
            raise ValidationError("tree has no nodes")
        if any(len(getattr(self, a)) != n for a in ("threshold", "left", "right", "value", "n_samples")):
            raise ValidationError("tree node arrays differ in length")

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def depth(self) -> int:
        return int(K.tree_depth(self.feature, self.left, self.right))

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return K.predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def expected_value(self) -> float:
        return float(K.expected_value(self.feature, self.left, self.right, self.value, self.n_samples))

    def check(self, p: Optional[int] = None):
        """Raise ValidationError unless the node arrays form a consistent tree."""
        internal = ~self.is_leaf
        if p is not None and np.any(self.feature[internal] >= p):
            raise ValidationError("tree references a feature index >= p")
        kids = np.concatenate([self.left[internal], self.right[internal]])
        if np.any(kids <= 0) or np.any(kids >= self.n_nodes) or len(np.unique(kids)) != len(kids):
            raise ValidationError("tree child pointers are inconsistent")
        if len(kids) != self.n_nodes - 1:
            raise ValidationError("tree is not connected")
        if np.any(self.left[~internal] != -1) or np.any(self.right[~internal] != -1):
            raise ValidationError("leaf with children")
        if not np.all(np.isfinite(self.value)) or not np.all(np.isfinite(self.threshold)):
            raise ValidationError("non-finite value in tree")
        if np.any(self.n_samples[internal] != self.n_samples[self.left[internal]] + self.n_samples[self.right[internal]]):
            raise ValidationError("node sample counts do not add up")

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return all(np.array_equal(getattr(self, a), getattr(other, a))
                   for a in ("feature", "threshold", "left", "right", "value", "n_samples"))


@dataclass(eq=False)
class ForestModel:
    params: ForestParams
    trees: List[RegressionTree]
    feature_names: List[str]
    label_name: str = ""
    normalization: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trees) == 0:
            raise ValidationError("a forest needs at least one tree")
        p = len(self.feature_names)
        for t in self.trees:
            t.check(p)
        self._packed = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def packed(self):
        if self._packed is None:
            sizes = [t.n_nodes for t in self.trees]
            offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
            offsets[1:] = np.cumsum(sizes)
            cat = {a: np.concatenate([getattr(t, a) for t in self.trees])
                   for a in ("feature", "threshold", "left", "right", "value")}
            self._packed = (offsets, cat["feature"], cat["threshold"], cat["left"], cat["right"], cat["value"])
        return self._packed

    def predict_raw(self, X) -> np.ndarray:
        """Unclamped ensemble mean for each row of X."""
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {X.shape[1]}")
        return K.predict_packed(X, *self.packed())

    def __eq__(self, other):
        if not isinstance(other, ForestModel):
            return NotImplemented
        return (self.params == other.params and self.feature_names == other.feature_names
                and self.label_name == other.label_name and self.normalization == other.normalization
                and len(self.trees) == len(other.trees)
                and all(a == b for a, b in zip(self.trees, other.trees)))


def _as_xy(X, y):
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"bad training shapes X{X.shape} y{y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("training data must be finite")
    return X, y


def _tree_seed(seed: int, index: int) -> int:
    return (seed ^ index) & MASK64


def _fit_one(X, y, params: ForestParams, tree_index: int) -> RegressionTree:
    n, p = X.shape
    size = max(1, int(round(params.bootstrap_size * n)))
    arrays = K.fit_tree_kernel(
        X, y, np.uint64(_tree_seed(params.seed, tree_index)), params.bootstrap, size,
        params.resolve_max_features(p), params.min_samples_leaf,
        -1 if params.max_depth is None else params.max_depth,
    )
    return RegressionTree(*arrays)


def fit_tree(X, y, params: ForestParams = ForestParams(bootstrap=False), tree_index: int = 0) -> RegressionTree:
    """Fit a single CART regression tree.

    With the default params this uses all rows once and ceil(p/3) features per
    split; pass ``max_features=p`` for a deterministic exhaustive tree.
    """
    X, y = _as_xy(X, y)
    if X.shape[0] < 1:
        raise ValidationError("cannot fit a tree on zero rows")
    return _fit_one(X, y, params, tree_index)


def fit_forest(X, y, params: ForestParams = ForestParams(), feature_names: Optional[Sequence[str]] = None,
               label_name: str = "", normalization: Optional[dict] = None, threads: int = 1) -> ForestModel:
    X, y = _as_xy(X, y)
    if X.shape[0] < 2:
        raise ValidationError("fit_forest needs at least 2 rows")
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(X.shape[1])]
    if len(feature_names) != X.shape[1]:
        raise ValidationError("feature_names length does not match X")
    params.resolve_max_features(X.shape[1])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(lambda i: _fit_one(X, y, params, i), range(params.n_trees)))
    else:
        trees = [_fit_one(X, y, params, i) for i in range(params.n_trees)]
    return ForestModel(params, trees, list(feature_names), label_name, dict(normalization or {}))


@dataclass
class StackPrediction:
    prediction: Raster
    unclamped: Raster


def predict(model: ForestModel, features):
    """Predict a single vector, a matrix of rows, or a whole FeatureStack.

    Vectors and matrices return raw ensemble means. A FeatureStack returns a
    StackPrediction whose ``prediction`` raster is clamped to [0, 1] and whose
    ``unclamped`` raster keeps the raw values.
    """
    from .features import FeatureStack

    if isinstance(features, FeatureStack):
        return predict_stack(model, features)
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 1:
        return float(model.predict_raw(arr[None, :])[0])
    return model.predict_raw(arr)


def _renormalize(model: ForestModel, stack) -> Dict[str, np.ndarray]:
    layers = {}
    for name in model.feature_names:
        if name not in stack.layers:
            raise ValidationError(f"stack lacks feature layer {name!r}")
        vals = stack.layers[name].values
        train = model.normalization.get(name)
        have = stack.provenance.get(name, {}).get("normalization")
        if train and have and (train["min"], train["max"]) != (have["min"], have["max"]):
            raw = vals * (have["max"] - have["min"]) + have["min"] if have["max"] > have["min"] else \
                np.full_like(vals, have["min"])
            span = train["max"] - train["min"]
            vals = (raw - train["min"]) / span if span > 0 else np.full_like(vals, 0.5)
        layers[name] = vals
    return layers


def predict_stack(model: ForestModel, stack) -> StackPrediction:
    ordered = list(stack.layers)
    if ordered != model.feature_names:
        missing = [n for n in model.feature_names if n not in stack.layers]
        if missing:
            raise ValidationError(f"stack lacks feature layers {missing}")
    layers = _renormalize(model, stack)
    spec = stack.spec
    mask = np.zeros(spec.shape, dtype=bool)
    for name in model.feature_names:
        mask |= stack.layers[name].nodata_mask
    rows = np.flatnonzero(~mask.ravel())
    X = np.column_stack([layers[n].ravel()[rows] for n in model.feature_names])
    raw = np.full(spec.n_cells, np.nan)
    if len(rows):
        raw[rows] = model.predict_raw(X)
    raw = raw.reshape(spec.shape)
    return StackPrediction(
        prediction=Raster(spec, np.clip(raw, 0.0, 1.0), mask),
        unclamped=Raster(spec, raw, mask),
    )


# --- metrics ----------------------------------------------------------------


def _paired(y_true, y_pred):
    a = np.asarray(y_true, dtype=np.float64).ravel()
    b = np.asarray(y_pred, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValidationError("metrics need at least one value")
    return a, b


def r_squared(y_true, y_pred) -> float:
    a, b = _paired(y_true, y_pred)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("r_squared is undefined for constant y_true")
    return 1.0 - float(np.sum((a - b) ** 2)) / ss_tot


def rmse(y_true, y_pred) -> float:
    a, b = _paired(y_true, y_pred)
    return math.sqrt(float(np.mean((a - b) ** 2)))


# --- cross-validation -------------------------------------------------------


@dataclass
class EvalReport:
    label_name: str
    n_folds: int
    mode: str
    seed: int
    fold_r_squared: List[float]
    fold_rmse: List[float]
    fold_sizes: List[int]

    @property
    def mean_r_squared(self) -> float:
        return float(np.mean(self.fold_r_squared))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.fold_rmse))

    def to_dict(self) -> dict:
        return {
            "label_name": self.label_name,
            "n_folds": self.n_folds,
            "mode": self.mode,
            "seed": self.seed,
            "fold_r_squared": list(self.fold_r_squared),
            "fold_rmse": list(self.fold_rmse),
            "fold_sizes": list(self.fold_sizes),
            "mean_r_squared": self.mean_r_squared,
            "mean_rmse": self.mean_rmse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        keys = ("label_name", "n_folds", "mode", "seed", "fold_r_squared", "fold_rmse", "fold_sizes")
        return cls(**{k: d[k] for k in keys})


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    return K.permutation(K.seed_state(np.uint64(seed & MASK64)), n)


def kfold_indices(n_rows: int, n_folds: int = 5, seed: int = 0) -> List[np.ndarray]:
    """Shuffle once, then cut into near-equal contiguous folds (sizes differ by <= 1)."""
    if n_folds < 2:
        raise ValidationError("n_folds must be >= 2")
    if n_rows < n_folds:
        raise ValidationError(f"{n_rows} rows cannot fill {n_folds} folds")
    order = seeded_permutation(n_rows, seed)
    return [np.sort(f) for f in np.array_split(order, n_folds)]


def resample_splits(n_rows: int, n_splits: int = 5, seed: int = 0, test_fraction: float = 0.2) -> List[np.ndarray]:
    if n_splits < 2:
        raise ValidationError("n_splits must be >= 2")
    n_test = max(1, int(round(test_fraction * n_rows)))
    if n_rows < 2 or n_test >= n_rows:
        raise ValidationError(f"{n_rows} rows are too few for a {test_fraction:.0%} test split")
    return [np.sort(seeded_permutation(n_rows, (seed + k) & MASK64)[:n_test]) for k in range(n_splits)]


def cross_validate(X, y, params: ForestParams = ForestParams(), n_folds: int = 5, seed: Optional[int] = None,
                   mode: str = "partition", label_name: str = "", threads: int = 1) -> EvalReport:
    """Random k-fold evaluation; each fold is held out once as the test set.

    ``mode="resample"`` instead draws ``n_folds`` independent 80-20 splits.
    """
    X, y = _as_xy(X, y)
    seed = params.seed if seed is None else seed
    n = X.shape[0]
    if mode == "partition":
        tests = kfold_indices(n, n_folds, seed)
    elif mode == "resample":
        tests = resample_splits(n, n_folds, seed)
    else:
        raise ValidationError(f"unknown cv mode {mode!r}")
    r2s, errs, sizes = [], [], []
    for test in tests:
        train = np.setdiff1d(np.arange(n), test, assume_unique=True)
        model = fit_forest(X[train], y[train], params, threads=threads)
        pred = model.predict_raw(X[test])
        r2s.append(r_squared(y[test], pred))
        errs.append(rmse(y[test], pred))
        sizes.append(int(len(test)))
    return EvalReport(label_name, n_folds, mode, int(seed), r2s, errs, sizes)
