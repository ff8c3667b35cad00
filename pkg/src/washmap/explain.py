"""Exact SHAP attributions for forest predictions and their summary."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import _kernels as K
from .errors import ModelCompatibilityError, ValidationError
from .forest import ForestModel, RegressionTree

SHAP_VARIANT = "path-dependent TreeSHAP (node cover weighting)"


@dataclass
class AttributionMatrix:
    base_value: float
    values: np.ndarray
    feature_names: List[str]
    variant: str = SHAP_VARIANT

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        """base_value + row sums; equals the unclamped prediction."""
        return self.base_value + self.values.sum(axis=1)


def _check_covers(tree: RegressionTree):
    internal = tree.feature >= 0
    n = tree.n_samples
    if np.any(n <= 0) or np.any(n[internal] != n[tree.left[internal]] + n[tree.right[internal]]):
        raise ModelCompatibilityError("tree lacks consistent per-node sample counts")


def tree_shap_single(tree: RegressionTree, X, n_features: int) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    _check_covers(tree)
    out = np.zeros((X.shape[0], n_features))
    K.tree_shap_kernel(X, tree.feature, tree.threshold, tree.left, tree.right,
                       tree.value, tree.n_samples, tree.depth(), out)
    return out


def tree_shap(model: ForestModel, X, threads: int = 1) -> AttributionMatrix:
    """Forest attributions, averaged over trees.

    Rows are split into contiguous chunks across ``threads`` workers; each row
    accumulates its trees in model order, so the result does not depend on the
    thread count.
    """
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    p = model.n_features
    if X.shape[1] != p:
        raise ValidationError(f"expected {p} features, got {X.shape[1]}")
    for t in model.trees:
        _check_covers(t)
    acc = np.zeros((X.shape[0], p))
    depths = [t.depth() for t in model.trees]

    def work(lo, hi):
        xs, out = X[lo:hi], acc[lo:hi]
        for t, d in zip(model.trees, depths):
            K.tree_shap_kernel(xs, t.feature, t.threshold, t.left, t.right, t.value, t.n_samples, d, out)

    bounds = np.linspace(0, X.shape[0], max(1, min(threads, X.shape[0])) + 1).astype(int)
    if len(bounds) == 2:
        work(0, X.shape[0])
    else:
        with ThreadPoolExecutor(len(bounds) - 1) as ex:
            list(ex.map(work, bounds[:-1], bounds[1:]))
    n_trees = len(model.trees)
    base = float(np.mean([t.expected_value() for t in model.trees]))
    return AttributionMatrix(base, acc / n_trees, list(model.feature_names))


@dataclass
class FeatureSummary:
    name: str
    rank: int
    mean_abs_shap: float
    correlation: float
    sign: int
    correlation_defined: bool


@dataclass
class SummaryReport:
    features: List[FeatureSummary]
    variant: str = SHAP_VARIANT
    notes: List[str] = field(default_factory=list)

    def by_name(self, name: str) -> FeatureSummary:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "features": [vars(f).copy() for f in self.features],
            "notes": list(self.notes),
        }

    def to_text(self) -> str:
        lines = [f"{'rank':>4}  {'feature':<24} {'mean|shap|':>12} {'corr':>8}  sign"]
        for f in self.features:
            corr = f"{f.correlation:8.4f}" if f.correlation_defined else "     n/a"
            sign = {1: "+", -1: "-", 0: "0"}[f.sign]
            lines.append(f"{f.rank:>4}  {f.name:<24} {f.mean_abs_shap:12.6g} {corr}  {sign}")
        return "\n".join(lines) + "\n"


def _pearson(a: np.ndarray, b: np.ndarray):
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if a.size < 2 or denom == 0.0 or not np.isfinite(denom):
        return 0.0, False
    return float(np.sum(da * db) / denom), True


def summarize_attributions(attr: AttributionMatrix, features) -> SummaryReport:
    """Rank features by mean |SHAP| and report the SHAP-vs-value correlation sign.

    A positive sign means larger feature values push the prediction up.
    Correlation is reported as 0 and flagged undefined when either side is
    constant. Ranks are 0-based (0 = most important); tied importances share
    the lowest rank of the tie.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.shape != attr.values.shape:
        raise ValidationError(f"feature matrix {F.shape} does not match attributions {attr.values.shape}")
    mean_abs = np.abs(attr.values).mean(axis=0) if attr.n_samples else np.zeros(F.shape[1])
    order = sorted(range(len(mean_abs)), key=lambda j: (-mean_abs[j], j))
    ranks = {}
    prev, prev_rank = None, 0
    for pos, j in enumerate(order):
        if prev is None or mean_abs[j] != prev:
            prev_rank = pos
        ranks[j] = prev_rank
        prev = mean_abs[j]
    out, notes = [], []
    for j in order:
        corr, ok = _pearson(F[:, j], attr.values[:, j])
        if not ok:
            notes.append(f"correlation undefined for {attr.feature_names[j]}")
        out.append(FeatureSummary(attr.feature_names[j], ranks[j], float(mean_abs[j]), corr,
                                  int(np.sign(corr)) if ok else 0, ok))
    return SummaryReport(out, attr.variant, notes)
