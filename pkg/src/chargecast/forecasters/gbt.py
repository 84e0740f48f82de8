"""Gradient-boosted regression trees for the quantile objective, from scratch.

Trees live in heap-indexed arrays (node ``i`` has children ``2i+1``/``2i+2``),
which gives every fitted ensemble a stable flat layout. Splits are exact
greedy: every observed value of every feature is a candidate threshold with
the predicate ``x <= thr``, scored by the usual sum-of-squares identity on a
cumulative scan. The winning candidate per feature is re-scored from plain
masked sums in original row order, so scores are reproducible independently
of the scan order and ties resolve by lowest feature index, then lowest
threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pinball import PINBALL_ALPHA, boosting_residuals


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 50
    max_depth: int = 5
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    alpha: float = PINBALL_ALPHA

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0:
            raise ValueError("n_trees must be >= 1 and max_depth >= 0")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.min_samples_leaf < 1:
            raise ValueError(
                f"min_samples_leaf must be at least 1, got {self.min_samples_leaf}"
            )


@dataclass
class Tree:
    """Complete-binary-tree arrays; feature -1 marks a leaf (value holds its output)."""

    max_depth: int
    feature: np.ndarray    # int64, length 2**(max_depth+1) - 1
    threshold: np.ndarray  # float64
    value: np.ndarray      # float64, leaf outputs (0 elsewhere)

    @classmethod
    def empty(cls, max_depth: int) -> "Tree":
        n_nodes = 2 ** (max_depth + 1) - 1
        return cls(
            max_depth=max_depth,
            feature=np.full(n_nodes, -1, dtype=np.int64),
            threshold=np.zeros(n_nodes),
            value=np.zeros(n_nodes),
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth):
            feat = self.feature[node]
            active = feat >= 0
            if not np.any(active):
                break
            rows = np.flatnonzero(active)
            go_left = X[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, 2 * node[rows] + 1, 2 * node[rows] + 2)
        return self.value[node].copy()


def _best_split(X: np.ndarray, y: np.ndarray, idx: np.ndarray,
                min_samples_leaf: int = 1):
    """Exact greedy split over the rows ``idx`` (kept ascending).

    Returns (feature, threshold, left_idx, right_idx) or None when no split
    strictly reduces the sum of squared errors while leaving both children
    at least ``min_samples_leaf`` rows.
    """
    y_node = y[idx]
    n = len(idx)
    total = float(np.sum(y_node))
    parent_score = total * total / n

    best = None  # (gain, feature, threshold)
    for j in range(X.shape[1]):
        x = X[idx, j]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        ys = y_node[order]
        boundary = np.flatnonzero(xs[:-1] < xs[1:])  # split between distinct values
        if min_samples_leaf > 1:
            counts = boundary + 1  # rows going left at each candidate
            boundary = boundary[(counts >= min_samples_leaf)
                                & (n - counts >= min_samples_leaf)]
        if len(boundary) == 0:
            continue
        cum = np.cumsum(ys)
        n_left = boundary + 1.0
        s_left = cum[boundary]
        score = s_left**2 / n_left + (total - s_left) ** 2 / (n - n_left)
        i = int(boundary[int(np.argmax(score))])  # first max keeps the lowest threshold
        thr = float(xs[i])
        # canonical re-score from masked sums in original row order
        mask = x <= thr
        s_l, n_l = float(np.sum(y_node[mask])), int(np.sum(mask))
        s_r, n_r = float(np.sum(y_node[~mask])), n - n_l
        gain = s_l * s_l / n_l + s_r * s_r / n_r - parent_score
        if gain > 0 and (best is None or gain > best[0]):
            best = (gain, j, thr)

    if best is None:
        return None
    _, j, thr = best
    mask = X[idx, j] <= thr
    return j, thr, idx[mask], idx[~mask]


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int,
             min_samples_leaf: int = 1) -> Tree:
    """Fit one least-squares regression tree; leaves predict the mean target."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError(f"need a non-empty 2-D design, got X{X.shape} y{y.shape}")
    tree = Tree.empty(max_depth)
    stack = [(0, 0, np.arange(len(y)))]
    while stack:
        node, depth, idx = stack.pop()
        splittable = depth < max_depth and len(idx) >= max(2, 2 * min_samples_leaf)
        split = _best_split(X, y, idx, min_samples_leaf) if splittable else None
        if split is None:
            tree.value[node] = float(np.mean(y[idx]))
            continue
        j, thr, left, right = split
        tree.feature[node] = j
        tree.threshold[node] = thr
        stack.append((2 * node + 2, depth + 1, right))
        stack.append((2 * node + 1, depth + 1, left))
    return tree


@dataclass
class BoostedTreesModel:
    """Additive tree ensemble: constant start plus learning-rate-scaled trees."""

    config: GbtConfig
    init_value: float
    trees: list
    feature_names: tuple

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.feature_names and X.shape[1] != len(self.feature_names):
            raise ValueError(
                f"expected {len(self.feature_names)} feature columns, got {X.shape[1]}"
            )
        out = np.full(len(X), self.init_value)
        for tree in self.trees:
            out += self.config.learning_rate * tree.predict(X)
        return out

    def predict_kw(self, X: np.ndarray, nominal_power_kw: float) -> np.ndarray:
        """Denormalized forecast in kW, clipped at zero."""
        return np.clip(self.predict(X), 0.0, None) * nominal_power_kw

    def tree_outputs(self, X: np.ndarray) -> np.ndarray:
        """Raw per-tree predictions, one column per tree (no learning rate)."""
        return np.column_stack([tree.predict(X) for tree in self.trees])

    def to_payload(self) -> dict:
        return {
            "n_trees": self.config.n_trees,
            "max_depth": self.config.max_depth,
            "learning_rate": self.config.learning_rate,
            "min_samples_leaf": self.config.min_samples_leaf,
            "alpha": self.config.alpha,
            "init_value": self.init_value,
            "feature_names": list(self.feature_names),
            "trees": [
                {"feature": t.feature, "threshold": t.threshold, "value": t.value}
                for t in self.trees
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "BoostedTreesModel":
        config = GbtConfig(
            n_trees=int(payload["n_trees"]),
            max_depth=int(payload["max_depth"]),
            learning_rate=float(payload["learning_rate"]),
            min_samples_leaf=int(payload.get("min_samples_leaf", 1)),
            alpha=float(payload["alpha"]),
        )
        trees = [
            Tree(
                max_depth=config.max_depth,
                feature=np.asarray(t["feature"], dtype=np.int64),
                threshold=np.asarray(t["threshold"]),
                value=np.asarray(t["value"]),
            )
            for t in payload["trees"]
        ]
        return cls(
            config=config,
            init_value=float(payload["init_value"]),
            trees=trees,
            feature_names=tuple(payload["feature_names"]),
        )


def fit_gbt(X: np.ndarray, y: np.ndarray, config: GbtConfig = GbtConfig(),
            feature_names: tuple = ()) -> BoostedTreesModel:
    """Boost toward the alpha-quantile: start there, then fit trees to the
    per-sample negative subgradient of the pinball loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError(f"need at least 2 training rows, got {len(y)}")
    init = float(np.quantile(y, config.alpha))
    pred = np.full(len(y), init)
    trees = []
    for _ in range(config.n_trees):
        residuals = boosting_residuals(y, pred, config.alpha)
        tree = fit_tree(X, residuals, config.max_depth, config.min_samples_leaf)
        trees.append(tree)
        pred += config.learning_rate * tree.predict(X)
    return BoostedTreesModel(config=config, init_value=init, trees=trees,
                             feature_names=tuple(feature_names))
