"""Random forest classifier and the cross-validation harness built on it.

The forest is grown from scratch on numpy: bagged CART trees with Gini
impurity and sqrt-of-dimension feature subsampling at every split.  On top
of it sit the evaluation drivers used throughout the package: stratified
K-fold accuracy tables and the sample-size sensitivity curve.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import split_kfold

__all__ = [
    "ForestConfig",
    "ForestModel",
    "CvReport",
    "CurvePoint",
    "train_forest",
    "predict",
    "kfold_accuracy",
    "sample_size_curve",
    "cv_report_csv",
    "cv_report_json",
    "curve_csv",
    "curve_json",
]


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    features_per_split: str = "sqrt_total"
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 when set")
        if self.features_per_split != "sqrt_total":
            raise ValueError(
                f"unknown features_per_split rule {self.features_per_split!r}"
            )


@dataclass
class ForestModel:
    """Trained ensemble: nested-dict trees plus the sorted class labels."""

    trees: list
    config: ForestConfig
    classes: np.ndarray
    n_features: int


@dataclass
class CvReport:
    k: int
    per_fold_accuracy: np.ndarray
    mean: float
    std: float
    metadata: dict = field(default_factory=dict)


@dataclass
class CurvePoint:
    size: int
    mean: float
    std: float
    repeat_means: np.ndarray


# ---------------------------------------------------------------------------
# tree growing
# ---------------------------------------------------------------------------

def _best_split(x, y_onehot, feature_ids):
    """Minimum weighted-Gini split over the candidate features.

    Thresholds sit midway between consecutive sorted values so the decision
    boundary lands inside the class gap rather than on an observed point.
    Returns (feature, threshold, weighted_gini) or None when every candidate
    is constant on this node.
    """
    n = x.shape[0]
    sizes_l = np.arange(1, n, dtype=np.float64)
    sizes_r = n - sizes_l
    best = None
    best_w = np.inf
    for f in feature_ids:
        v = x[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        valid = vs[:-1] < vs[1:]
        if not valid.any():
            continue
        left = np.cumsum(y_onehot[order], axis=0)[:-1]
        right = left[-1] + y_onehot[order[-1]] - left
        gini_l = 1.0 - (left * left).sum(axis=1) / (sizes_l * sizes_l)
        gini_r = 1.0 - (right * right).sum(axis=1) / (sizes_r * sizes_r)
        weighted = (sizes_l * gini_l + sizes_r * gini_r) / n
        weighted[~valid] = np.inf
        i = int(np.argmin(weighted))
        if weighted[i] < best_w:
            threshold = 0.5 * (vs[i] + vs[i + 1])
            if threshold >= vs[i + 1]:  # adjacent floats round up
                threshold = vs[i]
            best_w = float(weighted[i])
            best = (int(f), float(threshold), best_w)
    return best


def _grow(x, y, n_classes, mtry, rng, config, depth):
    votes = np.bincount(y, minlength=n_classes)
    node = {"votes": votes}
    if (
        x.shape[0] < config.min_samples_split
        or (config.max_depth is not None and depth >= config.max_depth)
        or votes.max() == x.shape[0]
    ):
        return node
    feature_ids = rng.choice(x.shape[1], size=mtry, replace=False)
    onehot = np.zeros((x.shape[0], n_classes))
    onehot[np.arange(x.shape[0]), y] = 1.0
    split = _best_split(x, onehot, feature_ids)
    if split is None:
        return node
    f, threshold, _ = split
    mask = x[:, f] <= threshold
    return {
        "feature": f,
        "threshold": threshold,
        "left": _grow(x[mask], y[mask], n_classes, mtry, rng, config, depth + 1),
        "right": _grow(x[~mask], y[~mask], n_classes, mtry, rng, config, depth + 1),
    }


def train_forest(features, labels, config: ForestConfig = ForestConfig()) -> ForestModel:
    """Grow n_trees bagged CART trees, one RNG stream per tree.

    Per-tree streams are seeded from (config.seed, tree index), so growing
    trees in parallel or serially yields bit-identical forests.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {x.shape[0]} rows")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError(f"need both classes present, got only {classes[0]!r}")
    n, d = x.shape
    mtry = min(d, math.ceil(math.sqrt(d)))
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng((config.seed, t))
        boot = rng.integers(0, n, size=n)
        trees.append(_grow(x[boot], y[boot], classes.size, mtry, rng, config, 0))
    return ForestModel(trees=trees, config=config, classes=classes, n_features=d)


def _tree_vote(node, row):
    while "votes" not in node:
        node = node["left"] if row[node["feature"]] <= node["threshold"] else node["right"]
    # leaf majority, ties toward the lower class index
    return int(np.argmax(node["votes"]))


def predict(model: ForestModel, features):
    """Majority vote over trees; ties break toward the lower class index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.n_features:
        raise ValueError(
            f"feature dimension {x.shape[1]} != training dimension {model.n_features}"
        )
    out = np.empty(x.shape[0], dtype=int)
    n_classes = model.classes.size
    for i, row in enumerate(x):
        counts = np.zeros(n_classes, dtype=int)
        for tree in model.trees:
            counts[_tree_vote(tree, row)] += 1
        out[i] = int(np.argmax(counts))
    return model.classes[out]


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

def kfold_accuracy(features, labels, k: int, seed: int,
                   config: ForestConfig = ForestConfig()) -> CvReport:
    """Stratified K-fold accuracy; a fresh forest is trained per fold."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    splits = split_kfold(x.shape[0], k, labels, seed)
    acc = np.empty(k, dtype=np.float64)
    for f, (train_idx, test_idx) in enumerate(splits):
        model = train_forest(x[train_idx], labels[train_idx], config)
        pred = predict(model, x[test_idx])
        acc[f] = float(np.mean(pred == labels[test_idx]))
    return CvReport(
        k=k,
        per_fold_accuracy=acc,
        mean=float(acc.mean()),
        std=float(acc.std()),  # population estimator, ddof=0
        metadata={"std_estimator": "population", "split_seed": seed,
                  "forest_seed": config.seed, "n_trees": config.n_trees},
    )


def _stratified_subsample(labels, size, rng):
    """Index subset of the requested size with class proportions preserved.

    Every class keeps at least one member; indices come back sorted so a
    full-size draw reproduces the original row order exactly.
    """
    classes, y = np.unique(labels, return_inverse=True)
    n = labels.shape[0]
    counts = np.bincount(y)
    take = np.maximum(1, np.floor(size * counts / n).astype(int))
    take = np.minimum(take, counts)
    # distribute the remainder to the largest fractional parts
    while take.sum() < size:
        frac = size * counts / n - take
        frac[take >= counts] = -np.inf
        take[int(np.argmax(frac))] += 1
    while take.sum() > size:
        slack = take > 1
        take[np.flatnonzero(slack)[-1]] -= 1
    chosen = []
    for c in range(classes.size):
        pool = np.flatnonzero(y == c)
        chosen.append(rng.choice(pool, size=take[c], replace=False))
    return np.sort(np.concatenate(chosen))


def sample_size_curve(features, labels, sizes, repeats: int = 100, k: int = 3,
                      seed: int = 0, config: ForestConfig = ForestConfig()):
    """Accuracy vs training-set size, error bars over repeated subsamples.

    For each size, `repeats` stratified subsamples are drawn and a full
    K-fold run scores each; the point aggregates the per-repeat means.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if not sizes:
        raise ValueError("sizes must be non-empty")
    for size in sizes:
        if size < k:
            raise ValueError(f"size {size} < k={k}")
        if size > n:
            raise ValueError(f"size {size} exceeds {n} samples")
    points = []
    for si, size in enumerate(sizes):
        means = np.empty(repeats, dtype=np.float64)
        for r in range(repeats):
            rng = np.random.default_rng((seed, si, r))
            idx = _stratified_subsample(labels, size, rng)
            fold_seed = int(rng.integers(2**31))
            report = kfold_accuracy(x[idx], labels[idx], k, fold_seed, config)
            means[r] = report.mean
        points.append(CurvePoint(
            size=int(size),
            mean=float(means.mean()),
            std=float(means.std()),
            repeat_means=means,
        ))
    return points


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def cv_report_csv(report: CvReport) -> str:
    lines = ["k,fold,accuracy"]
    for f, a in enumerate(report.per_fold_accuracy):
        lines.append(f"{report.k},{f},{repr(float(a))}")
    return "\n".join(lines) + "\n"


def cv_report_json(report: CvReport) -> str:
    return json.dumps({
        "k": report.k,
        "per_fold_accuracy": [float(a) for a in report.per_fold_accuracy],
        "mean": report.mean,
        "std": report.std,
        "metadata": report.metadata,
    }, indent=2)


def curve_csv(points) -> str:
    lines = ["size,mean,std"]
    for p in points:
        lines.append(f"{p.size},{repr(p.mean)},{repr(p.std)}")
    return "\n".join(lines) + "\n"


def curve_json(points) -> str:
    return json.dumps([
        {"size": p.size, "mean": p.mean, "std": p.std,
         "repeat_means": [float(m) for m in p.repeat_means]}
        for p in points
    ], indent=2)
