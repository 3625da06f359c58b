"""CART trees with Gini splits and the bagged 250-tree forest.

Training canonicalizes row order (content digest sort, then a seeded
shuffle) before drawing bootstrap positions, so a permuted copy of the
same training set grows the identical forest.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import container
from .errors import (
    ContainerError,
    EmptyNodeError,
    InvalidSpecError,
    LabelRangeError,
    ShapeMismatchError,
)
from .rng import ROLE_FOREST, derive_rng

FOREST_MAGIC = b"GRRF"
FOREST_VERSION = 1


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 250
    max_features: int | None = None
    bootstrap: bool = True
    max_depth: int | None = None
    min_samples_split: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise InvalidSpecError(f"n_trees must be at least 1, got {self.n_trees}")
        if self.min_samples_split < 2:
            raise InvalidSpecError(f"min_samples_split must be at least 2, got {self.min_samples_split}")

    def resolved_max_features(self, feature_count: int) -> int:
        if self.max_features is None:
            return max(1, math.isqrt(feature_count))
        if not 1 <= self.max_features <= feature_count:
            raise InvalidSpecError(
                f"max_features {self.max_features} outside [1, {feature_count}]"
            )
        return self.max_features


@dataclass
class TreeNode:
    """Internal node (feature >= 0) or leaf (feature -1 with a histogram)."""

    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    histogram: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class RandomForestModel:
    trees: list[TreeNode]
    n_classes: int
    feature_count: int
    config: RfConfig


def gini_impurity(class_counts) -> float:
    """Probability two draws with replacement disagree, from integer counts."""
    counts = np.asarray(class_counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise EmptyNodeError("gini impurity of an empty node is undefined")
    squares = sum(int(c) ** 2 for c in counts)
    return float(total * total - squares) / float(total * total)


def _best_split_cols(data: np.ndarray, labels: np.ndarray, n_classes: int):
    """Best (column, threshold, decrease) over the given data columns, or None."""
    n = data.shape[0]
    if n < 2 or data.shape[1] == 0:
        return None
    data = data.astype(np.float64, copy=False)
    order = np.argsort(data, axis=0, kind="stable")
    svals = np.take_along_axis(data, order, axis=0)
    slabs = labels[order]

    counts = np.bincount(labels, minlength=n_classes)
    sq_left = np.zeros((n - 1, data.shape[1]))
    sq_right = np.zeros((n - 1, data.shape[1]))
    for c in range(n_classes):
        if counts[c] == 0:
            continue
        left = np.cumsum(slabs == c, axis=0)[:-1]
        sq_left += left.astype(np.float64) ** 2
        sq_right += (int(counts[c]) - left).astype(np.float64) ** 2
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    score = sq_left / n_left + sq_right / (n - n_left)
    score = np.where(svals[1:] > svals[:-1], score, -np.inf)

    flat = np.argmax(score.T)
    col, cut = divmod(int(flat), n - 1)
    best_score = float(score[cut, col])
    if not np.isfinite(best_score):
        return None
    parent = float(sum(int(c) ** 2 for c in counts)) / n
    decrease = (best_score - parent) / n
    if decrease <= 0.0:
        return None
    lo = float(svals[cut, col])
    hi = float(svals[cut + 1, col])
    threshold = (lo + hi) / 2.0
    if threshold >= hi:
        threshold = lo
    return col, threshold, decrease


def best_split(rows, labels, candidate_features, n_classes: int):
    """Highest impurity-decrease split over the candidate features.

    Thresholds are midpoints of consecutive distinct values; ties resolve
    to the earliest candidate feature, then the smallest threshold. Returns
    None when no split decreases impurity.
    """
    rows = np.asarray(rows)
    labels = np.asarray(labels)
    feats = np.asarray(list(candidate_features), dtype=np.int64)
    found = _best_split_cols(rows[:, feats], labels, n_classes)
    if found is None:
        return None
    col, threshold, decrease = found
    return int(feats[col]), threshold, decrease


def grow_tree(rows, labels, config: RfConfig, rng, n_classes: int) -> TreeNode:
    """Depth-first CART; a fresh feature sample is drawn at every node."""
    rows = np.asarray(rows)
    labels = np.asarray(labels, dtype=np.int64)
    feature_count = rows.shape[1]
    mf = config.resolved_max_features(feature_count)
    root = TreeNode()
    stack = [(root, np.arange(rows.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        labs = labels[idx]
        hist = np.bincount(labs, minlength=n_classes).astype(np.int64)
        blocked = (
            idx.size < config.min_samples_split
            or int((hist > 0).sum()) <= 1
            or (config.max_depth is not None and depth >= config.max_depth)
        )
        found = None
        if not blocked:
            if mf == feature_count:
                feats = np.arange(feature_count)
            else:
                feats = rng.choice(feature_count, size=mf, replace=False)
            found = _best_split_cols(rows[np.ix_(idx, feats)], labs, n_classes)
        if found is None:
            node.histogram = hist
            continue
        col, threshold, _ = found
        node.feature = int(feats[col])
        node.threshold = threshold
        node.left = TreeNode()
        node.right = TreeNode()
        go_left = rows[idx, node.feature] <= threshold
        stack.append((node.right, idx[~go_left], depth + 1))
        stack.append((node.left, idx[go_left], depth + 1))
    return root


def _canonical_order(matrix: np.ndarray, labels: np.ndarray) -> np.ndarray:
    digests = np.empty(matrix.shape[0], dtype="S16")
    for i in range(matrix.shape[0]):
        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(matrix[i]).tobytes())
        h.update(int(labels[i]).to_bytes(8, "little"))
        digests[i] = h.digest()
    return np.argsort(digests, kind="stable")


def fit_forest(feature_matrix, labels, config: RfConfig, n_classes: int | None = None) -> RandomForestModel:
    """Bagged forest over a feature matrix; fully determined by config.seed."""
    matrix = np.asarray(feature_matrix)
    labels = np.asarray(labels, dtype=np.int64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ShapeMismatchError(f"feature matrix must be [N, F] with N >= 1, got {matrix.shape}")
    if labels.shape != (matrix.shape[0],):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match {matrix.shape[0]} rows"
        )
    if labels.min() < 0:
        raise LabelRangeError("labels must be non-negative")
    inferred = int(labels.max()) + 1
    if n_classes is None:
        n_classes = inferred
    elif inferred > n_classes:
        raise LabelRangeError(f"labels reach {inferred - 1} but n_classes is {n_classes}")
    config.resolved_max_features(matrix.shape[1])

    reorder = _canonical_order(matrix, labels)
    perm = derive_rng(config.seed, ROLE_FOREST, 0).permutation(matrix.shape[0])
    reorder = reorder[perm]
    data = matrix[reorder]
    labs = labels[reorder]

    n = data.shape[0]
    trees = []
    for t in range(config.n_trees):
        rng = derive_rng(config.seed, ROLE_FOREST, 1, t)
        if config.bootstrap:
            picks = rng.integers(0, n, size=n)
            trees.append(grow_tree(data[picks], labs[picks], config, rng, n_classes))
        else:
            trees.append(grow_tree(data, labs, config, rng, n_classes))
    return RandomForestModel(trees=trees, n_classes=n_classes, feature_count=matrix.shape[1], config=config)


def _leaf_distribution(node: TreeNode) -> np.ndarray:
    hist = node.histogram.astype(np.float64)
    return hist / hist.sum()


def predict_proba(model: RandomForestModel, feature_vector) -> np.ndarray:
    """Average of per-tree leaf class distributions."""
    vector = np.asarray(feature_vector, dtype=np.float64)
    if vector.shape != (model.feature_count,):
        raise ShapeMismatchError(
            f"vector shape {vector.shape} does not match feature count {model.feature_count}"
        )
    acc = np.zeros(model.n_classes)
    for tree in model.trees:
        node = tree
        while not node.is_leaf:
            node = node.left if vector[node.feature] <= node.threshold else node.right
        acc += _leaf_distribution(node)
    return acc / len(model.trees)


def predict_class(model: RandomForestModel, feature_vector) -> int:
    """Argmax of predict_proba; ties break toward the lowest class index."""
    return int(np.argmax(predict_proba(model, feature_vector)))


@dataclass
class _FlatTree:
    features: np.ndarray
    thresholds: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_hist: np.ndarray
    leaf_dist: np.ndarray


def _flatten_tree(root: TreeNode) -> _FlatTree:
    """Pre-order arrays; a leaf stores its histogram row index in `left`."""
    sequence: list[TreeNode] = []
    index: dict[int, int] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        index[id(node)] = len(sequence)
        sequence.append(node)
        if not node.is_leaf:
            stack.append(node.right)
            stack.append(node.left)
    count = len(sequence)
    features = np.full(count, -1, dtype=np.int32)
    thresholds = np.zeros(count, dtype=np.float64)
    left = np.full(count, -1, dtype=np.int32)
    right = np.full(count, -1, dtype=np.int32)
    leaves = []
    for i, node in enumerate(sequence):
        if node.is_leaf:
            left[i] = len(leaves)
            leaves.append(node.histogram)
        else:
            features[i] = node.feature
            thresholds[i] = node.threshold
            left[i] = index[id(node.left)]
            right[i] = index[id(node.right)]
    hists = np.vstack(leaves).astype(np.int64)
    sums = hists.sum(axis=1, keepdims=True).astype(np.float64)
    return _FlatTree(features, thresholds, left, right, hists, hists / sums)


def _flat_trees(model: RandomForestModel) -> list[_FlatTree]:
    cached = getattr(model, "_flat", None)
    if cached is None:
        cached = [_flatten_tree(tree) for tree in model.trees]
        model._flat = cached
    return cached


def predict_proba_matrix(model: RandomForestModel, matrix) -> np.ndarray:
    """predict_proba over every row at once, one vectorized descent per tree."""
    data = np.asarray(matrix, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.feature_count:
        raise ShapeMismatchError(
            f"matrix shape {data.shape} does not match feature count {model.feature_count}"
        )
    acc = np.zeros((data.shape[0], model.n_classes))
    rows = np.arange(data.shape[0])
    for flat in _flat_trees(model):
        pos = np.zeros(data.shape[0], dtype=np.int64)
        active = flat.features[pos] >= 0
        while np.any(active):
            here = pos[active]
            feats = flat.features[here]
            go_left = data[rows[active], feats] <= flat.thresholds[here]
            pos[active] = np.where(go_left, flat.left[here], flat.right[here])
            active = flat.features[pos] >= 0
        acc += flat.leaf_dist[flat.left[pos]]
    return acc / len(model.trees)


def save_forest(model: RandomForestModel, path: str) -> None:
    counts = []
    blobs = []
    for flat in _flat_trees(model):
        counts.append({"nodes": int(flat.features.size), "leaves": int(flat.leaf_hist.shape[0])})
        blobs.extend(
            [
                flat.features.astype("<i4").tobytes(),
                flat.left.astype("<i4").tobytes(),
                flat.right.astype("<i4").tobytes(),
                flat.thresholds.astype("<f8").tobytes(),
                flat.leaf_hist.astype("<i8").tobytes(),
            ]
        )
    header = {
        "config": asdict(model.config),
        "n_classes": model.n_classes,
        "feature_count": model.feature_count,
        "trees": counts,
    }
    payload = container.pack_header(header) + b"".join(blobs)
    container.write_container(path, FOREST_MAGIC, FOREST_VERSION, payload)


def load_forest(path: str) -> RandomForestModel:
    payload = container.read_container(path, FOREST_MAGIC, FOREST_VERSION)
    header, offset = container.unpack_header(payload)
    config = RfConfig(**header["config"])
    n_classes = header["n_classes"]
    trees = []
    for entry in header["trees"]:
        count, leaves = entry["nodes"], entry["leaves"]
        sizes = [4 * count, 4 * count, 4 * count, 8 * count, 8 * leaves * n_classes]
        if offset + sum(sizes) > len(payload):
            raise ContainerError(f"{path}: tree data extends past end of payload")
        features = np.frombuffer(payload[offset : offset + sizes[0]], dtype="<i4")
        offset += sizes[0]
        left = np.frombuffer(payload[offset : offset + sizes[1]], dtype="<i4")
        offset += sizes[1]
        right = np.frombuffer(payload[offset : offset + sizes[2]], dtype="<i4")
        offset += sizes[2]
        thresholds = np.frombuffer(payload[offset : offset + sizes[3]], dtype="<f8")
        offset += sizes[3]
        hists = np.frombuffer(payload[offset : offset + sizes[4]], dtype="<i8").reshape(leaves, n_classes)
        offset += sizes[4]
        nodes = [TreeNode() for _ in range(count)]
        for i in range(count):
            if features[i] < 0:
                nodes[i].histogram = hists[left[i]].copy()
            else:
                nodes[i].feature = int(features[i])
                nodes[i].threshold = float(thresholds[i])
                nodes[i].left = nodes[left[i]]
                nodes[i].right = nodes[right[i]]
        trees.append(nodes[0])
    if offset != len(payload):
        raise ContainerError(f"{path}: {len(payload) - offset} trailing bytes after trees")
    return RandomForestModel(
        trees=trees,
        n_classes=n_classes,
        feature_count=header["feature_count"],
        config=config,
    )
