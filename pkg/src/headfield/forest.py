"""CART regression trees and a random-forest ensemble, built from scratch.

Trees are grown greedily: at each node the split minimizing the weighted
child mean-squared error is chosen over candidate thresholds placed at
midpoints between consecutive distinct sorted feature values, with ties
broken toward the lowest feature index and then the lowest threshold. Rows
route left when ``feature < threshold``. Candidate splits must leave at
least ``min_samples_leaf`` rows on each side; a node stops when it is pure,
has fewer than ``2 * min_samples_leaf`` rows, hits the depth limit, or has
no valid candidate.

The ensemble bootstraps each tree (same size as the training set) from an
RNG derived from (seed, tree index), so results do not depend on training
order of the trees and are bitwise reproducible. Out-of-bag error and
mean-decrease-impurity importances are computed at fit time.

Trees are stored as flat preorder arrays (feature == -1 marks a leaf),
which is also the serialization layout and what the numba kernels traverse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ModelFormatError
from .features import FEATURE_COLUMNS, N_FEATURES

_MAGIC = "HFRF1"


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 30
    min_samples_leaf: int = 5
    max_depth: int | None = None
    features_per_split: int = N_FEATURES
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not (1 <= self.features_per_split <= N_FEATURES):
            raise ValueError(f"features_per_split must be in 1..{N_FEATURES}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")


@dataclass(frozen=True)
class Tree:
    """Flat preorder node arrays; feature[i] == -1 marks a leaf."""

    feature: np.ndarray  # int8
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64, mean target of the node's training rows
    n_samples: np.ndarray  # int32
    impurity: np.ndarray  # float64, node MSE

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]


@dataclass(frozen=True)
class ForestModel:
    params: ForestParams
    seed: int
    trees: list[Tree]
    oob_mse: float
    importances: np.ndarray  # (5,), sums to 1
    importances_degenerate: bool = field(default=False)  # all-leaf forest convention


@njit(cache=True)
def _xorshift(state: np.uint64) -> np.uint64:
    state ^= state >> np.uint64(12)
    state ^= state << np.uint64(25)
    state ^= state >> np.uint64(27)
    return state * np.uint64(0x2545F4914F6CDD1D)


@njit(cache=True)
def _grow(X, y, sample_idx, min_samples_leaf, max_depth, mtry, feature_seed):
    """Grow one CART tree; returns flat preorder-ish node arrays."""
    m = sample_idx.shape[0]
    n_feat = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int8)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap, dtype=np.float64)
    n_samples = np.zeros(cap, dtype=np.int32)
    impurity = np.zeros(cap, dtype=np.float64)

    idx = sample_idx.copy()
    tmp = np.empty(m, dtype=np.int64)
    vals = np.empty(m, dtype=np.float64)
    ys = np.empty(m, dtype=np.float64)
    feat_pool = np.empty(n_feat, dtype=np.int64)
    chosen = np.empty(n_feat, dtype=np.int64)

    stack = np.empty((cap, 4), dtype=np.int64)  # start, end, depth, node_id
    stack[0] = (0, m, 0, 0)
    sp = 1
    n_nodes = 1
    rng_state = np.uint64(feature_seed) if feature_seed != 0 else np.uint64(0x9E3779B97F4A7C15)

    while sp > 0:
        sp -= 1
        start, end, depth, node = stack[sp]
        n = end - start
        s = 0.0
        s2 = 0.0
        ymin = y[idx[start]]
        ymax = ymin
        for i in range(start, end):
            yv = y[idx[i]]
            s += yv
            s2 += yv * yv
            if yv < ymin:
                ymin = yv
            if yv > ymax:
                ymax = yv
        mean = s / n
        imp = s2 / n - mean * mean
        if imp < 0.0:
            imp = 0.0
        value[node] = mean
        n_samples[node] = n
        impurity[node] = imp

        if n < 2 * min_samples_leaf or ymin == ymax or (max_depth >= 0 and depth >= max_depth):
            continue

        # feature subset for this node (all features, in order, when mtry == n_feat)
        if mtry >= n_feat:
            n_chosen = n_feat
            for f in range(n_feat):
                chosen[f] = f
        else:
            for f in range(n_feat):
                feat_pool[f] = f
            for j in range(mtry):
                rng_state = _xorshift(rng_state)
                pick = j + np.int64(rng_state % np.uint64(n_feat - j))
                feat_pool[j], feat_pool[pick] = feat_pool[pick], feat_pool[j]
            chosen[:mtry] = np.sort(feat_pool[:mtry])
            n_chosen = mtry

        best_gain = -1.0
        best_f = -1
        best_t = 0.0
        for fi in range(n_chosen):
            f = chosen[fi]
            for i in range(n):
                vals[i] = X[idx[start + i], f]
            order = np.argsort(vals[:n], kind="quicksort")
            for i in range(n):
                ys[i] = y[idx[start + order[i]]]
            sl = 0.0
            prev = vals[order[0]]
            for i in range(n - 1):
                sl += ys[i]
                v = vals[order[i + 1]]
                if v == prev:
                    continue
                nl = i + 1
                nr = n - nl
                if nl >= min_samples_leaf and nr >= min_samples_leaf:
                    sr = s - sl
                    gain = sl * sl / nl + sr * sr / nr
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_t = (prev + v) / 2.0
                prev = v
        if best_f < 0:
            continue

        nb_left = 0
        for i in range(start, end):
            if X[idx[i], best_f] < best_t:
                tmp[nb_left] = idx[i]
                nb_left += 1
        k = nb_left
        for i in range(start, end):
            if not (X[idx[i], best_f] < best_t):
                tmp[k] = idx[i]
                k += 1
        for i in range(n):
            idx[start + i] = tmp[i]

        feature[node] = best_f
        threshold[node] = best_t
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        stack[sp] = (start + nb_left, end, depth + 1, rid)
        sp += 1
        stack[sp] = (start, start + nb_left, depth + 1, lid)
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        n_samples[:n_nodes].copy(),
        impurity[:n_nodes].copy(),
    )


@njit(cache=True)
def _traverse(feature, threshold, left, right, value, X, out):
    for i in range(X.shape[0]):
        node = 0
        f = feature[node]
        while f >= 0:
            if X[i, f] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
            f = feature[node]
        out[i] = value[node]


def _as_matrix(X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ValueError(f"feature matrix must be (n, {N_FEATURES}), got {X.shape}")
    return X


def fit_tree(
    X: np.ndarray, y: np.ndarray, params: ForestParams = ForestParams(), feature_seed: int = 0
) -> Tree:
    """Grow a single tree on all given rows (no bootstrap)."""
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape[0] != X.shape[0] or y.shape[0] == 0:
        raise ValueError("need at least one row with matching target length")
    depth = -1 if params.max_depth is None else params.max_depth
    arrays = _grow(
        X,
        y,
        np.arange(X.shape[0], dtype=np.int64),
        params.min_samples_leaf,
        depth,
        params.features_per_split,
        np.uint64(feature_seed & (2**64 - 1)),
    )
    return Tree(*arrays)


def tree_predict(tree: Tree, X: np.ndarray) -> np.ndarray:
    X = _as_matrix(X)
    out = np.empty(X.shape[0], dtype=np.float64)
    _traverse(tree.feature, tree.threshold, tree.left, tree.right, tree.value, X, out)
    return out


def fit_forest(X: np.ndarray, y: np.ndarray, params: ForestParams, seed: int) -> ForestModel:
    """Fit the ensemble; bootstrap and feature RNG derive from (seed, tree index)."""
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape[0] != X.shape[0] or y.shape[0] == 0:
        raise ValueError("need at least one row with matching target length")
    n = X.shape[0]
    depth = -1 if params.max_depth is None else params.max_depth

    trees: list[Tree] = []
    oob_sum = np.zeros(n)
    oob_count = np.zeros(n, dtype=np.int64)
    buf = np.empty(n, dtype=np.float64)
    for t in range(params.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), t)))
        if params.bootstrap:
            sample_idx = rng.integers(0, n, n)
        else:
            sample_idx = np.arange(n, dtype=np.int64)
        feature_seed = np.uint64(rng.integers(0, 2**63))
        arrays = _grow(
            X, y, sample_idx.astype(np.int64), params.min_samples_leaf, depth,
            params.features_per_split, feature_seed,
        )
        tree = Tree(*arrays)
        trees.append(tree)
        if params.bootstrap:
            in_bag = np.zeros(n, dtype=bool)
            in_bag[sample_idx] = True
            oob_rows = np.flatnonzero(~in_bag)
            if oob_rows.size:
                out = buf[: oob_rows.size]
                _traverse(
                    tree.feature, tree.threshold, tree.left, tree.right, tree.value,
                    X[oob_rows], out,
                )
                oob_sum[oob_rows] += out
                oob_count[oob_rows] += 1

    covered = oob_count > 0
    if params.bootstrap and covered.any():
        pred = oob_sum[covered] / oob_count[covered]
        oob_mse = float(np.mean((pred - y[covered]) ** 2))
    else:
        oob_mse = float("nan")

    importances, degenerate = _mdi_importances(trees)
    return ForestModel(
        params=params,
        seed=int(seed),
        trees=trees,
        oob_mse=oob_mse,
        importances=importances,
        importances_degenerate=degenerate,
    )


def _mdi_importances(trees: list[Tree]) -> tuple[np.ndarray, bool]:
    total = np.zeros(N_FEATURES)
    for tree in trees:
        internal = np.flatnonzero(tree.feature >= 0)
        if internal.size == 0:
            continue
        root_n = float(tree.n_samples[0])
        nl = tree.left[internal]
        nr = tree.right[internal]
        delta = (
            tree.n_samples[internal] * tree.impurity[internal]
            - tree.n_samples[nl] * tree.impurity[nl]
            - tree.n_samples[nr] * tree.impurity[nr]
        ) / root_n
        np.maximum(delta, 0.0, out=delta)  # guard float cancellation
        np.add.at(total, tree.feature[internal].astype(np.int64), delta)
    total /= len(trees)
    s = total.sum()
    if s <= 0.0:
        return np.full(N_FEATURES, 1.0 / N_FEATURES), True
    return total / s, False


def compute_importance(model: ForestModel) -> np.ndarray:
    """Mean-decrease-impurity importances, recomputed from the stored trees."""
    return _mdi_importances(model.trees)[0]


def predict(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Mean of the trees' leaf values, per row."""
    X = _as_matrix(X)
    acc = np.zeros(X.shape[0], dtype=np.float64)
    out = np.empty(X.shape[0], dtype=np.float64)
    for tree in model.trees:
        _traverse(tree.feature, tree.threshold, tree.left, tree.right, tree.value, X, out)
        acc += out
    return acc / len(model.trees)


# --------------------------------------------------------------------------
# Model container: JSON header line, then per tree the arrays
# feature/threshold/left/right/value/n_samples/impurity, little-endian.
# --------------------------------------------------------------------------


def save_forest(path, model: ForestModel) -> None:
    header = {
        "magic": _MAGIC,
        "version": 1,
        "params": {
            "n_trees": model.params.n_trees,
            "min_samples_leaf": model.params.min_samples_leaf,
            "max_depth": model.params.max_depth,
            "features_per_split": model.params.features_per_split,
            "bootstrap": model.params.bootstrap,
        },
        "seed": model.seed,
        "oob_mse": model.oob_mse,
        "importances": [float(v) for v in model.importances],
        "importances_degenerate": model.importances_degenerate,
        "feature_columns": list(FEATURE_COLUMNS),
        "node_counts": [t.n_nodes for t in model.trees],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode())
        for t in model.trees:
            fh.write(np.asarray(t.feature, dtype="<i1").tobytes())
            fh.write(np.asarray(t.threshold, dtype="<f8").tobytes())
            fh.write(np.asarray(t.left, dtype="<i4").tobytes())
            fh.write(np.asarray(t.right, dtype="<i4").tobytes())
            fh.write(np.asarray(t.value, dtype="<f8").tobytes())
            fh.write(np.asarray(t.n_samples, dtype="<i4").tobytes())
            fh.write(np.asarray(t.impurity, dtype="<f8").tobytes())


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ModelFormatError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed header: {exc}") from exc
    if header.get("magic") != _MAGIC or header.get("version") != 1:
        raise ModelFormatError(f"{path}: not a forest model file")
    try:
        params = ForestParams(**header["params"])
        counts = [int(c) for c in header["node_counts"]]
        trees = []
        offset = nl + 1
        for nn in counts:
            sizes = [(np.int8, 1), (np.float64, 8), (np.int32, 4), (np.int32, 4),
                     (np.float64, 8), (np.int32, 4), (np.float64, 8)]
            arrays = []
            for dt, width in sizes:
                nbytes = nn * width
                chunk = raw[offset : offset + nbytes]
                if len(chunk) != nbytes:
                    raise ModelFormatError(f"{path}: truncated tree payload")
                arrays.append(np.frombuffer(chunk, dtype=dt).copy())
                offset += nbytes
            trees.append(Tree(*arrays))
        if offset != len(raw):
            raise ModelFormatError(f"{path}: {len(raw) - offset} trailing bytes")
        return ForestModel(
            params=params,
            seed=int(header["seed"]),
            trees=trees,
            oob_mse=float(header["oob_mse"]),
            importances=np.asarray(header["importances"], dtype=np.float64),
            importances_degenerate=bool(header["importances_degenerate"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: invalid model contents: {exc}") from exc
