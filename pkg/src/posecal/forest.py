"""Random forest classifier with Laplace-smoothed leaf probabilities.

Trees are grown with Gini impurity CART. Candidate features at each node are
drawn without replacement; drawing continues past constant features until
``features_per_split`` informative ones have been scored. Tree induction runs
in a numba kernel that releases the GIL, so trees can be grown on threads.
Every tree draws from its own PCG64 stream keyed by (seed, tree index).
"""

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .core import N_PATCHES, N_VIEWS, InvalidArgument, derive_seed, rng_for

PCF_MAGIC = b"PCF1"
PCF_VERSION = 1
TAG_LEAF = 0
TAG_SPLIT = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 20
    n_classes: int = N_VIEWS
    features_per_split: int = None  # None resolves to floor(sqrt(n_features))
    min_samples_leaf: int = 1
    bootstrap: bool = True
    laplace: float = 1.0
    seed: int = 0

    def resolved(self, n_features):
        k = self.features_per_split or max(1, math.isqrt(n_features))
        if self.n_trees < 1:
            raise InvalidArgument("n_trees must be >= 1")
        if not 1 <= k <= n_features:
            raise InvalidArgument(f"features_per_split must lie in 1..{n_features}, got {k}")
        if self.laplace <= 0:
            raise InvalidArgument("laplace must be > 0")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise InvalidArgument("max_depth must be >= 0 and min_samples_leaf >= 1")
        return replace(self, features_per_split=k)


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf.

    ``counts`` holds the class histogram of the training samples reaching
    every node (children always have larger ids than their parent).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def is_leaf(self):
        return self.feature < 0

    def depth(self):
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in np.flatnonzero(~self.is_leaf):
            d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, X):
        """Leaf id reached by each row of ``X``."""
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = ~self.is_leaf[node]
        while active.any():
            idx = rows[active]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = ~self.is_leaf[node[idx]]
        return node

    def leaf_proba(self, laplace):
        c = self.counts.astype(np.float64)
        return (c + laplace) / (c.sum(axis=1, keepdims=True) + c.shape[1] * laplace)

    def predict_proba(self, X, laplace=1.0):
        return self.leaf_proba(laplace)[self.apply(X)]

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("feature", "threshold", "left", "right", "counts"))


@dataclass
class Forest:
    config: ForestConfig
    trees: list = field(default_factory=list)
    patch_index: int = 0
    n_features: int = 0

    def predict_proba(self, X):
        """Mean of the per-tree smoothed leaf distributions, rows of ``X`` -> (m, n_classes)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float32))
        if not self.trees:
            raise InvalidArgument("forest has no trees")
        total = np.zeros((len(X), self.config.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(X, self.config.laplace)
        return total / len(self.trees)

    def __eq__(self, other):
        return (self.config == other.config and self.patch_index == other.patch_index
                and self.n_features == other.n_features and self.trees == other.trees)


@numba.njit(nogil=True, cache=True)
def _grow(XT, y, sample, n_classes, max_depth, mtry, min_leaf, rng):
    n = sample.shape[0]
    d = XT.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float32)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    counts = np.zeros((cap, n_classes), np.int64)

    idx = sample.copy()
    buf = np.empty(n, np.int64)
    vals = np.empty(n, np.float32)
    perm = np.arange(d)
    lc = np.zeros(n_classes, np.int64)
    rc = np.zeros(n_classes, np.int64)

    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, n, 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node, lo, hi, depth = st_node[top], st_lo[top], st_hi[top], st_depth[top]
        m = hi - lo
        for i in range(lo, hi):
            counts[node, y[idx[i]]] += 1
        n_present = 0
        sq = 0.0
        for c in range(n_classes):
            if counts[node, c] > 0:
                n_present += 1
            sq += counts[node, c] * counts[node, c]
        parent = sq / m
        if depth >= max_depth or n_present <= 1 or m < 2 * min_leaf:
            continue

        best_score = -1.0
        best_f = -1
        best_thr = np.float32(0.0)
        visited = 0
        j = 0
        while visited < mtry and j < d:
            r = j + rng.integers(0, d - j)
            perm[j], perm[r] = perm[r], perm[j]
            f = perm[j]
            j += 1
            vmin = XT[f, idx[lo]]
            vmax = vmin
            for k in range(m):
                v = XT[f, idx[lo + k]]
                vals[k] = v
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
            if vmin == vmax:
                continue
            visited += 1
            order = np.argsort(vals[:m])
            sum_l = 0.0
            sum_r = sq
            for c in range(n_classes):
                lc[c] = 0
                rc[c] = counts[node, c]
            for k in range(m - 1):
                c = y[idx[lo + order[k]]]
                sum_l += 2 * lc[c] + 1
                sum_r -= 2 * rc[c] - 1
                lc[c] += 1
                rc[c] -= 1
                n_l = k + 1
                n_r = m - n_l
                v0 = vals[order[k]]
                v1 = vals[order[k + 1]]
                if v0 == v1 or n_l < min_leaf or n_r < min_leaf:
                    continue
                score = sum_l / n_l + sum_r / n_r
                better = score > best_score
                if not better and score == best_score and f < best_f:
                    better = True
                if better:
                    thr = np.float32((np.float64(v0) + np.float64(v1)) * 0.5)
                    if thr >= v1:
                        thr = v0
                    best_score = score
                    best_f = f
                    best_thr = thr

        if best_f < 0 or best_score <= parent * (1.0 + 1e-12):
            continue

        n_l = 0
        n_r = 0
        for i in range(lo, hi):
            s = idx[i]
            if XT[best_f, s] <= best_thr:
                idx[lo + n_l] = s
                n_l += 1
            else:
                buf[n_r] = s
                n_r += 1
        for i in range(n_r):
            idx[lo + n_l + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = n_nodes + 1, lo + n_l, hi, depth + 1
        top += 1
        st_node[top], st_lo[top], st_hi[top], st_depth[top] = n_nodes, lo, lo + n_l, depth + 1
        top += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy())


def _check_training_data(features, labels, n_classes):
    X = np.ascontiguousarray(features, dtype=np.float32)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) == 0:
        raise InvalidArgument(f"expected a non-empty (n, d) feature matrix, got shape {X.shape}")
    if y.shape != (len(X),):
        raise InvalidArgument("labels must be a vector matching the number of samples")
    if y.min() < 1 or y.max() > n_classes:
        raise InvalidArgument(f"labels must lie in 1..{n_classes}")
    return X, (y - 1).astype(np.int64)


def train_tree(features, labels, config=ForestConfig(), rng=None, sample=None):
    """Grow one CART tree. ``labels`` are 1-based view indices."""
    X, y0 = _check_training_data(features, labels, config.n_classes)
    cfg = config.resolved(X.shape[1])
    if rng is None:
        rng = rng_for(cfg.seed, 0)
    if sample is None:
        sample = np.arange(len(X), dtype=np.int64)
    arrays = _grow(np.ascontiguousarray(X.T), y0, np.asarray(sample, dtype=np.int64), cfg.n_classes, cfg.max_depth,
                   cfg.features_per_split, cfg.min_samples_leaf, rng)
    return DecisionTree(*arrays)


def _train_one(XT, y, cfg, t):
    rng = rng_for(cfg.seed, t)
    n = XT.shape[1]
    sample = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n, dtype=np.int64)
    arrays = _grow(XT, y, sample.astype(np.int64), cfg.n_classes, cfg.max_depth,
                   cfg.features_per_split, cfg.min_samples_leaf, rng)
    return DecisionTree(*arrays)


def train_forest(features, labels, config=ForestConfig(), threads=1, patch_index=0):
    """Train ``config.n_trees`` trees; the result does not depend on ``threads``."""
    X, y0 = _check_training_data(features, labels, config.n_classes)
    cfg = config.resolved(X.shape[1])
    XT = np.ascontiguousarray(X.T)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(lambda t: _train_one(XT, y0, cfg, t), range(cfg.n_trees)))
    else:
        trees = [_train_one(XT, y0, cfg, t) for t in range(cfg.n_trees)]
    return Forest(cfg, trees, patch_index, X.shape[1])


def predict_tree(tree, x, laplace=1.0):
    """Smoothed leaf distribution for a single descriptor."""
    return tree.predict_proba(np.atleast_2d(x), laplace)[0]


def predict_proba(forest, x):
    """Distribution for one descriptor (1-D input) or one row per sample (2-D input)."""
    x = np.asarray(x)
    out = forest.predict_proba(x)
    return out[0] if x.ndim == 1 else out


def train_patch_bank(features, labels, config=ForestConfig(), threads=1):
    """One forest per patch; forest i is seeded from (config.seed, i)."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3:
        raise InvalidArgument(f"expected (n, patches, dim) features, got shape {features.shape}")
    bank = []
    for i in range(features.shape[1]):
        cfg = replace(config, seed=derive_seed(config.seed, i))
        bank.append(train_forest(np.ascontiguousarray(features[:, i, :]), labels, cfg,
                                 threads=threads, patch_index=i))
    return bank


def predict_bank(bank, features):
    """Per-patch posteriors, (m, patches, dim) features -> (m, patches, n_classes)."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim == 2:
        features = features[None]
    return np.stack([f.predict_proba(features[:, f.patch_index, :]) for f in bank], axis=1)


def feature_importance(forest):
    """Mean decrease in Gini impurity per feature, normalized to sum 1.

    Node impurity decreases are weighted by the fraction of the tree's
    training samples that reach the node. A forest without any split node
    returns all zeros.
    """
    imp = np.zeros(forest.n_features)
    for tree in forest.trees:
        splits = np.flatnonzero(~tree.is_leaf)
        if len(splits) == 0:
            continue
        c = tree.counts.astype(np.float64)
        n = c.sum(axis=1)
        weighted = n - (c * c).sum(axis=1) / np.maximum(n, 1)  # n * gini
        gain = weighted[splits] - weighted[tree.left[splits]] - weighted[tree.right[splits]]
        np.add.at(imp, tree.feature[splits], gain / n[0])
    total = imp.sum()
    return imp / total if total > 0 else imp


# --- bank.pcf serialization -------------------------------------------------

_CONFIG = struct.Struct("<IIIIII?dQ")
_SPLIT = np.dtype([("feature", "<u4"), ("threshold", "<f4"), ("left", "<u4"), ("right", "<u4")])


def _node_counts(tree_leaf_counts, left, right, is_leaf):
    counts = tree_leaf_counts.copy()
    for i in range(len(left) - 1, -1, -1):
        if not is_leaf[i]:
            counts[i] = counts[left[i]] + counts[right[i]]
    return counts


def dumps_forests(forests):
    if not forests:
        raise InvalidArgument("nothing to serialize")
    cfg = forests[0].config
    parts = [PCF_MAGIC, struct.pack("<III", PCF_VERSION, len(forests), forests[0].n_features),
             _CONFIG.pack(cfg.n_trees, cfg.max_depth, cfg.n_classes, cfg.features_per_split,
                          cfg.min_samples_leaf, 0, cfg.bootstrap, cfg.laplace, cfg.seed)]
    for f in forests:
        parts.append(struct.pack("<IQI", f.patch_index, f.config.seed, len(f.trees)))
        for t in f.trees:
            leaf = t.is_leaf
            parts.append(struct.pack("<I", t.n_nodes))
            parts.append(np.where(leaf, TAG_LEAF, TAG_SPLIT).astype(np.uint8).tobytes())
            rec = np.empty(int((~leaf).sum()), dtype=_SPLIT)
            rec["feature"] = t.feature[~leaf]
            rec["threshold"] = t.threshold[~leaf]
            rec["left"] = t.left[~leaf]
            rec["right"] = t.right[~leaf]
            parts.append(rec.tobytes())
            parts.append(t.counts[leaf].astype("<u4").tobytes())
    return b"".join(parts)


def loads_forests(raw):
    if raw[:4] != PCF_MAGIC:
        raise InvalidArgument("not a PCF1 model file")
    version, n_forests, n_features = struct.unpack_from("<III", raw, 4)
    if version != PCF_VERSION:
        raise InvalidArgument(f"unsupported model version {version}")
    off = 16
    n_trees, max_depth, n_classes, k, min_leaf, _, bootstrap, laplace, seed = \
        _CONFIG.unpack_from(raw, off)
    off += _CONFIG.size
    base = ForestConfig(n_trees, max_depth, n_classes, k, min_leaf, bootstrap, laplace, seed)
    forests = []
    for _ in range(n_forests):
        patch_index, fseed, nt = struct.unpack_from("<IQI", raw, off)
        off += 16
        trees = []
        for _ in range(nt):
            (nn,) = struct.unpack_from("<I", raw, off)
            off += 4
            tags = np.frombuffer(raw, np.uint8, nn, off)
            off += nn
            leaf = tags == TAG_LEAF
            n_split = int((~leaf).sum())
            rec = np.frombuffer(raw, _SPLIT, n_split, off)
            off += rec.nbytes
            leaf_counts = np.frombuffer(raw, "<u4", int(leaf.sum()) * n_classes, off)
            off += leaf_counts.nbytes
            feature = np.full(nn, -1, np.int32)
            threshold = np.zeros(nn, np.float32)
            left = np.full(nn, -1, np.int32)
            right = np.full(nn, -1, np.int32)
            counts = np.zeros((nn, n_classes), np.int64)
            feature[~leaf] = rec["feature"]
            threshold[~leaf] = rec["threshold"]
            left[~leaf] = rec["left"]
            right[~leaf] = rec["right"]
            counts[leaf] = leaf_counts.reshape(-1, n_classes)
            counts = _node_counts(counts, left, right, leaf)
            trees.append(DecisionTree(feature, threshold, left, right, counts))
        forests.append(Forest(replace(base, seed=fseed), trees, patch_index, n_features))
    return forests


def save_forests(path, forests):
    with open(path, "wb") as fh:
        fh.write(dumps_forests(forests))


def load_forests(path):
    with open(path, "rb") as fh:
        return loads_forests(fh.read())


def is_patch_bank(forests):
    return len(forests) == N_PATCHES and [f.patch_index for f in forests] == list(range(N_PATCHES))
