"""Histogram gradient-boosted regression trees driven by external gradients.

The engine never sees a loss function: every round receives per-row first
and second derivatives ``(g, h)`` and adds one Newton tree. Trees grow
leaf-wise (best-first) up to ``num_leaves``. With ``lambda_l1`` the leaf
numerator is soft-thresholded, ``lambda_l2`` is added to the denominator::

    w = -T(sum g) / (sum h + lambda_l2),    T(G) = sign(G) max(|G| - lambda_l1, 0)

and split gains follow the same convention (no 1/2 factor)::

    gain = T(G_L)^2/(H_L + l2) + T(G_R)^2/(H_R + l2) - T(G)^2/(H + l2)
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, fields

import numpy as np
from numba import njit

from .errors import ConfigError, ShapeError

HESS_FLOOR = 1e-12


@njit(cache=True)
def _route(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class GbdtParams:
    num_leaves: int = 31
    min_data_in_leaf: int = 20
    max_bin: int = 255
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    bagging_freq: int = 0
    lambda_l1: float = 0.0
    lambda_l2: float = 0.0
    min_sum_hessian_in_leaf: float = 1e-3
    min_gain_to_split: float = 0.0
    max_rounds: int = 3000
    learning_rate: float | None = None
    early_stopping_rounds: int = 50
    seed: int = 0

    # (low, high) of the tuned search space; 0 is also accepted for the
    # regularisers as "off".
    BOUNDS = {
        "num_leaves": (2, 256),
        "min_data_in_leaf": (1, 200),
        "max_bin": (2, 511),
        "feature_fraction": (0.4, 1.0),
        "bagging_fraction": (0.4, 1.0),
        "bagging_freq": (0, 7),
        "lambda_l1": (1e-8, 1.0),
        "lambda_l2": (1e-8, 1.0),
        "min_sum_hessian_in_leaf": (1e-8, 10.0),
        "min_gain_to_split": (1e-8, 10.0),
        "max_rounds": (1, 3000),
        "learning_rate": (1e-4, 1.0),
        "early_stopping_rounds": (0, 3000),
    }
    ZERO_OK = ("lambda_l1", "lambda_l2", "min_sum_hessian_in_leaf", "min_gain_to_split")

    def validate(self) -> "GbdtParams":
        for name, (lo, hi) in self.BOUNDS.items():
            v = getattr(self, name)
            if v is None:
                continue
            if name in self.ZERO_OK and v == 0:
                continue
            if not lo <= v <= hi:
                raise ConfigError(f"gbdt.{name}={v!r} outside [{lo}, {hi}]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"gbdt: unknown keys {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# binning


class BinMapper:
    """Per-feature bin edges; value ``x`` falls in bin ``b`` iff
    ``edges[b-1] < x <= edges[b]``."""

    def __init__(self, edges):
        self.edges = [np.asarray(e, dtype=np.float64) for e in edges]

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def n_bins(self, f: int) -> int:
        return self.edges[f].size + 1

    @classmethod
    def fit(cls, X, max_bin: int) -> "BinMapper":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if not np.all(np.isfinite(X)):
            raise ShapeError("features must be finite")
        edges = []
        for col in X.T:
            u = np.unique(col)
            if u.size <= 1:
                edges.append(np.empty(0))
            elif u.size <= max_bin:
                edges.append((u[:-1] + u[1:]) / 2.0)
            else:
                q = np.quantile(col, np.arange(1, max_bin) / max_bin)
                q = np.unique(q)
                edges.append(q[q < u[-1]])
        return cls(edges)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.empty(X.shape, dtype=np.int32)
        for f, e in enumerate(self.edges):
            out[:, f] = np.searchsorted(e, X[:, f], side="left")
        return out


def build_histograms(features, max_bin: int):
    """Quantile-bin ``features``; returns ``(binned, mapper)``.

    A constant feature gets a single bin and is never split on.
    """
    mapper = BinMapper.fit(features, max_bin)
    return mapper.transform(features), mapper


# ---------------------------------------------------------------------------
# trees


class Tree:
    """Binary tree in flat arrays. ``left[i] < 0`` marks a leaf."""

    def __init__(self, feature, threshold_bin, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold_bin = np.asarray(threshold_bin, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.left < 0))

    @property
    def depth(self) -> int:
        depth = np.zeros(self.left.size, dtype=np.int64)
        for i in range(self.left.size):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply_binned(self, binned) -> np.ndarray:
        """Leaf node index for each row of a binned matrix."""
        return _route(np.ascontiguousarray(binned), self.feature, self.threshold_bin,
                      self.left, self.right)

    def apply(self, X) -> np.ndarray:
        """Leaf node index for each row of a raw feature matrix."""
        return _route(np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold,
                      self.left, self.right)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold_bin": self.threshold_bin.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(d["feature"], d["threshold_bin"], d["threshold"], d["left"], d["right"], d["value"])


def _soft(G, l1):
    if l1 == 0:
        return G
    return np.sign(G) * np.maximum(np.abs(G) - l1, 0.0)


def leaf_value(G, H, l1=0.0, l2=0.0):
    return -_soft(G, l1) / np.maximum(H + l2, HESS_FLOOR)


def _leaf_gain(G, H, l1, l2):
    t = _soft(G, l1)
    return t * t / np.maximum(H + l2, HESS_FLOOR)


def _gain_given_output(G, H, w, l1, l2):
    return -(2.0 * _soft(G, l1) * w + (H + l2) * w * w)


class _Leaf:
    __slots__ = ("node", "rows", "hist", "G", "H", "C", "lo", "hi", "split")

    def __init__(self, node, rows, hist, lo, hi, g, h, c):
        self.node = node
        self.rows = rows
        self.hist = hist  # (3, F, max_bins): g, h, count
        self.G = g[rows].sum()
        self.H = h[rows].sum()
        self.C = c[rows].sum()
        self.lo = lo
        self.hi = hi
        self.split = None


def _histogram(binned, rows, g, h, c, features, width):
    hist = np.zeros((3, binned.shape[1], width))
    for f in features:
        b = binned[rows, f]
        hist[0, f, :] = np.bincount(b, weights=g[rows], minlength=width)[:width]
        hist[1, f, :] = np.bincount(b, weights=h[rows], minlength=width)[:width]
        hist[2, f, :] = np.bincount(b, weights=c[rows], minlength=width)[:width]
    return hist


def _best_split(leaf, features, n_bins, params, monotone):
    """Best (gain, feature, bin, wL, wR) for a leaf; ``None`` if nothing is admissible.

    Scans features in increasing order and bins in increasing order; a
    later candidate must be strictly better to win.
    """
    l1, l2 = params.lambda_l1, params.lambda_l2
    G, H, C = leaf.G, leaf.H, leaf.C
    constrained_leaf = np.isfinite(leaf.lo) or np.isfinite(leaf.hi)
    if constrained_leaf:
        w_parent = np.clip(leaf_value(G, H, l1, l2), leaf.lo, leaf.hi)
        parent_gain = _gain_given_output(G, H, w_parent, l1, l2)
    else:
        parent_gain = _leaf_gain(G, H, l1, l2)
    best = None
    for f in features:
        nb = n_bins[f]
        if nb < 2:
            continue
        GL = np.cumsum(leaf.hist[0, f, : nb - 1])
        HL = np.cumsum(leaf.hist[1, f, : nb - 1])
        CL = np.cumsum(leaf.hist[2, f, : nb - 1])
        GR, HR, CR = G - GL, H - HL, C - CL
        ok = (
            (CL >= params.min_data_in_leaf)
            & (CR >= params.min_data_in_leaf)
            & (HL >= params.min_sum_hessian_in_leaf)
            & (HR >= params.min_sum_hessian_in_leaf)
        )
        if not ok.any():
            continue
        c = monotone[f] if monotone is not None else 0
        if c == 0 and not constrained_leaf:
            wL = leaf_value(GL, HL, l1, l2)
            wR = leaf_value(GR, HR, l1, l2)
            gain = _leaf_gain(GL, HL, l1, l2) + _leaf_gain(GR, HR, l1, l2) - parent_gain
        else:
            wL = np.clip(leaf_value(GL, HL, l1, l2), leaf.lo, leaf.hi)
            wR = np.clip(leaf_value(GR, HR, l1, l2), leaf.lo, leaf.hi)
            gain = (
                _gain_given_output(GL, HL, wL, l1, l2)
                + _gain_given_output(GR, HR, wR, l1, l2)
                - parent_gain
            )
            if c != 0:
                ok &= c * (wR - wL) >= 0
        gain = np.where(ok, gain, -np.inf)
        t = int(np.argmax(gain))
        if gain[t] > params.min_gain_to_split and gain[t] > 0:
            if best is None or gain[t] > best[0]:
                best = (float(gain[t]), f, t, float(wL[t]), float(wR[t]))
    return best


def grow_tree(g, h, binned, n_bins, params: GbdtParams, rng=None, *, counts=None,
              rows=None, features=None, monotone=None, edges=None) -> Tree:
    """Grow one Newton tree leaf-wise.

    Parameters
    ----------
    g, h : ndarray
        Per-row first and second derivatives (``h >= 0``).
    binned : ndarray of int, shape (n_rows, n_features)
    n_bins : sequence of int
        Number of bins per feature.
    counts : ndarray, optional
        Observation count carried by each row (aggregated rows); used for
        ``min_data_in_leaf``. Defaults to ones.
    rows : ndarray, optional
        Subset of rows to fit on (bagging).
    features : sequence of int, optional
        Features allowed for splitting (feature subsampling).
    monotone : sequence of {-1, 0, 1}, optional
        Monotone constraint per feature.
    edges : list of ndarray, optional
        Bin edges, used to record raw thresholds.
    """
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n, F = binned.shape
    if g.shape != (n,) or h.shape != (n,):
        raise ShapeError("g and h must have one entry per row")
    c = np.ones(n) if counts is None else np.asarray(counts, dtype=np.float64)
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.int64)
    features = list(range(F)) if features is None else sorted(int(f) for f in features)
    n_bins = [int(b) for b in n_bins]
    width = max(n_bins) if n_bins else 1
    l1, l2 = params.lambda_l1, params.lambda_l2

    feature, tbin, thr, left, right, value = [0], [0], [0.0], [-1], [-1], [0.0]

    root = _Leaf(0, rows, _histogram(binned, rows, g, h, c, features, width), -np.inf, np.inf, g, h, c)
    value[0] = float(np.clip(leaf_value(root.G, root.H, l1, l2), root.lo, root.hi))
    heap = []

    def consider(leaf):
        leaf.split = _best_split(leaf, features, n_bins, params, monotone)
        if leaf.split is not None:
            heapq.heappush(heap, (-leaf.split[0], leaf.node, leaf))

    consider(root)
    n_leaves = 1
    while heap and n_leaves < params.num_leaves:
        _, _, leaf = heapq.heappop(heap)
        gain, f, t, wL, wR = leaf.split
        go_left = binned[leaf.rows, f] <= t
        rows_l, rows_r = leaf.rows[go_left], leaf.rows[~go_left]
        if rows_l.size <= rows_r.size:
            hist_l = _histogram(binned, rows_l, g, h, c, features, width)
            hist_r = leaf.hist - hist_l
        else:
            hist_r = _histogram(binned, rows_r, g, h, c, features, width)
            hist_l = leaf.hist - hist_r
        lo_l = lo_r = leaf.lo
        hi_l = hi_r = leaf.hi
        cm = monotone[f] if monotone is not None else 0
        if cm != 0:
            mid = (wL + wR) / 2.0
            if cm > 0:
                hi_l, lo_r = mid, mid
            else:
                lo_l, hi_r = mid, mid
        il, ir = len(feature), len(feature) + 1
        feature[leaf.node] = f
        tbin[leaf.node] = t
        thr[leaf.node] = float(edges[f][t]) if edges is not None else float(t)
        left[leaf.node], right[leaf.node] = il, ir
        child_l = _Leaf(il, rows_l, hist_l, lo_l, hi_l, g, h, c)
        child_r = _Leaf(ir, rows_r, hist_r, lo_r, hi_r, g, h, c)
        for child, w in ((child_l, wL), (child_r, wR)):
            feature.append(0)
            tbin.append(0)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            if cm == 0 and not (np.isfinite(child.lo) or np.isfinite(child.hi)):
                # recompute from the child's own sums rather than the prefix sums
                w = float(leaf_value(child.G, child.H, l1, l2))
            value.append(float(np.clip(w, child.lo, child.hi)))
        n_leaves += 1
        consider(child_l)
        consider(child_r)
        leaf.hist = None
    return Tree(feature, tbin, thr, left, right, value)


class Ensemble:
    """Additive tree ensemble ``bias + sum_r eta * w_r(x)``.

    After :meth:`start` the ensemble keeps the binned training matrix and a
    per-row prediction cache that :meth:`boost_round` updates.
    """

    def __init__(self, mapper: BinMapper, params: GbdtParams, learning_rate: float,
                 monotone=None, bias: float = 0.0):
        self.mapper = mapper
        self.params = params
        self.learning_rate = float(learning_rate)
        self.monotone = None if monotone is None else [int(m) for m in monotone]
        self.bias = float(bias)
        self.trees: list[Tree] = []
        self._binned = None
        self._counts = None
        self.cache = None
        self._bag = None

    @classmethod
    def start(cls, X, params: GbdtParams, learning_rate: float, *, counts=None,
              monotone=None) -> "Ensemble":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        binned, mapper = build_histograms(X, params.max_bin)
        ens = cls(mapper, params, learning_rate, monotone=monotone)
        ens._binned = binned
        ens._counts = None if counts is None else np.asarray(counts, dtype=np.float64)
        ens.cache = np.zeros(X.shape[0])
        return ens

    @property
    def n_features(self) -> int:
        return self.mapper.n_features

    def boost_round(self, g, h, rng: np.random.Generator, round_index: int | None = None) -> Tree:
        """Fit one tree to ``(g, h)`` on the training rows, append it, update the cache."""
        if self._binned is None:
            raise ShapeError("ensemble was not started on training data")
        p = self.params
        n = self._binned.shape[0]
        r = len(self.trees) if round_index is None else round_index
        rows = None
        if p.bagging_fraction < 1.0 and p.bagging_freq > 0:
            if self._bag is None or r % p.bagging_freq == 0:
                m = max(1, int(round(p.bagging_fraction * n)))
                self._bag = np.sort(rng.permutation(n)[:m])
            rows = self._bag
        features = None
        F = self.n_features
        if p.feature_fraction < 1.0:
            k = max(1, int(round(p.feature_fraction * F)))
            features = np.sort(rng.permutation(F)[:k])
        tree = grow_tree(
            g, h, self._binned, [self.mapper.n_bins(f) for f in range(F)], p,
            counts=self._counts, rows=rows, features=features,
            monotone=self.monotone, edges=self.mapper.edges,
        )
        self.trees.append(tree)
        if self.learning_rate != 0.0:
            self.cache += self.learning_rate * tree.value[tree.apply_binned(self._binned)]
        return tree

    def training_prediction(self) -> np.ndarray:
        return self.bias + self.cache

    def predict(self, X, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None] if self.n_features == 1 else X[None, :]
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.zeros(X.shape[0])
        for tree in self.trees[:n_trees]:
            out += self.learning_rate * tree.value[tree.apply(X)]
        return self.bias + out

    def truncate(self, n_trees: int) -> None:
        self.trees = self.trees[:n_trees]

    def release_training_data(self) -> None:
        self._binned = self._counts = self.cache = self._bag = None

    def to_dict(self) -> dict:
        return {
            "edges": [e.tolist() for e in self.mapper.edges],
            "learning_rate": self.learning_rate,
            "bias": self.bias,
            "monotone": self.monotone,
            "params": self.params.to_dict(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        ens = cls(
            BinMapper(d["edges"]),
            GbdtParams(**d["params"]),
            d["learning_rate"],
            monotone=d["monotone"],
            bias=d["bias"],
        )
        ens.trees = [Tree.from_dict(t) for t in d["trees"]]
        return ens
