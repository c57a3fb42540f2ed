"""Shared CART machinery: feature binning, a lockstep level-wise builder that
grows any number of trees in one pass, and a flat ensemble representation.

Split search runs level-wise over binned features with one histogram pass per
(depth, feature) across ALL trees simultaneously, which is what makes the
Monte Carlo harness affordable.  Bin edges are exact midpoints between
distinct values whenever the distinct count fits the bin budget, so
desk-scale fits have exact CART semantics; larger columns fall back to
quantile-spaced candidates.

Objectives share one gain form val(L) + val(R) - val(parent):
  gini      val = sum_c count_c^2 / n          (maximizing = Gini decrease)
  variance  val = (sum w*y)^2 / sum w          (weighted SSE decrease)
  newton    val = G^2 / H                      (second-order boosting gain)

Zero-gain splits of impure nodes are allowed for gini/variance (children are
strictly smaller, so growth terminates); this lets a depth-2 tree solve an
XOR-style table where every root split is gain-free.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BINS = 255
_NEWTON_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class BinnedMatrix:
    bins: np.ndarray                 # (n, p) int32; bin b means thresholds[f][b-1] < x <= thresholds[f][b]
    thresholds: tuple[np.ndarray, ...]

    @property
    def n_bins(self) -> tuple[int, ...]:
        return tuple(t.size + 1 for t in self.thresholds)


def bin_matrix(X: np.ndarray, max_bins: int = MAX_BINS) -> BinnedMatrix:
    n, p = X.shape
    bins = np.empty((n, p), dtype=np.int32)
    thresholds = []
    for j in range(p):
        v = X[:, j]
        d = np.unique(v)
        if d.size <= 1:
            thr = np.empty(0)
        elif d.size <= max_bins:
            thr = (d[:-1] + d[1:]) / 2.0
        else:
            thr = np.unique(np.quantile(v, np.linspace(0.0, 1.0, max_bins + 1)[1:-1]))
        bins[:, j] = np.searchsorted(thr, v, side="left")
        thresholds.append(thr)
    return BinnedMatrix(bins, tuple(thresholds))


@dataclass(frozen=True)
class TreeEnsemble:
    """Flat node arrays shared by all trees; ``roots[t]`` is tree t's root."""
    feature: np.ndarray      # int32, -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_value: np.ndarray   # (n_nodes, value_dim)
    roots: np.ndarray

    @property
    def n_trees(self) -> int:
        return self.roots.size

    def apply_rows(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id per (tree, row): shape (n_trees, n)."""
        n = X.shape[0]
        node = np.repeat(self.roots[:, None], n, axis=1).astype(np.int64)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            t_idx, r_idx = np.nonzero(active)
            cur = node[t_idx, r_idx]
            go_left = X[r_idx, feat[t_idx, r_idx]] <= self.threshold[cur]
            node[t_idx, r_idx] = np.where(go_left, self.left[cur], self.right[cur])

    def predict_per_tree(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_value[self.apply_rows(X)]

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return self.predict_per_tree(X).mean(axis=0)

    # single-tree conveniences
    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_mean(X)


Tree = TreeEnsemble


class _Objective:
    """Per-objective vectorized stat handling; stats are (n_slots, dim) arrays."""

    def __init__(self, kind: str, y, n_classes: int, g, h, weights: np.ndarray):
        self.kind = kind
        self.weights = weights
        if kind == "gini":
            self.y = np.asarray(y, dtype=np.int64)
            self.K = n_classes
        elif kind == "variance":
            self.y = np.asarray(y, dtype=np.float64)
            self.K = 0
        else:
            self.g = np.asarray(g, dtype=np.float64)
            self.h = np.asarray(h, dtype=np.float64)
            self.K = 0

    def root_stats(self) -> np.ndarray:
        T, n = self.weights.shape
        if self.kind == "gini":
            out = np.empty((T, self.K))
            for t in range(T):
                out[t] = np.bincount(self.y, weights=self.weights[t], minlength=self.K)
            return out
        if self.kind == "variance":
            w = self.weights.sum(axis=1)
            wy = self.weights @ self.y
            wyy = self.weights @ (self.y * self.y)
            return np.column_stack([w, wy, wyy])
        return np.column_stack([
            np.full(T, float(self.weights.shape[1])),
            np.tile(self.g.sum(), T), np.tile(self.h.sum(), T)])

    def size(self, stats: np.ndarray) -> np.ndarray:
        return stats.sum(axis=1) if self.kind == "gini" else stats[:, 0]

    def is_pure(self, stats: np.ndarray) -> np.ndarray:
        if self.kind == "gini":
            return stats.max(axis=1) >= stats.sum(axis=1)
        if self.kind == "variance":
            w, wy, wyy = stats[:, 0], stats[:, 1], stats[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                sse = wyy - np.where(w > 0, wy * wy / w, 0.0)
            return sse <= 1e-12 * np.maximum(1.0, np.abs(wyy))
        return np.zeros(stats.shape[0], dtype=bool)

    def node_value(self, stats: np.ndarray) -> np.ndarray:
        if self.kind == "gini":
            tot = stats.sum(axis=1, keepdims=True)
            return np.where(tot > 0, stats / np.where(tot > 0, tot, 1.0), 1.0 / self.K)
        if self.kind == "variance":
            w = stats[:, 0]
            return np.where(w > 0, stats[:, 1] / np.where(w > 0, w, 1.0), 0.0)[:, None]
        H = stats[:, 2]
        return np.where(H > 0, -stats[:, 1] / np.where(H > 0, H, 1.0), 0.0)[:, None]

    def parent_val(self, stats: np.ndarray) -> np.ndarray:
        if self.kind == "gini":
            tot = stats.sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(tot > 0, (stats ** 2).sum(axis=1) / tot, 0.0)
        a = stats[:, 1] if self.kind == "variance" else stats[:, 1]
        b = stats[:, 0] if self.kind == "variance" else stats[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(b > 0, a * a / b, 0.0)

    def histogram(self, slot, rows_r, rows_t, nb, b, n_slots):
        """Cumulative left stats per (slot, threshold index)."""
        w = self.weights[rows_t, rows_r]
        if self.kind == "gini":
            if self.K == 2:
                key = slot * nb + b
                yv = self.y[rows_r]
                hw = np.bincount(key, weights=w, minlength=n_slots * nb).reshape(n_slots, nb)
                h1 = np.bincount(key, weights=w * yv, minlength=n_slots * nb).reshape(n_slots, nb)
                return np.cumsum(np.stack([hw, h1], axis=2), axis=1)[:, :-1, :]
            hist = np.bincount((slot * nb + b) * self.K + self.y[rows_r], weights=w,
                               minlength=n_slots * nb * self.K).reshape(n_slots, nb, self.K)
            return np.cumsum(hist, axis=1)[:, :-1, :]
        key = slot * nb + b
        if self.kind == "variance":
            yv = self.y[rows_r]
            wy = w * yv
            hw = np.bincount(key, weights=w, minlength=n_slots * nb).reshape(n_slots, nb)
            hwy = np.bincount(key, weights=wy, minlength=n_slots * nb).reshape(n_slots, nb)
            stack = np.stack([hw, hwy], axis=2)
        else:
            hc = np.bincount(key, minlength=n_slots * nb).reshape(n_slots, nb)
            hg = np.bincount(key, weights=self.g[rows_r], minlength=n_slots * nb).reshape(n_slots, nb)
            hh = np.bincount(key, weights=self.h[rows_r], minlength=n_slots * nb).reshape(n_slots, nb)
            stack = np.stack([hc, hg, hh], axis=2)
        return np.cumsum(stack, axis=1)[:, :-1, :]

    def child_value_and_size(self, left, parent_stats):
        """(value_L + value_R, size_L, size_R) for every (slot, threshold).

        Cells with an empty child produce inf/nan; callers mask them (via the
        min_leaf constraint) before any argmax.
        """
        if self.kind == "gini":
            if self.K == 2:
                nl, n1l = left[:, :, 0], left[:, :, 1]
                tot = parent_stats.sum(axis=1)
                n1 = parent_stats[:, 1]
                nr = tot[:, None] - nl
                n1r = n1[:, None] - n1l
                with np.errstate(divide="ignore", invalid="ignore"):
                    val = ((n1l ** 2 + (nl - n1l) ** 2) / nl
                           + (n1r ** 2 + (nr - n1r) ** 2) / nr)
                return val, nl, nr
            right = parent_stats[:, None, :] - left
            nl = left.sum(axis=2)
            nr = right.sum(axis=2)
            with np.errstate(divide="ignore", invalid="ignore"):
                val = (left ** 2).sum(axis=2) / nl + (right ** 2).sum(axis=2) / nr
            return val, nl, nr
        if self.kind == "variance":
            nl, sl = left[:, :, 0], left[:, :, 1]
            nr = parent_stats[:, 0][:, None] - nl
            sr = parent_stats[:, 1][:, None] - sl
        else:
            nl, sl, dl = left[:, :, 0], left[:, :, 1], left[:, :, 2]
            nr = parent_stats[:, 0][:, None] - nl
            sr = parent_stats[:, 1][:, None] - sl
            dr = parent_stats[:, 2][:, None] - dl
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "variance":
                val = sl * sl / nl + sr * sr / nr
            else:
                val = sl * sl / dl + sr * sr / dr
        return val, nl, nr

    def collect_child_stats(self, child_slot, rows_r, rows_t, n_children):
        w = self.weights[rows_t, rows_r]
        if self.kind == "gini":
            return np.bincount(child_slot * self.K + self.y[rows_r], weights=w,
                               minlength=n_children * self.K).reshape(n_children, self.K)
        if self.kind == "variance":
            yv = self.y[rows_r]
            return np.column_stack([
                np.bincount(child_slot, weights=w, minlength=n_children),
                np.bincount(child_slot, weights=w * yv, minlength=n_children),
                np.bincount(child_slot, weights=w * yv * yv, minlength=n_children)])
        return np.column_stack([
            np.bincount(child_slot, minlength=n_children).astype(np.float64),
            np.bincount(child_slot, weights=self.g[rows_r], minlength=n_children),
            np.bincount(child_slot, weights=self.h[rows_r], minlength=n_children)])


def build_ensemble(binned: BinnedMatrix, objective: str, *, y=None, n_classes: int = 0,
                   g=None, h=None, weights: np.ndarray | None = None,
                   max_depth: int = 10, min_n: float = 2, min_leaf: float = 1.0,
                   mtry: int | None = None,
                   rngs: list[np.random.Generator] | None = None) -> TreeEnsemble:
    """Grow ``weights.shape[0]`` trees in lockstep (one tree when weights is None).

    The per-tree rng consumption order (one mtry draw per eligible node, in
    node-creation order) matches what a tree built alone would consume, so
    ensembles are reproducible tree by tree.
    """
    n, p = binned.bins.shape
    if weights is None:
        weights = np.ones((1, n))
    T = weights.shape[0]
    mtry = p if mtry is None else min(mtry, p)
    min_gain = _NEWTON_MIN_GAIN if objective == "newton" else 0.0
    obj = _Objective(objective, y, n_classes, g, h, weights)
    value_dim = n_classes if objective == "gini" else 1

    feature: list[np.ndarray] = [np.full(T, -1, dtype=np.int32)]
    threshold: list[np.ndarray] = [np.full(T, np.nan)]
    left: list[np.ndarray] = [np.full(T, -1, dtype=np.int32)]
    right: list[np.ndarray] = [np.full(T, -1, dtype=np.int32)]
    leaf_chunks: list[tuple[np.ndarray, np.ndarray]] = []

    n_nodes = T
    roots = np.arange(T, dtype=np.int32)
    node_of = np.repeat(roots[:, None], n, axis=1).astype(np.int64)  # (T, n)
    r_flat = np.tile(np.arange(n), T)
    t_flat = np.repeat(np.arange(T), n)

    frontier_nodes = roots.astype(np.int64)
    frontier_tree = np.arange(T, dtype=np.int64)
    frontier_stats = obj.root_stats()

    for depth in range(max_depth + 1):
        if frontier_nodes.size == 0:
            break
        size = obj.size(frontier_stats)
        pure = obj.is_pure(frontier_stats)
        leaf_now = (depth >= max_depth) | (size <= min_n) | (size < 2 * min_leaf) | pure
        if leaf_now.any():
            leaf_chunks.append((frontier_nodes[leaf_now],
                                obj.node_value(frontier_stats[leaf_now])))
        keep = ~leaf_now
        if not keep.any():
            frontier_nodes = frontier_nodes[:0]
            break
        e_nodes = frontier_nodes[keep]
        e_tree = frontier_tree[keep]
        e_stats = frontier_stats[keep]
        S = e_nodes.size

        slot_lookup = np.full(n_nodes, -1, dtype=np.int64)
        slot_lookup[e_nodes] = np.arange(S)
        row_slot = slot_lookup[node_of[t_flat, r_flat]]
        active = row_slot >= 0
        rows_r = r_flat[active]
        rows_t = t_flat[active]
        rslot = row_slot[active]

        if mtry < p and rngs is not None:
            allowed = np.zeros((S, p), dtype=bool)
            for i in range(S):
                allowed[i, rngs[e_tree[i]].permutation(p)[:mtry]] = True
        else:
            allowed = np.ones((S, p), dtype=bool)

        best_gain = np.full(S, -np.inf)
        best_feat = np.full(S, -1, dtype=np.int64)
        best_bin = np.full(S, -1, dtype=np.int64)
        parent_val = obj.parent_val(e_stats)

        for f in range(p):
            nb = binned.n_bins[f]
            if nb < 2 or not allowed[:, f].any():
                continue
            b = binned.bins[rows_r, f].astype(np.int64)
            lft = obj.histogram(rslot, rows_r, rows_t, nb, b, S)
            val, nl, nr = obj.child_value_and_size(lft, e_stats)
            gain = val - parent_val[:, None]
            gain[(nl < min_leaf) | (nr < min_leaf) | ~allowed[:, f, None]] = -np.inf
            fb = np.argmax(gain, axis=1)
            fg = gain[np.arange(S), fb]
            better = fg > best_gain
            best_gain[better] = fg[better]
            best_feat[better] = f
            best_bin[better] = fb[better]

        splits = (best_feat >= 0) & (best_gain >= min_gain)
        if (~splits).any():
            leaf_chunks.append((e_nodes[~splits], obj.node_value(e_stats[~splits])))
        if not splits.any():
            frontier_nodes = frontier_nodes[:0]
            break

        s_idx = np.flatnonzero(splits)
        n_split = s_idx.size
        child_base = n_nodes
        left_ids = child_base + 2 * np.arange(n_split)
        right_ids = left_ids + 1

        # record split metadata for the chosen nodes
        split_feature = best_feat[s_idx]
        split_bin = best_bin[s_idx]
        thr_values = np.array([binned.thresholds[f][bi]
                               for f, bi in zip(split_feature, split_bin)])
        _assign(feature, e_nodes[s_idx], split_feature.astype(np.int32), T, n_nodes)
        _assign(threshold, e_nodes[s_idx], thr_values, T, n_nodes)
        _assign(left, e_nodes[s_idx], left_ids.astype(np.int32), T, n_nodes)
        _assign(right, e_nodes[s_idx], right_ids.astype(np.int32), T, n_nodes)

        feature.append(np.full(2 * n_split, -1, dtype=np.int32))
        threshold.append(np.full(2 * n_split, np.nan))
        left.append(np.full(2 * n_split, -1, dtype=np.int32))
        right.append(np.full(2 * n_split, -1, dtype=np.int32))
        n_nodes += 2 * n_split

        # route rows of splitting nodes to their children
        split_slot = np.full(S, -1, dtype=np.int64)
        split_slot[s_idx] = np.arange(n_split)
        srow = split_slot[rslot]
        moving = srow >= 0
        mv_r = rows_r[moving]
        mv_t = rows_t[moving]
        mv_slot = srow[moving]
        b_mv = binned.bins[mv_r, split_feature[mv_slot]].astype(np.int64)
        go_left = b_mv <= split_bin[mv_slot]
        new_nodes = np.where(go_left, left_ids[mv_slot], right_ids[mv_slot])
        node_of[mv_t, mv_r] = new_nodes

        child_slot = 2 * mv_slot + (~go_left).astype(np.int64)
        child_stats = obj.collect_child_stats(child_slot, mv_r, mv_t, 2 * n_split)

        frontier_nodes = np.empty(2 * n_split, dtype=np.int64)
        frontier_nodes[0::2] = left_ids
        frontier_nodes[1::2] = right_ids
        frontier_tree = np.repeat(e_tree[s_idx], 2)
        frontier_stats = child_stats

    if frontier_nodes.size:  # depth budget exhausted mid-flight
        leaf_chunks.append((frontier_nodes, obj.node_value(frontier_stats)))

    feature_arr = np.concatenate(feature)
    leaf_value = np.zeros((n_nodes, value_dim))
    for ids, vals in leaf_chunks:
        leaf_value[ids] = vals
    return TreeEnsemble(
        feature_arr,
        np.concatenate(threshold),
        np.concatenate(left),
        np.concatenate(right),
        leaf_value,
        roots,
    )


def _assign(chunks: list[np.ndarray], ids: np.ndarray, values: np.ndarray,
            first_chunk_size: int, n_nodes: int) -> None:
    """Scatter into the chunked node arrays (ids always live in existing chunks)."""
    offsets = []
    start = 0
    for c in chunks:
        offsets.append(start)
        start += c.size
    offsets = np.asarray(offsets)
    for k, c in enumerate(chunks):
        lo, hi = offsets[k], offsets[k] + c.size
        mask = (ids >= lo) & (ids < hi)
        if mask.any():
            c[ids[mask] - lo] = values[mask]


def build_tree(binned: BinnedMatrix, objective: str, *, y=None, n_classes: int = 0,
               g=None, h=None, weight=None, max_depth: int = 10, min_n: float = 2,
               min_leaf: float = 1.0, mtry: int | None = None,
               rng: np.random.Generator | None = None) -> TreeEnsemble:
    """Single tree: a one-member ensemble."""
    weights = None if weight is None else np.asarray(weight, dtype=np.float64)[None, :]
    return build_ensemble(
        binned, objective, y=y, n_classes=n_classes, g=g, h=h, weights=weights,
        max_depth=max_depth, min_n=min_n, min_leaf=min_leaf, mtry=mtry,
        rngs=[rng] if rng is not None else None)
