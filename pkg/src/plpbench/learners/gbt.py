"""Gradient-boosted trees for binary log-loss.

Trees are grown depth-wise with the second-order gain

    gain = 1/2 [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)]

and leaf weights -G/(H+lam). Sparse binary columns have a single candidate
split (absent / present); their per-node gradient sums come from one sparse
product per level. Dense columns are quantile-binned. Ties in gain go to the
lower column index, then the lower threshold.

A model is a set of flat node arrays: ``feature`` (-1 at leaves),
``threshold`` (go left when x <= threshold), ``left``/``right`` (indices local
to the tree), ``value`` (raw leaf weight), ``tree_offsets`` (start of each
tree, plus a final end offset), and the scalars ``base_score`` and
``learning_rate``.
"""

from __future__ import annotations

import time

import numpy as np
import scipy.sparse as sp

from ..evalstats import auroc
from ..features import N_DENSE, DesignMatrix
from ..seeding import rng_for
from .base import TrainedModel, require_both_classes, stratified_holdout
from .spaces import GbtGrid

_ROUTE_CHUNK = 4096


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Binned:
    """Training view of a design matrix: sparse binary block plus binned dense columns."""

    def __init__(self, matrix: DesignMatrix, max_bins: int):
        self.n = matrix.n_rows
        self.p = matrix.n_cols
        self.sparse = matrix.sparse_block()[:, N_DENSE:].tocsr()
        self.sparse.sort_indices()
        self.sparse_t = self.sparse.T.tocsr()
        self.thresholds = []
        self.bins = []
        for j in range(N_DENSE):
            x = matrix.dense[:, j].astype(np.float64)
            u = np.unique(x)
            if len(u) <= max_bins:
                thr = (u[:-1] + u[1:]) / 2.0
            else:
                q = np.quantile(x, np.linspace(0, 1, max_bins + 1)[1:-1], method="lower")
                q = np.unique(q)
                # midpoint to the next distinct value keeps thresholds between observed values
                nxt = u[np.minimum(np.searchsorted(u, q, side="right"), len(u) - 1)]
                thr = np.unique((q + nxt) / 2.0)
                thr = thr[thr < u[-1]]
            self.thresholds.append(thr)
            self.bins.append(np.searchsorted(thr, x, side="left").astype(np.int64))


class _Tree:
    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1


def _gain_terms(G, H, lam):
    return G * G / (H + lam)


def _grow_tree(data: _Binned, g: np.ndarray, h: np.ndarray, max_depth: int, lam: float,
               min_child_weight: float) -> tuple[_Tree, np.ndarray]:
    """Grow one tree; returns the tree and each training row's leaf weight."""
    tree = _Tree()
    frontier = [tree.add()]
    rows = np.arange(data.n)  # rows still sitting at an open node
    node_of = np.zeros(data.n, dtype=np.int64)  # frontier position of each open row
    out = np.zeros(data.n)
    for depth in range(max_depth + 1):
        k = len(frontier)
        gr, hr = g[rows], h[rows]
        G = np.bincount(node_of, weights=gr, minlength=k)
        H = np.bincount(node_of, weights=hr, minlength=k)
        best_feat = np.full(k, -1)
        best_thr = np.zeros(k)
        if depth < max_depth:
            best_feat, best_thr = _best_splits(data, rows, node_of, gr, hr, G, H, lam, min_child_weight)
        new_frontier = []
        child_of = np.full((k, 2), -1)
        for pos, node in enumerate(frontier):
            f = int(best_feat[pos])
            if f < 0:
                tree.value[node] = float(-G[pos] / (H[pos] + lam))
                continue
            tree.feature[node] = f
            tree.threshold[node] = float(best_thr[pos])
            lchild, rchild = tree.add(), tree.add()
            tree.left[node], tree.right[node] = lchild, rchild
            child_of[pos] = (len(new_frontier), len(new_frontier) + 1)
            new_frontier += [lchild, rchild]
        done = best_feat[node_of] < 0
        out[rows[done]] = np.asarray(tree.value)[np.asarray(frontier)[node_of[done]]]
        if not new_frontier:
            break
        keep = ~done
        rows, node_of = rows[keep], node_of[keep]
        goes_left = _goes_left(data, rows, best_feat[node_of], best_thr[node_of])
        node_of = np.where(goes_left, child_of[node_of, 0], child_of[node_of, 1])
        frontier = new_frontier
    return tree, out


def _best_splits(data, rows, node_of, g, h, G, H, lam, mcw):
    k = len(G)
    best_gain = np.zeros(k)
    best_feat = np.full(k, -1)
    best_thr = np.zeros(k)
    parent = _gain_terms(G, H, lam)
    # dense columns have the lowest indices, so they are scanned first and
    # only strictly better sparse gains replace them
    for j in range(N_DENSE):
        thr = data.thresholds[j]
        nb = len(thr) + 1
        if nb < 2:
            continue
        key = node_of * nb + data.bins[j][rows]
        Gb = np.bincount(key, weights=g, minlength=k * nb).reshape(k, nb)
        Hb = np.bincount(key, weights=h, minlength=k * nb).reshape(k, nb)
        GL = np.cumsum(Gb, axis=1)[:, :-1]
        HL = np.cumsum(Hb, axis=1)[:, :-1]
        GR, HR = G[:, None] - GL, H[:, None] - HL
        gain = 0.5 * (_gain_terms(GL, HL, lam) + _gain_terms(GR, HR, lam) - parent[:, None])
        gain[(HL < mcw) | (HR < mcw)] = -np.inf
        t = np.argmax(gain, axis=1)
        gt = gain[np.arange(k), t]
        better = gt > best_gain
        best_gain[better] = gt[better]
        best_feat[better] = j
        best_thr[better] = thr[t[better]]
    if data.sparse.shape[1]:
        n = len(rows)
        sub_t = data.sparse_t[:, rows]
        GP = (sub_t @ sp.csr_matrix((g, (np.arange(n), node_of)), shape=(n, k))).toarray()
        HP = (sub_t @ sp.csr_matrix((h, (np.arange(n), node_of)), shape=(n, k))).toarray()
        GA, HA = G[None, :] - GP, H[None, :] - HP
        gain = 0.5 * (_gain_terms(GA, HA, lam) + _gain_terms(GP, HP, lam) - parent[None, :])
        gain[(HA < mcw) | (HP < mcw)] = -np.inf
        j = np.argmax(gain, axis=0)
        gj = gain[j, np.arange(k)]
        better = gj > best_gain
        best_gain[better] = gj[better]
        best_feat[better] = j[better] + N_DENSE
        best_thr[better] = 0.5
    return best_feat, best_thr


def _goes_left(data: _Binned, rows, feat, thr) -> np.ndarray:
    left = np.empty(len(rows), dtype=bool)
    for j in np.unique(feat):
        sel = feat == j
        r = rows[sel]
        if j < N_DENSE:
            t = np.searchsorted(data.thresholds[j], thr[sel], side="left")
            left[sel] = data.bins[j][r] <= t
        else:
            c = j - N_DENSE
            present = data.sparse_t.indices[data.sparse_t.indptr[c]:data.sparse_t.indptr[c + 1]]
            left[sel] = ~np.isin(r, present)
    return left


def _route(feature, threshold, left, right, value, root: int, X: np.ndarray) -> np.ndarray:
    """Leaf weight of each row of dense ``X`` in the tree starting at ``root``."""
    node = np.full(X.shape[0], root, dtype=np.int64)
    idx = np.arange(X.shape[0])
    while True:
        f = feature[node]
        inner = f >= 0
        if not inner.any():
            return value[node]
        r = idx[inner]
        n = node[inner]
        go_left = X[r, f[inner]] <= threshold[n]
        node[inner] = np.where(go_left, left[n], right[n]) + root


def _route_tree(tree: _Tree, X: np.ndarray) -> np.ndarray:
    arrs = [np.asarray(a) for a in (tree.feature, tree.threshold, tree.left, tree.right, tree.value)]
    return _route(*arrs, 0, X)


def _base_score(y: np.ndarray) -> float:
    prev = min(max(float(np.mean(y)), 1e-6), 1 - 1e-6)
    return float(np.log(prev / (1 - prev)))


def _dense_chunks(matrix: DesignMatrix):
    for start in range(0, matrix.n_rows, _ROUTE_CHUNK):
        rows = np.arange(start, min(start + _ROUTE_CHUNK, matrix.n_rows))
        yield rows, matrix.subset(rows).to_dense().astype(np.float32)


class _Ensemble:
    def __init__(self, base_score: float, learning_rate: float):
        self.base_score = base_score
        self.learning_rate = learning_rate
        self.trees: list[_Tree] = []

    def arrays(self) -> dict:
        feature, threshold, left, right, value, offsets = [], [], [], [], [], [0]
        for t in self.trees:
            feature += t.feature
            threshold += t.threshold
            left += t.left
            right += t.right
            value += t.value
            offsets.append(offsets[-1] + len(t.feature))
        return {
            "feature": np.asarray(feature, dtype=np.int32),
            "threshold": np.asarray(threshold, dtype=np.float64),
            "left": np.asarray(left, dtype=np.int32),
            "right": np.asarray(right, dtype=np.int32),
            "value": np.asarray(value, dtype=np.float64),
            "tree_offsets": np.asarray(offsets, dtype=np.int64),
            "base_score": np.array([self.base_score]),
            "learning_rate": np.array([self.learning_rate]),
        }


def _boost(data: _Binned, y: np.ndarray, n_trees: int, max_depth: int, learning_rate: float,
           grid: GbtGrid, on_tree=None) -> _Ensemble:
    ens = _Ensemble(_base_score(y), learning_rate)
    margin = np.full(data.n, ens.base_score)
    for _ in range(n_trees):
        mu = _sigmoid(margin)
        tree, leaf = _grow_tree(data, mu - y, mu * (1 - mu), max_depth, grid.reg_lambda, grid.min_child_weight)
        ens.trees.append(tree)
        margin += learning_rate * leaf
        if on_tree is not None:
            on_tree(len(ens.trees), tree)
    return ens


def staged_margins(params: dict, matrix: DesignMatrix, stages) -> dict[int, np.ndarray]:
    """Margins after each number of trees in ``stages`` (0 means base score only)."""
    stages = sorted(set(int(s) for s in stages))
    offsets = params["tree_offsets"]
    n_trees = len(offsets) - 1
    if stages and stages[-1] > n_trees:
        raise ValueError(f"model has {n_trees} trees, asked for {stages[-1]}")
    base, lr = float(params["base_score"][0]), float(params["learning_rate"][0])
    out = {s: np.full(matrix.n_rows, base) for s in stages}
    arrs = [params[k] for k in ("feature", "threshold", "left", "right", "value")]
    for rows, X in _dense_chunks(matrix):
        acc = np.full(len(rows), base)
        t = 0
        for s in stages:
            while t < s:
                acc += lr * _route(*arrs, int(offsets[t]), X)
                t += 1
            out[s][rows] = acc
    return out


def predict_gbt(model: TrainedModel, matrix: DesignMatrix, n_trees: int | None = None) -> np.ndarray:
    k = len(model.parameters["tree_offsets"]) - 1 if n_trees is None else n_trees
    margin = staged_margins(model.parameters, matrix, [k])[k]
    return np.clip(_sigmoid(margin), 1e-15, 1 - 1e-15)


def fit_gbt_fixed(matrix: DesignMatrix, n_trees: int, max_depth: int, learning_rate: float,
                  grid: GbtGrid | None = None) -> TrainedModel:
    grid = grid or GbtGrid()
    require_both_classes(matrix.labels)
    data = _Binned(matrix, grid.max_bins)
    ens = _boost(data, matrix.labels.astype(np.float64), n_trees, max_depth, learning_rate, grid)
    return TrainedModel(
        family="gbt",
        parameters=ens.arrays(),
        hyperparameters={"n_trees": n_trees, "max_depth": max_depth, "learning_rate": learning_rate},
        dictionary_hash=matrix.dictionary_hash,
        n_cols=matrix.n_cols,
    )


def fit_gbt(matrix: DesignMatrix, grid: GbtGrid | None = None, seed: int = 0,
            provenance: dict | None = None) -> TrainedModel:
    """Holdout grid search over the boosting grid, then refit on all rows.

    Each (max_depth, learning_rate) pair is boosted once to the largest tree
    count; smaller counts are read off the staged holdout predictions, which
    equal what a shorter run would produce. Ties in holdout AUROC keep the
    earlier grid point.
    """
    grid = grid or GbtGrid()
    require_both_classes(matrix.labels)
    t0 = time.perf_counter()
    fit_rows, hold_rows = stratified_holdout(matrix.labels, grid.holdout_fraction, rng_for(seed, "gbt-holdout"))
    fit_m, hold_m = matrix.subset(fit_rows), matrix.subset(hold_rows)
    require_both_classes(fit_m.labels)
    require_both_classes(hold_m.labels)
    data = _Binned(fit_m, grid.max_bins)
    y = fit_m.labels.astype(np.float64)
    hold_dense = hold_m.to_dense().astype(np.float32)
    stages = sorted(grid.n_trees)
    scores: dict[tuple, float] = {}
    for depth in grid.max_depth:
        for lr in grid.learning_rate:
            margin = np.full(hold_m.n_rows, _base_score(y))
            record = {}

            def on_tree(count, tree):
                nonlocal margin
                margin = margin + lr * _route_tree(tree, hold_dense)
                if count in stages:
                    record[count] = auroc(margin, hold_m.labels)

            _boost(data, y, stages[-1], depth, lr, grid, on_tree)
            for n in stages:
                scores[(n, depth, lr)] = record[n]
    trace = [dict(p, holdout_auroc=scores[(p["n_trees"], p["max_depth"], p["learning_rate"])])
             for p in grid.points()]
    best = max(trace, key=lambda t: t["holdout_auroc"])  # max keeps the first of equal scores
    model = fit_gbt_fixed(matrix, best["n_trees"], best["max_depth"], best["learning_rate"], grid)
    model.search_trace = trace
    model.provenance = dict(provenance or {}, seed=seed, wall_time_s=time.perf_counter() - t0)
    return model
