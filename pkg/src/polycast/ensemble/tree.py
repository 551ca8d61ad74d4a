"""
Exact greedy regression-tree growth shared by every learner.

A split is scored from per-row gradients ``g`` with unit hessians (squared
loss) as

    score = G_L^2 / (H_L + lam) + G_R^2 / (H_R + lam) - G^2 / (H + lam)

With ``g = y`` (or residuals) and ``lam = 0`` the score is the
reduction in squared error, which is what CART maximizes. With
``g = prediction - y`` and ``lam > 0`` it is twice the second-order gain.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .params import resolve_subsample


@dataclass
class Tree:
    """Flattened binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = np.flatnonzero(f >= 0)
            if inner.size == 0:
                break
            nd = node[inner]
            go_left = X[inner, f[inner]] <= self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = np.flatnonzero(f >= 0)
            if inner.size == 0:
                return node
            nd = node[inner]
            go_left = X[inner, f[inner]] <= self.threshold[nd]
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


def presort(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Row order of every column and the matching sorted values, both shaped
    (n_features, n_rows).
    """
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    values = np.take_along_axis(X.T, order, axis=1)
    return order, np.ascontiguousarray(values)


def _midpoint(a: float, b: float) -> float:
    t = a + (b - a) / 2.0
    if not a < t < b:
        # a and b are adjacent doubles; a gives the same partition
        t = a
    return t


def best_split(g, S, V, candidates, lam, min_leaf, center):
    """
    Highest-scoring (feature, threshold) over ``candidates`` for the rows in
    ``S`` (row order per feature) with sorted values ``V``. Every row has unit
    hessian. Ties go to the lowest feature index, then the lowest threshold.

    Returns ``(score, feature, threshold)`` or ``None`` when no admissible
    split exists.
    """
    m = S.shape[1]
    lo, hi = min_leaf - 1, m - min_leaf
    if hi <= lo:
        return None
    xs = V[candidates] if len(candidates) < V.shape[0] else V
    gs = g[S[candidates]]
    if center:
        gs -= np.sum(gs[0]) / m
    G = float(np.sum(gs[0]))
    GL = np.cumsum(gs, axis=1)[:, lo:hi]
    HL = np.arange(lo + 1, hi + 1, dtype=np.float64)
    GR = G - GL
    GL *= GL
    GL /= HL + lam
    GR *= GR
    GR /= (m - HL) + lam
    score = GL
    score += GR
    score[xs[:, lo:hi] == xs[:, lo + 1 : hi + 1]] = -np.inf
    pos = np.argmax(score, axis=1)
    per_feature = score[np.arange(len(candidates)), pos]
    k = int(np.argmax(per_feature))
    best = per_feature[k]
    if not np.isfinite(best):
        return None
    # float sums depend on row order, so candidates that tie (or nearly do)
    # are re-ranked exactly before the tie-break applies
    tol = 1e-9 * float(np.sum(gs[0] * gs[0])) + 1e-300
    near = np.argwhere(score >= best - tol)
    if len(near) > 1:
        k, q = _exact_best(g, S[candidates], candidates, near, lo, lam)
        best = score[k, q]
        p = q + lo
    else:
        p = int(pos[k]) + lo
    total = best - G * G / (m + lam)
    return float(total), int(candidates[k]), _midpoint(xs[k, p], xs[k, p + 1])


def _exact_best(g, rows, candidates, near, lo, lam):
    """
    Exact-arithmetic winner among the ``near`` (feature slot, position)
    pairs; ties go to the lowest feature index, then the lowest threshold.
    """
    node = rows[0]
    ratios = [float(v).as_integer_ratio() for v in g[node]]
    shift = max(d.bit_length() for _, d in ratios)
    # every gradient as an integer over the shared denominator 2**shift
    ints = dict(zip(node.tolist(), (n << (shift - d.bit_length()) for n, d in ratios)))
    total = sum(ints.values())
    m = len(node)
    lam = Fraction(lam)
    best_key, best = None, None
    for k, q in near.tolist():
        h = q + lo + 1
        gl = sum(ints[r] for r in rows[k, :h].tolist())
        gr = total - gl
        value = Fraction(gl * gl) / (h + lam) + Fraction(gr * gr) / (m - h + lam)
        key = (-value, int(candidates[k]), q)
        if best_key is None or key < best_key:
            best_key, best = key, (k, q)
    return best


def grow_tree(
    X: np.ndarray,
    g: np.ndarray,
    *,
    lam: float,
    accept,
    leaf_value,
    max_depth: int | None,
    min_leaf: int,
    feature_subsample=None,
    rng: np.random.Generator | None = None,
    sorted_rows: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tree:
    """
    Grow one tree depth-first from per-row gradients ``g`` (unit hessians).

    ``accept(score)`` decides whether the best split of a node is taken and
    ``leaf_value(rows)`` gives a leaf's output. Nodes whose gradients are all
    equal are never split.
    """
    n, d = X.shape
    k = resolve_subsample(feature_subsample, d)
    all_features = np.arange(d)
    center = lam == 0
    feature, threshold, left, right, value = [], [], [], [], []
    go_left = np.zeros(n, dtype=bool)

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def terminal(depth, size):
        return (max_depth is not None and depth >= max_depth) or size < 2 * min_leaf

    # Entries are (node, rows, S, V, depth); S and V hold the presorted row
    # order and values of every feature, or None for a node that will be a
    # leaf.
    root = new_node()
    if terminal(0, n):
        stack = [(root, np.arange(n), None, None, 0)]
    else:
        S0, V0 = presort(X) if sorted_rows is None else sorted_rows
        stack = [(root, S0[0], S0, V0, 0)]
    while stack:
        node, rows, S, V, depth = stack.pop()
        split = None
        if S is not None and np.ptp(g[rows]) > 0:
            if k < d:
                cand = np.sort(rng.choice(d, size=k, replace=False))
            else:
                cand = all_features
            split = best_split(g, S, V, cand, lam, min_leaf, center)
            if split is not None and not accept(split[0]):
                split = None
        if split is None:
            # ascending rows make the leaf sum independent of the node path
            value[node] = leaf_value(np.sort(rows))
            continue
        _, f, t = split
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, li, ri
        child_depth = depth + 1
        go = X[rows, f] <= t
        go_left[rows] = go
        M = go_left[S]
        n_left = int(np.count_nonzero(go))
        n_right = len(rows) - n_left
        # right pushed first so the left subtree is grown first
        for child, mask, size in ((ri, ~M, n_right), (li, M, n_left)):
            if terminal(child_depth, size):
                sub = S[0][mask[0]]
                stack.append((child, sub, None, None, child_depth))
                continue
            idx = np.flatnonzero(mask)
            Sc = S.ravel().take(idx).reshape(d, size)
            stack.append(
                (child, Sc[0], Sc, V.ravel().take(idx).reshape(d, size), child_depth)
            )
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )
