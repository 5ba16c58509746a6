"""Exact depth-2 tree search over doubly robust score gains.

The objective is sum_i delta_i over subjects assigned action 1, where
delta_i = gamma1_i - gamma0_i. For a fixed root feature the sweep moves
subjects across the root threshold one sorted boundary at a time; for every
second-level feature a segment tree maintains the extreme prefix sums of
delta (in that feature's sort order) over the left subset and, via static
interval sums, its complement. Each side's best depth-1 subtree value is
max(leaf, max-prefix, total - min-prefix), so the whole search is an
O(p^2 n log n) exhaustive-equivalent scan, not a heuristic.

Realizable second-level thresholds are exactly the boundaries between
distinct values in the *global* sort order of a feature — membership never
changes which cuts exist, only the prefix sums — so boundary validity is a
static per-position mask baked into the leaf initialization. Cuts that leave
one side of a subset empty evaluate to that subset's leaf value and are
therefore harmless to include.
"""
import numpy as np
from numba import njit

__all__ = ["presort", "depth2_sweep", "best_depth1_subset"]


@njit(cache=True)
def _build_templates(vs, order, delta):
    """Per-feature initial segment trees with an empty 'present' set.

    Heap layout, root at 1, leaves at M..2M-1. Static per-node interval sums
    sstatic never change; the dynamic fields hold extreme prefix sums over
    present members (maxp/minp) and over their complement (maxc/minc),
    evaluated only at valid (distinct-value) boundaries.
    """
    p, n = vs.shape
    M = 1
    while M < n:
        M <<= 1
    size = 2 * M
    inf = np.inf
    sstatic = np.zeros((p, size))
    ssump0 = np.zeros((p, size))
    maxp0 = np.full((p, size), -inf)
    minp0 = np.full((p, size), inf)
    maxc0 = np.full((p, size), -inf)
    minc0 = np.full((p, size), inf)
    for f in range(p):
        for j in range(n):
            leaf = M + j
            dj = delta[order[f, j]]
            sstatic[f, leaf] = dj
            if j < n - 1 and vs[f, j] < vs[f, j + 1]:
                maxp0[f, leaf] = 0.0     # empty present set: prefix 0
                minp0[f, leaf] = 0.0
                maxc0[f, leaf] = dj      # complement holds everyone
                minc0[f, leaf] = dj
        for i in range(M - 1, 0, -1):
            a = 2 * i
            b = a + 1
            sstatic[f, i] = sstatic[f, a] + sstatic[f, b]
            sa = ssump0[f, a]
            ca = sstatic[f, a] - sa
            ssump0[f, i] = sa + ssump0[f, b]
            maxp0[f, i] = max(maxp0[f, a], sa + maxp0[f, b])
            minp0[f, i] = min(minp0[f, a], sa + minp0[f, b])
            maxc0[f, i] = max(maxc0[f, a], ca + maxc0[f, b])
            minc0[f, i] = min(minc0[f, a], ca + minc0[f, b])
    return M, sstatic, ssump0, maxp0, minp0, maxc0, minc0


@njit(cache=True)
def depth2_sweep(vs, order, rank, delta):
    """Best depth-2 objective and its root (feature, boundary index).

    vs[f]    feature f's values sorted ascending
    order[f] subject ids in that order; rank[f] its inverse
    Returns (value, f0, k0); f0 = -1 when no valid root boundary exists.
    The scan is feature-ascending then boundary-ascending with strict
    improvement, so the reported root is the tie-break-canonical one.
    """
    p, n = vs.shape
    inf = np.inf
    M, sstatic, ssump0, maxp0, minp0, maxc0, minc0 = \
        _build_templates(vs, order, delta)

    ssump = np.empty(2 * M)
    maxp = np.empty(2 * M)
    minp = np.empty(2 * M)
    maxc = np.empty(2 * M)
    minc = np.empty(2 * M)

    prefT = np.empty(n)
    bestSplitL = np.empty(n - 1)
    bestSplitR = np.empty(n - 1)

    best = -inf
    bf0 = np.int64(-1)
    bk0 = np.int64(-1)

    for f0 in range(p):
        acc = 0.0
        for k in range(n):
            acc += delta[order[f0, k]]
            prefT[k] = acc
        total = prefT[n - 1]
        for k in range(n - 1):
            bestSplitL[k] = -inf
            bestSplitR[k] = -inf

        for f1 in range(p):
            stat = sstatic[f1]
            ssump[:] = ssump0[f1]
            maxp[:] = maxp0[f1]
            minp[:] = minp0[f1]
            maxc[:] = maxc0[f1]
            minc[:] = minc0[f1]

            for k in range(n - 1):
                sub = order[f0, k]
                pos = rank[f1, sub]
                leaf = M + pos
                d = delta[sub]
                ssump[leaf] = d
                if maxp[leaf] != -inf:    # valid boundary at this position
                    maxp[leaf] = d
                    minp[leaf] = d
                    maxc[leaf] = 0.0
                    minc[leaf] = 0.0
                i = leaf >> 1
                while i >= 1:
                    a = 2 * i
                    b = a + 1
                    sa = ssump[a]
                    ca = stat[a] - sa
                    ssump[i] = sa + ssump[b]
                    v = sa + maxp[b]
                    m = maxp[a]
                    maxp[i] = v if v > m else m
                    v = sa + minp[b]
                    m = minp[a]
                    minp[i] = v if v < m else m
                    v = ca + maxc[b]
                    m = maxc[a]
                    maxc[i] = v if v > m else m
                    v = ca + minc[b]
                    m = minc[a]
                    minc[i] = v if v < m else m
                    i >>= 1

                if vs[f0, k] < vs[f0, k + 1]:
                    TL = prefT[k]
                    TR = total - TL
                    c = maxp[1]
                    t = TL - minp[1]
                    if t > c:
                        c = t
                    if c > bestSplitL[k]:
                        bestSplitL[k] = c
                    c = maxc[1]
                    t = TR - minc[1]
                    if t > c:
                        c = t
                    if c > bestSplitR[k]:
                        bestSplitR[k] = c

        for k in range(n - 1):
            if vs[f0, k] < vs[f0, k + 1]:
                TL = prefT[k]
                TR = total - TL
                vL = TL if TL > 0.0 else 0.0
                if bestSplitL[k] > vL:
                    vL = bestSplitL[k]
                vR = TR if TR > 0.0 else 0.0
                if bestSplitR[k] > vR:
                    vR = bestSplitR[k]
                cand = vL + vR
                if cand > best:
                    best = cand
                    bf0 = np.int64(f0)
                    bk0 = np.int64(k)
    return best, bf0, bk0


def presort(X: np.ndarray):
    """(sorted values, argsort order, inverse rank), each (p, n)."""
    n, p = X.shape
    order = np.argsort(X, axis=0, kind="stable").T.copy()
    vs = np.take_along_axis(X.T, order, axis=1).copy()
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[None, :], axis=1)
    return np.ascontiguousarray(vs), np.ascontiguousarray(order), \
        np.ascontiguousarray(rank)


def best_depth1_subset(X: np.ndarray, delta: np.ndarray):
    """Canonical best depth-<=1 tree on (X, delta).

    Returns (value, feature, threshold, action_left, action_right); feature
    is -1 for a leaf, with the leaf's action in action_left. Ties prefer the
    leaf, then the lowest feature, then the lowest threshold; leaf action
    ties resolve to 0.
    """
    total = float(delta.sum())
    leaf_action = int(total > 0)
    best = (max(0.0, total), -1, 0.0, leaf_action, leaf_action)
    n, p = X.shape
    for f in range(p):
        o = np.argsort(X[:, f], kind="stable")
        v = X[o, f]
        P = np.cumsum(delta[o])[:-1]
        valid = np.nonzero(v[:-1] < v[1:])[0]
        if valid.size == 0:
            continue
        Pv = P[valid]
        gains = np.maximum(Pv, 0.0) + np.maximum(total - Pv, 0.0)
        j = int(np.argmax(gains))          # first max -> lowest threshold
        if gains[j] > best[0]:
            k = int(valid[j])
            best = (float(gains[j]), f, float(0.5 * (v[k] + v[k + 1])),
                    int(Pv[j] > 0), int(total - Pv[j] > 0))
    return best
