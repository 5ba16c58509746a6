"""Numba kernels for honest tree growing and forest traversal.

Trees maximize n_L*n_R/(n_L+n_R) * (ratio_L - ratio_R)^2 where a node's
ratio is sum(A)/sum(D) over the grow half. Regression trees are the D=1
special case (the ratio is then the node mean). Leaf payloads are estimate-
half means of A and D, so honest forest predictions are

    tau(x) = sum_b meanA_b(leaf(x)) / sum_b meanD_b(leaf(x)),

which reproduces the leaf-co-occurrence adaptive-weight formula.
"""

import numpy as np
from numba import njit

LEAF = -1
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _next_u64(state):
    # splitmix64
    state = state + _SM_GAMMA
    z = state
    z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
    z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True)
def _sample_features(perm, mtry, state):
    """Partial Fisher-Yates; returns the chosen block sorted ascending."""
    d = perm.shape[0]
    for j in range(mtry):
        state, z = _next_u64(state)
        k = j + int(z % np.uint64(d - j))
        perm[j], perm[k] = perm[k], perm[j]
    chosen = np.sort(perm[:mtry].copy())
    return chosen, state


@njit(cache=True)
def grow_tree(Xg, Ag, Dg, Wg, Xe, Ae, De, We, mtry, min_node, per_arm,
              max_depth, seed,
              feature, threshold, left, right, meanA, meanD, depth_arr,
              n_est, idxg, idxe):
    """Grow one honest tree in place; returns the node count.

    idxg/idxe are permutation buffers over the grow/estimate halves; node
    ranges partition them. Split validity requires min_node (per arm when
    per_arm) on BOTH halves of BOTH children, so every leaf stays usable
    for estimation.
    """
    ng = Xg.shape[0]
    ne = Xe.shape[0]
    d = Xg.shape[1]
    for i in range(ng):
        idxg[i] = i
    for i in range(ne):
        idxe[i] = i
    perm = np.empty(d, dtype=np.int64)
    for i in range(d):
        perm[i] = i
    vg = np.empty(ng)
    ve = np.empty(ne)
    og_buf = np.empty(ng, dtype=np.int64)
    oe_buf = np.empty(ne, dtype=np.int64)
    gtmp = np.empty(ng, dtype=np.int64)
    etmp = np.empty(ne, dtype=np.int64)
    state = seed

    max_nodes = feature.shape[0]
    stack = np.empty((max_nodes, 5), dtype=np.int64)  # gs ge es ee depth
    stack_ids = np.empty(max_nodes, dtype=np.int64)
    n_nodes = 1
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = ng
    stack[0, 2] = 0
    stack[0, 3] = ne
    stack[0, 4] = 0
    stack_ids[0] = 0

    while top >= 0:
        gs, ge, es, ee, depth = (stack[top, 0], stack[top, 1], stack[top, 2],
                                 stack[top, 3], stack[top, 4])
        node = stack_ids[top]
        top -= 1
        ng_node = ge - gs
        ne_node = ee - es

        sumAe = 0.0
        sumDe = 0.0
        for p in range(es, ee):
            sumAe += Ae[idxe[p]]
            sumDe += De[idxe[p]]
        meanA[node] = sumAe / ne_node if ne_node > 0 else 0.0
        meanD[node] = sumDe / ne_node if ne_node > 0 else 0.0
        n_est[node] = ne_node
        depth_arr[node] = depth
        feature[node] = LEAF
        left[node] = -1
        right[node] = -1

        if depth >= max_depth or ng_node < 2 * min_node \
                or ne_node < 2 * min_node:
            continue

        totalA = 0.0
        totalD = 0.0
        totalW = 0
        for p in range(gs, ge):
            totalA += Ag[idxg[p]]
            totalD += Dg[idxg[p]]
            totalW += Wg[idxg[p]]
        totalWe = 0
        for p in range(es, ee):
            totalWe += We[idxe[p]]

        best_crit = 0.0
        best_f = -1
        best_thr = 0.0
        chosen, state = _sample_features(perm, mtry, state)
        for fi in range(mtry):
            f = chosen[fi]
            for i in range(ng_node):
                vg[i] = Xg[idxg[gs + i], f]
            og = np.argsort(vg[:ng_node])
            for i in range(ne_node):
                ve[i] = Xe[idxe[es + i], f]
            oe = np.argsort(ve[:ne_node])

            runA = 0.0
            runD = 0.0
            runW = 0
            ep = 0
            epW = 0
            for j in range(ng_node - 1):
                gidx = idxg[gs + og[j]]
                runA += Ag[gidx]
                runD += Dg[gidx]
                runW += Wg[gidx]
                v_here = vg[og[j]]
                v_next = vg[og[j + 1]]
                if v_next <= v_here:
                    continue
                thr = 0.5 * (v_here + v_next)
                if thr <= v_here:  # midpoint collapsed onto the left value
                    thr = v_here
                while ep < ne_node and ve[oe[ep]] <= thr:
                    epW += We[idxe[es + oe[ep]]]
                    ep += 1
                nL = j + 1
                nR = ng_node - nL
                neL = ep
                neR = ne_node - neL
                if per_arm:
                    wL = runW
                    cL = nL - wL
                    wR = totalW - wL
                    cR = nR - wR
                    ewL = epW
                    ecL = neL - ewL
                    ewR = totalWe - ewL
                    ecR = neR - ewR
                    if (wL < min_node or cL < min_node or wR < min_node
                            or cR < min_node or ewL < min_node
                            or ecL < min_node or ewR < min_node
                            or ecR < min_node):
                        continue
                else:
                    if (nL < min_node or nR < min_node or neL < min_node
                            or neR < min_node):
                        continue
                dL = runD
                dR = totalD - runD
                if dL <= 1e-12 or dR <= 1e-12:
                    continue
                tau_diff = runA / dL - (totalA - runA) / dR
                crit = nL * nR / (nL + nR) * tau_diff * tau_diff
                if crit > best_crit:
                    best_crit = crit
                    best_f = f
                    best_thr = thr

        if best_f < 0:
            continue

        # stable partition of both halves around the split
        gmid = _partition(Xg, idxg, gs, ge, best_f, best_thr, gtmp)
        emid = _partition(Xe, idxe, es, ee, best_f, best_thr, etmp)
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        top += 1
        stack[top, 0] = gs
        stack[top, 1] = gmid
        stack[top, 2] = es
        stack[top, 3] = emid
        stack[top, 4] = depth + 1
        stack_ids[top] = lid
        top += 1
        stack[top, 0] = gmid
        stack[top, 1] = ge
        stack[top, 2] = emid
        stack[top, 3] = ee
        stack[top, 4] = depth + 1
        stack_ids[top] = rid
    return n_nodes


@njit(cache=True, inline="always")
def _partition(X, idx, start, end, f, thr, tmp):
    """Stable partition idx[start:end] into (<= thr, > thr); returns the cut."""
    m = 0
    for p in range(start, end):
        if X[idx[p], f] <= thr:
            tmp[m] = idx[p]
            m += 1
    k = m
    for p in range(start, end):
        if X[idx[p], f] > thr:
            tmp[k] = idx[p]
            k += 1
    for p in range(end - start):
        idx[start + p] = tmp[p]
    return start + m


@njit(cache=True, inline="always")
def _leaf_of(x, feature, threshold, left, right, base):
    node = base
    while feature[node] != LEAF:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True)
def forest_sums(X, feature, threshold, left, right, meanA, meanD, tree_ptr):
    """Per row: (sum over trees of leaf meanA, of leaf meanD, tree count)."""
    n = X.shape[0]
    n_trees = tree_ptr.shape[0] - 1
    numer = np.zeros(n)
    denom = np.zeros(n)
    for b in range(n_trees):
        base = tree_ptr[b]
        for i in range(n):
            leaf = _leaf_of(X[i], feature, threshold, left, right, base)
            numer[i] += meanA[leaf]
            denom[i] += meanD[leaf]
    return numer, denom


@njit(cache=True)
def forest_sums_oob(X, feature, threshold, left, right, meanA, meanD,
                    tree_ptr, inbag):
    """Like forest_sums but using, for row i, only trees with i out-of-bag."""
    n = X.shape[0]
    n_trees = tree_ptr.shape[0] - 1
    numer = np.zeros(n)
    denom = np.zeros(n)
    used = np.zeros(n, dtype=np.int64)
    for b in range(n_trees):
        base = tree_ptr[b]
        for i in range(n):
            if inbag[b, i]:
                continue
            leaf = _leaf_of(X[i], feature, threshold, left, right, base)
            numer[i] += meanA[leaf]
            denom[i] += meanD[leaf]
            used[i] += 1
    return numer, denom, used


@njit(cache=True)
def leaf_assignments(X, feature, threshold, left, right, tree_ptr):
    """Leaf node id (global) per tree per row: shape n_trees x n."""
    n = X.shape[0]
    n_trees = tree_ptr.shape[0] - 1
    out = np.empty((n_trees, n), dtype=np.int64)
    for b in range(n_trees):
        base = tree_ptr[b]
        for i in range(n):
            out[b, i] = _leaf_of(X[i], feature, threshold, left, right, base)
    return out
