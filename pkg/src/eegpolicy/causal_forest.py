"""Honest forests: nuisance regression forests and the causal forest.

The causal forest residualizes outcomes and treatments with cross-fitted
nuisance estimates, grows honest trees on the residual products
A = (Y - m)(W - e) and D = (W - e)^2, and predicts

    tau(x) = sum_b meanA_b(leaf_b(x)) / sum_b meanD_b(leaf_b(x)),

the adaptive-weight ratio over leaf co-occurrence weights. Out-of-bag
predictions use only trees whose subsample excludes the queried row.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._forest_kernels import (
    LEAF,
    forest_sums,
    forest_sums_oob,
    grow_tree,
    leaf_assignments,
)

FORMAT_VERSION = 1
PROPENSITY_CLIP = (0.05, 0.95)


class ForestError(ValueError):
    pass


class OutOfBagUnavailableError(ForestError):
    def __init__(self, rows):
        super().__init__(f"rows {rows} are in-bag for every tree; increase "
                         "num_trees or lower subsample_ratio")
        self.rows = rows


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 2000
    subsample_ratio: float = 0.5
    honesty_ratio: float = 0.5
    mtry: int | None = None  # None -> ceil(sqrt(d))
    min_node_size: int = 5   # per arm for causal trees
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ForestError("num_trees must be >= 1")
        if not 0 < self.subsample_ratio <= 1:
            raise ForestError("subsample_ratio must be in (0, 1]")
        if not 0 < self.honesty_ratio < 1:
            raise ForestError("honesty_ratio must be in (0, 1)")
        if self.min_node_size < 1:
            raise ForestError("min_node_size must be >= 1")

    def resolve_mtry(self, d: int) -> int:
        return self.mtry if self.mtry else max(1, math.ceil(math.sqrt(d)))


@dataclass
class _Trees:
    """Stacked node arrays for a whole forest."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    meanA: np.ndarray
    meanD: np.ndarray
    depth: np.ndarray
    n_est: np.ndarray
    tree_ptr: np.ndarray
    inbag: np.ndarray      # num_trees x n bool
    grow_rows: np.ndarray  # concatenated row ids
    grow_ptr: np.ndarray
    est_rows: np.ndarray
    est_ptr: np.ndarray

    @property
    def num_trees(self) -> int:
        return self.tree_ptr.size - 1


def _grow_forest(X: np.ndarray, A: np.ndarray, D: np.ndarray, W: np.ndarray,
                 params: ForestParams, per_arm: bool) -> _Trees:
    n, d = X.shape
    mtry = params.resolve_mtry(d)
    max_depth = params.max_depth if params.max_depth else 10 ** 9
    s = max(2, int(round(params.subsample_ratio * n)))
    s = min(s, n)
    n_grow = min(max(1, int(round(params.honesty_ratio * s))), s - 1)

    seeds = np.random.SeedSequence(params.seed).spawn(params.num_trees)
    cap = 2 * s + 1
    feats, thrs, lefts, rights = [], [], [], []
    mAs, mDs, depths, nests = [], [], [], []
    tree_ptr = np.zeros(params.num_trees + 1, dtype=np.int64)
    inbag = np.zeros((params.num_trees, n), dtype=np.bool_)
    grow_lists, est_lists = [], []

    Wc = W.astype(np.uint8)
    feature = np.empty(cap, dtype=np.int64)
    threshold = np.empty(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    meanA = np.empty(cap)
    meanD = np.empty(cap)
    depth_arr = np.empty(cap, dtype=np.int64)
    n_est = np.empty(cap, dtype=np.int64)

    for b, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        sub = rng.choice(n, size=s, replace=False)
        grow = np.sort(sub[:n_grow])
        est = np.sort(sub[n_grow:])
        kernel_seed = ss.generate_state(1, dtype=np.uint64)[0]
        idxg = np.empty(grow.size, dtype=np.int64)
        idxe = np.empty(est.size, dtype=np.int64)
        n_nodes = grow_tree(X[grow], A[grow], D[grow], Wc[grow],
                            X[est], A[est], D[est], Wc[est],
                            mtry, params.min_node_size, per_arm, max_depth,
                            kernel_seed, feature, threshold, left, right,
                            meanA, meanD, depth_arr, n_est, idxg, idxe)
        feats.append(feature[:n_nodes].copy())
        thrs.append(threshold[:n_nodes].copy())
        # child ids become global node ids once trees are stacked
        offset = tree_ptr[b]
        is_leaf = feature[:n_nodes] == LEAF
        lefts.append(np.where(is_leaf, -1, left[:n_nodes] + offset))
        rights.append(np.where(is_leaf, -1, right[:n_nodes] + offset))
        mAs.append(meanA[:n_nodes].copy())
        mDs.append(meanD[:n_nodes].copy())
        depths.append(depth_arr[:n_nodes].copy())
        nests.append(n_est[:n_nodes].copy())
        tree_ptr[b + 1] = tree_ptr[b] + n_nodes
        inbag[b, sub] = True
        grow_lists.append(grow)
        est_lists.append(est)

    return _Trees(
        feature=np.concatenate(feats), threshold=np.concatenate(thrs),
        left=np.concatenate(lefts), right=np.concatenate(rights),
        meanA=np.concatenate(mAs), meanD=np.concatenate(mDs),
        depth=np.concatenate(depths), n_est=np.concatenate(nests),
        tree_ptr=tree_ptr, inbag=inbag,
        grow_rows=np.concatenate(grow_lists),
        grow_ptr=np.cumsum([0] + [g.size for g in grow_lists]),
        est_rows=np.concatenate(est_lists),
        est_ptr=np.cumsum([0] + [e.size for e in est_lists]),
    )


def _stacked_predict(trees: _Trees, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return forest_sums(np.ascontiguousarray(X, dtype=np.float64),
                       trees.feature, trees.threshold, trees.left,
                       trees.right, trees.meanA, trees.meanD, trees.tree_ptr)


def _stacked_predict_oob(trees: _Trees, X: np.ndarray):
    numer, denom, used = forest_sums_oob(
        np.ascontiguousarray(X, dtype=np.float64), trees.feature,
        trees.threshold, trees.left, trees.right, trees.meanA, trees.meanD,
        trees.tree_ptr, trees.inbag)
    if np.any(used == 0):
        raise OutOfBagUnavailableError(np.nonzero(used == 0)[0].tolist())
    return numer, denom, used


# ---------------------------------------------------------------------------
# regression forest

class RegressionForest:
    """Honest forest for a continuous (or binary 0/1) target."""

    def __init__(self, params: ForestParams = ForestParams()):
        self.params = params
        self._trees: _Trees | None = None
        self._X: np.ndarray | None = None
        self._y: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RegressionForest":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        n = X.shape[0]
        if y.shape != (n,):
            raise ForestError("y must have one entry per row of X")
        if n < 2 * self.params.min_node_size:
            raise ForestError("need at least 2*min_node_size rows")
        self._trees = _grow_forest(X, y, np.ones(n), np.zeros(n),
                                   self.params, per_arm=False)
        self._X, self._y = X, y
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        numer, denom = _stacked_predict(self._fitted(), X)
        return numer / denom

    def predict_oob(self) -> np.ndarray:
        numer, denom, _ = _stacked_predict_oob(self._fitted(), self._X)
        return numer / denom

    def _fitted(self) -> _Trees:
        if self._trees is None:
            raise ForestError("forest is not fitted")
        return self._trees


# ---------------------------------------------------------------------------
# nuisance cross-fitting

def crossfit_nuisances(X: np.ndarray, W: np.ndarray, Y: np.ndarray,
                       params: ForestParams, n_folds: int = 10,
                       clip: tuple[float, float] = PROPENSITY_CLIP,
                       seed: int = 0):
    """Out-of-fold m(x)=E[Y|X] and e(x)=E[W|X] via K-fold forests.

    Returns (m_hat, e_hat clipped, clip_count, fold_of).
    """
    n = X.shape[0]
    if n_folds < 2 or n_folds > n:
        raise ForestError("n_folds must be in [2, n]")
    order = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for k, chunk in enumerate(np.array_split(order, n_folds)):
        fold_of[chunk] = k
    m_hat = np.empty(n)
    e_hat = np.empty(n)
    for k in range(n_folds):
        test = fold_of == k
        train = ~test
        fp = replace(params, seed=params.seed + 7919 * k)
        m_hat[test] = RegressionForest(fp).fit(X[train], Y[train]) \
            .predict(X[test])
        fp2 = replace(params, seed=params.seed + 7919 * k + 104729)
        e_hat[test] = RegressionForest(fp2).fit(X[train], W[train]) \
            .predict(X[test])
    lo, hi = clip
    clip_count = int(np.sum((e_hat < lo) | (e_hat > hi)))
    return m_hat, np.clip(e_hat, lo, hi), clip_count, fold_of


# ---------------------------------------------------------------------------
# causal forest

@dataclass
class CausalForestModel:
    params: ForestParams
    nuisance_params: ForestParams
    X: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    m_hat: np.ndarray
    e_hat: np.ndarray        # clipped
    clip_count: int
    fold_of: np.ndarray
    A: np.ndarray            # (Y - m)(W - e)
    D: np.ndarray            # (W - e)^2
    trees: _Trees = field(repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def fit_causal_forest(X: np.ndarray, W: np.ndarray, Y: np.ndarray,
                      params: ForestParams = ForestParams(),
                      nuisance_params: ForestParams | None = None,
                      propensity: float | np.ndarray | None = None,
                      n_folds: int = 10,
                      clip: tuple[float, float] = PROPENSITY_CLIP
                      ) -> CausalForestModel:
    """Residualize with cross-fitted nuisances, then grow the honest forest.

    `propensity` short-circuits the e(x) forest with known assignment
    probabilities (randomized trials); m(x) is still cross-fitted.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    W = np.ascontiguousarray(W, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    n = X.shape[0]
    if not (np.any(W == 1) and np.any(W == 0)):
        raise ForestError("both treatment arms must be present")
    if nuisance_params is None:
        nuisance_params = replace(params, num_trees=min(params.num_trees, 500),
                                  min_node_size=5, max_depth=None)
    m_hat, e_fitted, clip_count, fold_of = crossfit_nuisances(
        X, W, Y, nuisance_params, n_folds=n_folds, clip=clip,
        seed=params.seed + 13)
    if propensity is not None:
        e_hat = np.broadcast_to(np.asarray(propensity, dtype=np.float64),
                                (n,)).copy()
        e_hat = np.clip(e_hat, clip[0], clip[1])
        clip_count = 0
    else:
        e_hat = e_fitted
    A = (Y - m_hat) * (W - e_hat)
    D = (W - e_hat) ** 2
    trees = _grow_forest(X, A, D, W, params, per_arm=True)
    return CausalForestModel(params=params, nuisance_params=nuisance_params,
                             X=X, W=W, Y=Y, m_hat=m_hat, e_hat=e_hat,
                             clip_count=clip_count, fold_of=fold_of,
                             A=A, D=D, trees=trees)


def predict_cate(model: CausalForestModel, X: np.ndarray) -> np.ndarray:
    """tau-hat at fresh covariate rows."""
    numer, denom = _stacked_predict(model.trees, X)
    if np.any(denom <= 0):
        raise ForestError("degenerate prediction: no treatment variation in "
                          "the leaves reached by some rows")
    return numer / denom


def predict_cate_oob(model: CausalForestModel) -> np.ndarray:
    """tau-hat^(-i): per training row, only trees whose subsample omits it."""
    numer, denom, _ = _stacked_predict_oob(model.trees, model.X)
    if np.any(denom <= 0):
        raise ForestError("degenerate out-of-bag prediction")
    return numer / denom


def leaf_weights(model: CausalForestModel, x: np.ndarray) -> np.ndarray:
    """Adaptive weights alpha_i(x): frequency of co-occurrence of training
    row i with x in estimation leaves, averaged over trees. Independent
    route to the same prediction: sum_i alpha_i A_i / sum_i alpha_i D_i.
    """
    t = model.trees
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    alpha = np.zeros(model.n)
    x_leaf = leaf_assignments(x, t.feature, t.threshold, t.left, t.right,
                              t.tree_ptr)[:, 0]
    train_leaf = leaf_assignments(model.X, t.feature, t.threshold, t.left,
                                  t.right, t.tree_ptr)
    B = t.num_trees
    for b in range(B):
        est = t.est_rows[t.est_ptr[b]:t.est_ptr[b + 1]]
        mates = est[train_leaf[b, est] == x_leaf[b]]
        if mates.size:
            alpha[mates] += 1.0 / (B * mates.size)
    return alpha


def honesty_violations(model: CausalForestModel) -> int:
    """Rows appearing in both halves of any tree (must be 0)."""
    t = model.trees
    bad = 0
    for b in range(t.num_trees):
        grow = t.grow_rows[t.grow_ptr[b]:t.grow_ptr[b + 1]]
        est = t.est_rows[t.est_ptr[b]:t.est_ptr[b + 1]]
        bad += np.intersect1d(grow, est).size
    return bad


# ---------------------------------------------------------------------------
# R-loss tuning

def r_loss(model: CausalForestModel) -> float:
    """sum_i ((Y_i - m_i) - tau_oob_i (W_i - e_i))^2."""
    tau = predict_cate_oob(model)
    resid = (model.Y - model.m_hat) - tau * (model.W - model.e_hat)
    return float(resid @ resid)


def tune_r_loss(X: np.ndarray, W: np.ndarray, Y: np.ndarray,
                grid: list[dict], base: ForestParams = ForestParams(),
                nuisance_params: ForestParams | None = None,
                propensity: float | np.ndarray | None = None,
                n_folds: int = 10,
                diagnostics: dict | None = None) -> ForestParams:
    """Pick the grid point minimizing out-of-bag R-loss.

    Grid entries are ForestParams field overrides. Exact ties go to the
    larger min_node_size (smaller model); candidates are scanned in
    descending min_node_size and only strict improvements replace the
    incumbent.
    """
    if not grid:
        raise ForestError("grid must be non-empty")
    order = sorted(range(len(grid)),
                   key=lambda i: -grid[i].get("min_node_size",
                                              base.min_node_size))
    best_params = None
    best_loss = np.inf
    losses = [0.0] * len(grid)
    for i in order:
        cand = replace(base, **grid[i])
        model = fit_causal_forest(X, W, Y, cand,
                                  nuisance_params=nuisance_params,
                                  propensity=propensity, n_folds=n_folds)
        losses[i] = r_loss(model)
        if losses[i] < best_loss:
            best_loss = losses[i]
            best_params = cand
    if diagnostics is not None:
        diagnostics["losses"] = losses
        diagnostics["best_loss"] = best_loss
    return best_params


# ---------------------------------------------------------------------------
# variable importance

@dataclass(frozen=True)
class ImportanceReport:
    importances: np.ndarray   # per feature, in [0, 1]
    max_depth: int
    ranking: tuple[int, ...]  # feature indices, most important first

    def top(self, k: int) -> list[tuple[int, float]]:
        return [(j, float(self.importances[j])) for j in self.ranking[:k]]


def split_counts_by_layer(trees: _Trees, d: int, max_depth: int) -> np.ndarray:
    """counts[f, l-1] = number of splits on feature f at layer l (root = 1)."""
    counts = np.zeros((d, max_depth), dtype=np.int64)
    internal = trees.feature != LEAF
    layers = trees.depth[internal] + 1
    feats = trees.feature[internal]
    keep = layers <= max_depth
    np.add.at(counts, (feats[keep], layers[keep] - 1), 1)
    return counts


def variable_importance(model: CausalForestModel,
                        max_depth: int = 4) -> ImportanceReport:
    """Split-frequency importance with layer weights l^-2, layers 1..max_depth.

    A layer with no splits anywhere in the forest contributes zero share, so
    for very shallow forests the importances may total less than one.
    """
    counts = split_counts_by_layer(model.trees, model.d, max_depth)
    if counts.sum() == 0:
        raise ForestError("forest contains no splits")
    layer_totals = counts.sum(axis=0)
    weights = 1.0 / np.arange(1, max_depth + 1) ** 2
    shares = np.divide(counts, layer_totals,
                       out=np.zeros_like(counts, dtype=np.float64),
                       where=layer_totals > 0)
    importances = (shares @ weights) / weights.sum()
    ranking = tuple(int(j) for j in np.argsort(-importances, kind="stable"))
    return ImportanceReport(importances, max_depth, ranking)


# ---------------------------------------------------------------------------
# serialization: JSON tree structure + binary leaf/nuisance tables in a zip

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    # fixed timestamp so identical models are byte-identical on disk
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o600 << 16
    zf.writestr(info, data)


def save_model(model: CausalForestModel, path: str | Path) -> None:
    t = model.trees
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "causal_forest",
        "params": _params_dict(model.params),
        "nuisance_params": _params_dict(model.nuisance_params),
        "n": model.n,
        "d": model.d,
        "clip_count": model.clip_count,
        "trees": {
            "feature": t.feature.tolist(),
            "threshold": t.threshold.tolist(),
            "left": t.left.tolist(),
            "right": t.right.tolist(),
            "depth": t.depth.tolist(),
            "tree_ptr": t.tree_ptr.tolist(),
        },
    }
    arrays = dict(meanA=t.meanA, meanD=t.meanD, n_est=t.n_est,
                  inbag=np.packbits(t.inbag, axis=1), grow_rows=t.grow_rows,
                  grow_ptr=t.grow_ptr, est_rows=t.est_rows, est_ptr=t.est_ptr,
                  X=model.X, W=model.W, Y=model.Y, m_hat=model.m_hat,
                  e_hat=model.e_hat, fold_of=model.fold_of, A=model.A,
                  D=model.D)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as npz:
        for name, arr in arrays.items():
            abuf = io.BytesIO()
            np.lib.format.write_array(abuf, np.ascontiguousarray(arr),
                                      allow_pickle=False)
            _zip_entry(npz, f"{name}.npy", abuf.getvalue())
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        _zip_entry(zf, "model.json", json.dumps(header).encode())
        _zip_entry(zf, "tables.npz", buf.getvalue())


def load_model(path: str | Path) -> CausalForestModel:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("model.json"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ForestError(
                f"unsupported model format {header.get('format_version')}")
        tables = np.load(io.BytesIO(zf.read("tables.npz")))
    tt = header["trees"]
    n = header["n"]
    trees = _Trees(
        feature=np.array(tt["feature"], dtype=np.int64),
        threshold=np.array(tt["threshold"], dtype=np.float64),
        left=np.array(tt["left"], dtype=np.int64),
        right=np.array(tt["right"], dtype=np.int64),
        meanA=tables["meanA"], meanD=tables["meanD"], n_est=tables["n_est"],
        depth=np.array(tt["depth"], dtype=np.int64),
        tree_ptr=np.array(tt["tree_ptr"], dtype=np.int64),
        inbag=np.unpackbits(tables["inbag"], axis=1, count=n).astype(bool),
        grow_rows=tables["grow_rows"], grow_ptr=tables["grow_ptr"],
        est_rows=tables["est_rows"], est_ptr=tables["est_ptr"])
    return CausalForestModel(
        params=ForestParams(**header["params"]),
        nuisance_params=ForestParams(**header["nuisance_params"]),
        X=tables["X"], W=tables["W"], Y=tables["Y"], m_hat=tables["m_hat"],
        e_hat=tables["e_hat"], clip_count=header["clip_count"],
        fold_of=tables["fold_of"], A=tables["A"], D=tables["D"], trees=trees)


def _params_dict(p: ForestParams) -> dict:
    return {"num_trees": p.num_trees, "subsample_ratio": p.subsample_ratio,
            "honesty_ratio": p.honesty_ratio, "mtry": p.mtry,
            "min_node_size": p.min_node_size, "max_depth": p.max_depth,
            "seed": p.seed}
