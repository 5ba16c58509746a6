"""Treatment-policy learning: exact depth-2 trees plus two regression baselines.

The tree search maximizes the doubly robust value estimate
mean_i Gamma_i(pi(X_i)) over all axis-aligned trees of depth <= 2 and is
exhaustive-equivalent, not greedy. Q-learning fits a lasso on
[X | W | W*X] and assigns the argmax arm; O-learning solves a
reward-weighted classification with binomial deviance loss.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from eegpolicy._treesearch import best_depth1_subset, depth2_sweep, presort

__all__ = [
    "PolicyError",
    "OverlapWarning",
    "PolicyNode",
    "PolicyTreeModel",
    "search_policy_tree",
    "QPolicy",
    "q_learning_fit",
    "lasso_fit",
    "lasso_kkt_gaps",
    "OPolicy",
    "o_learning_fit",
    "estimate_value",
    "policy_accuracy",
    "cross_validated_values",
]


class PolicyError(ValueError):
    pass


class OverlapWarning(UserWarning):
    """Evaluation rows overlap the training rows; value estimate is biased."""


# ---------------------------------------------------------------------------
# policy trees

@dataclass(frozen=True)
class PolicyNode:
    """Leaf (action set) or internal split (x[feature] <= threshold -> left)."""
    action: int | None = None
    feature: int | None = None
    threshold: float | None = None
    left: "PolicyNode | None" = None
    right: "PolicyNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.action is not None

    def __post_init__(self):
        if self.is_leaf:
            if self.action not in (0, 1):
                raise PolicyError("leaf action must be 0 or 1")
            if self.feature is not None:
                raise PolicyError("leaf cannot also split")
        elif self.feature is None or self.left is None or self.right is None:
            raise PolicyError("internal node needs feature, left and right")

    def assign(self, X: np.ndarray) -> np.ndarray:
        if self.is_leaf:
            return np.full(X.shape[0], self.action, dtype=np.int64)
        goes_left = X[:, self.feature] <= self.threshold
        out = np.empty(X.shape[0], dtype=np.int64)
        out[goes_left] = self.left.assign(X[goes_left])
        out[~goes_left] = self.right.assign(X[~goes_left])
        return out

    def to_dict(self, names=None) -> dict:
        if self.is_leaf:
            return {"action": int(self.action)}
        f = self.feature if names is None else names[self.feature]
        return {"split_feature": f, "threshold": float(self.threshold),
                "left": self.left.to_dict(names),
                "right": self.right.to_dict(names)}

    @staticmethod
    def from_dict(d: dict, names=None) -> "PolicyNode":
        if "action" in d:
            return PolicyNode(action=int(d["action"]))
        f = d["split_feature"]
        if isinstance(f, str):
            if names is None:
                raise PolicyError("named split without feature names")
            f = list(names).index(f)
        return PolicyNode(feature=int(f), threshold=float(d["threshold"]),
                          left=PolicyNode.from_dict(d["left"], names),
                          right=PolicyNode.from_dict(d["right"], names))


def _count_nodes(node: PolicyNode):
    if node.is_leaf:
        return 0, 1
    il, ll = _count_nodes(node.left)
    ir, lr = _count_nodes(node.right)
    return il + ir + 1, ll + lr


@dataclass(frozen=True)
class PolicyTreeModel:
    root: PolicyNode
    objective_value: float    # mean doubly robust score under the policy
    depth: int                # search depth requested
    n_train: int
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        internal, leaves = _count_nodes(self.root)
        if internal > 3 or leaves > 4:
            raise PolicyError("tree exceeds depth-2 shape")

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.root.assign(X)

    def to_dict(self) -> dict:
        return {"tree": self.root.to_dict(self.feature_names),
                "objective_value": self.objective_value,
                "depth": self.depth, "n_train": self.n_train,
                "feature_names": list(self.feature_names)
                if self.feature_names else None}

    @staticmethod
    def from_dict(d: dict) -> "PolicyTreeModel":
        names = tuple(d["feature_names"]) if d.get("feature_names") else None
        return PolicyTreeModel(
            root=PolicyNode.from_dict(d["tree"], names),
            objective_value=float(d["objective_value"]),
            depth=int(d["depth"]), n_train=int(d["n_train"]),
            feature_names=names)


def _node_from_depth1(result) -> PolicyNode:
    value, f, thr, a_left, a_right = result
    if f < 0:
        return PolicyNode(action=a_left)
    return PolicyNode(feature=f, threshold=thr,
                      left=PolicyNode(action=a_left),
                      right=PolicyNode(action=a_right))


def search_policy_tree(X: np.ndarray, gamma0: np.ndarray, gamma1: np.ndarray,
                       depth: int = 2,
                       feature_names=None) -> PolicyTreeModel:
    """Exact argmax of sum_i Gamma_i(pi(X_i)) over depth-<=`depth` trees.

    Equal-objective ties break toward the shallower tree, then the lowest
    feature index, then the lowest threshold. Thresholds are midpoints of
    adjacent observed values.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    gamma0 = np.asarray(gamma0, dtype=np.float64)
    gamma1 = np.asarray(gamma1, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise PolicyError("X must be 2-D with at least one column")
    n, d = X.shape
    if n < 4:
        raise PolicyError("need at least 4 subjects")
    if gamma0.shape != (n,) or gamma1.shape != (n,):
        raise PolicyError("scores must be n-vectors")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(gamma0))
            and np.all(np.isfinite(gamma1))):
        raise PolicyError("non-finite inputs")
    if depth not in (0, 1, 2):
        raise PolicyError("depth must be 0, 1 or 2")
    if feature_names is not None:
        feature_names = tuple(feature_names)
        if len(feature_names) != d:
            raise PolicyError("feature_names length mismatch")

    delta = gamma1 - gamma0
    total = float(delta.sum())
    best_value = max(0.0, total)
    root = PolicyNode(action=int(total > 0))

    if depth >= 1:
        d1 = best_depth1_subset(X, delta)
        if d1[0] > best_value:
            best_value = d1[0]
            root = _node_from_depth1(d1)

    if depth >= 2:
        vs, order, rank = presort(X)
        v2, f0, k0 = depth2_sweep(vs, order, rank, delta)
        if f0 >= 0 and v2 > best_value:
            thr = float(0.5 * (vs[f0, k0] + vs[f0, k0 + 1]))
            left_mask = X[:, f0] <= thr
            left = _node_from_depth1(
                best_depth1_subset(X[left_mask], delta[left_mask]))
            right = _node_from_depth1(
                best_depth1_subset(X[~left_mask], delta[~left_mask]))
            root = PolicyNode(feature=int(f0), threshold=thr,
                              left=left, right=right)

    actions = root.assign(X)
    objective = float(np.mean(np.where(actions == 1, gamma1, gamma0)))
    return PolicyTreeModel(root=root, objective_value=objective, depth=depth,
                           n_train=n, feature_names=feature_names)


# ---------------------------------------------------------------------------
# Q-learning: lasso on [X | W | W*X]

@njit(cache=True)
def _lasso_path_kernel(D, y, lams, colnorm2, tol, max_iter):
    n, q = D.shape
    betas = np.zeros((lams.size, q))
    beta = np.zeros(q)
    r = y.copy()
    for li in range(lams.size):
        lam = lams[li]
        for _ in range(max_iter):
            max_step = 0.0
            for j in range(q):
                njn = colnorm2[j] / n
                if njn == 0.0:
                    continue
                bj = beta[j]
                rho = 0.0
                for i in range(n):
                    rho += D[i, j] * r[i]
                rho = rho / n + bj * njn
                if rho > lam:
                    bn = (rho - lam) / njn
                elif rho < -lam:
                    bn = (rho + lam) / njn
                else:
                    bn = 0.0
                step = bn - bj
                if step != 0.0:
                    for i in range(n):
                        r[i] -= D[i, j] * step
                    beta[j] = bn
                    if abs(step) > max_step:
                        max_step = abs(step)
            if max_step < tol:
                break
        betas[li] = beta
    return betas


def lasso_fit(design: np.ndarray, y: np.ndarray, lam: float, *,
              fit_intercept: bool = True, standardize: bool = True,
              tol: float = 1e-10, max_iter: int = 100_000):
    """Coordinate-descent lasso; returns (intercept, coefficients).

    The penalty (applied in standardized space when standardize=True) never
    touches the intercept. lam is on the (1/n)||y - f||^2 + lam*||b||_1 scale.
    """
    D = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise PolicyError("lam must be non-negative")
    mu = D.mean(axis=0) if fit_intercept else np.zeros(D.shape[1])
    ybar = y.mean() if fit_intercept else 0.0
    sd = D.std(axis=0) if standardize else np.ones(D.shape[1])
    sd = np.where(sd == 0, 1.0, sd)
    Ds = np.asfortranarray((D - mu) / sd)
    colnorm2 = np.einsum("ij,ij->j", Ds, Ds)
    beta_std = _lasso_path_kernel(Ds, y - ybar, np.array([lam]), colnorm2,
                                  tol, max_iter)[0]
    coef = beta_std / sd
    return float(ybar - coef @ mu), coef


@dataclass(frozen=True)
class QPolicy:
    """Lasso arm-value model; treats when the fitted uplift is positive.

    Design column order: d main effects, the treatment indicator, then d
    treatment-by-covariate interactions.
    """
    beta_std: np.ndarray        # coefficients on standardized columns
    col_means: np.ndarray
    col_scales: np.ndarray
    y_mean: float
    penalty: float
    lambda_path: np.ndarray     # descending, as searched
    cv_mse: np.ndarray          # mean CV error per path entry
    nnz_path: np.ndarray        # nonzero count per path entry (full-data fit)
    n_features: int

    @property
    def coefficients(self) -> np.ndarray:
        return self.beta_std / self.col_scales

    @property
    def intercept(self) -> float:
        return float(self.y_mean - self.coefficients @ self.col_means)

    def _uplift(self, X: np.ndarray) -> np.ndarray:
        d = self.n_features
        coef = self.coefficients
        return coef[d] + X @ coef[d + 1:]

    def predict_outcome(self, X: np.ndarray, action: int) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        d = self.n_features
        coef = self.coefficients
        base = self.intercept + X @ coef[:d]
        return base + action * (coef[d] + X @ coef[d + 1:])

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (self._uplift(X) > 0).astype(np.int64)


def _q_design(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.column_stack([X, W, X * W[:, None]])


def _fold_blocks(n: int, folds: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def q_learning_fit(X: np.ndarray, W: np.ndarray, Y: np.ndarray,
                   lambda_grid=None, folds: int = 10,
                   seed: int = 0) -> QPolicy:
    """Cross-validated lasso Q-learning.

    The default grid is 50 log-spaced penalties from lam_max (the smallest
    penalty zeroing every coefficient) down four decades; exact CV-error ties
    go to the larger penalty.
    """
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, d = X.shape
    if not (np.any(W == 1) and np.any(W == 0)):
        raise PolicyError("both treatment arms must be present")
    if folds < 2 or folds > n:
        raise PolicyError("folds must be in [2, n]")
    D = _q_design(X, W)

    mu = D.mean(axis=0)
    sd = np.where(D.std(axis=0) == 0, 1.0, D.std(axis=0))
    Ds = np.asfortranarray((D - mu) / sd)
    yc = Y - Y.mean()

    if lambda_grid is None:
        lam_max = float(np.max(np.abs(Ds.T @ yc)) / n)
        if lam_max <= 0:
            lam_max = 1.0
        lams = np.logspace(np.log10(lam_max), np.log10(lam_max) - 4, 50)
    else:
        lams = np.sort(np.unique(np.asarray(lambda_grid, dtype=np.float64)))
        if lams.size == 0:
            raise PolicyError("lambda grid is empty")
        lams = lams[::-1].copy()

    # Path solves run with capped sweeps: deep in the path (penalty far
    # below lam_max, more active columns than rows) the minimizer is not
    # unique and cyclic descent crawls, while those entries only feed the
    # CV curve and the nonzero counts. The returned coefficients are
    # re-solved to full accuracy at the selected penalty below.
    path_tol, path_sweeps = 1e-6, 200
    mse = np.zeros(lams.size)
    for test_idx in _fold_blocks(n, folds, seed):
        mask = np.zeros(n, dtype=bool)
        mask[test_idx] = True
        Dtr, Dte = D[~mask], D[mask]
        ytr, yte = Y[~mask], Y[mask]
        mu_t = Dtr.mean(axis=0)
        sd_t = np.where(Dtr.std(axis=0) == 0, 1.0, Dtr.std(axis=0))
        Dts = np.asfortranarray((Dtr - mu_t) / sd_t)
        cn = np.einsum("ij,ij->j", Dts, Dts)
        betas = _lasso_path_kernel(Dts, ytr - ytr.mean(), lams, cn,
                                   path_tol, path_sweeps)
        pred = ytr.mean() + ((Dte - mu_t) / sd_t) @ betas.T
        mse += np.mean((pred - yte[:, None]) ** 2, axis=0)
    mse /= folds

    best = 0
    for i in range(1, lams.size):    # descending lams; strict improvement
        if mse[i] < mse[best]:
            best = i

    colnorm2 = np.einsum("ij,ij->j", Ds, Ds)
    betas_full = _lasso_path_kernel(Ds, yc, lams, colnorm2,
                                    path_tol, path_sweeps)
    betas_full[best] = _lasso_path_kernel(Ds, yc, lams[best:best + 1],
                                          colnorm2, 1e-10, 10_000)[0]
    return QPolicy(beta_std=betas_full[best], col_means=mu, col_scales=sd,
                   y_mean=float(Y.mean()), penalty=float(lams[best]),
                   lambda_path=lams, cv_mse=mse,
                   nnz_path=np.count_nonzero(betas_full, axis=1),
                   n_features=d)


def lasso_kkt_gaps(policy: QPolicy, X: np.ndarray, W: np.ndarray,
                   Y: np.ndarray):
    """|(1/n) x_j' residual| per column plus the zero-coefficient mask.

    At an exact optimum the gap is <= penalty everywhere and equals it on
    active coordinates.
    """
    D = _q_design(np.asarray(X, dtype=np.float64),
                  np.asarray(W, dtype=np.float64))
    Ds = (D - policy.col_means) / policy.col_scales
    r = (Y - policy.y_mean) - Ds @ policy.beta_std
    grads = np.abs(Ds.T @ r) / D.shape[0]
    return grads, policy.beta_std == 0.0


# ---------------------------------------------------------------------------
# O-learning: reward-weighted classification, binomial deviance

@dataclass(frozen=True)
class OPolicy:
    """Linear decision rule f(H); arm 1 iff f(H) > 0."""
    intercept: float
    coef: np.ndarray
    residualizer: str
    s_coef: np.ndarray | None    # [intercept, slopes] of the reward baseline
    ridge: float
    degenerate: bool
    converged: bool

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.intercept + X @ self.coef

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int64)


def o_learning_fit(X: np.ndarray, A: np.ndarray, R: np.ndarray,
                   prob: np.ndarray, residualizer: str = "linear",
                   ridge: float = 1e-4, max_iter: int = 200) -> OPolicy:
    """Weighted-classification policy search with deviance surrogate loss.

    A is the received arm in {-1, +1}; prob its assignment probability given
    the history. Rewards are residualized (s(H) linear in H by default,
    "zero" to disable); subjects are classified toward A when the residual is
    positive and away when negative, with weights |residual| / prob. The
    ridge term scales with the mean weight so sign decisions are invariant to
    positive rescaling of all rewards.
    """
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    prob = np.asarray(prob, dtype=np.float64)
    n, d = X.shape
    if not np.all(np.isin(A, (-1.0, 1.0))):
        raise PolicyError("A must take values in {-1, +1}")
    if np.any((prob <= 0) | (prob >= 1)):
        raise PolicyError("assignment probabilities must lie in (0, 1)")
    if not np.all(np.isfinite(R)):
        raise PolicyError("rewards must be finite")
    if residualizer == "linear":
        Z = np.column_stack([np.ones(n), X])
        s_coef, *_ = np.linalg.lstsq(Z, R, rcond=None)
        resid = R - Z @ s_coef
    elif residualizer == "zero":
        s_coef = None
        resid = R.copy()
    else:
        raise PolicyError(f"unknown residualizer {residualizer!r}")

    reward_scale = max(1.0, float(np.abs(R).max()))
    if np.all(np.abs(resid) <= 1e-12 * reward_scale):
        return OPolicy(intercept=0.0, coef=np.zeros(d),
                       residualizer=residualizer, s_coef=s_coef, ridge=ridge,
                       degenerate=True, converged=True)

    w = np.abs(resid) / prob
    labels = np.where(A * np.sign(resid) >= 0, 1.0, 0.0)   # targets in {0,1}
    wbar = float(w.mean())
    lam = ridge * n * wbar        # scales with rewards, incl. the intercept

    Z = np.column_stack([np.ones(n), X])
    theta = np.zeros(d + 1)
    scale = n * wbar
    converged = False

    def objective(t):
        m = Z @ t
        # w * log(1 + exp(-sign * m)) with labels in {0,1}
        sgn = 2.0 * labels - 1.0
        return float(w @ np.logaddexp(0.0, -sgn * m) + lam * (t @ t))

    obj = objective(theta)
    for _ in range(max_iter):
        m = Z @ theta
        p = 1.0 / (1.0 + np.exp(-m))
        grad = Z.T @ (w * (p - labels)) + 2.0 * lam * theta
        if np.max(np.abs(grad)) <= 1e-10 * scale:
            converged = True
            break
        h = w * p * (1.0 - p)
        hess = Z.T @ (Z * h[:, None]) + 2.0 * lam * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        t_new = theta - step
        obj_new = objective(t_new)
        halvings = 0
        while obj_new > obj and halvings < 30:
            step *= 0.5
            t_new = theta - step
            obj_new = objective(t_new)
            halvings += 1
        if obj_new >= obj and halvings == 30:
            converged = True       # no descent direction left; at optimum
            break
        theta, obj = t_new, obj_new
    return OPolicy(intercept=float(theta[0]), coef=theta[1:],
                   residualizer=residualizer, s_coef=s_coef, ridge=ridge,
                   degenerate=False, converged=converged)


# ---------------------------------------------------------------------------
# policy evaluation

def _resolve_actions(policy, X) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        actions = policy.astype(np.int64)
    else:
        if X is None:
            raise PolicyError("X is required to evaluate a policy object")
        actions = policy.predict(X)
    if not np.all(np.isin(actions, (0, 1))):
        raise PolicyError("policy actions must be 0 or 1")
    return actions


def estimate_value(policy, X=None, *, gamma0=None, gamma1=None,
                   y0=None, y1=None, train_index=None,
                   eval_index=None) -> float:
    """Mean outcome under the policy.

    Doubly robust mode: supply per-arm scores gamma0/gamma1. Simulation mode:
    supply true potential outcomes y0/y1. Evaluation rows should be disjoint
    from the training rows; pass train_index/eval_index to get an
    OverlapWarning when they are not.
    """
    dr = gamma0 is not None or gamma1 is not None
    sim = y0 is not None or y1 is not None
    if dr == sim:
        raise PolicyError("supply exactly one of (gamma0, gamma1) "
                          "or (y0, y1)")
    lo, hi = (gamma0, gamma1) if dr else (y0, y1)
    if lo is None or hi is None:
        raise PolicyError("both arms' values are required")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    actions = _resolve_actions(policy, X)
    if lo.shape != actions.shape or hi.shape != actions.shape:
        raise PolicyError("value inputs must match the number of subjects")
    if train_index is not None and eval_index is not None:
        overlap = np.intersect1d(train_index, eval_index)
        if overlap.size:
            warnings.warn(f"{overlap.size} evaluation rows were used in "
                          "training", OverlapWarning, stacklevel=2)
    return float(np.mean(np.where(actions == 1, hi, lo)))


def policy_accuracy(policy, X, optimal_actions) -> float:
    """Fraction of subjects assigned their optimal arm."""
    optimal = np.asarray(optimal_actions, dtype=np.int64)
    actions = _resolve_actions(policy, X)
    if optimal.shape != actions.shape:
        raise PolicyError("optimal_actions must match the number of subjects")
    return float(np.mean(actions == optimal))


def cross_validated_values(X, W, Y, n_folds: int = 3, seed: int = 0,
                           forest_params=None, nuisance_params=None,
                           propensity=None,
                           methods=("policy_tree", "q_learning",
                                    "o_learning")) -> dict:
    """Held-out doubly robust value per method (mean and SE over folds).

    Each fold fits every policy on the remaining data and scores it with
    per-arm doubly robust scores built from that training fit's forest and
    nuisance models evaluated on the held-out rows.
    """
    from eegpolicy.causal_forest import (PROPENSITY_CLIP, ForestParams,
                                         RegressionForest, fit_causal_forest,
                                         predict_cate)
    from eegpolicy.effects import doubly_robust_scores, scores_from_model

    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if forest_params is None:
        forest_params = ForestParams(num_trees=500)
    unknown = set(methods) - {"policy_tree", "q_learning", "o_learning"}
    if unknown:
        raise PolicyError(f"unknown methods: {sorted(unknown)}")

    per_fold = {m: [] for m in methods}
    for fold, test_idx in enumerate(_fold_blocks(n, n_folds, seed)):
        mask = np.zeros(n, dtype=bool)
        mask[test_idx] = True
        Xtr, Xte = X[~mask], X[mask]
        Wtr, Wte = W[~mask], W[mask]
        Ytr, Yte = Y[~mask], Y[mask]

        model = fit_causal_forest(Xtr, Wtr, Ytr, forest_params,
                                  nuisance_params=nuisance_params,
                                  propensity=propensity)
        tau_te = predict_cate(model, Xte)
        m_te = RegressionForest(model.nuisance_params).fit(Xtr, Ytr) \
            .predict(Xte)
        if propensity is not None:
            e_te = np.broadcast_to(np.asarray(propensity, dtype=np.float64),
                                   Wte.shape).copy()
        else:
            e_te = RegressionForest(model.nuisance_params).fit(Xtr, Wtr) \
                .predict(Xte)
        e_te = np.clip(e_te, *PROPENSITY_CLIP)
        s_te = doubly_robust_scores(tau_te, e_te, m_te, Wte, Yte)

        fitted = {}
        if "policy_tree" in methods:
            s_tr = scores_from_model(model)
            fitted["policy_tree"] = search_policy_tree(
                Xtr, s_tr.gamma_control, s_tr.gamma_treated)
        if "q_learning" in methods:
            fitted["q_learning"] = q_learning_fit(Xtr, Wtr, Ytr,
                                                  folds=min(5, len(Ytr)),
                                                  seed=seed + fold)
        if "o_learning" in methods:
            prob = np.where(Wtr == 1, model.e_hat, 1.0 - model.e_hat)
            fitted["o_learning"] = o_learning_fit(Xtr, 2.0 * Wtr - 1.0, Ytr,
                                                  prob)
        for name, pol in fitted.items():
            per_fold[name].append(estimate_value(
                pol, Xte, gamma0=s_te.gamma_control,
                gamma1=s_te.gamma_treated))

    out = {"n_folds": n_folds, "weighting": "doubly_robust", "methods": {}}
    for name, vals in per_fold.items():
        vals = np.array(vals)
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 \
            else float("nan")
        out["methods"][name] = {"mean": float(vals.mean()), "se": se,
                                "values": vals.tolist()}
    return out
