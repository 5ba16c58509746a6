"""Doubly robust treatment-effect inference on top of cross-fitted nuisances.

Everything here operates on plain vectors (outcomes, assignments, out-of-fold
nuisance predictions), so the functions are equally usable with the honest
forest in :mod:`eegpolicy.causal_forest` or with oracle values in tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "EffectsError",
    "DoublyRobustScores",
    "AteResult",
    "BlpResult",
    "doubly_robust_scores",
    "scores_from_model",
    "ate",
    "blp_test",
    "blp_from_model",
    "transformed_outcome_mse",
]


class EffectsError(ValueError):
    pass


def _check_vectors(**named):
    n = None
    for name, v in named.items():
        if v.ndim != 1:
            raise EffectsError(f"{name} must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise EffectsError(f"{name} contains non-finite values")
        if n is None:
            n = v.size
        elif v.size != n:
            raise EffectsError(f"{name} has length {v.size}, expected {n}")
    return n


@dataclass(frozen=True)
class DoublyRobustScores:
    """Per-subject influence-function scores.

    gamma[i] is the doubly robust score for the treatment effect;
    gamma_treated/gamma_control are the per-arm mean-outcome scores, and
    gamma = gamma_treated - gamma_control holds by construction.
    """
    gamma: np.ndarray
    gamma_treated: np.ndarray
    gamma_control: np.ndarray
    tau_hat: np.ndarray
    m_hat: np.ndarray
    e_hat: np.ndarray

    @property
    def n(self) -> int:
        return self.gamma.size


def doubly_robust_scores(tau_hat: np.ndarray, e_hat: np.ndarray,
                         m_hat: np.ndarray, W: np.ndarray,
                         Y: np.ndarray) -> DoublyRobustScores:
    """AIPW scores from out-of-fold CATE and nuisance predictions.

    With u(x, w) = m(x) + (w - e(x)) tau(x) the conditional-mean estimate,

        gamma_i(w) = u(X_i, w) + 1{W_i = w} / P(W_i = w | X_i) (Y_i - u(X_i, w))
        gamma_i    = gamma_i(1) - gamma_i(0)
                   = tau_i + (W_i - e_i) / (e_i (1 - e_i))
                           (Y_i - m_i - (W_i - e_i) tau_i)
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _check_vectors(tau_hat=tau_hat, e_hat=e_hat, m_hat=m_hat, W=W, Y=Y)
    if np.any((e_hat <= 0) | (e_hat >= 1)):
        raise EffectsError("e_hat must lie strictly inside (0, 1)")
    if not np.all((W == 0) | (W == 1)):
        raise EffectsError("W must be binary")

    u1 = m_hat + (1.0 - e_hat) * tau_hat
    u0 = m_hat - e_hat * tau_hat
    g1 = u1 + W / e_hat * (Y - u1)
    g0 = u0 + (1.0 - W) / (1.0 - e_hat) * (Y - u0)
    gamma = tau_hat + (W - e_hat) / (e_hat * (1.0 - e_hat)) * (
        Y - m_hat - (W - e_hat) * tau_hat)
    return DoublyRobustScores(gamma=gamma, gamma_treated=g1, gamma_control=g0,
                              tau_hat=tau_hat, m_hat=m_hat, e_hat=e_hat)


def scores_from_model(model) -> DoublyRobustScores:
    """Scores for a fitted causal forest, using out-of-bag tau-hat."""
    from eegpolicy.causal_forest import predict_cate_oob
    return doubly_robust_scores(predict_cate_oob(model), model.e_hat,
                                model.m_hat, model.W, model.Y)


@dataclass(frozen=True)
class AteResult:
    tau_hat: float
    score_variance: float     # (1/n) sum (gamma_i - tau_hat)^2
    standard_error: float     # sqrt(score_variance / n)
    ci_95: tuple[float, float]
    p_value: float            # two-sided normal

    def to_dict(self) -> dict:
        return {"tau_hat": self.tau_hat,
                "score_variance": self.score_variance,
                "standard_error": self.standard_error,
                "ci_95": list(self.ci_95), "p_value": self.p_value}


def ate(scores) -> AteResult:
    """Average treatment effect as the mean of the doubly robust scores."""
    gamma = scores.gamma if isinstance(scores, DoublyRobustScores) \
        else np.asarray(scores, dtype=np.float64)
    if gamma.size < 2:
        raise EffectsError("need at least 2 scores")
    tau = float(gamma.mean())
    var = float(np.mean((gamma - tau) ** 2))
    se = float(np.sqrt(var / gamma.size))
    if se > 0:
        p = float(2.0 * stats.norm.sf(abs(tau) / se))
    else:
        p = 1.0 if tau == 0 else 0.0
    return AteResult(tau_hat=tau, score_variance=var, standard_error=se,
                     ci_95=(tau - 1.96 * se, tau + 1.96 * se), p_value=p)


_TABLE_COLUMNS = ("Estimates", "Standard Error", "t value", "Pr(>t)")


@dataclass(frozen=True)
class BlpResult:
    """Best-linear-predictor calibration of CATE estimates.

    alpha near 1: forest mean effect tracks the true ATE. beta near 1 with a
    small one-sided p: predicted heterogeneity covaries with real effect
    differences (beta's p-value is the heterogeneity test).
    """
    alpha_hat: float
    beta_hat: float
    alpha_se: float
    beta_se: float
    alpha_t: float
    beta_t: float
    alpha_p: float             # one-sided, H1: alpha > 0
    beta_p: float
    mean_prediction: float     # tau-bar
    n: int
    dropped: tuple[str, ...]   # degenerate regressors excluded from the fit

    def table(self) -> dict[str, dict[str, float]]:
        rows = {}
        if "alpha" not in self.dropped:
            rows["mean.forest.prediction"] = dict(zip(
                _TABLE_COLUMNS,
                (self.alpha_hat, self.alpha_se, self.alpha_t, self.alpha_p)))
        if "beta" not in self.dropped:
            rows["differential.forest.prediction"] = dict(zip(
                _TABLE_COLUMNS,
                (self.beta_hat, self.beta_se, self.beta_t, self.beta_p)))
        return rows


def _ols_hc1(X: np.ndarray, y: np.ndarray):
    """No-intercept OLS with HC1 sandwich covariance."""
    n, k = X.shape
    xtx = X.T @ X
    coef = np.linalg.solve(xtx, X.T @ y)
    resid = y - X @ coef
    meat = X.T @ (X * resid[:, None] ** 2)
    bread = np.linalg.inv(xtx)
    cov = bread @ meat @ bread * (n / (n - k))
    se = np.sqrt(np.diag(cov))
    t = coef / se
    p = stats.t.sf(t, df=n - k)   # one-sided, H1: coef > 0
    return coef, se, t, p


def blp_test(Y: np.ndarray, W: np.ndarray, m_hat: np.ndarray,
             e_hat: np.ndarray, tau_hat: np.ndarray) -> BlpResult:
    """Regress Y - m_hat on the two BLP regressors (no intercept).

    The regressors are tau_bar (W - e_hat) and (tau_hat - tau_bar)(W - e_hat);
    heteroskedasticity-robust one-sided inference on their coefficients. A
    regressor that is identically zero (tau_bar = 0, or constant tau_hat) is
    dropped and recorded rather than inverted.
    """
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    n = _check_vectors(Y=Y, W=W, m_hat=m_hat, e_hat=e_hat, tau_hat=tau_hat)
    if np.any((e_hat <= 0) | (e_hat >= 1)):
        raise EffectsError("e_hat must lie strictly inside (0, 1)")

    tau_bar = float(tau_hat.mean())
    resid_w = W - e_hat
    cols, names = [], []
    if tau_bar != 0.0:
        cols.append(tau_bar * resid_w)
        names.append("alpha")
    if np.ptp(tau_hat) > 0:
        cols.append((tau_hat - tau_bar) * resid_w)
        names.append("beta")
    if not cols:
        raise EffectsError("both BLP regressors are degenerate")
    if n <= len(cols):
        raise EffectsError("need more observations than regressors")

    coef, se, t, p = _ols_hc1(np.column_stack(cols), Y - m_hat)
    out = {name: (coef[j], se[j], t[j], p[j]) for j, name in enumerate(names)}
    nan4 = (np.nan,) * 4
    a = out.get("alpha", nan4)
    b = out.get("beta", nan4)
    dropped = tuple(x for x in ("alpha", "beta") if x not in names)
    return BlpResult(alpha_hat=float(a[0]), beta_hat=float(b[0]),
                     alpha_se=float(a[1]), beta_se=float(b[1]),
                     alpha_t=float(a[2]), beta_t=float(b[2]),
                     alpha_p=float(a[3]), beta_p=float(b[3]),
                     mean_prediction=tau_bar, n=n, dropped=dropped)


def blp_from_model(model) -> BlpResult:
    from eegpolicy.causal_forest import predict_cate_oob
    return blp_test(model.Y, model.W, model.m_hat, model.e_hat,
                    predict_cate_oob(model))


def transformed_outcome_mse(Y: np.ndarray, W: np.ndarray, p: float,
                            tau_hat: np.ndarray,
                            variant: str = "weighted") -> float:
    """Mean squared distance between tau_hat and the transformed outcome.

    variant "weighted" uses Y* = Y (W - p) / (p (1 - p)), whose conditional
    mean is the true CATE under assignment probability p. variant "shifted"
    uses Y* = (Y - W) / (p (1 - p)) instead; it differs by an outcome-level
    offset and is kept only for comparison against results computed that way.
    """
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    _check_vectors(Y=Y, W=W, tau_hat=tau_hat)
    if not 0 < p < 1:
        raise EffectsError("p must lie strictly inside (0, 1)")
    if variant == "weighted":
        y_star = Y * (W - p) / (p * (1.0 - p))
    elif variant == "shifted":
        y_star = (Y - W) / (p * (1.0 - p))
    else:
        raise EffectsError(f"unknown variant {variant!r}")
    return float(np.mean((y_star - tau_hat) ** 2))
