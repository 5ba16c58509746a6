"""Release gate: every shipping criterion, one printed verdict per test.

Each test exercises a criterion end to end at its stated tolerance and
prints a single ``criterion N PASS/FAIL`` line (visible with ``-s`` or in
the captured-output section of a failure). Slow entries state their budget.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import smooth_scalp_recording

from eegpolicy._forest_kernels import LEAF
from eegpolicy.causal_forest import _Trees, variable_importance
from eegpolicy.effects import ate, blp_test, doubly_robust_scores
from eegpolicy.policy import (
    lasso_kkt_gaps,
    o_learning_fit,
    q_learning_fit,
    search_policy_tree,
)
from eegpolicy.preprocess import (
    EpochSet,
    apply_filters,
    detect_bad_channels,
    reject_epochs,
    rereference_common_average,
)
from eegpolicy.sim import default_spec, run_benchmark
from eegpolicy.spectral import (
    Spectrum,
    band_power,
    dpss_tapers,
    multitaper_psd,
    relative_band_power,
)


def _verdict(num: int, name: str, ok: bool, detail: str):
    print(f"criterion {num} {'PASS' if ok else 'FAIL'} - {name}: {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1. policy-tree exactness against brute-force enumeration


def _brute_force_extra(X: np.ndarray, delta: np.ndarray) -> float:
    """Max of sum(delta[treated]) over depth-<=2 axis-aligned trees.

    Every left set realizable by a split is {x_j <= u} for an observed u,
    so enumerating those masks (plus the whole set) covers the policy class.
    """
    n, d = X.shape
    rows = [np.ones(n, dtype=bool)]
    for j in range(d):
        for u in np.unique(X[:, j]):
            rows.append(X[:, j] <= u)
    M = np.unique(np.array(rows), axis=0)

    def best_depth1(sub):
        ds = delta * sub
        left = M @ ds
        return float(np.max(np.maximum(left, 0.0)
                            + np.maximum(ds.sum() - left, 0.0)))

    return max(best_depth1(m) + best_depth1(~m) for m in M)


def test_criterion_1_policy_tree_exactness():
    rng = np.random.default_rng(17)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(500):
        n = int(rng.integers(4, 21))
        d = int(rng.integers(1, 4))
        # integer-valued inputs keep both objectives in exact float arithmetic
        if trial % 2:
            X = rng.integers(0, 8, (n, d)).astype(float)  # heavy ties
        else:
            X = np.round(rng.normal(size=(n, d)), 1)
        g0 = rng.integers(-20, 21, n).astype(float)
        g1 = rng.integers(-20, 21, n).astype(float)
        model = search_policy_tree(X, g0, g1, depth=2)
        expected = (g0.sum() + _brute_force_extra(X, g1 - g0)) / n
        worst = max(worst, abs(model.objective_value - expected))
        if model.objective_value != expected:
            break
    elapsed = time.perf_counter() - start
    _verdict(1, "policy-tree exactness",
             worst == 0.0 and elapsed < 60.0,
             f"500 instances, max |gap| = {worst:.3g}, {elapsed:.1f} s "
             "(budget 60 s)")


# ---------------------------------------------------------------------------
# 2. simulation benchmark ordering (slow: a few minutes of forest fits)


def test_criterion_2_simulation_ordering():
    start = time.perf_counter()
    report = run_benchmark(default_spec(), train_sizes=(200, 500),
                           n_test=10_000, n_replicates=20, seed=0)
    elapsed = time.perf_counter() - start
    errors = [r for r in report.rows if r.error]
    m500 = report.method_means(500)
    m200 = report.method_means(200)
    tree, q, o = (m500[k] for k in ("policy_tree", "q_learning",
                                    "o_learning"))
    ordering = (tree["mean_value"] >= q["mean_value"]
                and tree["mean_value"] >= o["mean_value"]
                and tree["mean_accuracy"] >= q["mean_accuracy"]
                and tree["mean_accuracy"] >= o["mean_accuracy"])
    learned = ("policy_tree", "q_learning", "o_learning")
    gains = {k: m500[k]["mean_value"] - m200[k]["mean_value"]
             for k in learned}
    ok = (not errors and ordering and all(g > 0 for g in gains.values())
          and elapsed < 1800.0)
    _verdict(2, "simulation ordering", ok,
             f"values@500 tree={tree['mean_value']:.4f} "
             f"q={q['mean_value']:.4f} o={o['mean_value']:.4f}, "
             f"accuracy@500 tree={tree['mean_accuracy']:.4f} "
             f"q={q['mean_accuracy']:.4f} o={o['mean_accuracy']:.4f}, "
             f"n500-n200 gains={ {k: round(v, 4) for k, v in gains.items()} }, "
             f"{len(errors)} errors, {elapsed:.0f} s (budget 1800 s)")


# ---------------------------------------------------------------------------
# 3. doubly robust ATE calibration on a known RCT


def _rct_replicate(rng, n=500, tau=0.5):
    X = rng.normal(size=(n, 3))
    W = rng.binomial(1, 0.5, n).astype(float)
    m = 0.5 * X[:, 0] - 0.25 * X[:, 1]
    Y = m + tau * W + rng.normal(size=n)
    return X, W, Y


def _crossfit_parametric(X, W, Y):
    """Out-of-fold OLS m-hat and arm-mean tau-hat; e known (RCT)."""
    n = X.shape[0]
    m_hat = np.empty(n)
    tau_hat = np.empty(n)
    half = n // 2
    for train, held in (
            (slice(0, half), slice(half, n)),
            (slice(half, n), slice(0, half))):
        Z = np.column_stack([np.ones(X[train].shape[0]), X[train]])
        coef, *_ = np.linalg.lstsq(Z, Y[train], rcond=None)
        m_hat[held] = coef[0] + X[held] @ coef[1:]
        Wt, Yt = W[train], Y[train]
        tau_hat[held] = Yt[Wt == 1].mean() - Yt[Wt == 0].mean()
    return tau_hat, m_hat


def test_criterion_3_ate_calibration():
    tau = 0.5
    results = {}
    for label in ("well-specified", "misspecified-m"):
        rng = np.random.default_rng(101)
        estimates, covered = [], 0
        for _ in range(200):
            X, W, Y = _rct_replicate(rng, tau=tau)
            e_hat = np.full(Y.shape, 0.5)
            if label == "well-specified":
                tau_hat, m_hat = _crossfit_parametric(X, W, Y)
            else:
                tau_hat = np.zeros(Y.shape)   # both outcome models wrong,
                m_hat = np.zeros(Y.shape)     # propensity exact
            res = ate(doubly_robust_scores(tau_hat, e_hat, m_hat, W, Y))
            estimates.append(res.tau_hat)
            covered += res.ci_95[0] <= tau <= res.ci_95[1]
        est = np.asarray(estimates)
        mc_se = est.std(ddof=1) / np.sqrt(est.size)
        results[label] = (covered / 200.0, abs(est.mean() - tau), mc_se)
    ok = all(0.90 <= cov <= 0.98 and bias < 2 * se
             for cov, bias, se in results.values())
    detail = "; ".join(
        f"{k}: coverage={cov:.3f}, |bias|={bias:.4f} (2*MC-SE={2 * se:.4f})"
        for k, (cov, bias, se) in results.items())
    _verdict(3, "doubly robust ATE calibration", ok, detail)


# ---------------------------------------------------------------------------
# 4. BLP heterogeneity test power and size with oracle CATE injected


def _blp_rejections(heterogeneous: bool, reps: int = 100) -> int:
    rng = np.random.default_rng(202)
    hits = 0
    for _ in range(reps):
        n = 500
        X = rng.normal(size=(n, 2))
        tau_true = 0.5 + X[:, 0] if heterogeneous else np.full(n, 0.5)
        W = rng.binomial(1, 0.5, n).astype(float)
        Y = X[:, 1] + W * tau_true + rng.normal(size=n)
        m_hat = X[:, 1] + 0.5 * tau_true
        if heterogeneous:
            tau_hat = tau_true                      # oracle CATE
        else:
            tau_hat = 0.5 + 0.3 * rng.normal(size=n)  # spurious spread
        res = blp_test(Y, W, m_hat, np.full(n, 0.5), tau_hat)
        hits += res.beta_p < 0.05
    return hits


def test_criterion_4_blp_calibration():
    power = _blp_rejections(heterogeneous=True)
    size = _blp_rejections(heterogeneous=False)
    ok = power >= 80 and size <= 15
    _verdict(4, "BLP test calibration", ok,
             f"power {power}/100 (need >= 80), "
             f"type-I {size}/100 (need <= 15)")


# ---------------------------------------------------------------------------
# 5. spectral correctness


def test_criterion_5_spectral_exactness():
    tapers = dpss_tapers(512, nw=4.0, k=7)
    gram_err = float(np.abs(tapers.tapers @ tapers.tapers.T
                            - np.eye(7)).max())

    # composite Simpson is exact for cubics on a uniform grid
    freqs = np.arange(81) * 0.125
    psd = (freqs + 1.0) ** 3
    simpson_err = abs(band_power(Spectrum(freqs, psd), (2.0, 6.0))
                      - (7.0 ** 4 - 3.0 ** 4) / 4.0)

    flat = Spectrum(np.arange(0.0, 62.5, 0.5), np.full(125, 3.7))
    alpha_err = abs(relative_band_power(flat, (8.0, 12.0), (1.0, 50.0))
                    - 4.0 / 49.0)

    rng = np.random.default_rng(5)
    x = rng.standard_normal(2048)
    spec = multitaper_psd(x, dpss_tapers(2048), 250.0)
    parseval = band_power(spec, (0.0, 125.0)) / np.mean(x ** 2)

    ok = (gram_err <= 1e-8 and simpson_err <= 1e-12
          and alpha_err <= 1e-9 and abs(parseval - 1.0) <= 0.10)
    _verdict(5, "spectral exactness", ok,
             f"gram={gram_err:.2e} (<=1e-8), simpson={simpson_err:.2e} "
             f"(<=1e-12), flat-alpha={alpha_err:.2e} (<=1e-9), "
             f"parseval-ratio={parseval:.4f} (within 10%)")


# ---------------------------------------------------------------------------
# 6. preprocessing behavior


def test_criterion_6_preprocessing():
    flagged = 0
    for trial in range(100):
        rec = smooth_scalp_recording(seed=trial, duration=8.0)
        rng = np.random.default_rng(1000 + trial)
        victim = int(rng.integers(len(rec.channels)))
        data = rec.data.copy()
        data[victim] *= 100.0
        report = detect_bad_channels(rec.with_data(data))
        name = rec.channel_names[victim]
        flagged += name in report.flagged \
            and "deviation" in report.criteria.get(name, ())

    false_rejects = missed = 0
    min_separation = np.inf
    for seed in range(10):
        rng = np.random.default_rng(seed)
        t = np.arange(500) / 250.0
        base = 10.0 * np.sin(2 * np.pi * 10.0 * t)
        epochs = base + rng.normal(0, 0.5, size=(50, 8, 500))
        clean_max = float(np.ptp(epochs, axis=2).max())
        spiked = rng.choice(50, size=5, replace=False)
        epochs[spiked] *= 10.0
        min_separation = min(min_separation,
                             np.ptp(epochs[spiked], axis=2).min() / clean_max)
        # grid has a point inside the gap the 5x separation guarantees
        grid = np.array([1.05, 3.0, 20.0]) * clean_max
        es = EpochSet(epochs, tuple(f"ch{i}" for i in range(8)), 250.0,
                      "eyes_open", 1, np.ones(50, dtype=bool))
        kept = reject_epochs(es, folds=5, threshold_grid=grid,
                             seed=seed).keep_mask
        missed += int(kept[spiked].sum())
        false_rejects += int((~kept).sum() - (~kept[spiked]).sum())

    t = np.arange(2000) / 250.0
    tone = 5.0 * np.sin(2 * np.pi * 60.0 * t) + 3.0 * np.sin(2 * np.pi * 10.0 * t)
    rec = smooth_scalp_recording(seed=3, duration=8.0)
    rec = rec.with_data(rec.data + tone)
    filtered = apply_filters(rec, notch=60.0, high_pass=1.0, low_pass=50.0)
    bin60 = int(round(60.0 * 2000 / 250.0))
    before = np.abs(np.fft.rfft(rec.data, axis=1))[:, bin60].mean()
    after = np.abs(np.fft.rfft(filtered.data, axis=1))[:, bin60].mean()
    atten_db = 20.0 * np.log10(before / max(after, 1e-300))

    rng = np.random.default_rng(9)
    es = EpochSet(rng.normal(size=(20, 8, 100)),
                  tuple(f"ch{i}" for i in range(8)), 250.0, "eyes_open", 1,
                  np.ones(20, dtype=bool))
    car_err = float(np.abs(rereference_common_average(es)
                           .epochs.mean(axis=1)).max())

    ok = (flagged == 100 and missed == 0 and false_rejects == 0
          and min_separation >= 5.0 and atten_db >= 30.0 and car_err <= 1e-9)
    _verdict(6, "preprocessing behavior", ok,
             f"deviation flags {flagged}/100, spikes missed {missed}, "
             f"false rejections {false_rejects} (separation >= "
             f"{min_separation:.1f}x), 60 Hz attenuation {atten_db:.1f} dB "
             f"(>=30), CAR residual {car_err:.2e} (<=1e-9)")


# ---------------------------------------------------------------------------
# 7. variable importance against pencil-and-paper forests


def _toy_trees(per_tree_nodes) -> _Trees:
    feats, depths, ptr = [], [], [0]
    for nodes in per_tree_nodes:
        for f, dep in nodes:
            feats.append(f)
            depths.append(dep)
        ptr.append(len(feats))
    k = len(feats)
    zf = np.zeros(k)
    zi = np.zeros(k, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    t_ptr = np.zeros(len(per_tree_nodes) + 1, dtype=np.int64)
    return _Trees(feature=np.asarray(feats, dtype=np.int64), threshold=zf,
                  left=zi, right=zi, meanA=zf, meanD=zf,
                  depth=np.asarray(depths, dtype=np.int64), n_est=zi,
                  tree_ptr=np.asarray(ptr, dtype=np.int64),
                  inbag=np.zeros((len(per_tree_nodes), 1), dtype=bool),
                  grow_rows=empty, grow_ptr=t_ptr, est_rows=empty,
                  est_ptr=t_ptr)


def test_criterion_7_importance_oracle():
    # forest 1: f0 splits both roots, f1 splits one layer-2 node
    trees = _toy_trees([
        [(0, 0), (1, 1), (LEAF, 2), (LEAF, 2), (LEAF, 1)],
        [(0, 0), (LEAF, 1), (LEAF, 1)],
    ])
    rep1 = variable_importance(SimpleNamespace(trees=trees, d=3), max_depth=2)
    # layer shares [1, 0, 0] and [0, 1, 0]; weights (1, 1/4)
    want1 = np.array([1.0, 0.25, 0.0]) / 1.25
    err1 = float(np.abs(rep1.importances - want1).max())

    # forest 2: three trees, layer 3 requested but empty
    trees = _toy_trees([
        [(2, 0), (0, 1), (LEAF, 2), (LEAF, 2), (1, 1), (LEAF, 2), (LEAF, 2)],
        [(2, 0), (LEAF, 1), (LEAF, 1)],
        [(0, 0), (LEAF, 1), (LEAF, 1)],
    ])
    rep2 = variable_importance(SimpleNamespace(trees=trees, d=3), max_depth=3)
    wsum = 1.0 + 1.0 / 4.0 + 1.0 / 9.0
    want2 = np.array([1.0 / 3.0 + (1.0 / 2.0) * (1.0 / 4.0),
                      (1.0 / 2.0) * (1.0 / 4.0),
                      2.0 / 3.0]) / wsum
    err2 = float(np.abs(rep2.importances - want2).max())

    ok = (err1 <= 1e-15 and rep1.ranking == (0, 1, 2)
          and err2 <= 1e-15 and rep2.ranking == (2, 0, 1)
          and rep2.importances.sum() == pytest.approx(45.0 / 49.0, abs=1e-12))
    _verdict(7, "variable-importance formula", ok,
             f"forest1 err={err1:.1e}, forest2 err={err2:.1e}, "
             f"rankings {rep1.ranking} / {rep2.ranking}, "
             f"empty-layer mass {1 - rep2.importances.sum():.4f}")


# ---------------------------------------------------------------------------
# 8. benchmark determinism across reruns and worker counts


def test_criterion_8_simulate_determinism(tmp_path):
    from eegpolicy.cli import simulate_files

    sizes = dict(train_sizes=(50, 80), replicates=3, n_test=400, seed=7)
    outputs = {}
    for label, threads in (("run1", 1), ("run2", 1), ("parallel", 4)):
        out = tmp_path / label
        simulate_files(out, threads=threads, **sizes)
        outputs[label] = ((out / "rows.csv").read_bytes(),
                          (out / "summary.json").read_bytes())
    ok = outputs["run1"] == outputs["run2"] == outputs["parallel"]
    _verdict(8, "simulate determinism", ok,
             "rows.csv and summary.json byte-identical across two runs "
             f"and worker counts {{1, 4}}: {ok}")


# ---------------------------------------------------------------------------
# 9. baseline optimizers


def test_criterion_9_baseline_optimizers():
    rng = np.random.default_rng(33)
    worst_gap = -np.inf
    penalties = []
    for _ in range(3):
        n, d = 120, 8
        X = rng.normal(size=(n, d))
        W = rng.integers(0, 2, n).astype(float)
        Y = 1.0 + X[:, 0] - 0.5 * W + W * X[:, 1] \
            + 0.3 * rng.standard_normal(n)
        pol = q_learning_fit(X, W, Y, folds=5, seed=int(rng.integers(1000)))
        gaps, zeros = lasso_kkt_gaps(pol, X, W, Y)
        if zeros.any():
            worst_gap = max(worst_gap, float((gaps[zeros] - pol.penalty).max()))
        penalties.append(pol.penalty)
    kkt_ok = worst_gap <= 1e-6

    n = 400
    X = rng.normal(size=(n, 3))
    A = np.where(rng.integers(0, 2, n) == 1, 1.0, -1.0)
    R = A * (X[:, 0] - 0.3) + 0.05 * rng.standard_normal(n)
    prob = np.full(n, 0.5)
    base = o_learning_fit(X, A, R, prob, residualizer="zero")
    scaled = o_learning_fit(X, A, 37.5 * R, prob, residualizer="zero")
    invariant = bool(np.array_equal(base.predict(X), scaled.predict(X)))
    accuracy = float(np.mean(base.predict(X) == (X[:, 0] > 0.3)))

    ok = kkt_ok and invariant and accuracy >= 0.95
    _verdict(9, "baseline optimizers", ok,
             f"max KKT excess at zeros {worst_gap:.2e} (<=1e-6, penalties "
             f"{[round(p, 4) for p in penalties]}), rescale-invariant "
             f"decisions {invariant}, planted-rule accuracy {accuracy:.3f} "
             "(>=0.95)")
