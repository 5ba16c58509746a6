import numpy as np
import pytest

from eegpolicy import causal_forest as cf
from eegpolicy._forest_kernels import LEAF
from eegpolicy.causal_forest import (
    CausalForestModel,
    ForestError,
    ForestParams,
    OutOfBagUnavailableError,
    RegressionForest,
    _Trees,
    crossfit_nuisances,
    fit_causal_forest,
    honesty_violations,
    leaf_weights,
    load_model,
    predict_cate,
    predict_cate_oob,
    r_loss,
    save_model,
    tune_r_loss,
    variable_importance,
)

SMALL = ForestParams(num_trees=120, seed=1)
NUIS = ForestParams(num_trees=60, seed=2)


def constant_effect_data(n=800, effect=3.0, sigma=0.1, seed=0, d=5):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, d))
    W = rng.integers(0, 2, n).astype(float)
    Y = effect * W + sigma * rng.standard_normal(n)
    return X, W, Y


class TestRegressionForest:
    def test_constant_target(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((100, 3))
        rf = RegressionForest(ForestParams(num_trees=30, seed=5)).fit(
            X, np.full(100, 2.5))
        np.testing.assert_array_equal(rf.predict(X[:10]), np.full(10, 2.5))

    def test_oob_mse_linear_signal(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, (2000, 1))
        y = X[:, 0] + 0.1 * rng.standard_normal(2000)
        rf = RegressionForest(ForestParams(num_trees=200, seed=3)).fit(X, y)
        mse = np.mean((rf.predict_oob() - y) ** 2)
        assert mse < 0.05 * y.var()

    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((300, 4))
        y = X[:, 0] ** 2 + rng.standard_normal(300)
        a = RegressionForest(SMALL).fit(X, y).predict(X)
        b = RegressionForest(SMALL).fit(X, y).predict(X)
        assert a.tobytes() == b.tobytes()

    def test_unfitted_errors(self):
        with pytest.raises(ForestError):
            RegressionForest().predict(np.zeros((1, 2)))

    def test_shape_validation(self):
        with pytest.raises(ForestError):
            RegressionForest().fit(np.zeros((10, 2)), np.zeros(9))


class TestCausalForestFit:
    def test_constant_effect_recovery(self):
        X, W, Y = constant_effect_data()
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        tau = predict_cate(model, X)
        assert np.mean(np.abs(tau - 3.0)) < 0.3
        tau_oob = predict_cate_oob(model)
        assert np.mean(np.abs(tau_oob - 3.0) < 0.5) >= 0.9

    def test_null_effect_unbiased(self):
        # 50 small replicates: grand mean of tau-hat near 0
        means = []
        for rep in range(50):
            rng = np.random.default_rng(100 + rep)
            X = rng.uniform(0, 1, (150, 3))
            W = rng.integers(0, 2, 150).astype(float)
            Y = X[:, 0] + rng.standard_normal(150)
            model = fit_causal_forest(
                X, W, Y, ForestParams(num_trees=60, seed=rep),
                nuisance_params=ForestParams(num_trees=40, seed=rep + 1),
                n_folds=5)
            means.append(predict_cate_oob(model).mean())
        means = np.array(means)
        se = means.std(ddof=1) / np.sqrt(len(means))
        assert abs(means.mean()) < 2 * se + 1e-12 or abs(means.mean()) < 0.05

    def test_missing_arm_rejected(self):
        X, W, Y = constant_effect_data(n=100)
        with pytest.raises(ForestError):
            fit_causal_forest(X, np.ones(100), Y, SMALL)

    def test_honesty(self):
        X, W, Y = constant_effect_data(n=300)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        assert honesty_violations(model) == 0

    def test_every_estimation_leaf_has_both_arms(self):
        X, W, Y = constant_effect_data(n=300)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        t = model.trees
        leaves = t.feature == LEAF
        # min_node_size per arm on the estimate half implies meanD > 0 and
        # at least 2*min_node_size estimate rows in every leaf of every tree
        assert np.all(t.n_est[leaves] >= 2 * SMALL.min_node_size)
        assert np.all(t.meanD[leaves] > 0)

    def test_determinism(self):
        X, W, Y = constant_effect_data(n=300)
        a = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        b = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        assert predict_cate(a, X).tobytes() == predict_cate(b, X).tobytes()
        assert predict_cate_oob(a).tobytes() == predict_cate_oob(b).tobytes()

    def test_known_propensity_override(self):
        X, W, Y = constant_effect_data(n=200)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS,
                                  propensity=0.5)
        np.testing.assert_array_equal(model.e_hat, np.full(200, 0.5))

    def test_propensity_clipped(self):
        X, W, Y = constant_effect_data(n=200)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS,
                                  propensity=0.01)
        np.testing.assert_array_equal(model.e_hat, np.full(200, 0.05))

    def test_nuisance_clip_counted(self):
        # W nearly deterministic in X -> e-hat forest wants values near 0/1
        rng = np.random.default_rng(8)
        X = rng.uniform(0, 1, (400, 2))
        W = (X[:, 0] > 0.5).astype(float)
        flip = rng.random(400) < 0.02
        W[flip] = 1 - W[flip]
        Y = W + rng.standard_normal(400)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        assert model.clip_count > 0
        assert model.e_hat.min() >= 0.05 and model.e_hat.max() <= 0.95


class TestAdaptiveWeights:
    def test_weights_sum_to_one_and_reproduce_prediction(self):
        X, W, Y = constant_effect_data(n=300)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        for i in (0, 57, 211):
            alpha = leaf_weights(model, X[i])
            assert alpha.min() >= 0
            assert abs(alpha.sum() - 1.0) < 1e-9
            via_alpha = (alpha @ model.A) / (alpha @ model.D)
            production = predict_cate(model, X[i:i + 1])[0]
            assert via_alpha == pytest.approx(production, rel=1e-10)


class TestOutOfBag:
    def test_single_tree_inbag_row_errors(self):
        X, W, Y = constant_effect_data(n=60)
        model = fit_causal_forest(
            X, W, Y, ForestParams(num_trees=1, subsample_ratio=1.0, seed=4),
            nuisance_params=ForestParams(num_trees=20, seed=5), n_folds=3)
        with pytest.raises(OutOfBagUnavailableError):
            predict_cate_oob(model)

    def test_oob_matches_fresh_when_row_never_sampled(self):
        X, W, Y = constant_effect_data(n=120)
        model = fit_causal_forest(
            X, W, Y, ForestParams(num_trees=8, subsample_ratio=0.25, seed=6),
            nuisance_params=ForestParams(num_trees=20, seed=7), n_folds=3)
        never = np.nonzero(~model.trees.inbag.any(axis=0))[0]
        assert never.size > 0
        oob = predict_cate_oob(model)
        fresh = predict_cate(model, X[never])
        np.testing.assert_allclose(oob[never], fresh, rtol=1e-12)


class TestCrossfit:
    def test_out_of_fold_independence(self):
        X, W, Y = constant_effect_data(n=120)
        params = ForestParams(num_trees=40, seed=9)
        m1, e1, _, fold_of = crossfit_nuisances(X, W, Y, params, n_folds=4)
        j = 17
        Y2 = Y.copy()
        Y2[j] += 1000.0
        m2, e2, _, fold2 = crossfit_nuisances(X, W, Y2, params, n_folds=4)
        np.testing.assert_array_equal(fold_of, fold2)
        same_fold = fold_of == fold_of[j]
        # rows sharing j's fold are predicted by forests that never saw j
        np.testing.assert_array_equal(m1[same_fold], m2[same_fold])
        np.testing.assert_array_equal(e1, e2)  # W untouched

    def test_fold_count_validation(self):
        X, W, Y = constant_effect_data(n=50)
        with pytest.raises(ForestError):
            crossfit_nuisances(X, W, Y, NUIS, n_folds=1)


class TestTuneRLoss:
    def test_single_point_grid(self):
        X, W, Y = constant_effect_data(n=200)
        got = tune_r_loss(X, W, Y, [{"min_node_size": 7}],
                          base=ForestParams(num_trees=40, seed=3),
                          nuisance_params=NUIS, n_folds=5)
        assert got.min_node_size == 7

    def test_exact_tie_prefers_larger_min_node(self):
        # min_node_size beyond the subsample size collapses every tree to a
        # root leaf, so both candidates produce identical forests
        X, W, Y = constant_effect_data(n=80)
        diag = {}
        got = tune_r_loss(X, W, Y,
                          [{"min_node_size": 200}, {"min_node_size": 300}],
                          base=ForestParams(num_trees=30, seed=3),
                          nuisance_params=ForestParams(num_trees=20, seed=4),
                          n_folds=4, diagnostics=diag)
        assert diag["losses"][0] == diag["losses"][1]
        assert got.min_node_size == 300

    def test_selected_loss_is_grid_minimum(self):
        rng = np.random.default_rng(12)
        n = 300
        X = rng.uniform(-1, 1, (n, 4))
        W = rng.integers(0, 2, n).astype(float)
        tau = 2.0 * (X[:, 0] > 0)
        Y = tau * W + 0.2 * rng.standard_normal(n)
        grid = [{"min_node_size": 3}, {"min_node_size": 10},
                {"min_node_size": 40}]
        diag = {}
        got = tune_r_loss(X, W, Y, grid,
                          base=ForestParams(num_trees=60, seed=5),
                          nuisance_params=ForestParams(num_trees=40, seed=6),
                          n_folds=5, diagnostics=diag)
        assert diag["best_loss"] <= min(diag["losses"])
        assert got.min_node_size == grid[int(np.argmin(diag["losses"]))][
            "min_node_size"]

    def test_empty_grid(self):
        X, W, Y = constant_effect_data(n=100)
        with pytest.raises(ForestError):
            tune_r_loss(X, W, Y, [])


def hand_built_model(layouts, d):
    """Forest from explicit (feature, depth) split lists, one per tree."""
    feats, depths = [], []
    ptr = [0]
    for layout in layouts:
        for f, dep in layout:
            feats.append(f)
            depths.append(dep)
        ptr.append(len(feats))
    n_nodes = len(feats)
    trees = _Trees(
        feature=np.array(feats, dtype=np.int64),
        threshold=np.zeros(n_nodes), left=np.full(n_nodes, -1, dtype=np.int64),
        right=np.full(n_nodes, -1, dtype=np.int64),
        meanA=np.zeros(n_nodes), meanD=np.ones(n_nodes),
        depth=np.array(depths, dtype=np.int64),
        n_est=np.ones(n_nodes, dtype=np.int64),
        tree_ptr=np.array(ptr, dtype=np.int64),
        inbag=np.zeros((len(layouts), 1), dtype=bool),
        grow_rows=np.zeros(0, dtype=np.int64),
        grow_ptr=np.zeros(len(layouts) + 1, dtype=np.int64),
        est_rows=np.zeros(0, dtype=np.int64),
        est_ptr=np.zeros(len(layouts) + 1, dtype=np.int64))
    return CausalForestModel(
        params=ForestParams(num_trees=len(layouts)), nuisance_params=NUIS,
        X=np.zeros((1, d)), W=np.zeros(1), Y=np.zeros(1),
        m_hat=np.zeros(1), e_hat=np.full(1, 0.5), clip_count=0,
        fold_of=np.zeros(1, dtype=np.int64), A=np.zeros(1), D=np.zeros(1),
        trees=trees)


class TestVariableImportance:
    def test_single_feature_dominates(self):
        # only feature 1 varies, so every split must use it; n large enough
        # that layers 1..4 all get populated
        rng = np.random.default_rng(10)
        n = 1200
        X = np.zeros((n, 3))
        X[:, 1] = rng.uniform(-1, 1, n)
        W = rng.integers(0, 2, n).astype(float)
        Y = 2.0 * X[:, 1] * W + 0.1 * rng.standard_normal(n)
        model = fit_causal_forest(
            X, W, Y, ForestParams(num_trees=80, mtry=3, seed=1),
            nuisance_params=NUIS)
        counts = cf.split_counts_by_layer(model.trees, 3, 4)
        assert counts.sum(axis=0).min() > 0  # all four layers populated
        rep = variable_importance(model)
        assert rep.importances[1] == pytest.approx(1.0)
        assert rep.importances[0] == 0 and rep.importances[2] == 0
        assert rep.ranking[0] == 1

    def test_two_features_symmetric(self):
        # tree 1: f0 at root, f1 twice at layer 2; tree 2 mirrored
        model = hand_built_model(
            [[(0, 0), (1, 1), (1, 1)], [(1, 0), (0, 1), (0, 1)]], d=2)
        rep = variable_importance(model, max_depth=2)
        np.testing.assert_allclose(rep.importances, [0.5, 0.5])

    def test_pencil_and_paper_oracle(self):
        # tree A: root split f0 (layer 1), one layer-2 split f1
        # tree B: root split f2 (layer 1)
        # layer 1 totals: f0 1 of 2, f2 1 of 2 -> shares 1/2
        # layer 2: f1 share 1; layers 3, 4 empty
        # weights 1, 1/4, 1/9, 1/16; denominator 205/144
        model = hand_built_model([[(0, 0), (1, 1)], [(2, 0)]], d=3)
        rep = variable_importance(model, max_depth=4)
        np.testing.assert_allclose(
            rep.importances, [72 / 205, 36 / 205, 72 / 205], atol=1e-15)
        # with max_depth=2 the denominator is 5/4 and masses renormalize
        rep2 = variable_importance(model, max_depth=2)
        np.testing.assert_allclose(rep2.importances, [0.4, 0.2, 0.4],
                                   atol=1e-15)
        assert rep2.importances.sum() == pytest.approx(1.0, abs=1e-9)

    def test_splitless_forest_errors(self):
        rng = np.random.default_rng(11)
        X = np.full((100, 2), 3.0)  # nothing to split on
        W = rng.integers(0, 2, 100).astype(float)
        Y = W + rng.standard_normal(100)
        model = fit_causal_forest(X, W, Y, ForestParams(num_trees=20, seed=2),
                                  nuisance_params=NUIS, n_folds=5)
        with pytest.raises(ForestError):
            variable_importance(model)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        X, W, Y = constant_effect_data(n=200)
        model = fit_causal_forest(X, W, Y, SMALL, nuisance_params=NUIS)
        save_model(model, tmp_path / "model.bin")
        back = load_model(tmp_path / "model.bin")
        np.testing.assert_array_equal(predict_cate(back, X),
                                      predict_cate(model, X))
        np.testing.assert_array_equal(predict_cate_oob(back),
                                      predict_cate_oob(model))
        assert back.params == model.params
        assert r_loss(back) == r_loss(model)

    def test_version_check(self, tmp_path):
        import json
        import zipfile
        X, W, Y = constant_effect_data(n=100)
        model = fit_causal_forest(X, W, Y, ForestParams(num_trees=10, seed=1),
                                  nuisance_params=NUIS, n_folds=5)
        save_model(model, tmp_path / "model.bin")
        with zipfile.ZipFile(tmp_path / "model.bin") as zf:
            header = json.loads(zf.read("model.json"))
            tables = zf.read("tables.npz")
        header["format_version"] = 999
        with zipfile.ZipFile(tmp_path / "bad.bin", "w") as zf:
            zf.writestr("model.json", json.dumps(header))
            zf.writestr("tables.npz", tables)
        with pytest.raises(ForestError):
            load_model(tmp_path / "bad.bin")


class TestParams:
    def test_validation(self):
        with pytest.raises(ForestError):
            ForestParams(num_trees=0)
        with pytest.raises(ForestError):
            ForestParams(subsample_ratio=1.5)
        with pytest.raises(ForestError):
            ForestParams(honesty_ratio=1.0)

    def test_mtry_default(self):
        assert ForestParams().resolve_mtry(216) == 15
        assert ForestParams(mtry=3).resolve_mtry(216) == 3
