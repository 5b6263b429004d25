import math

import numpy as np
import pytest

import surfcrf as sc
from surfcrf.crf import softmax
from surfcrf.patches import make_toy_graph
from surfcrf.train import central_difference, relative_error

from conftest import make_pipeline_inputs


def toy_instance(h=4, w=4, z=8, seed=0, valid_frac=1.0):
    rng = np.random.default_rng(seed)
    graph = make_toy_graph(h, w)
    logits = rng.normal(size=(1, h, w, z))
    u = sc.unary_from_logits(graph, logits)
    valid = rng.random(graph.n_vertices) < valid_frac
    if not valid.any():
        valid[0] = True
    gt = sc.GroundTruth(surface_index=rng.integers(0, z, graph.n_vertices), valid=valid)
    return u, gt


class TestWbce:
    def test_zero_logit_unit_weight(self):
        assert sc.wbce_loss(np.asarray([0.0]), np.asarray([1.0]), 1.0) == \
            pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_logits_vanish(self):
        logits = np.asarray([30.0, -30.0, 30.0])
        mask = np.asarray([1.0, 0.0, 1.0])
        assert sc.wbce_loss(logits, mask, 1.0) < 1e-10

    def test_column_length_weighting(self):
        # the paper-style weighting: w = column length (64)
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 64))
        mask = np.zeros((5, 64))
        mask[:, 10] = 1.0
        w = 64.0
        got = sc.wbce_loss(logits, mask, w)
        sig = 1.0 / (1.0 + np.exp(-logits))
        expect = -(w * mask * np.log(sig) + (1 - mask) * np.log(1 - sig)).mean()
        assert got == pytest.approx(expect, rel=1e-9)

    def test_rejects_nonpositive_weight(self):
        with pytest.raises(ValueError):
            sc.wbce_loss(np.zeros(3), np.zeros(3), 0.0)


class TestMce:
    def test_uniform_is_log_z(self):
        z = 64
        q = np.full((10, z), 1.0 / z)
        gt = sc.GroundTruth(surface_index=np.zeros(10, dtype=np.int64),
                            valid=np.ones(10, dtype=bool))
        assert sc.mce_loss(q, gt) == pytest.approx(math.log(z), abs=1e-12)

    def test_one_hot_at_truth_is_zero(self):
        g = np.asarray([2, 5, 1])
        q = np.eye(8)[g]
        gt = sc.GroundTruth(surface_index=g, valid=np.ones(3, dtype=bool))
        assert sc.mce_loss(q, gt) == 0.0

    def test_two_column_hand_case(self):
        q = np.asarray([[0.7, 0.3], [0.2, 0.8]])
        gt = sc.GroundTruth(surface_index=np.asarray([0, 1]),
                            valid=np.ones(2, dtype=bool))
        expect = -(math.log(0.7) + math.log(0.8)) / 2.0
        assert sc.mce_loss(q, gt) == pytest.approx(expect, abs=1e-12)

    def test_invalid_columns_excluded(self):
        q = np.asarray([[0.5, 0.5], [1e-9, 1.0 - 1e-9]])
        gt = sc.GroundTruth(surface_index=np.asarray([0, 0]),
                            valid=np.asarray([True, False]))
        assert sc.mce_loss(q, gt) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_from_logits(self):
        logits = np.asarray([[2.0, 0.0]])
        gt = sc.GroundTruth(surface_index=np.asarray([0]), valid=np.asarray([True]))
        p = softmax(logits)
        assert sc.mce_loss(logits, gt, from_logits=True) == \
            pytest.approx(-math.log(p[0, 0]), abs=1e-12)

    def test_no_valid_columns(self):
        gt = sc.GroundTruth(surface_index=np.zeros(2, dtype=np.int64),
                            valid=np.zeros(2, dtype=bool))
        with pytest.raises(ValueError):
            sc.mce_loss(np.full((2, 4), 0.25), gt)


class TestMeanfieldGrad:
    def test_wp_zero_is_softmax_ce_gradient(self):
        u, gt = toy_instance(seed=3)
        params = sc.CrfParams(w_p=0.0, iterations=4, window_radius=2)
        rep = sc.meanfield_grad(u, params, gt)
        q = softmax(u.logits).reshape(-1, u.z_len)
        onehot = np.zeros_like(q)
        rows = np.nonzero(gt.valid)[0]
        onehot[rows, gt.surface_index[rows]] = 1.0
        expect = ((q - onehot) / len(rows)).reshape(u.logits.shape)
        assert np.abs(rep.dlogits - expect).max() <= 1e-12

    def test_theta_comp_gradient_vanishes_at_infinity(self):
        u, gt = toy_instance(seed=4)
        params = sc.CrfParams(theta_comp=1e6, iterations=2, window_radius=1)
        rep = sc.meanfield_grad(u, params, gt)
        assert abs(rep.grads["theta_comp"]) < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        u, gt = toy_instance(seed=seed)
        params = sc.CrfParams(window_radius=2, iterations=2, theta2=0.5)
        errs = sc.fd_check(u, params, gt, T=2, unary_scale=1.1, n_logits=40, seed=seed)
        assert errs["max"] <= 1e-3

    def test_partial_validity(self):
        u, gt = toy_instance(seed=9, valid_frac=0.6)
        params = sc.CrfParams(window_radius=1, iterations=3)
        errs = sc.fd_check(u, params, gt, n_logits=30)
        assert errs["max"] <= 1e-3

    def test_all_gradients_finite(self):
        u, gt = toy_instance(seed=5, z=12)
        rep = sc.meanfield_grad(u, sc.CrfParams(window_radius=2), gt, unary_scale=3.0)
        assert np.isfinite(rep.loss)
        assert np.isfinite(rep.dlogits).all()
        assert all(np.isfinite(v) for v in rep.grads.values())


class TestFdHarness:
    def test_quadratic_toy_is_exact(self):
        # central differences are exact for quadratics up to roundoff
        a, b = 3.0, 2.0
        fn = lambda x: a * x * x + b * x
        for x0 in (0.0, 1.7, -4.2):
            num = central_difference(fn, x0, 1e-3)
            assert relative_error(num, 2 * a * x0 + b) <= 1e-10

    def test_default_instance_within_tolerance(self):
        u, gt = toy_instance(seed=11)
        errs = sc.fd_check(u, sc.CrfParams(window_radius=2, iterations=2), gt,
                           n_logits=20)
        assert errs["max"] <= 1e-3

    def test_large_step_degrades(self):
        u, gt = toy_instance(seed=12)
        params = sc.CrfParams(window_radius=2, iterations=2)
        small = sc.fd_check(u, params, gt, scalar_step=1e-3, n_logits=10, seed=0)
        big = sc.fd_check(u, params, gt, scalar_step=0.5, n_logits=10, seed=0)
        assert big["max"] > small["max"]


def phantom_fit_dataset(n=3, seeds=None):
    dataset = []
    for seed in seeds or range(n):
        run = make_pipeline_inputs(seed=seed, recursion=3, z_len=16, delta=1.25,
                                   subdivisions=3)
        u = sc.gradient_unary(run["ps"], polarity="bright_to_dark")
        dataset.append((run["ps"], u, run["gt"]))
    return dataset


class TestFit:
    def test_zero_epochs_returns_init(self):
        u, gt = toy_instance(seed=20)
        init = sc.prostate_params(window_radius=1, iterations=2)
        cfg = sc.FitConfig(lr=0.1, epochs=0)
        res = sc.fit([(None, u, gt)], init, cfg, unary_scale=2.0)
        assert res.params == init
        assert res.unary_scale == 2.0
        assert len(res.curve) == 1

    def test_loss_non_increasing_when_truth_matches_argmax(self):
        u, _ = toy_instance(seed=21)
        gt = sc.GroundTruth(surface_index=u.argmax_labels(),
                            valid=np.ones(u.graph.n_vertices, dtype=bool))
        init = sc.CrfParams(w_p=0.2, window_radius=1, iterations=2)
        cfg = sc.FitConfig(lr=1e-3, epochs=1, momentum=0.0)
        res = sc.fit([(None, u, gt)], init, cfg)
        assert res.curve[1] <= res.curve[0] + 1e-12

    def test_widths_stay_positive(self):
        u, gt = toy_instance(seed=22)
        init = sc.CrfParams(theta2=0.05, window_radius=1, iterations=2)
        cfg = sc.FitConfig(lr=0.5, epochs=25, momentum=0.9)
        res = sc.fit([(None, u, gt)], init, cfg)
        for name in ("theta1", "theta2", "theta3", "theta_comp"):
            assert getattr(res.params, name) > 0

    def test_deterministic(self):
        u, gt = toy_instance(seed=23)
        init = sc.prostate_params(window_radius=1, iterations=2)
        cfg = sc.FitConfig(lr=0.05, epochs=5)
        r1 = sc.fit([(None, u, gt)], init, cfg)
        r2 = sc.fit([(None, u, gt)], init, cfg)
        assert np.array_equal(r1.curve, r2.curve)
        assert r1.params == r2.params

    def test_respects_trainable_flags(self):
        u, gt = toy_instance(seed=24)
        init = sc.prostate_params(window_radius=1, iterations=2)
        cfg = sc.FitConfig(lr=0.1, epochs=5, trainable=("unary_scale",))
        res = sc.fit([(None, u, gt)], init, cfg)
        assert res.params == init
        assert res.unary_scale != 1.0

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            sc.fit([], sc.prostate_params(), sc.FitConfig())

    def test_fd_mode_agrees_with_analytic(self):
        u, gt = toy_instance(h=2, w=2, z=4, seed=25)
        init = sc.CrfParams(window_radius=1, iterations=1)
        res_a = sc.fit([(None, u, gt)], init, sc.FitConfig(lr=0.01, epochs=2))
        res_f = sc.fit([(None, u, gt)], init,
                       sc.FitConfig(lr=0.01, epochs=2, grad_mode="fd"))
        assert np.allclose(res_a.curve, res_f.curve, atol=1e-6)
        assert res_a.params.theta1 == pytest.approx(res_f.params.theta1, abs=1e-5)

    def test_small_phantom_set_reduces_mce(self):
        dataset = phantom_fit_dataset(3)
        init = sc.prostate_params()
        cfg = sc.FitConfig(lr=0.05, epochs=30, momentum=0.9)
        res = sc.fit(dataset, init, cfg, unary_scale=1.0)
        assert res.curve[-1] <= 0.8 * res.curve[0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            sc.FitConfig(lr=0.0)
        with pytest.raises(ValueError):
            sc.FitConfig(trainable=("nonsense",))
        with pytest.raises(ValueError):
            sc.FitConfig(grad_mode="magic")


class TestFitDivergence:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_with_epoch(self):
        u, gt = toy_instance(seed=30, z=4)
        init = sc.CrfParams(window_radius=1, iterations=1)
        cfg = sc.FitConfig(lr=1e9, epochs=10, momentum=0.0,
                           trainable=("unary_scale",))
        with pytest.raises(sc.FitDivergedError) as err:
            sc.fit([(None, u, gt)], init, cfg, unary_scale=1.0)
        assert err.value.epoch >= 1


class TestForwardConsistency:
    def test_training_forward_matches_inference_loss(self):
        # the unrolled differentiable forward pass and meanfield_infer are the
        # same computation; their MCE losses agree exactly
        u, gt = toy_instance(h=3, w=5, z=6, seed=31)
        params = sc.CrfParams(window_radius=2, iterations=4, theta2=0.5)
        rep = sc.meanfield_grad(u, params, gt, unary_scale=1.0)
        lab = sc.meanfield_infer(u, params)
        assert rep.loss == pytest.approx(sc.mce_loss(lab.q, gt), abs=1e-12)
