import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from selfsv.core import DimensionMismatchError
from selfsv.losses import (BiTemperedConfig, ContrastiveConfig, HeadConfig, LambdaSearchError,
                           MarginConfig, bitempered_loss, classification_loss, exp_t, log_t,
                           margin_logits, margin_logits_array, moco_infonce, softmax_ce,
                           tempered_softmax)
from selfsv.embedops import cosine_score


class TestMarginLogits:
    def test_subtractive_value(self):
        assert margin_logits(1.0, True, MarginConfig(40, 0.2)) == pytest.approx(32.0, abs=1e-12)

    def test_non_target_unaffected(self):
        for variant in ("subtractive", "angular"):
            assert margin_logits(0.3, False, MarginConfig(40, 0.3, variant)) == pytest.approx(12.0)

    def test_angular_value(self):
        z = margin_logits(0.0, True, MarginConfig(40, 0.3, "angular"))
        assert z == pytest.approx(-40 * math.sin(0.3), abs=1e-12)

    @pytest.mark.parametrize("cos", [-1.0, -0.4, 0.0, 0.7, 1.0])
    def test_zero_margin_variant_agnostic(self, cos):
        vals = {margin_logits(cos, t, MarginConfig(40, 0.0, v))
                for v in ("subtractive", "angular") for t in (True, False)}
        assert max(vals) - min(vals) < 1e-12

    def test_target_never_above_non_target(self):
        cos = np.linspace(-1, 1, 201)
        for variant in ("subtractive", "angular"):
            cfg = MarginConfig(30, 0.5, variant)
            zt, _ = margin_logits_array(cos, True, cfg)
            zn, _ = margin_logits_array(cos, False, cfg)
            assert np.all(zt <= zn + 1e-12)

    def test_angular_monotone(self):
        zt, _ = margin_logits_array(np.linspace(-1, 1, 401), True, MarginConfig(40, 0.3, "angular"))
        assert np.all(np.diff(zt) >= -1e-12)

    def test_clamp_tolerance(self):
        assert margin_logits(1.0 + 5e-7, False, MarginConfig(40, 0.2)) == pytest.approx(40.0)
        with pytest.raises(ValueError):
            margin_logits(1.01, False, MarginConfig(40, 0.2))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MarginConfig(0.0, 0.2)
        with pytest.raises(ValueError):
            MarginConfig(40, 4.0, "angular")

    @pytest.mark.parametrize("variant", ["subtractive", "angular"])
    def test_derivative(self, variant, rng):
        cfg = MarginConfig(40, 0.3, variant)
        for c in rng.uniform(-0.95, 0.95, 20):
            _, dz = margin_logits_array(np.array([c]), True, cfg)
            fd = (margin_logits(c + 1e-6, True, cfg) - margin_logits(c - 1e-6, True, cfg)) / 2e-6
            assert dz[0] == pytest.approx(fd, rel=1e-6)


class TestSoftmaxCe:
    def test_ln2(self):
        loss, _ = softmax_ce([0.0, 0.0], 0)
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_large_margin_limit(self):
        loss, _ = softmax_ce([800.0, 0.0], 0)
        assert 0.0 <= loss < 1e-300

    def test_gradient(self, rng):
        z = rng.standard_normal(5)
        _, g = softmax_ce(z, 3)
        fd = central_diff(lambda v: softmax_ce(v, 3)[0], z)
        assert rel_err(g, fd) < 1e-5

    def test_bad_index(self):
        with pytest.raises(IndexError):
            softmax_ce([0.0, 1.0], 2)


class TestBiTempered:
    def test_reduction_to_ce(self, rng):
        cfg = BiTemperedConfig(1.0, 1.0)
        for _ in range(20):
            z = rng.standard_normal(6) * 5
            assert bitempered_loss(z, 2, cfg)[0] == pytest.approx(softmax_ce(z, 2)[0], abs=1e-9)

    def test_continuity_near_one(self, rng):
        z = rng.standard_normal(5)
        ce = softmax_ce(z, 1)[0]
        for t1, t2 in ((1 - 1e-6, 1 + 1e-6), (1.0, 1 + 1e-6), (1 - 1e-6, 1.0)):
            assert abs(bitempered_loss(z, 1, BiTemperedConfig(t1, t2))[0] - ce) < 1e-4

    def test_symmetric_pair(self):
        t1 = 0.9
        loss, _ = bitempered_loss([0.0, 0.0], 0, BiTemperedConfig(0.9, 1.1))
        log_t1_half = (0.5 ** (1 - t1) - 1) / (1 - t1)
        expected = -log_t1_half - (1 - 2 * 0.5 ** (2 - t1)) / (2 - t1)
        assert loss == pytest.approx(expected, abs=1e-12)
        p, _ = tempered_softmax([0.0, 0.0], 1.1)
        np.testing.assert_allclose(p[0], [0.5, 0.5], atol=1e-12)

    def test_lambda_residual_and_gradient(self, rng):
        cfg = BiTemperedConfig(0.9, 1.1)
        z = rng.standard_normal(4) * 3
        p, lam = tempered_softmax(z, 1.1)
        assert abs(exp_t(z - lam[0], 1.1).sum() - 1.0) < 1e-10
        _, g = bitempered_loss(z, 0, cfg)
        fd = central_diff(lambda v: bitempered_loss(v, 0, cfg)[0], z)
        assert rel_err(g, fd) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(1.0, 3.0))
    def test_probabilities_valid(self, z, t):
        p, _ = tempered_softmax(z, t)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-9

    def test_lambda_failure_carries_residual(self):
        with pytest.raises(LambdaSearchError) as info:
            tempered_softmax(np.linspace(0, 5, 7), 1.5, max_iters=3)
        assert info.value.residual > 0

    def test_log_exp_inverse(self):
        x = np.linspace(0.1, 3, 7)
        np.testing.assert_allclose(exp_t(log_t(x, 0.8), 0.8), x, rtol=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BiTemperedConfig(1.1, 1.1)
        with pytest.raises(ValueError):
            BiTemperedConfig(0.9, 0.8)


class TestMoco:
    def test_empty_queue(self):
        loss, g = moco_infonce(np.array([1.0, 2.0]), np.array([0.5, 0.1]), np.zeros((0, 2)))
        assert loss == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_orthogonal_queue_closed_form(self):
        q = np.array([3.0, 0.0, 0.0, 0.0])
        queue = np.array([[0, 1.0, 0, 0], [0, 0, 2.0, 0], [0, 0, 0, 5.0]])
        loss, _ = moco_infonce(q, q, queue, ContrastiveConfig(10.0))
        c = cosine_score(q, q)
        assert loss == pytest.approx(math.log(1 + 3 * math.exp(-10 * c)), rel=1e-12)

    def test_gradient(self, rng):
        q, k = rng.standard_normal(6), rng.standard_normal(6)
        queue = rng.standard_normal((9, 6))
        _, g = moco_infonce(q, k, queue)
        fd = central_diff(lambda v: moco_infonce(v, k, queue)[0], q)
        assert rel_err(g, fd) < 1e-4

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            moco_infonce(np.ones(3), np.ones(3), np.ones((2, 4)))


class TestClassificationHead:
    @pytest.mark.parametrize("loss", ["softmax", "bitempered"])
    @pytest.mark.parametrize("variant", ["subtractive", "angular"])
    def test_gradients(self, loss, variant, rng):
        cfg = HeadConfig(loss, MarginConfig(10, 0.2, variant))
        x, w = rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
        labels = np.array([0, 2, 1, 2])
        weights = np.array([1.0, 0.5, 0.0, 1.0])
        _, gx, gw = classification_loss(x, w, labels, cfg, weights)
        fx = central_diff(lambda v: classification_loss(v, w, labels, cfg, weights)[0], x)
        fw = central_diff(lambda v: classification_loss(x, v, labels, cfg, weights)[0], w)
        assert rel_err(gx, fx) < 1e-4
        assert rel_err(gw, fw) < 1e-4

    def test_weighted_mean(self, rng):
        cfg = HeadConfig("softmax")
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
        labels = np.array([0, 1, 1])
        full = classification_loss(x, w, labels, cfg)[0]
        parts = [classification_loss(x[i:i + 1], w, labels[i:i + 1], cfg)[0] for i in range(3)]
        assert full == pytest.approx(sum(parts) / 3, rel=1e-12)
        zero = classification_loss(x, w, labels, cfg, np.zeros(3))
        assert zero[0] == 0.0 and not zero[1].any() and not zero[2].any()
