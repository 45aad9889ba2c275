"""Tests for the loss heads."""

import math

import numpy as np
import pytest

from sinc_speaker import losses
from sinc_speaker.errors import ConfigError, NumericError, ShapeError, ZeroNormError
from sinc_speaker.gradcheck import check_loss_head
from sinc_speaker.losses import CosineLogits, CurriculumState, LossConfig


def cosines(rows, labels):
    return CosineLogits(np.array(rows, dtype=float), np.array(labels, dtype=np.int64))


class TestSoftmax:
    def test_uniform_logits(self):
        out = losses.softmax_loss(np.zeros((1, 10)), [0])
        assert out.loss == pytest.approx(math.log(10), abs=1e-12)

    def test_two_classes(self):
        out = losses.softmax_loss(np.array([[2.0, 0.0]]), [0])
        assert out.loss == pytest.approx(0.126928, abs=1e-6)

    def test_large_logits_do_not_overflow(self):
        out = losses.softmax_loss(np.array([[1000.0, -1000.0]]), [1])
        assert out.loss == pytest.approx(2000.0)

    def test_gradient_rows_sum_to_zero(self, rng):
        out = losses.softmax_loss(rng.standard_normal((4, 5)), [0, 1, 2, 3])
        np.testing.assert_allclose(out.grad.sum(axis=1), 0.0, atol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            losses.softmax_loss(np.zeros((1, 3)), [3])


class TestNormSoftmax:
    def test_example(self):
        out = losses.norm_softmax_loss(cosines([[1.0, 0.0]], [0]), s=1.0)
        assert out.loss == pytest.approx(0.313262, abs=1e-6)

    def test_identical_cosines(self):
        out = losses.norm_softmax_loss(cosines([[0.3] * 7], [4]), s=30.0)
        assert out.loss == pytest.approx(math.log(7), abs=1e-12)


class TestArcFace:
    def test_example(self):
        out = losses.arcface_loss(cosines([[math.cos(0.3), 0.5]], [0]), m=0.5, s=64.0)
        expected = math.log1p(math.exp(32.0 - 64.0 * math.cos(0.8)))
        assert out.loss == pytest.approx(expected, rel=1e-6)

    def test_zero_margin_matches_norm_softmax(self, rng):
        cl = cosines(rng.uniform(-1, 1, size=(6, 4)), rng.integers(0, 4, size=6))
        arc = losses.arcface_loss(cl, m=0.0, s=30.0)
        plain = losses.norm_softmax_loss(cl, s=30.0)
        assert arc.loss == plain.loss
        assert np.array_equal(arc.grad, plain.grad)

    def test_wrap_fallback(self):
        target, deriv = losses.margin_target(np.array([-1.0, 1.0]), 0.5)
        assert target[0] == pytest.approx(-1.0 - 0.5 * math.sin(0.5))
        assert deriv[0] == 1.0
        assert target[1] == pytest.approx(math.cos(0.5))
        assert np.all(np.isfinite(deriv))

    def test_target_is_monotone_in_cosine(self):
        c = np.linspace(-1.0, 1.0, 2001)
        target, _ = losses.margin_target(c, 0.5)
        assert np.all(np.diff(target) > 0)


class TestAmSoftmax:
    def test_example(self):
        out = losses.am_softmax_loss(cosines([[0.9, 0.2]], [0]), m=0.35, s=30.0)
        assert out.loss == pytest.approx(math.log1p(math.exp(-10.5)), rel=1e-9)
        assert out.loss == pytest.approx(2.75e-5, rel=0.01)

    def test_zero_margin_matches_norm_softmax(self, rng):
        cl = cosines(rng.uniform(-1, 1, size=(5, 3)), rng.integers(0, 3, size=5))
        assert losses.am_softmax_loss(cl, 0.0, 20.0).loss == pytest.approx(
            losses.norm_softmax_loss(cl, 20.0).loss, abs=1e-12
        )


@pytest.mark.parametrize("kind", ["arcface", "am_softmax"])
def test_loss_grows_with_margin(kind, rng):
    cl = cosines(rng.uniform(-0.9, 0.9, size=(8, 5)), rng.integers(0, 5, size=8))
    head = losses.arcface_loss if kind == "arcface" else losses.am_softmax_loss
    values = [head(cl, m, 16.0).loss for m in (0.0, 0.1, 0.2, 0.3, 0.4)]
    assert all(b > a for a, b in zip(values, values[1:]))


class TestCurricular:
    @pytest.mark.parametrize(
        "t, c, target, expected",
        [(0.5, 0.3, 0.5, 0.3), (0.0, 0.9, 0.5, 0.81), (0.5, 0.9, 0.5, 1.26)],
    )
    def test_modulation(self, t, c, target, expected):
        assert losses.modulation(t, c, target) == pytest.approx(expected, abs=1e-12)

    def test_modulation_tie_is_hard(self):
        assert losses.modulation(0.5, 0.4, 0.4) == pytest.approx(0.4 * 0.9)

    def test_default_update_weights_fresh_batch(self):
        state = losses.update_t(CurriculumState(), r=0.5, alpha=0.99)
        assert state.t == pytest.approx(0.495, abs=1e-15)
        assert state.batch_index == 1

    @pytest.mark.parametrize("k", [1, 5, 50])
    def test_update_closed_forms(self, k):
        r, alpha = 0.6, 0.9
        fast = swapped = CurriculumState()
        for _ in range(k):
            fast = losses.update_t(fast, r, alpha, "paper")
            swapped = losses.update_t(swapped, r, alpha, "swapped")
        assert fast.t == pytest.approx(r * (1 - (1 - alpha) ** k), abs=1e-12)
        assert swapped.t == pytest.approx(r * (1 - alpha**k), abs=1e-12)

    @pytest.mark.parametrize("t_update, expected", [("paper", -0.198), ("swapped", -0.002)])
    def test_negative_r_follows_the_update_rule(self, t_update, expected):
        state = losses.update_t(CurriculumState(t=0.0), r=-0.2, alpha=0.99, t_update=t_update)
        assert state.t == pytest.approx(expected, abs=1e-15)

    def test_negative_t_carries_over(self):
        state = losses.update_t(CurriculumState(t=-0.1), r=0.3, alpha=0.99)
        assert state.t == pytest.approx(0.99 * 0.3 - 0.01 * 0.1, abs=1e-15)

    def test_unknown_update(self):
        with pytest.raises(ConfigError):
            losses.update_t(CurriculumState(), 0.5, 0.99, "momentum")

    def test_example(self):
        state = CurriculumState(t=0.0)
        out = losses.curricular_loss(cosines([[math.cos(0.2), 0.9]], [0]), state, m=0.5, s=64.0)
        expected = math.log1p(math.exp(51.84 - 64.0 * math.cos(0.7)))
        assert out.loss == pytest.approx(expected, rel=1e-9)
        assert out.loss == pytest.approx(2.944, abs=0.01)
        assert state.t == 0.0
        assert out.state.t == pytest.approx(0.99 * math.cos(0.2), abs=1e-12)
        assert out.r == pytest.approx(math.cos(0.2))

    def test_all_easy_matches_arcface(self):
        cl = cosines([[0.99, 0.1, -0.2], [0.2, 0.95, 0.0]], [0, 1])
        curricular = losses.curricular_loss(cl, CurriculumState(t=0.7), m=0.5, s=64.0)
        arc = losses.arcface_loss(cl, m=0.5, s=64.0)
        assert curricular.loss == pytest.approx(arc.loss, abs=1e-12)
        np.testing.assert_allclose(curricular.grad, arc.grad, atol=1e-12)
        assert curricular.easy_fraction == 1.0

    def test_sum_statistic(self):
        cl = cosines([[0.5, 0.0], [0.0, 0.3]], [0, 1])
        out = losses.curricular_loss(cl, CurriculumState(), 0.5, 64.0, r_statistic="sum")
        assert out.r == pytest.approx(0.8)


@pytest.mark.parametrize("kind", losses.LOSS_KINDS)
def test_batch_loss_is_mean_of_row_losses(kind):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        features = rng.standard_normal((4, 6))
        weight = rng.standard_normal((5, 6))
        bias = rng.standard_normal(5)
        labels = rng.integers(0, 5, size=4)
        config = LossConfig(kind=kind, m=0.3, s=16.0)
        state = CurriculumState(t=0.2)
        whole = losses.compute_loss(config, features, weight, bias, labels, state).loss
        rows = [
            losses.compute_loss(config, features[i : i + 1], weight, bias, labels[i : i + 1], state).loss
            for i in range(4)
        ]
        assert whole == pytest.approx(np.mean(rows), abs=1e-10)


@pytest.mark.parametrize("kind", ["norm_softmax", "arcface", "am_softmax", "curricular"])
def test_extreme_cosines_stay_finite(kind, rng):
    classes = 10000
    cos = rng.choice([-1.0, 1.0], size=(2, classes))
    cl = CosineLogits(cos, np.array([0, 1]))
    config = LossConfig(kind=kind, m=0.35 if kind == "am_softmax" else 0.5, s=64.0)
    if kind == "norm_softmax":
        out = losses.norm_softmax_loss(cl, config.s)
    elif kind == "arcface":
        out = losses.arcface_loss(cl, config.m, config.s)
    elif kind == "am_softmax":
        out = losses.am_softmax_loss(cl, config.m, config.s)
    else:
        out = losses.curricular_loss(cl, CurriculumState(t=0.3), config.m, config.s)
    assert math.isfinite(out.loss)
    assert np.all(np.isfinite(out.grad))


class TestCosineLogits:
    def test_parallel_rows_stay_within_range(self, rng):
        features = rng.standard_normal((6, 5)) * 1e3
        cl = losses.cosine_logits(features, np.vstack([features, -features]) * 7.0, labels=np.arange(6))
        assert np.all(np.abs(cl.cos_theta) <= 1.0)
        np.testing.assert_allclose(np.diag(cl.cos_theta[:, :6]), 1.0, atol=1e-12)

    def test_out_of_range_cosine_is_rejected(self, monkeypatch):
        # without normalization the dot products are far outside [-1, 1]
        monkeypatch.setattr(losses.numeric, "l2_normalize", lambda x: x)
        with pytest.raises(NumericError, match="out of range"):
            losses.cosine_logits(np.array([[3.0, 4.0]]), np.array([[3.0, 4.0]]))

    def test_nan_is_left_for_the_loss_check(self):
        cl = losses.cosine_logits(np.array([[np.nan, 1.0]]), np.eye(2))
        assert np.all(np.isnan(cl.cos_theta))


class TestComputeLoss:
    def test_bias_gradient(self, rng):
        features = rng.standard_normal((3, 4))
        weight = rng.standard_normal((5, 4))
        bias = rng.standard_normal(5)
        labels = np.array([0, 2, 4])
        affine = losses.compute_loss(LossConfig(kind="softmax"), features, weight, bias, labels)
        assert np.any(affine.grad_bias != 0.0)
        for kind in ("norm_softmax", "arcface", "am_softmax", "curricular"):
            result = losses.compute_loss(LossConfig(kind=kind, m=0.2), features, weight, bias, labels)
            np.testing.assert_array_equal(result.grad_bias, 0.0)

    def test_softmax_keeps_state(self, rng):
        state = CurriculumState(t=0.4, batch_index=3)
        result = losses.compute_loss(
            LossConfig(kind="softmax"), rng.standard_normal((2, 3)), np.eye(3), np.zeros(3), [0, 1], state
        )
        assert result.state is state

    def test_zero_feature(self):
        with pytest.raises(ZeroNormError):
            losses.compute_loss(LossConfig(kind="arcface"), np.zeros((1, 3)), np.eye(3), np.zeros(3), [0])

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            losses.compute_loss(LossConfig(), np.ones((2, 3)), np.eye(3), np.zeros(3), [0])

    @pytest.mark.parametrize("kind", losses.LOSS_KINDS)
    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, kind, seed):
        error, checked, _ = check_loss_head(kind, seed)
        assert checked > 0
        assert error < 1e-4


class TestConfig:
    @pytest.mark.parametrize(
        "fields",
        [
            {"kind": "triplet"},
            {"s": 0.0},
            {"kind": "arcface", "m": 1.6},
            {"kind": "am_softmax", "m": 1.0},
            {"alpha": 1.0},
            {"r_statistic": "median"},
            {"t_update": "momentum"},
        ],
    )
    def test_invalid(self, fields):
        with pytest.raises(ConfigError):
            LossConfig(**fields).validate()

    def test_defaults_are_valid(self):
        LossConfig().validate()

    def test_non_finite_t(self):
        with pytest.raises(ConfigError):
            CurriculumState(t=float("nan"))


class TestEvalLogits:
    def test_plain_and_margin(self):
        features = np.array([[1.0, 0.0]])
        weight = np.array([[1.0, 0.0], [0.0, 1.0]])
        config = LossConfig(kind="am_softmax", m=0.35, s=30.0)
        plain = losses.eval_logits(config, features, weight, np.zeros(2), "plain")
        margin = losses.eval_logits(config, features, weight, np.zeros(2), "margin")
        np.testing.assert_allclose(plain, [[30.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(margin, [[19.5, -10.5]], atol=1e-12)

    def test_softmax_head_is_affine(self, rng):
        features = rng.standard_normal((2, 3))
        weight = rng.standard_normal((4, 3))
        bias = rng.standard_normal(4)
        logits = losses.eval_logits(LossConfig(kind="softmax"), features, weight, bias, "margin")
        np.testing.assert_allclose(logits, features @ weight.T + bias)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            losses.eval_logits(LossConfig(), np.ones((1, 2)), np.eye(2), np.zeros(2), "sharp")

    @pytest.mark.parametrize("kind", losses.LOSS_KINDS)
    @pytest.mark.parametrize("mode", losses.EVAL_LOGITS)
    def test_posteriors_sum_to_one(self, kind, mode, rng):
        probs = losses.posteriors(
            LossConfig(kind=kind, m=0.3),
            rng.standard_normal((6, 4)),
            rng.standard_normal((9, 4)),
            rng.standard_normal(9),
            mode,
        )
        assert probs.shape == (6, 9)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0.0)
