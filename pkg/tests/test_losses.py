import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shipdelay import numerics as nx
from shipdelay.losses import F1_EPS, pinball, regression_loss, sigmoid_f1_loss
from shipdelay.numerics import Tensor

LEVELS = (0.1, 0.5, 0.9)


def f1_loss(p, d):
    return float(sigmoid_f1_loss(Tensor(np.asarray(p, dtype=float)), np.asarray(d)).data)


class TestSigmoidF1:
    def test_half_half(self):
        # tp = fp = fn = 0.5
        assert f1_loss([0.5, 0.5], [1, 0]) == pytest.approx(0.5, abs=1e-9)

    def test_guard_for_all_zero_batch(self):
        assert f1_loss([1e-300, 1e-300], [0, 0]) == 1.0
        assert np.isfinite(f1_loss([0.0, 0.0], [0, 0]))
        assert F1_EPS == 1e-8

    def test_all_negative_batch(self):
        assert f1_loss([0.3, 0.9, 0.1], [0, 0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_near_perfect(self):
        assert f1_loss([1 - 1e-9, 1 - 1e-9], [1, 1]) < 1e-8

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1)), min_size=1, max_size=30))
    def test_bounded(self, rows):
        p, d = zip(*rows)
        assert 0.0 <= f1_loss(p, d) <= 1.0

    @settings(max_examples=100)
    @given(
        st.lists(st.tuples(st.floats(1e-3, 0.9), st.integers(0, 1)), min_size=1, max_size=20),
        st.floats(1e-3, 0.09),
    )
    def test_decreases_in_positive_probability(self, rows, bump):
        p, d = map(list, zip(*rows))
        d[0] = 1
        base = f1_loss(p, d)
        p[0] += bump
        assert f1_loss(p, d) < base

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(12, 1)), requires_grad=True)
        d = (rng.random(12) < 0.4).astype(float)
        err = nx.check_gradients(lambda: sigmoid_f1_loss(nx.sigmoid(logits), d), {"z": logits}, 12)
        assert err < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sigmoid_f1_loss(Tensor(np.ones(3) / 2), np.ones(2))


class TestPinball:
    @pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
    def test_zero(self, alpha):
        assert pinball(0.0, alpha) == 0.0

    def test_positive_residual(self):
        assert pinball(2.0, 0.1) == pytest.approx(0.2, abs=1e-9)

    def test_negative_residual(self):
        assert pinball(-2.0, 0.1) == pytest.approx(1.8, abs=1e-9)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0, 1), st.floats(0.01, 0.99))
    def test_convex(self, a, b, t, alpha):
        mid = pinball(t * a + (1 - t) * b, alpha)
        assert mid <= t * pinball(a, alpha) + (1 - t) * pinball(b, alpha) + 1e-9 * (1 + abs(a) + abs(b))

    @given(st.floats(-1e3, 1e3), st.floats(0.01, 0.99))
    def test_nonnegative(self, u, alpha):
        assert pinball(u, alpha) >= 0


class TestRegressionLoss:
    def test_hand_example(self):
        q = Tensor([[1.0, 2.0, 4.0]])
        loss = regression_loss(q, Tensor(np.zeros((1, 3))), np.array([3.0]), np.array([1]), LEVELS)
        assert float(loss.data) == pytest.approx(0.8 / 3, abs=1e-9)

    def test_perfect_predictions(self):
        y = np.array([2.0, -1.0])
        q = Tensor(np.tile(y[:, None], (1, 3)))
        assert float(regression_loss(q, q, y, np.array([1, 0]), LEVELS).data) == 0.0

    def test_routing_mask_zeroes_mismatched_head(self):
        rng = np.random.default_rng(1)
        dq = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        oq = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        d = np.array([1, 0, 0, 1, 0, 1])
        regression_loss(dq, oq, rng.normal(size=6), d, LEVELS).backward()
        assert np.all(dq.grad[d == 0] == 0.0) and np.all(oq.grad[d == 1] == 0.0)
        assert np.all(dq.grad[d == 1] != 0.0) and np.all(oq.grad[d == 0] != 0.0)

    def test_mismatched_head_does_not_change_loss(self):
        y, d = np.array([1.0, 4.0]), np.array([0, 1])
        a = Tensor([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
        b1 = Tensor([[0.0, 0.5, 1.5], [-9.0, 9.0, 99.0]])
        b2 = Tensor([[0.0, 0.5, 1.5], [0.0, 0.0, 0.0]])
        assert float(regression_loss(a, b1, y, d).data) == float(regression_loss(a, b2, y, d).data)

    def test_gradient_through_two_heads(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(10, 4)))
        params = {k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in
                  [("w_d", (3, 4)), ("b_d", (3,)), ("w_o", (3, 4)), ("b_o", (3,))]}
        y = rng.normal(size=10) * 3
        d = (rng.random(10) < 0.5).astype(int)

        def loss():
            return regression_loss(
                nx.linear(x, params["w_d"], params["b_d"]), nx.linear(x, params["w_o"], params["b_o"]), y, d
            )

        assert nx.check_gradients(loss, params, 30, rng=np.random.default_rng(3)) < 1e-4
