import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsilo.nn import (
    LayerParams, Model, ShapeError, axpy_model, backward, dumps_model,
    forward, init_model, load_model, loads_model, loss, save_model,
)

from conftest import kink_free_batch, max_rel_error, numeric_grads


def single_weight_model(w, b=0.0):
    return Model((LayerParams(np.array([[float(w)]]), np.array([float(b)]), "sigmoid"),))


def zero_model(dims):
    m = init_model(dims, 0)
    return axpy_model([m], [0.0])


class TestInit:
    def test_default_architecture_shapes(self):
        m = init_model([1400, 500, 100, 1], seed=7)
        assert [l.weights.shape for l in m.layers] == [(1400, 500), (500, 100), (100, 1)]
        assert [l.activation for l in m.layers] == ["relu", "relu", "sigmoid"]
        assert m.input_dim == 1400

    def test_zero_biases(self):
        assert init_model([2, 1], seed=123).layers[0].biases.tolist() == [0.0]

    def test_deterministic(self):
        assert init_model([4, 3, 1], 1).equals(init_model([4, 3, 1], 1))
        assert not init_model([4, 3, 1], 1).equals(init_model([4, 3, 1], 2))

    def test_glorot_bounds(self):
        m = init_model([30, 20, 1], 3)
        limit = math.sqrt(6.0 / 50)
        assert np.abs(m.layers[0].weights).max() <= limit

    @pytest.mark.parametrize("dims", [[], [5], [3, 0, 1], [0, 1]])
    def test_invalid_dims(self, dims):
        with pytest.raises(ValueError):
            init_model(dims, 0)


class TestForward:
    def test_zero_model_gives_half(self):
        x = np.random.default_rng(0).normal(size=(7, 5))
        probs, _ = forward(zero_model([5, 4, 1]), x)
        assert np.all(probs == 0.5)

    def test_single_weight(self):
        probs, _ = forward(single_weight_model(2.0), [[1.0]])
        assert probs[0] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
        assert probs[0] == pytest.approx(0.880797, abs=1e-6)

    def test_relu_clamps_negative(self):
        hidden = LayerParams(np.array([[-3.0]]), np.array([0.0]), "relu")
        out = LayerParams(np.array([[1.0]]), np.array([0.0]), "sigmoid")
        _, cache = forward(Model((hidden, out)), [[1.0]])
        assert cache.pre[0][0, 0] == -3.0
        assert cache.post[0][0, 0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward(init_model([3, 2, 1], 0), np.zeros((4, 2)))

    def test_bit_deterministic(self):
        m = init_model([6, 5, 1], 4)
        x = np.random.default_rng(1).normal(size=(9, 6))
        a, _ = forward(m, x)
        b, _ = forward(m, x)
        assert a.tobytes() == b.tobytes()

    def test_extreme_logits_stay_in_unit_interval(self):
        p, _ = forward(single_weight_model(1.0), [[800.0], [-800.0]])
        assert p[0] == 1.0 and p[1] == 0.0


class TestLoss:
    def test_perfect_prediction(self):
        assert 0.0 <= loss([1.0], [1]) <= 1e-12

    def test_ln2(self):
        assert loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_regularization_only_weights(self):
        m = single_weight_model(2.0, b=5.0)
        assert loss([1.0], [1], m, 0.01) == pytest.approx(0.04, abs=1e-11)

    def test_clamp_keeps_loss_finite(self):
        assert math.isfinite(loss([0.0, 1.0], [1, 0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss([0.5], [1, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30),
           st.floats(0, 1))
    def test_non_negative(self, pairs, lam):
        p, y = zip(*pairs)
        assert loss(p, y, init_model([2, 1], 0), lam) >= 0.0


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        m = init_model([6, 4, 3, 1], 5)
        x = kink_free_batch(m, rng, 8)
        y = rng.integers(0, 2, size=8)
        _, cache = forward(m, x)
        g = backward(m, cache, y, 0.01)
        nw, nb = numeric_grads(m, x, y, 0.01)
        assert max_rel_error(g.weights + g.biases, nw + nb) < 1e-4

    def test_zero_data_gradient_at_perfect_fit(self):
        # a saturated output gives p == y exactly
        m = single_weight_model(100.0)
        _, cache = forward(m, [[1.0], [-1.0]])
        g = backward(m, cache, [1, 0], 0.0)
        assert np.abs(g.weights[0]).max() < 1e-30
        assert np.abs(g.biases[0]).max() < 1e-30

    def test_duplicated_batch_same_gradients(self):
        rng = np.random.default_rng(2)
        m = init_model([5, 4, 1], 0)
        x = rng.normal(size=(6, 5))
        y = rng.integers(0, 2, size=6)
        g1 = backward(m, forward(m, x)[1], y, 0.01)
        g2 = backward(m, forward(m, np.vstack([x, x]))[1], np.r_[y, y], 0.01)
        for a, b in zip(g1.weights + g1.biases, g2.weights + g2.biases):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_stale_cache_rejected(self):
        m = init_model([3, 2, 1], 0)
        _, cache = forward(m, np.ones((4, 3)))
        with pytest.raises(ValueError):
            backward(m, cache, [1, 0, 1], 0.0)
        with pytest.raises(ValueError):
            backward(init_model([3, 5, 1], 0), cache, [1, 0, 1, 0], 0.0)

    def test_trainable_mask_matches_full_gradient(self):
        rng = np.random.default_rng(3)
        m = init_model([5, 4, 3, 1], 2)
        x = rng.normal(size=(7, 5))
        y = rng.integers(0, 2, size=7)
        _, cache = forward(m, x)
        full = backward(m, cache, y, 0.01)
        part = backward(m, cache, y, 0.01, trainable=[False, True, True])
        assert not part.weights[0].any()
        for i in (1, 2):
            assert np.array_equal(full.weights[i], part.weights[i])
            assert np.array_equal(full.biases[i], part.biases[i])


class TestAxpy:
    def test_identity(self):
        m = init_model([4, 3, 1], 0)
        out = axpy_model([m], [1.0])
        assert out.equals(m) and out.layers[0].weights is not m.layers[0].weights

    def test_convex_fixed_point(self):
        m = init_model([4, 3, 1], 0)
        assert axpy_model([m, m.copy()], [0.5, 0.5]).equals(m)

    def test_hand_value(self):
        out = axpy_model([single_weight_model(1.0), single_weight_model(3.0)], [0.25, 0.75])
        assert out.layers[0].weights[0, 0] == 2.5

    def test_inputs_unmodified(self):
        a, b = init_model([3, 2, 1], 0), init_model([3, 2, 1], 1)
        a0, b0 = a.copy(), b.copy()
        axpy_model([a, b], [0.3, 0.7])
        assert a.equals(a0) and b.equals(b0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            axpy_model([init_model([3, 2, 1], 0), init_model([3, 4, 1], 0)], [0.5, 0.5])
        with pytest.raises(ValueError):
            axpy_model([], [])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 1000),
           st.floats(-5, 5), st.floats(-5, 5))
    def test_linear(self, s1, s2, alpha, beta):
        a, b = init_model([3, 4, 1], s1), init_model([3, 4, 1], s2)
        out = axpy_model([a, b], [alpha, beta])
        for lo, la, lb in zip(out.layers, a.layers, b.layers):
            assert np.array_equal(lo.weights, alpha * la.weights + beta * lb.weights)
            assert np.array_equal(lo.biases, alpha * la.biases + beta * lb.biases)


class TestModelFile:
    def test_round_trip_bit_exact(self, tmp_path):
        m = init_model([7, 5, 3, 1], 9)
        m.layers[1].biases[:] = np.random.default_rng(0).normal(size=3)
        save_model(m, tmp_path / "m.fadl")
        back = load_model(tmp_path / "m.fadl")
        assert back.equals(m)
        assert dumps_model(back) == dumps_model(m)

    def test_layout(self):
        m = single_weight_model(2.0, b=-1.0)
        raw = dumps_model(m)
        assert raw[:5] == b"FADL1"
        assert int.from_bytes(raw[5:9], "little") == 1
        # header 5 + count 4 + (in, out, tag) 9 + one weight 8 + one bias 8
        assert len(raw) == 34
        assert np.frombuffer(raw[18:26], "<f8")[0] == 2.0

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            loads_model(b"NOPE1" + bytes(10))
        with pytest.raises(ValueError):
            loads_model(dumps_model(single_weight_model(1.0)) + b"x")
