import numpy as np
import pytest

from spanlab.nn import (
    LSTMCell,
    LinearLayer,
    OptimizerState,
    adam_step,
    clip_global_norm,
    dropout,
    lstm_forward,
    optimizer_step,
    sgd_step,
    xavier_init,
)
from spanlab.tensor import (
    GradTape,
    ShapeMismatch,
    Tensor,
    finite_difference_check,
)


class TestXavierInit:
    def test_bound_for_square_shape(self):
        t = xavier_init((3, 3), seed=0)
        assert np.all(np.abs(t.data) <= 1.0)  # sqrt(6/6) == 1

    def test_deterministic_per_seed(self):
        a = xavier_init((4, 7), seed=123)
        b = xavier_init((4, 7), seed=123)
        assert a.data.tobytes() == b.data.tobytes()

    def test_mean_close_to_zero(self):
        t = xavier_init((100, 100), seed=5)
        # bound is sqrt(6/200) ~= 0.173; the sample mean of 10^4 draws has
        # std bound/sqrt(3)/100 ~= 1e-3, so a Monte-Carlo band of 3e-3 holds
        assert abs(float(t.data.mean())) < 3e-3

    def test_large_sample_mean(self):
        draws = np.concatenate(
            [xavier_init((100, 100), seed=s).data.reshape(-1) for s in range(100)]
        )
        assert draws.size == 10**6
        assert abs(float(draws.mean())) < 0.001

    def test_rejects_non_rank2(self):
        with pytest.raises(ShapeMismatch):
            xavier_init((3,), seed=0)
        with pytest.raises(ShapeMismatch):
            xavier_init((2, 2, 2), seed=0)


class TestLinearLayer:
    def test_forward_shape_and_activation(self):
        layer = LinearLayer(3, 2, activation="relu", seed=1)
        out = layer.forward(Tensor(np.ones((5, 3))))
        assert out.shape == (5, 2)
        assert np.all(out.data >= 0.0)

    def test_input_dim_checked(self):
        layer = LinearLayer(3, 2, seed=1)
        with pytest.raises(ShapeMismatch):
            layer.forward(Tensor(np.ones((5, 4))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        layer = LinearLayer(4, 3, activation="tanh", seed=2)
        x = Tensor(rng.normal(size=(2, 4)))

        def f(w):
            return (layer.forward(x) * layer.forward(x)).sum()

        assert finite_difference_check(f, layer.weight) <= 1e-5
        assert finite_difference_check(f, layer.bias) <= 1e-5


class TestLSTM:
    def test_zero_weights_give_zero_state(self):
        cell = LSTMCell(3, 4, seed=0, forget_bias=0.0)
        for p in cell.parameters().values():
            p.data = np.zeros_like(p.data)
        rng = np.random.default_rng(0)
        h = lstm_forward(cell, Tensor(rng.normal(size=(6, 3))))
        np.testing.assert_array_equal(h.data, np.zeros(4))

    def test_length_one_equals_single_step(self):
        cell = LSTMCell(3, 5, seed=4)
        x = np.random.default_rng(1).normal(size=(1, 3))
        h_seq = lstm_forward(cell, Tensor(x))
        h0 = Tensor(np.zeros((1, 5)))
        c0 = Tensor(np.zeros((1, 5)))
        h_step, _ = cell.step(Tensor(x), h0, c0)
        np.testing.assert_array_equal(h_seq.data, h_step.data.reshape(5))

    def test_order_sensitivity(self):
        cell = LSTMCell(2, 6, seed=7)
        readout = LinearLayer(6, 1, seed=8)
        rng = np.random.default_rng(9)
        seq = rng.normal(size=(5, 2))

        def predict(x):
            h = lstm_forward(cell, Tensor(x))
            return readout.forward(h.reshape((1, 6))).item()

        assert predict(seq) != predict(seq[::-1].copy())

    def test_gradient_through_ten_steps(self):
        cell = LSTMCell(2, 3, seed=11)
        readout = LinearLayer(3, 1, seed=12)
        seq = Tensor(np.random.default_rng(13).normal(size=(10, 2)))

        def f(_):
            h = lstm_forward(cell, seq)
            return readout.forward(h.reshape((1, 3))).sum()

        for p in list(cell.parameters().values()) + [readout.weight]:
            err = finite_difference_check(lambda t, p=p: f(t), p)
            assert err <= 1e-5, f"grad mismatch {err} for a {p.shape} parameter"

    def test_input_dim_mismatch(self):
        cell = LSTMCell(3, 4, seed=0)
        with pytest.raises(ShapeMismatch):
            lstm_forward(cell, Tensor(np.zeros((5, 2))))

    def test_batched_matches_loop(self):
        cell = LSTMCell(2, 4, seed=3)
        rng = np.random.default_rng(8)
        batch = rng.normal(size=(3, 6, 2))
        stacked = cell.run(Tensor(batch)).data
        for b in range(3):
            single = lstm_forward(cell, Tensor(batch[b])).data
            np.testing.assert_allclose(stacked[b], single, rtol=0, atol=1e-14)


class TestAdam:
    def test_first_step_is_minus_lr(self):
        p = Tensor(np.array([1.0, 1.0]), trainable=True)
        state = OptimizerState("adam", lr=0.01)
        adam_step(state, {"p": p}, {"p": np.ones(2)})
        np.testing.assert_allclose(p.data, 1.0 - 0.01, rtol=1e-7)

    def test_maximize_flips_sign(self):
        p = Tensor(np.array([1.0]), trainable=True)
        state = OptimizerState("adam", lr=0.01)
        adam_step(state, {"p": p}, {"p": np.ones(1)}, sign="maximize")
        np.testing.assert_allclose(p.data, 1.0 + 0.01, rtol=1e-7)

    def test_maximize_equals_minimize_of_negated(self):
        rng = np.random.default_rng(21)
        grads = [rng.normal(size=(3,)) for _ in range(50)]

        def run(sign):
            p = Tensor(np.array([0.5, -0.2, 0.1]), trainable=True)
            state = OptimizerState("adam", lr=0.05, weight_decay=0.01)
            for g in grads:
                gg = g if sign == "maximize" else -g
                adam_step(state, {"p": p}, {"p": gg},
                          sign=sign if sign == "maximize" else "minimize")
            return p.data

        np.testing.assert_allclose(run("maximize"), run("minimize"),
                                   rtol=0, atol=1e-12)

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([1.0]), trainable=True)
        state = OptimizerState("adam", lr=0.1)
        for _ in range(200):
            adam_step(state, {"p": p}, {"p": 2.0 * p.data})
        assert abs(p.data[0]) < 0.05

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.ones(2), trainable=True)
        state = OptimizerState("adam", lr=0.1)
        with pytest.raises(ShapeMismatch):
            adam_step(state, {"p": p}, {"p": np.ones(3)})

    def test_sgd_step(self):
        p = Tensor(np.array([1.0]), trainable=True)
        state = OptimizerState("sgd", lr=0.5)
        sgd_step(state, {"p": p}, {"p": np.array([2.0])})
        np.testing.assert_array_equal(p.data, [0.0])

    def test_dispatch(self):
        p = Tensor(np.array([1.0]), trainable=True)
        state = OptimizerState("sgd", lr=1.0)
        optimizer_step(state, {"p": p}, {"p": np.array([1.0])})
        assert p.data[0] == 0.0


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.0, np.random.default_rng(0), training=True)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inference_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.5, np.random.default_rng(0), training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_survivor_fraction(self):
        x = Tensor(np.ones(10**5))
        out = dropout(x, 0.5, np.random.default_rng(42), training=True)
        frac = float(np.count_nonzero(out.data)) / x.size
        assert abs(frac - 0.5) <= 0.01
        survivors = out.data[out.data != 0.0]
        np.testing.assert_allclose(survivors, 2.0)

    def test_rate_out_of_range(self):
        x = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            dropout(x, 1.0, np.random.default_rng(0), training=True)
        with pytest.raises(ValueError):
            dropout(x, -0.1, np.random.default_rng(0), training=True)

    def test_gradient_scales_by_mask(self):
        x = Tensor(np.ones(100), trainable=True)
        rng_state = np.random.default_rng(3)
        with GradTape() as tape:
            out = dropout(x, 0.5, rng_state, training=True)
            loss = out.sum()
        g = tape.gradient(loss, [x])[0].data
        assert set(np.unique(g)) <= {0.0, 2.0}


class TestClipGlobalNorm:
    def test_no_clip_below_threshold(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = clip_global_norm(grads, 10.0)
        assert norm == 5.0
        np.testing.assert_array_equal(clipped["a"], [3.0])

    def test_clips_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped, norm = clip_global_norm(grads, 1.0)
        total = np.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
        assert total == pytest.approx(1.0, rel=1e-12)
