import numpy as np
import pytest

from uqtse.nn import AdamState, Mlp, adam_step, load_checkpoint, save_checkpoint
from uqtse.tape import Tensor, grad_params, tanh


class TestForward:
    def test_zero_params_zero_output(self):
        m = Mlp((3, 5, 2), seed=0)
        m.set_flat_params(np.zeros(m.n_params))
        out = m.forward_numpy(np.random.default_rng(0).normal(size=(4, 3)))
        assert np.all(out == 0.0)

    def test_single_linear_layer_is_matvec(self):
        m = Mlp((3, 2), seed=1)
        X = np.random.default_rng(1).normal(size=(6, 3))
        expected = X @ m.weights[0].value + m.biases[0].value
        assert np.allclose(m.forward_numpy(X), expected, atol=1e-15)

    def test_tape_and_numpy_paths_agree(self):
        # reference evaluation: same arithmetic written independently
        m = Mlp((2, 16, 16, 1), seed=7)
        X = np.random.default_rng(3).normal(size=(9, 2))
        h = X
        for l, (w, b) in enumerate(zip(m.weights, m.biases)):
            h = h @ w.value + b.value
            if l < len(m.weights) - 1:
                h = np.tanh(h)
        assert np.allclose(m.forward(X).value, h, atol=1e-14)
        assert np.allclose(m.forward_numpy(X), h, atol=1e-14)

    def test_shape_mismatch(self):
        m = Mlp((3, 2), seed=0)
        with pytest.raises(ValueError):
            m.forward_numpy(np.ones((4, 2)))

    def test_param_count(self):
        m = Mlp((3, 8, 5), seed=0)
        assert m.n_params == 3 * 8 + 8 + 8 * 5 + 5
        assert m.flat_params().shape == (m.n_params,)


class TestInputDerivatives:
    def test_linear_net_jacobian_is_weight_row(self):
        m = Mlp((3, 2), seed=2)
        X = np.random.default_rng(0).normal(size=(5, 3))
        ev = m.forward_with_input_derivs(X, coords=(0, 1))
        for j in (0, 1):
            expected = np.broadcast_to(m.weights[0].value[j], (5, 2))
            assert np.allclose(ev.d_input[j].value, expected, atol=1e-15)

    def test_single_tanh_neuron_closed_form(self):
        m = Mlp((1, 1, 1), seed=3)
        w0 = float(m.weights[0].value[0, 0])
        b0 = float(m.biases[0].value[0])
        v = float(m.weights[1].value[0, 0])
        x = np.array([[0.37]])
        ev = m.forward_with_input_derivs(x, coords=(0,))
        expected = w0 * (1.0 - np.tanh(w0 * 0.37 + b0) ** 2) * v
        assert ev.d_input[0].value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_against_finite_differences_many_nets(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            widths = (3, int(rng.integers(4, 10)), int(rng.integers(4, 10)), 2)
            m = Mlp(widths, seed=int(rng.integers(0, 2**31)))
            X = rng.normal(size=(1, 3))
            ev = m.forward_with_input_derivs(X, coords=(0, 1))
            h = 1e-5
            for j in (0, 1):
                Xp, Xm = X.copy(), X.copy()
                Xp[0, j] += h
                Xm[0, j] -= h
                fd = (m.forward_numpy(Xp) - m.forward_numpy(Xm)) / (2 * h)
                denom = np.maximum(np.abs(fd), 1e-6)
                assert np.max(np.abs(ev.d_input[j].value - fd) / denom) <= 1e-4

    def test_latent_coords_excluded(self):
        m = Mlp((4, 6, 1), seed=9)
        X = np.random.default_rng(1).normal(size=(3, 4))
        ev = m.forward_with_input_derivs(X, coords=(0, 1))
        assert len(ev.d_input) == 2

    def test_second_order_param_grads_match_fd(self):
        # gradient w.r.t. weights of a loss built on input derivatives
        m = Mlp((2, 6, 6, 1), seed=13)
        X = np.random.default_rng(2).normal(size=(4, 2))

        def loss_value() -> float:
            ev = m.forward_with_input_derivs(X, coords=(0,))
            return float((ev.d_input[0] * ev.d_input[0]).mean().value)

        ev = m.forward_with_input_derivs(X, coords=(0,))
        loss = (ev.d_input[0] * ev.d_input[0]).mean()
        grads = np.concatenate([g.ravel() for g in grad_params(loss, m.params())])
        flat0 = m.flat_params()
        h = 1e-6
        fd = np.zeros_like(flat0)
        for i in range(flat0.size):
            up, down = flat0.copy(), flat0.copy()
            up[i] += h
            down[i] -= h
            m.set_flat_params(up)
            lp = loss_value()
            m.set_flat_params(down)
            lm = loss_value()
            fd[i] = (lp - lm) / (2 * h)
        m.set_flat_params(flat0)
        denom = np.maximum(np.abs(fd), 1e-7)
        assert np.max(np.abs(grads - fd) / denom) <= 1e-3


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(np.zeros(4))
        state = AdamState.for_params([p], lr=0.01)
        g = np.array([1.0, -1.0, 1.0, -1.0])
        adam_step(state, [p], [g])
        assert np.allclose(np.abs(p.value), 0.01, rtol=1e-6)
        assert np.all(np.sign(p.value) == -np.sign(g))

    def test_zero_gradient_never_moves(self):
        p = Tensor(np.array([1.0, 2.0]))
        state = AdamState.for_params([p], lr=0.1)
        for _ in range(50):
            adam_step(state, [p], [np.zeros(2)])
        assert np.array_equal(p.value, np.array([1.0, 2.0]))

    def test_converges_on_quadratic(self):
        # reference run: minimize (w - 3)^2 by hand with the same update
        p = Tensor(np.array([0.0]))
        state = AdamState.for_params([p], lr=0.05)
        for _ in range(200):
            g = 2.0 * (p.value - 3.0)
            adam_step(state, [p], [g])
        assert abs(float(p.value[0]) - 3.0) <= 0.05

    def test_nan_gradient_reports_index(self):
        p = Tensor(np.zeros(3))
        state = AdamState.for_params([p], lr=0.01)
        bad = np.array([0.0, np.nan, 0.0])
        with pytest.raises(FloatingPointError, match="index 1"):
            adam_step(state, [p], [bad])

    def test_length_mismatch(self):
        p = Tensor(np.zeros(3))
        state = AdamState.for_params([p], lr=0.01)
        with pytest.raises(ValueError):
            adam_step(state, [p, p], [np.zeros(3), np.zeros(3)])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "ckpt.npz"
        arrays = {"a": np.arange(5.0), "b": np.ones((2, 2))}
        save_checkpoint(path, arrays, {"note": "x", "widths": [2, 3]})
        back, meta = load_checkpoint(path)
        assert np.array_equal(back["a"], arrays["a"])
        assert np.array_equal(back["b"], arrays["b"])
        assert meta == {"note": "x", "widths": [2, 3]}

    def test_version_checked(self, tmp_path):
        path = tmp_path / "ckpt.npz"
        import json

        bad_meta = np.frombuffer(json.dumps({"format_version": "other"}).encode(), dtype=np.uint8)
        np.savez(path, __meta__=bad_meta)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)
