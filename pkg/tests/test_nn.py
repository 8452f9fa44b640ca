import numpy as np
import pytest

from oracles import finite_difference_grads, max_rel_error
from topoaug import nn
from topoaug.errors import NumericError, ParameterError, StateError


class TestForwardOps:
    def test_conv_all_ones_kernel(self):
        x = np.ones((1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        b = np.zeros(1)
        out = nn.conv2d_forward(x, w, b)
        assert out.shape == (1, 3, 3)
        assert out[0, 1, 1] == 9
        assert out[0, 0, 0] == 4
        assert out[0, 0, 1] == 6

    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 4))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        out = nn.conv2d_forward(x, w, np.zeros(2))
        assert np.allclose(out, x)

    def test_conv_zero_weights_bias(self):
        x = np.random.default_rng(1).normal(size=(1, 4, 4))
        out = nn.conv2d_forward(x, np.zeros((3, 1, 3, 3)), np.array([1.0, -2.0, 0.5]))
        assert np.allclose(out[0], 1.0)
        assert np.allclose(out[1], -2.0)
        assert np.allclose(out[2], 0.5)

    def test_conv_shape_errors(self):
        with pytest.raises(ParameterError):
            nn.conv2d_forward(np.ones((2, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ParameterError):
            nn.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1))

    def test_relu(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        assert np.array_equal(nn.relu(x), [0.0, 0.0, 0.0, 0.5, 2.0])

    def test_fc_identity(self):
        x = np.array([1.0, -3.0, 2.0])
        assert np.array_equal(nn.fully_connected(x, np.eye(3), np.zeros(3)), x)

    def test_softmax_uniform(self):
        out = nn.softmax(np.zeros(4))
        assert np.allclose(out, 0.25)

    def test_softmax_valid_distribution(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            z = rng.normal(scale=rng.uniform(0.1, 50.0), size=rng.integers(2, 40))
            p = nn.softmax(z)
            assert abs(p.sum() - 1.0) < 1e-6
            assert np.all(p > 0) and np.all(p < 1)

    def test_softmax_shift_invariance(self):
        z = np.array([1.0, 2.0, 3.0])
        assert np.allclose(nn.softmax(z), nn.softmax(z + 1000.0))

    def test_softmax_nonfinite_raises(self):
        with pytest.raises(NumericError):
            nn.softmax(np.array([np.nan, 0.0]))


def scalarize(layers, x, probe_seed=0):
    """loss = fixed random projection of the chained output; returns
    (loss_fn over params, analytic_grads_fn)."""
    chain = nn.Chain(*layers)
    params = nn.collect_params(layers)

    def loss_fn(_params):
        out = chain.forward(x)
        r = np.random.default_rng(probe_seed).normal(size=out.shape)
        return float((out * r).sum())

    def analytic():
        chain.zero_grads()
        out = chain.forward(x)
        r = np.random.default_rng(probe_seed).normal(size=out.shape)
        chain.backward(r)
        return {k: v.copy() for k, v in nn.collect_grads(layers).items()}

    return loss_fn, analytic, params


@pytest.mark.parametrize("seed", range(20))
class TestGradientChecks:
    def test_dense_layer(self, seed):
        rng = np.random.default_rng(seed)
        layer = nn.Dense(
            "d",
            rng.normal(size=(5, 4)).astype(np.float64),
            rng.normal(size=4).astype(np.float64),
        )
        x = rng.normal(size=5)
        loss_fn, analytic, params = scalarize([layer], x, probe_seed=seed)
        assert max_rel_error(analytic(), finite_difference_grads(loss_fn, params)) < 1e-4

    def test_conv_layer(self, seed):
        rng = np.random.default_rng(100 + seed)
        layer = nn.Conv2D(
            "c",
            rng.normal(size=(3, 2, 3, 3)).astype(np.float64),
            rng.normal(size=3).astype(np.float64),
        )
        x = rng.normal(size=(2, 4, 4))
        loss_fn, analytic, params = scalarize([layer], x, probe_seed=seed)
        assert max_rel_error(analytic(), finite_difference_grads(loss_fn, params)) < 1e-4

    def test_conv_relu_dense_stack(self, seed):
        rng = np.random.default_rng(200 + seed)
        conv = nn.Conv2D(
            "c",
            rng.normal(size=(2, 1, 3, 3)).astype(np.float64),
            rng.normal(size=2).astype(np.float64),
        )
        dense = nn.Dense(
            "d",
            rng.normal(size=(2 * 4 * 4, 3)).astype(np.float64),
            rng.normal(size=3).astype(np.float64),
        )
        layers = [conv, nn.ReLU(), nn.Flatten(), dense, nn.ReLU()]
        x = rng.normal(size=(1, 4, 4))
        loss_fn, analytic, params = scalarize(layers, x, probe_seed=seed)
        assert max_rel_error(analytic(), finite_difference_grads(loss_fn, params)) < 1e-4


class TestBackwardStateAndInputGrads:
    def test_backward_without_forward(self):
        layer = nn.Dense("d", np.ones((2, 2)), np.zeros(2))
        with pytest.raises(StateError):
            layer.backward(np.ones(2))

    def test_zero_seed_zero_grads(self):
        rng = np.random.default_rng(0)
        layer = nn.Dense("d", rng.normal(size=(3, 3)), rng.normal(size=3))
        layer.forward(rng.normal(size=3))
        layer.backward(np.zeros(3))
        assert np.all(layer.dw == 0) and np.all(layer.db == 0)

    def test_linear_sum_weight_grad_is_input_outer(self):
        # loss = sum of outputs => dW[i,j] = x[i]
        x = np.array([1.0, 2.0, -3.0])
        layer = nn.Dense("d", np.zeros((3, 2)), np.zeros(2))
        layer.forward(x)
        layer.backward(np.ones(2))
        assert np.allclose(layer.dw, np.outer(x, np.ones(2)))
        assert np.allclose(layer.db, np.ones(2))

    def test_conv_input_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        layer = nn.Conv2D(
            "c", rng.normal(size=(2, 1, 3, 3)).astype(np.float64), rng.normal(size=2)
        )
        x = rng.normal(size=(1, 4, 4))
        r = rng.normal(size=(2, 4, 4))
        layer.forward(x)
        dx = layer.backward(r)
        fd = np.zeros_like(x)
        h = 1e-6
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = ((layer.forward(xp) * r).sum() - (layer.forward(xm) * r).sum()) / (2 * h)
        assert np.allclose(dx, fd, rtol=1e-4, atol=1e-7)


class TestAdam:
    def test_zero_gradients_identity(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        opt = nn.Adam(params)
        before = params["w"].copy()
        opt.update(params, {"w": np.zeros(3)}, lr=0.1)
        assert np.array_equal(params["w"], before)

    def test_first_step_magnitude(self):
        lr = 1e-3
        for g in (0.5, -2.0, 100.0):
            params = {"w": np.array([0.0])}
            opt = nn.Adam(params)
            opt.update(params, {"w": np.array([g])}, lr=lr)
            delta = params["w"][0]
            assert np.sign(delta) == -np.sign(g)
            assert abs(delta) <= lr * (1 + 1e-6)
            assert abs(delta) > 0.9 * lr

    def test_constant_gradient_monotone_drift(self):
        params = {"w": np.array([0.0])}
        opt = nn.Adam(params)
        values = [0.0]
        for _ in range(50):
            opt.update(params, {"w": np.array([1.0])}, lr=1e-2)
            values.append(params["w"][0])
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_bad_lr(self):
        params = {"w": np.zeros(1)}
        opt = nn.Adam(params)
        with pytest.raises(ParameterError):
            opt.update(params, {"w": np.zeros(1)}, lr=0.0)


class TestDecayLr:
    def test_schedule(self):
        assert nn.decay_lr(1e-4, 0) == 1e-4
        assert nn.decay_lr(1e-4, 1) == pytest.approx(9.5e-5)
        assert nn.decay_lr(1e-4, 2) == pytest.approx(9.025e-5)


class TestGradUtilities:
    def test_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert nn.global_norm(grads) == pytest.approx(5.0)

    def test_clip_scales_in_place(self):
        grads = {"a": np.array([30.0]), "b": np.array([40.0])}
        pre = nn.clip_global_norm(grads, 5.0)
        assert pre == pytest.approx(50.0)
        assert nn.global_norm(grads) == pytest.approx(5.0)

    def test_clip_disabled(self):
        grads = {"a": np.array([30.0])}
        nn.clip_global_norm(grads, 0.0)
        assert grads["a"][0] == 30.0


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {"layer.w": rng.normal(size=(3, 2)).astype(np.float32), "layer.b": np.zeros(2, np.float32)}
        opt = nn.Adam(params)
        opt.update(params, {k: rng.normal(size=v.shape) for k, v in params.items()}, lr=1e-3)
        path = str(tmp_path / "ckpt.npz")
        nn.save_checkpoint(path, params, opt, {"episodes_done": 7})
        loaded, adam_state, meta = nn.load_checkpoint(path, nn.params_fingerprint(params))
        assert meta["episodes_done"] == 7
        assert adam_state["step_count"] == 1
        for k in params:
            assert np.array_equal(loaded[k], params[k])
            assert np.array_equal(adam_state["m"][k], opt.m[k])

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        params = {"w": np.zeros((2, 2), np.float32)}
        path = str(tmp_path / "ckpt.npz")
        nn.save_checkpoint(path, params, nn.Adam(params), {})
        with pytest.raises(StateError):
            nn.load_checkpoint(path, "w:3,3")
