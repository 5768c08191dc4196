import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cnreg.errors import DegenerateBatchError, DomainError, NumericError, ShapeError, StateError
from cnreg.nn import (
    ELU,
    FIXED_AFFINE,
    IDENTITY,
    LEARNABLE_AFFINE,
    LOGIT_UNIFORM_SECOND_MOMENT,
    NO_NORM,
    MLP,
    Adam,
    LayerSpec,
    elu,
    logit,
    sigmoid,
)


def random_net(rng, widths, norm=LEARNABLE_AFFINE, out_norm=None):
    net = MLP.build(widths[0], widths[1:-1], widths[-1], hidden_norm=norm, output_norm=out_norm,
                    rng=rng)
    for key in net.params:
        if key.startswith(("gamma", "beta", "b")):
            net.params[key] = net.params[key] + rng.normal(0, 0.3, net.params[key].shape)
    return net


def numeric_grad(loss_fn, params, key, h=1e-5):
    p = params[key]
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = p[idx]
        p[idx] = old + h
        up = loss_fn()
        p[idx] = old - h
        down = loss_fn()
        p[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def assert_grads_match(net, loss_fn, grads, tol=1e-4):
    for key in net.params:
        num = numeric_grad(loss_fn, net.params, key)
        ana = grads[key]
        scale = np.maximum(np.abs(num) + np.abs(ana), 1e-7)
        err = np.abs(num - ana) / scale
        # entries that are essentially zero on both sides compare absolutely
        small = np.abs(num - ana) < 1e-9
        assert np.all(small | (err <= tol)), f"{key}: max rel err {err[~small].max()}"


class TestLayerSpec:
    def test_rejects_zero_width(self):
        with pytest.raises(ValueError):
            LayerSpec(0, 3)

    def test_rejects_nonpositive_fixed_scale(self):
        with pytest.raises(ValueError):
            LayerSpec(2, 1, IDENTITY, FIXED_AFFINE, scale=0.0)

    def test_widths_must_chain(self):
        with pytest.raises(ShapeError):
            MLP([LayerSpec(2, 3), LayerSpec(4, 1)])


class TestForward:
    def test_identity_layer(self):
        net = MLP([LayerSpec(2, 2, IDENTITY)], rng=0)
        net.params["W0"] = np.eye(2)
        out = net.eval().forward(np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(out, [[1.0, 2.0]])

    def test_elu_negative_closed_form(self):
        assert elu(np.array(-1.0)) == pytest.approx(math.exp(-1) - 1, abs=1e-15)
        assert elu(np.array(-1.0)) == pytest.approx(-0.6321, abs=1e-4)
        assert elu(np.array(2.5)) == 2.5

    def test_fixed_affine_moments(self, rng):
        scale = math.sqrt(LOGIT_UNIFORM_SECOND_MOMENT)
        net = random_net(rng, [3, 8, 1], out_norm=(0.0, scale))
        out = net.train().forward(rng.normal(size=(256, 3)))[:, 0]
        assert abs(out.mean()) < 1e-6
        # eps=1e-8 shrinks the variance by a relative 1e-8 at most
        assert np.mean(out**2) == pytest.approx(LOGIT_UNIFORM_SECOND_MOMENT, abs=1e-6)

    @given(shift=st.floats(-3, 3), scale=st.floats(0.1, 4), seed=st.integers(0, 10_000))
    def test_fixed_affine_property(self, shift, scale, seed):
        rng = np.random.default_rng(seed)
        net = random_net(rng, [2, 5, 1], out_norm=(shift, scale))
        out = net.train().forward(rng.normal(size=(64, 2)))[:, 0]
        assume_var = np.var(net._cache[-1]["h"]) if net._cache else 1.0
        if assume_var < 1e-6:
            return
        assert abs(out.mean() - shift) < 1e-6
        assert abs(np.mean(out**2) - (scale**2 + shift**2)) < 1e-6 * max(1.0, scale**2)

    def test_wrong_width_raises(self, rng):
        net = random_net(rng, [3, 4, 1])
        with pytest.raises(ShapeError):
            net.forward(np.zeros((5, 2)))

    def test_single_row_train_batch_raises(self, rng):
        net = random_net(rng, [3, 4, 1])
        with pytest.raises(DegenerateBatchError):
            net.train().forward(np.zeros((1, 3)))
        net.eval().forward(np.zeros((1, 3)))

    def test_running_stats_ema(self, rng):
        net = random_net(rng, [2, 4, 1])
        x1, x2 = rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + 1
        net.train().forward(x1)
        first = net.running[0]["mean"].copy()
        net.forward(x2)
        h2 = net._cache[0]["h"].mean(axis=0)
        np.testing.assert_allclose(net.running[0]["mean"], 0.99 * first + 0.01 * h2)
        assert np.all(net.running[0]["var"] >= 0)

    def test_update_stats_false_leaves_running(self, rng):
        net = random_net(rng, [2, 4, 1])
        net.train().forward(rng.normal(size=(20, 2)))
        before = net.running[0]["mean"].copy()
        net.forward(rng.normal(size=(20, 2)) + 5, update_stats=False)
        np.testing.assert_array_equal(before, net.running[0]["mean"])

    def test_eval_fast_path_matches_cached_path(self, rng):
        net = random_net(rng, [3, 10, 6, 1], out_norm=(0.0, 1.8))
        net.train().forward(rng.normal(size=(40, 3)))
        x = rng.normal(size=(30, 3))
        net.eval()
        a = net.forward(x, keep_cache=True)
        b = net.forward(x, keep_cache=False)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_elu_lipschitz_smoke(self):
        z = np.linspace(-5, 5, 2001)
        for h in (1e-3, 1e-4):
            assert np.all(np.abs(elu(z + h) - elu(z)) <= (1 + np.abs(z)) * h * 2)


class TestBackward:
    def test_linear_squared_loss(self):
        net = MLP([LayerSpec(3, 1, IDENTITY)], rng=0)
        x = np.array([[0.5, -1.0, 2.0]])
        y = 0.3
        pred = net.forward(x)
        grads, _ = net.backward(2 * (pred - y))
        np.testing.assert_allclose(grads["W0"][:, 0], 2 * (pred[0, 0] - y) * x[0])

    def test_zero_upstream_gives_zero(self, rng):
        net = random_net(rng, [3, 5, 4, 1])
        out = net.train().forward(rng.normal(size=(10, 3)))
        grads, dx = net.backward(np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(dx == 0)

    def test_without_forward_raises(self, rng):
        net = random_net(rng, [2, 3, 1])
        with pytest.raises(StateError):
            net.backward(np.zeros((4, 1)))

    def test_cache_is_consumed(self, rng):
        net = random_net(rng, [2, 3, 1])
        out = net.train().forward(rng.normal(size=(4, 2)))
        net.backward(np.ones_like(out))
        with pytest.raises(StateError):
            net.backward(np.ones_like(out))

    def test_fixed_affine_has_no_parameters(self, rng):
        net = random_net(rng, [2, 3, 1], out_norm=(0.0, 1.8))
        out = net.train().forward(rng.normal(size=(6, 2)))
        grads, _ = net.backward(np.ones_like(out))
        assert set(grads) == set(net.params)
        assert "gamma1" not in grads

    @pytest.mark.parametrize("mode", ["train", "eval"])
    @pytest.mark.parametrize("widths,out_norm", [
        ([3, 6, 1], None),
        ([4, 7, 5, 1], None),
        ([3, 6, 5, 4, 2], (0.0, 1.8)),
        ([2, 5, 4, 1], (0.3, 2.0)),
    ])
    def test_finite_differences(self, widths, out_norm, mode):
        rng = np.random.default_rng(sum(widths))
        net = random_net(rng, widths, out_norm=out_norm)
        x = rng.normal(size=(9, widths[0]))
        w = rng.normal(size=(9, widths[-1]))
        if mode == "eval":
            net.train().forward(x + 0.5)
            net.train().forward(x - 0.2)
        getattr(net, mode)()

        def loss():
            return float(np.sum(w * np.tanh(net.forward(x, update_stats=False, keep_cache=False)
                                            if mode == "train" else net.forward(x, keep_cache=False))))

        out = net.forward(x, update_stats=False)
        grads, dx = net.backward(w * (1 - np.tanh(out) ** 2))
        assert_grads_match(net, loss, grads)
        # input gradient too
        base = x.copy()
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            x[idx] = base[idx] + 1e-5
            up = loss()
            x[idx] = base[idx] - 1e-5
            down = loss()
            x[idx] = base[idx]
            num[idx] = (up - down) / 2e-5
        np.testing.assert_allclose(dx, num, rtol=1e-4, atol=1e-8)


class TestAdam:
    def test_zero_grad_leaves_params(self, rng):
        params = {"w": rng.normal(size=3)}
        before = params["w"].copy()
        opt = Adam(1e-3)
        opt.update(params, {"w": np.zeros(3)})
        np.testing.assert_array_equal(params["w"], before)
        assert opt.step_count == 1

    def test_first_step_is_sign_times_step(self):
        params = {"w": np.array([1.0, -2.0, 0.5])}
        g = np.array([3.0, -0.1, 1e-3])
        Adam(0.01).update(params, {"w": g})
        np.testing.assert_allclose(params["w"], np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign(g),
                                   atol=1e-6)

    def test_closed_form_two_steps(self):
        params = {"w": np.array([0.0])}
        opt = Adam(0.1, beta1=0.9, beta2=0.999, epsilon=1e-8)
        opt.update(params, {"w": np.array([2.0])})
        opt.update(params, {"w": np.array([1.0])})
        m = 0.9 * (0.1 * 2.0) + 0.1 * 1.0
        v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0
        first = -0.1 * 2.0 / (2.0 + 1e-8)
        expected = first - 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert params["w"][0] == pytest.approx(expected, rel=1e-12)
        assert np.all(opt.second_moment["w"] >= 0)

    def test_nonfinite_gradient_raises(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(NumericError):
            Adam(0.1).update(params, {"w": np.array([np.nan, 1.0])})
        np.testing.assert_array_equal(params["w"], 0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            Adam(0.1).update({"w": np.zeros(2)}, {"w": np.zeros(3)})


class TestLink:
    def test_logit_half(self):
        assert logit(0.5) == 0.0

    def test_round_trip(self):
        assert sigmoid(logit(0.9)) == pytest.approx(0.9, abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.2, float("nan")])
    def test_logit_domain(self, p):
        with pytest.raises(DomainError):
            logit(p)

    def test_logit_second_moment_monte_carlo(self):
        q = np.random.default_rng(7).uniform(size=1_000_000)
        assert np.mean(logit(q) ** 2) == pytest.approx(3.29, abs=0.02)
        assert LOGIT_UNIFORM_SECOND_MOMENT == pytest.approx(3.2899, abs=1e-4)

    @given(st.floats(-700, 700))
    def test_sigmoid_in_unit_interval(self, z):
        s = sigmoid(np.array([z]))[0]
        assert 0.0 <= s <= 1.0


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = random_net(rng, [3, 8, 6, 1])
        opt = Adam(1e-3)
        data = np.random.default_rng(9).normal(size=(64, 3))
        for i in range(30):
            out = net.train().forward(data[i % 4::4])
            grads, _ = net.backward(out - 1.0, need_input_grad=False)
            opt.update(net.params, grads)
        return net.fingerprint()

    assert run() == run()


def test_state_round_trip(rng):
    net = random_net(rng, [3, 5, 1], out_norm=(0.0, 1.8))
    net.train().forward(rng.normal(size=(10, 3)))
    meta, arrays = net.to_state()
    clone = MLP.from_state(meta, arrays)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(net.eval().forward(x), clone.eval().forward(x))
    assert clone.fingerprint() == net.fingerprint()
