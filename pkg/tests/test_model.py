import numpy as np
import pytest

from bridgets.checkpoint import load_checkpoint, save_checkpoint
from bridgets.data import make_rng
from bridgets.errors import DataError, NumericalError
from bridgets.model import (
    DenoiserModel, OptimizerState, adam_step, finite_difference_grad, gradient_check, max_relative_error,
)


def _inputs(b=2, L=12, c=2, n=2, seed=0):
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal((b, L, c, n))
    prior = rng.standard_normal((b, L, c, n))
    mask = (rng.random((b, L, c)) > 0.3).astype(float)
    return x_t, prior, mask


def _perturbed(model, scale=0.05, seed=1):
    model.params = model.params + scale * make_rng(seed).standard_normal(model.params.size)
    return model


class TestForward:
    def test_zero_params_give_bias(self):
        m = DenoiserModel(2, 3, blocks=2, hidden=8)
        bias = np.arange(6.0)
        m.net.views(m.params)["out.b"][...] = bias
        x_t, prior, mask = _inputs(c=2, n=3)
        y = m.forward(x_t, 0.4, prior, mask)
        np.testing.assert_array_equal(y, np.broadcast_to(bias.reshape(2, 3), y.shape))

    def test_deterministic(self, backend):
        m = DenoiserModel(2, 2, blocks=2, hidden=8).init(make_rng(0))
        x_t, prior, mask = _inputs()
        np.testing.assert_array_equal(m.forward(x_t, 0.5, prior, mask), m.forward(x_t, 0.5, prior, mask))

    def test_time_reaches_output(self):
        m = _perturbed(DenoiserModel(2, 2, blocks=2, hidden=8).init(make_rng(0)))
        x_t, prior, mask = _inputs()
        a = m.forward(x_t, 0.3, prior, mask)
        b = m.forward(x_t, 0.7, prior, mask)
        assert np.max(np.abs(a - b)) > 1e-6

    def test_init_copies_x_t(self):
        m = DenoiserModel(2, 2, blocks=2, hidden=8).init(make_rng(0))
        m.net.views(m.params)["out.W"][...] = 0.0
        x_t, prior, mask = _inputs()
        np.testing.assert_allclose(m.forward(x_t, 0.5, prior, mask), x_t, atol=1e-15)

    def test_single_window_shape(self):
        m = DenoiserModel(2, 2, blocks=1, hidden=4).init(make_rng(0))
        x_t, prior, mask = _inputs(b=1)
        assert m.forward(x_t[0], 0.5, prior[0], mask[0]).shape == (12, 2, 2)

    def test_shape_and_finiteness_errors(self):
        m = DenoiserModel(2, 2, blocks=1, hidden=4)
        x_t, prior, mask = _inputs()
        with pytest.raises(DataError):
            m.forward(x_t, 0.5, prior[..., :1], mask)
        with pytest.raises(DataError):
            m.forward(x_t[..., :1], 0.5, prior[..., :1], mask)
        bad = x_t.copy()
        bad[0, 0, 0, 0] = np.inf
        with pytest.raises(NumericalError):
            m.forward(bad, 0.5, prior, mask)

    def test_param_count_depends_only_on_arch(self):
        a = DenoiserModel(3, 2, blocks=2, hidden=8, kernel=5, time_embed_dim=16)
        b = DenoiserModel(3, 2, blocks=2, hidden=8, kernel=5, time_embed_dim=16)
        assert a.net.n_params == b.net.n_params
        cn, h = 6, 8
        expect = (5 * 3 * cn * h + h) + (16 * h + h) + 2 * 2 * (5 * h * h + h) + (h * cn + cn) + 3 * cn * cn
        assert a.net.n_params == expect


class TestBackward:
    def test_requires_forward(self):
        with pytest.raises(RuntimeError):
            DenoiserModel(2, 1, blocks=1, hidden=4).backward(np.zeros((12, 2, 1)))

    def test_zero_upstream(self):
        m = DenoiserModel(2, 2, blocks=2, hidden=8).init(make_rng(0))
        x_t, prior, mask = _inputs()
        m.forward(x_t, 0.5, prior, mask)
        assert np.all(m.backward(np.zeros_like(x_t)) == 0.0)

    def test_gradient_check_small_arch(self, backend):
        m = _perturbed(DenoiserModel(2, 2, blocks=2, hidden=8).init(make_rng(3)))
        x_t, prior, mask = _inputs(L=10)
        w = np.random.default_rng(8).standard_normal(x_t.shape)

        def f(p):
            y, _ = m.apply(p, x_t, np.array([0.2, 0.9]), prior, mask)
            return float(np.sum(w * y))

        m.forward(x_t, np.array([0.2, 0.9]), prior, mask)
        g = m.backward(w)
        assert gradient_check(f, m.params, g, h=1e-5) <= 1e-4

    def test_input_gradients(self):
        m = _perturbed(DenoiserModel(2, 1, blocks=1, hidden=6).init(make_rng(3)))
        x_t, prior, mask = _inputs(n=1, L=8)
        w = np.random.default_rng(2).standard_normal(x_t.shape)
        y, cache = m.apply(m.params, x_t, 0.4, prior, mask)
        _, dx, dp = m.grad(m.params, cache, w, need_input_grad=True)
        for arr, grad in ((x_t, dx), (prior, dp)):
            fd = finite_difference_grad(
                lambda v: float(np.sum(w * m.apply(m.params, v.reshape(x_t.shape) if arr is x_t else x_t, 0.4,
                                                   v.reshape(x_t.shape) if arr is prior else prior, mask)[0])),
                arr.ravel(),
            )
            assert max_relative_error(grad.ravel(), [fd[i] for i in range(arr.size)]) <= 1e-4

    def test_dead_unit_has_zero_gradient(self):
        m = _perturbed(DenoiserModel(2, 1, blocks=0, hidden=6).init(make_rng(0)))
        v = m.net.views(m.params)
        v["out.W"][3, :] = 0.0
        x_t, prior, mask = _inputs(n=1)
        m.forward(x_t, 0.5, prior, mask)
        g = m.net.views(m.backward(np.ones_like(x_t)))
        assert np.max(np.abs(g["in.W"][:, 3])) <= 1e-10
        assert abs(g["in.b"][3]) <= 1e-10
        assert np.max(np.abs(g["temb.W"][:, 3])) <= 1e-10
        assert np.max(np.abs(g["in.W"][:, 2])) > 0


class TestAdam:
    def test_first_step(self):
        st = OptimizerState(4, lr=1e-3)
        p = np.zeros(4)
        st, p2 = adam_step(st, p, np.ones(4))
        np.testing.assert_allclose(p2, -1e-3 / (1 + 1e-8), rtol=1e-14)
        assert st.step == 1
        assert np.all(p == 0.0)

    def test_zero_gradient(self):
        st = OptimizerState(3)
        p = np.array([1.0, -2.0, 3.0])
        _, p2 = adam_step(st, p, np.zeros(3))
        np.testing.assert_array_equal(p2, p)

    def test_scale_free_first_step(self):
        st = OptimizerState(2, lr=0.01)
        _, p = adam_step(st, np.zeros(2), np.array([0.37, 0.74]))
        assert p[0] == pytest.approx(p[1], rel=1e-7)

    def test_two_steps_against_reference(self):
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 2.0])
        st, p = adam_step(OptimizerState(2, lr=0.1), np.zeros(2), g1)
        st, p = adam_step(st, p, g2)
        m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
        m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 ** 2
        p1 = -0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
        expect = p1 - 0.1 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
        np.testing.assert_allclose(p, expect, rtol=1e-12)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError, match="coordinate 1"):
            adam_step(OptimizerState(2), np.zeros(2), np.array([0.0, np.nan]))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            adam_step(OptimizerState(2), np.zeros(2), np.zeros(3))


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = _perturbed(DenoiserModel(2, 2, blocks=2, hidden=8).init(make_rng(0)))
    save_checkpoint(tmp_path / "m.ckpt", {"denoiser": m.params}, {"arch": m.arch, "config_hash": "x"})
    blocks, meta = load_checkpoint(tmp_path / "m.ckpt")
    m2 = DenoiserModel(2, 2, params=blocks["denoiser"], **meta["arch"])
    x_t, prior, mask = _inputs()
    np.testing.assert_array_equal(m.forward(x_t, 0.5, prior, mask), m2.forward(x_t, 0.5, prior, mask))
