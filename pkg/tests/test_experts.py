import struct

import numpy as np
import pytest

from bridgets.data import (
    gen_mask, make_rng, make_windows, split_and_normalize, stack_windows, substream, synthetic_sinusoids,
)
from bridgets.errors import ConfigError, DataError
from bridgets.experts import (
    ConvExpert, ExternalPrior, LinearExpert, PretrainConfig, evaluate_expert, expert_forward,
    impute_linear, load_expert, load_external_prior, pretrain_expert, save_expert, write_external_prior,
)
from bridgets.model import gradient_check


def _batch(b=3, L=16, c=2, ratio=0.4, seed=0):
    x = np.random.default_rng(seed).standard_normal((b, L, c))
    m = gen_mask(x.shape, ratio, make_rng(seed + 1))
    return x, m


class TestLinear:
    def test_midpoint(self):
        est = impute_linear(np.array([[1.0], [np.nan], [3.0]]), np.array([[1.0], [0.0], [1.0]]))
        np.testing.assert_array_equal(est.values[:, 0], [1, 2, 3])
        assert est.source_id == "linear"

    def test_edge_and_empty(self):
        x = np.array([[9.0, 1.0], [2.0, 1.0], [2.0, 1.0]])
        m = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        est = impute_linear(x, m).values
        np.testing.assert_array_equal(est[:, 0], [2, 2, 2])
        np.testing.assert_array_equal(est[:, 1], [0, 0, 0])

    def test_forward_delegates(self):
        x, m = _batch()
        est, grads = expert_forward(LinearExpert(), x, m, upstream=np.ones_like(x))
        np.testing.assert_array_equal(est.values, np.stack([impute_linear(a, b).values for a, b in zip(x, m)]))
        assert grads is None


class TestConv:
    def test_zero_params_bias_field(self):
        e = ConvExpert(2, blocks=2, hidden=8)
        e.net.views(e.params)["out.b"][...] = [0.25, -1.5]
        x, m = _batch()
        out = e.impute(x, m)
        miss = m == 0
        np.testing.assert_array_equal(out[..., 0][miss[..., 0]], 0.25)
        np.testing.assert_array_equal(out[..., 1][miss[..., 1]], -1.5)
        np.testing.assert_array_equal(out[~miss], x[~miss])

    def test_gradient_check(self, backend):
        e = ConvExpert(2, blocks=2, hidden=8).init(make_rng(0))
        e.params = e.params + 0.05 * make_rng(1).standard_normal(e.n_params)
        x, m = _batch(b=2, L=10)
        w = np.random.default_rng(3).standard_normal(x.shape)

        def f(p):
            return float(np.sum(w * e.forward(x, m, params=p)[0]))

        _, g = expert_forward(e, x, m, upstream=w)
        assert gradient_check(f, e.params, g) <= 1e-4

    @pytest.mark.parametrize("expert", [LinearExpert(), ConvExpert(2, blocks=1, hidden=6).init(make_rng(2))],
                             ids=["linear", "conv"])
    def test_observed_copied_and_mask_blind(self, expert):
        x, m = _batch(seed=4)
        out = expert.impute(x, m)
        np.testing.assert_array_equal(out[m == 1], x[m == 1])
        x2 = np.where(m == 1, x, np.random.default_rng(9).standard_normal(x.shape) * 100)
        np.testing.assert_array_equal(expert.impute(x2, m), out)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            ConvExpert(2, params=np.zeros(3))
        x, m = _batch(c=3)
        with pytest.raises(DataError):
            ConvExpert(2, blocks=1, hidden=4).impute(x, m)


class TestPretrain:
    def test_constant_signal_learned(self):
        rng = np.random.default_rng(0)
        levels = np.array([0.8, -0.5])
        train = np.broadcast_to(levels, (64, 24, 2)) + 0.0 * rng.standard_normal((64, 24, 2))
        val = np.broadcast_to(levels, (16, 24, 2)).copy()
        e = ConvExpert(2, blocks=1, hidden=8).init(make_rng(0))
        cfg = PretrainConfig(steps=500, batch_size=8, lr=1e-2, eval_every=50, seed=1)
        e, best, hist = pretrain_expert(e, np.array(train), val, 0.25, cfg)
        assert best <= 1e-3
        assert best == min(v for _, v in hist)

    def test_best_checkpoint_never_worse_than_start(self):
        x, _ = _batch(b=16, L=16, seed=2)
        e = ConvExpert(2, blocks=1, hidden=4)
        cfg = PretrainConfig(steps=30, batch_size=4, lr=0.5, eval_every=10, seed=0)
        start = e.params.copy()
        e, best, hist = pretrain_expert(e, x, x[:4], 0.25, cfg)
        assert best <= hist[0][1]
        if best == hist[0][1]:
            np.testing.assert_array_equal(e.params, start)

    def test_reproducible(self):
        x, _ = _batch(b=16, L=16, seed=3)
        cfg = PretrainConfig(steps=20, batch_size=4, eval_every=5, seed=11)
        a, _, _ = pretrain_expert(ConvExpert(2, blocks=1, hidden=4).init(make_rng(0)), x, x[:4], 0.3, cfg)
        b, _, _ = pretrain_expert(ConvExpert(2, blocks=1, hidden=4).init(make_rng(0)), x, x[:4], 0.3, cfg)
        np.testing.assert_array_equal(a.params, b.params)

    def test_beats_linear_on_sinusoids(self):
        ds = synthetic_sinusoids(n_steps=1200, n_channels=3, seed=1)
        (tr, va, _), _ = split_and_normalize(ds, (0.6, 0.2, 0.2))
        trw = stack_windows(make_windows(tr, 48, 2))
        vaw = stack_windows(make_windows(va, 48, 8))
        e = ConvExpert(3, blocks=2, hidden=24).init(make_rng(0))
        cfg = PretrainConfig(steps=600, batch_size=16, lr=2e-3, eval_every=100, seed=0)
        e, best, _ = pretrain_expert(e, trw, vaw, 0.25, cfg)
        val_masks = gen_mask(vaw.shape, 0.25, substream(0, "expert-val-mask"))
        assert best == pytest.approx(evaluate_expert(e, vaw, val_masks), rel=1e-12)
        assert best < evaluate_expert(LinearExpert(), vaw, val_masks)

    def test_rejects_untrainable(self):
        with pytest.raises(ConfigError):
            pretrain_expert(LinearExpert(), np.zeros((2, 4, 1)), np.zeros((2, 4, 1)), 0.2)


class TestPersistence:
    def test_expert_checkpoint_roundtrip(self, tmp_path):
        e = ConvExpert(2, blocks=1, hidden=6, id="conv-a").init(make_rng(5))
        save_expert(e, tmp_path / "e.ckpt", seed=5)
        back = load_expert(tmp_path / "e.ckpt")
        assert back.id == "conv-a" and back.arch == e.arch
        x, m = _batch()
        np.testing.assert_array_equal(back.impute(x, m), e.impute(x, m))

    def test_external_csv_direct(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("0.5\n0.7\n")
        (est,) = load_external_prior(p, (1, 2, 1))
        np.testing.assert_array_equal(est.values, [[0.5], [0.7]])

    def test_external_binary_count_mismatch(self, tmp_path):
        p = tmp_path / "p.bin"
        values = np.zeros((1, 96, 7))
        p.write_bytes(struct.pack("<3q", 2, 96, 7) + values.astype("<f8").tobytes())
        with pytest.raises(DataError, match=r"expected 2 windows.*holds 1"):
            load_external_prior(p, (2, 96, 7))

    @pytest.mark.parametrize("suffix", [".bin", ".csv"])
    def test_external_roundtrip(self, tmp_path, suffix):
        values = np.random.default_rng(0).standard_normal((3, 5, 2))
        write_external_prior(tmp_path / f"p{suffix}", values)
        back = np.stack([e.values for e in load_external_prior(tmp_path / f"p{suffix}", (3, 5, 2))])
        np.testing.assert_array_equal(back, values)

    def test_external_rejects_nonfinite_and_bad_header(self, tmp_path):
        values = np.zeros((1, 2, 1))
        values[0, 1, 0] = np.nan
        write_external_prior(tmp_path / "n.bin", values)
        with pytest.raises(DataError, match="non-finite"):
            load_external_prior(tmp_path / "n.bin", (1, 2, 1))
        write_external_prior(tmp_path / "s.bin", np.zeros((1, 2, 1)))
        with pytest.raises(DataError, match="header shape"):
            load_external_prior(tmp_path / "s.bin", (1, 3, 1))

    def test_external_prior_expert(self):
        values = np.random.default_rng(1).standard_normal((4, 6, 2))
        e = ExternalPrior(values)
        x, m = _batch(b=2, L=6)
        out = e.impute(x, m, indices=[3, 1])
        np.testing.assert_array_equal(out[m == 1], x[m == 1])
        np.testing.assert_array_equal(out[1][m[1] == 0], values[1][m[1] == 0])
        with pytest.raises(DataError):
            e.impute(x, m)
