import json
from dataclasses import replace

import numpy as np
import pytest

from bridgets.data import gen_mask, make_rng, synthetic_sinusoids, write_csv
from bridgets.errors import ConfigError, DataError
from bridgets.experts import LinearExpert
from bridgets.report import (
    CSV_HEADER, ExperimentMatrix, ResultRow, ResultTable, _DatasetContext, _pool, _variant_setup, emit_report, read_results_csv,
    run_matrix, table_to_markdown,
)

BASE = {
    "seq_len": 16, "batch_size": 4, "max_steps": 3, "eval_every": 3, "eval_max_windows": 6, "stride": 4,
    "model": {"blocks": 1, "hidden": 4, "kernel": 3, "time_embed_dim": 4},
    "expert": {"blocks": 1, "hidden": 4, "kernel": 3},
    "expert_pretrain": {"steps": 3, "batch_size": 4, "lr": 1e-3, "eval_every": 3},
    "sampler": {"steps": 2},
}


@pytest.fixture(scope="module")
def data_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("d") / "syn.csv"
    write_csv(synthetic_sinusoids(n_steps=240, n_channels=2, seed=5), p)
    return p


def matrix(path, **kw):
    d = dict(datasets={"syn": str(path)}, ratios=[0.25], variants=["linear-bridge"], seeds=[1],
             experts=["linear"], base=BASE)
    d.update(kw)
    return ExperimentMatrix(**d)


def _table():
    t = ResultTable()
    t.rows[("a", 0.25, "bridge-ts-1")] = ResultRow(0.123456789, 0.01, 0.2, 0.02, 1.5)
    t.rows[("a", 0.125, "linear-bridge")] = ResultRow(3.14159265e-5, 0.0, 1e3, 7.0, 0.25)
    t.rows[("a", 0.25, "linear-bridge")] = ResultRow(0.5, 0.0, 0.6, 0.0, 0.1)
    return t


class TestMatrixConfig:
    def test_defaults_and_validation(self, data_path):
        m = ExperimentMatrix(datasets=[str(data_path)])
        assert m.ratios == [0.125, 0.25, 0.375, 0.5]
        assert list(m.datasets) == ["syn"]
        with pytest.raises(ConfigError):
            matrix(data_path, variants=["bridge-ts-9"])
        with pytest.raises(ConfigError):
            matrix(data_path, ratios=[])
        with pytest.raises(ConfigError, match="pool"):
            matrix(data_path, variants=["expert-only:conv"])


class TestRunMatrix:
    def test_single_cell_and_resume(self, data_path, tmp_path):
        m = matrix(data_path)
        t = run_matrix(m, root=tmp_path)
        assert list(t.rows) == [("syn", 0.25, "linear-bridge")] and t.trained_cells == 1
        row = t.rows[("syn", 0.25, "linear-bridge")]
        assert all(np.isfinite(v) for v in row.__dict__.values())
        again = run_matrix(m, root=tmp_path)
        assert again.trained_cells == 0
        assert again.rows == t.rows

    def test_expert_only_linear_matches_direct(self, data_path, tmp_path):
        m = matrix(data_path, variants=["expert-only:linear"], seeds=[3, 4])
        row = run_matrix(m, root=tmp_path).rows[("syn", 0.25, "expert-only:linear")]
        ctx = _DatasetContext("syn", str(data_path), m.base)
        mses = []
        for s in (3, 4):
            mk = gen_mask(ctx.test.shape, 0.25, make_rng(s))
            pred = LinearExpert().impute(ctx.test * mk, mk)
            w = 1 - mk
            mses.append(np.sum(((pred - ctx.test) * w) ** 2) / w.sum())
        assert abs(row.mse_mean - np.mean(mses)) <= 1e-12

    def test_order_independent(self, data_path, tmp_path):
        m = matrix(data_path, ratios=[0.25, 0.5], variants=["linear-bridge", "expert-only:linear"])
        a = run_matrix(m, root=tmp_path / "a")
        b = run_matrix(m, root=tmp_path / "b", order=[3, 1, 2, 0])
        assert set(a.rows) == set(b.rows)
        for k in a.rows:
            ra, rb = a.rows[k], b.rows[k]
            assert (ra.mse_mean, ra.mse_std, ra.mae_mean, ra.mae_std) == (rb.mse_mean, rb.mse_std, rb.mae_mean, rb.mae_std)

    def test_corrupt_entry_recomputes_only_that_cell(self, data_path, tmp_path):
        m = matrix(data_path, ratios=[0.25, 0.5])
        first = run_matrix(m, root=tmp_path)
        entries = sorted((tmp_path / "ledger").glob("*.json"))
        assert len(entries) == 2
        victim = json.loads(entries[0].read_text())
        victim["row"]["mse_mean"] += 1.0
        entries[0].write_text(json.dumps(victim))
        again = run_matrix(m, root=tmp_path)
        assert again.trained_cells == 1
        cell = tuple(victim["cell"])
        assert again.rows[cell].mse_mean == first.rows[cell].mse_mean
        entries[1].write_text("{not json")
        assert run_matrix(m, root=tmp_path).trained_cells == 1

    def test_failures_are_per_cell(self, data_path, tmp_path):
        m = matrix(data_path)
        m.datasets["missing"] = str(tmp_path / "nope.csv")
        t = run_matrix(m, root=tmp_path)
        assert ("syn", 0.25, "linear-bridge") in t.rows
        assert list(t.failures) == [("missing", 0.25, "linear-bridge")]

    def test_bridge_ts_1_picks_best_validation_expert(self, data_path, tmp_path):
        m = matrix(data_path, experts=["conv", "linear"])
        ctx = _DatasetContext("syn", str(data_path), m.base)
        cfg = replace(m.base, mask_ratio=0.25)
        pool = _pool(ctx, cfg, m.experts, tmp_path)
        best = min(pool, key=lambda p: p[2])
        c, experts = _variant_setup("bridge-ts-1", pool, cfg)
        assert c.priors == [best[0]] and experts[0] is best[1]
        c2, experts2 = _variant_setup("bridge-ts-2", pool, cfg)
        assert len(experts2) == 2 and c2.probabilistic
        c3, _ = _variant_setup("bridge-ts-d", pool, cfg)
        assert not c3.probabilistic
        with pytest.raises(ConfigError):
            _variant_setup("bridge-ts-3", pool, cfg)


class TestEmit:
    def test_single_row_csv(self, tmp_path):
        t = ResultTable()
        t.rows[("x", 0.5, "linear-bridge")] = ResultRow(1.0, 0.0, 1.0, 0.0, 0.5)
        p = emit_report(t, "csv", tmp_path / "r.csv")
        lines = p.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == ",".join(CSV_HEADER)

    def test_csv_round_trip_precision(self, tmp_path):
        t = _table()
        back = read_results_csv(emit_report(t, "csv", tmp_path / "r.csv"))
        assert set(back.rows) == set(t.rows)
        for k, r in t.rows.items():
            for f in ("mse_mean", "mae_mean", "mse_std", "mae_std"):
                a, b = getattr(r, f), getattr(back.rows[k], f)
                assert abs(a - b) <= 5e-7 * abs(a)

    def test_markdown_shape(self, tmp_path):
        t = _table()
        text = emit_report(t, "markdown", tmp_path / "r.md").read_text()
        header = [ln for ln in text.splitlines() if ln.startswith("| Ratio")][0]
        cols = [c.strip() for c in header.strip("|").split("|")]
        assert len(cols) == 1 + 4
        assert cols[1:] == ["bridge-ts-1 MSE", "bridge-ts-1 MAE", "linear-bridge MSE", "linear-bridge MAE"]
        assert "| 12.5% |" in text and "| 25.0% |" in text and "-" in text

    def test_one_table_per_dataset(self):
        t = _table()
        t.rows[("b", 0.25, "linear-bridge")] = ResultRow(1, 0, 1, 0, 0)
        md = table_to_markdown(t)
        assert md.count("### ") == 2 and md.count("| Ratio") == 2

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            emit_report(ResultTable(), "csv", tmp_path / "r.csv")
        with pytest.raises(ConfigError):
            emit_report(_table(), "xml", tmp_path / "r.xml")
        (tmp_path / "plain").write_text("a file, not a directory")
        with pytest.raises(DataError, match="cannot write"):
            emit_report(_table(), "csv", tmp_path / "plain" / "r.csv")
