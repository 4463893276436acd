"""Experiment matrix (datasets x ratios x variants), resumable ledger, and table output."""

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, config_hash
from .data import load_csv, make_windows, split_and_normalize, stack_windows
from .errors import BridgeTSError, ConfigError, DataError
from .experts import ConvExpert, load_expert, save_expert
from .trainer import TrainConfig, evaluate_checkpoint, resolve_experts, train

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.125, 0.25, 0.375, 0.5)
CSV_HEADER = ["dataset", "ratio", "variant", "mse_mean", "mse_std", "mae_mean", "mae_std", "runtime_s"]
BASE_VARIANTS = ("bridge-ts-1", "bridge-ts-2", "bridge-ts-3", "linear-bridge", "bridge-ts-d")


def cache_dir(default=".bridgets_cache"):
    return Path(os.environ.get("BRIDGETS_CACHE", default))


@dataclass
class ExperimentMatrix:
    datasets: dict
    ratios: list = field(default_factory=lambda: list(DEFAULT_RATIOS))
    variants: list = field(default_factory=lambda: ["linear-bridge", "bridge-ts-1", "bridge-ts-2"])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    experts: list = field(default_factory=lambda: ["conv", "conv:kernel=5", "linear"])
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.datasets, (list, tuple)):
            self.datasets = {Path(p).stem: str(p) for p in self.datasets}
        if isinstance(self.base, dict):
            self.base = TrainConfig.from_dict(self.base)
        if not (self.datasets and self.ratios and self.variants and self.seeds):
            raise ConfigError("every matrix axis must be non-empty")
        for v in self.variants:
            if v not in BASE_VARIANTS and not v.startswith("expert-only:"):
                raise ConfigError(f"unknown variant {v!r}")
            if v.startswith("expert-only:") and v.split(":", 1)[1] not in self.experts:
                raise ConfigError(f"{v!r} names an expert outside the pool {self.experts}")

    @classmethod
    def from_json(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"no such matrix config: {path}") from None
        return cls(**d)


@dataclass
class ResultRow:
    mse_mean: float
    mse_std: float
    mae_mean: float
    mae_std: float
    runtime_s: float


@dataclass
class ResultTable:
    rows: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    trained_cells: int = 0

    def sorted_keys(self):
        return sorted(self.rows, key=lambda k: (k[0], k[1], k[2]))


# ---------------------------------------------------------------- ledger


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _ledger_path(root, key):
    return Path(root) / "ledger" / f"{key}.json"


def _read_ledger(root, key):
    p = _ledger_path(root, key)
    if not p.is_file():
        return None
    try:
        entry = json.loads(p.read_text(encoding="utf-8"))
        row = entry["row"]
        if entry["key"] != key or entry["checksum"] != config_hash(row):
            raise ValueError("checksum mismatch")
        vals = [row[k] for k in ("mse_mean", "mse_std", "mae_mean", "mae_std", "runtime_s")]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite row")
        return ResultRow(*vals)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        log.warning("ledger entry %s unusable (%s); recomputing", p.name, exc)
        return None


def _write_ledger(root, key, cell, row):
    d = row.__dict__.copy()
    payload = {"key": key, "cell": list(cell), "row": d, "checksum": config_hash(d)}
    atomic_write_bytes(_ledger_path(root, key), json.dumps(payload, sort_keys=True).encode("utf-8"))


# ---------------------------------------------------------------- matrix


class _DatasetContext:
    def __init__(self, name, path, base):
        self.name = name
        self.path = path
        self.digest = _file_digest(path)
        ds = load_csv(path)
        (tr, va, te), self.stats = split_and_normalize(ds, base.split)
        win = lambda d: stack_windows(make_windows(d, base.seq_len, base.stride), ds.n_channels)  # noqa: E731
        self.train, self.val, self.test = win(tr), win(va), win(te)
        if base.eval_max_windows and len(self.val) > base.eval_max_windows:
            idx = np.linspace(0, len(self.val) - 1, base.eval_max_windows).round().astype(int)
            self.val = self.val[idx]
        if min(len(self.train), len(self.val), len(self.test)) == 0:
            raise DataError(f"{path}: a split is shorter than seq_len={base.seq_len}")
        self.n_channels = ds.n_channels


def _pool(ctx, cfg, experts, root):
    """Pretrained expert pool for one (dataset, ratio), cached on disk. Returns ``[(spec, expert, val)]``."""
    out = []
    for spec in experts:
        one = replace(cfg, priors=[spec], prior_regime="joint")
        key = config_hash({"dataset": ctx.digest, "spec": spec, "cfg": one.to_dict(), "what": "expert"})
        path = Path(root) / "experts" / f"{key}.ckpt"
        meta_path = path.with_suffix(".json")
        if path.is_file() and meta_path.is_file():
            e = load_expert(path)
            val = json.loads(meta_path.read_text())["val_mse"]
        else:
            (e,), (val,) = resolve_experts(one, ctx.train, ctx.val, ctx.n_channels)
            if isinstance(e, ConvExpert):
                save_expert(e, path, seed=cfg.seed, config=one.to_dict())
                atomic_write_bytes(meta_path, json.dumps({"val_mse": val, "spec": spec}).encode())
        out.append((spec, e, val))
    return out


def _variant_setup(variant, pool, cfg):
    """``(TrainConfig, experts)`` for a variant, or ``(None, expert)`` for expert-only."""
    if variant.startswith("expert-only:"):
        spec = variant.split(":", 1)[1]
        return None, next(e for s, e, _ in pool if s == spec)
    if variant == "linear-bridge":
        lin = [(s, e) for s, e, _ in pool if s == "linear"]
        if not lin:
            from .experts import LinearExpert
            lin = [("linear", LinearExpert())]
        return replace(cfg, priors=["linear"]), [lin[0][1]]
    ranked = sorted(pool, key=lambda p: p[2])
    n = {"bridge-ts-1": 1, "bridge-ts-2": 2, "bridge-ts-3": 3, "bridge-ts-d": 1}[variant]
    chosen = ranked[:n]
    if len(chosen) < n:
        raise ConfigError(f"{variant} needs {n} experts; pool has {len(pool)}")
    c = replace(cfg, priors=[s for s, _, _ in chosen], probabilistic=variant != "bridge-ts-d")
    return c, [e for _, e, _ in chosen]


def run_cell(ctx, ratio, variant, m, pool):
    cfg = replace(m.base, mask_ratio=float(ratio))
    t0 = time.perf_counter()
    cfg_v, target = _variant_setup(variant, pool, cfg)
    if cfg_v is None:
        res = evaluate_checkpoint(target, ctx.test, ratio, m.seeds, mask_mode=cfg.mask_mode, rng_algorithm=cfg.rng)
    else:
        report = train(cfg_v, (ctx.train, ctx.val), experts=target)
        res = evaluate_checkpoint(report.checkpoint, ctx.test, ratio, m.seeds,
                                  mask_mode=cfg.mask_mode, rng_algorithm=cfg.rng)
    return ResultRow(res["mse"], res["mse_std"], res["mae"], res["mae_std"], time.perf_counter() - t0)


def run_matrix(m, root=None, order=None):
    """Train and evaluate every cell; cells already in the on-disk ledger are skipped.

    ``order`` optionally permutes the cell execution order (results do not depend on it).
    """
    root = Path(root) if root is not None else cache_dir()
    cells = [(d, float(r), v) for d in m.datasets for r in m.ratios for v in m.variants]
    if order is not None:
        cells = [cells[i] for i in order]
    table = ResultTable()
    contexts, pools = {}, {}
    for cell in cells:
        name, ratio, variant = cell
        try:
            if name not in contexts:
                contexts[name] = _DatasetContext(name, m.datasets[name], m.base)
            ctx = contexts[name]
            key = config_hash({
                "dataset": ctx.digest, "ratio": ratio, "variant": variant, "seeds": list(m.seeds),
                "experts": list(m.experts), "base": m.base.to_dict(),
            })
            row = _read_ledger(root, key)
            if row is None:
                if (name, ratio) not in pools:
                    pools[(name, ratio)] = _pool(ctx, replace(m.base, mask_ratio=ratio), m.experts, root)
                row = run_cell(ctx, ratio, variant, m, pools[(name, ratio)])
                _write_ledger(root, key, cell, row)
                table.trained_cells += 1
            table.rows[cell] = row
        except (BridgeTSError, OSError, StopIteration) as exc:
            log.error("cell %s failed: %s", cell, exc)
            table.failures[cell] = f"{type(exc).__name__}: {exc}"
    return table


# ---------------------------------------------------------------- output


def _fmt(v):
    return f"{v:.6e}"


def table_to_csv(t):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for k in t.sorted_keys():
        r = t.rows[k]
        w.writerow([k[0], repr(float(k[1])), k[2], _fmt(r.mse_mean), _fmt(r.mse_std),
                    _fmt(r.mae_mean), _fmt(r.mae_std), _fmt(r.runtime_s)])
    return buf.getvalue()


def table_to_markdown(t):
    out = []
    datasets = sorted({k[0] for k in t.rows})
    for d in datasets:
        keys = [k for k in t.rows if k[0] == d]
        variants = list(dict.fromkeys(k[2] for k in sorted(keys, key=lambda k: k[2])))
        ratios = sorted({k[1] for k in keys})
        out.append(f"### {d}\n")
        head = ["Ratio"] + [f"{v} {m}" for v in variants for m in ("MSE", "MAE")]
        out.append("| " + " | ".join(head) + " |")
        out.append("|" + "---|" * len(head))
        for r in ratios:
            cells = [f"{100 * r:.1f}%"]
            for v in variants:
                row = t.rows.get((d, r, v))
                cells += [f"{row.mse_mean:.3f}", f"{row.mae_mean:.3f}"] if row else ["-", "-"]
            out.append("| " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def emit_report(t, fmt, path):
    if not t.rows:
        raise DataError("result table is empty")
    if fmt == "csv":
        text = table_to_csv(t)
    elif fmt == "markdown":
        text = table_to_markdown(t)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        atomic_write_bytes(path, text.encode("utf-8"))
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from None
    return path


def read_results_csv(path):
    t = ResultTable()
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != CSV_HEADER:
            raise DataError(f"{path}: unexpected header {r.fieldnames}")
        for rec in r:
            key = (rec["dataset"], float(rec["ratio"]), rec["variant"])
            t.rows[key] = ResultRow(*(float(rec[c]) for c in CSV_HEADER[3:]))
    return t
