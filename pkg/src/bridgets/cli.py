"""Command-line entry point: ``bridgets <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    gen_mask, load_csv, make_rng, make_windows, split_and_normalize, stack_windows,
    synthetic_sinusoids, write_csv,
)
from .errors import ConfigError, DataError, NumericalError
from .experts import ConvExpert, PretrainConfig, pretrain_expert, save_expert
from .report import (
    ExperimentMatrix, emit_report, read_results_csv, run_matrix, table_to_csv, table_to_markdown,
)
from .trainer import (
    BridgeTS, TrainConfig, build_expert, evaluate_checkpoint, load_prior_for_windows, train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("bridgets")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _load_config(args):
    d = _read_json(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "data": getattr(args, "data", None),
        "mask_ratio": getattr(args, "ratio", None),
        "max_steps": getattr(args, "max_steps", None),
        "seed": getattr(args, "seed", None),
        "prior_regime": getattr(args, "regime", None),
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "priors", None):
        d["priors"] = args.priors.split("+")
    if getattr(args, "deterministic", False):
        d["probabilistic"] = False
    cfg = TrainConfig.from_dict(d)
    if not cfg.data:
        raise ConfigError("no dataset: pass --data or set 'data' in the config")
    return cfg


def load_split_windows(path, cfg):
    """Normalized ``(train, val, test)`` window arrays for a CSV file."""
    ds = load_csv(path)
    parts, stats = split_and_normalize(ds, cfg.split)
    out = [stack_windows(make_windows(p, cfg.seq_len, cfg.stride), ds.n_channels) for p in parts]
    for name, w in zip(("train", "val", "test"), out):
        if len(w) == 0:
            raise DataError(f"{path}: {name} split has fewer than seq_len={cfg.seq_len} rows")
    return out, stats


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- subcommands


def cmd_ingest(args):
    ds = load_csv(args.data)
    cfg = TrainConfig(seq_len=args.seq_len)
    (tr, va, te), stats = load_split_windows(args.data, cfg)
    summary = {
        "path": str(args.data), "rows": ds.n_steps, "channels": ds.channel_names,
        "windows": {"train": len(tr), "val": len(va), "test": len(te)},
        "mean": stats.mean.tolist(), "std": stats.std.tolist(),
    }
    _write_json(summary, args.out)
    return EXIT_OK


def cmd_synth(args):
    ds = synthetic_sinusoids(args.steps, args.channels, args.components, args.noise, args.seed)
    write_csv(ds, args.out)
    return EXIT_OK


def cmd_mask_gen(args):
    cfg = TrainConfig(seq_len=args.seq_len)
    windows, _ = load_split_windows(args.data, cfg)
    w = windows[("train", "val", "test").index(args.split)]
    m = gen_mask(w.shape, args.ratio, make_rng(args.mask_seed), args.mode)
    np.save(args.out, m.astype(np.uint8))
    print(f"{args.out}: {m.shape} mask, missing rate {1.0 - m.mean():.4f}")
    return EXIT_OK


def cmd_train_expert(args):
    cfg = _load_config(args)
    (tr, va, _), _ = load_split_windows(cfg.data, cfg)
    e = build_expert(args.expert, tr.shape[-1], cfg)
    if not isinstance(e, ConvExpert):
        raise ConfigError(f"expert {args.expert!r} has nothing to train")
    pre = PretrainConfig(seed=cfg.seed, mask_mode=cfg.mask_mode, **cfg.expert_pretrain)
    e, val, hist = pretrain_expert(e, tr, va, cfg.mask_ratio, pre)
    save_expert(e, args.out, seed=cfg.seed, config=cfg.to_dict())
    print(json.dumps({"checkpoint": str(args.out), "best_val_mse": val, "history": hist}))
    return EXIT_OK


def cmd_train_bridge(args):
    cfg = _load_config(args)
    (tr, va, _), _ = load_split_windows(cfg.data, cfg)
    report = train(cfg, (tr, va))
    report.checkpoint.save(args.out, cfg, report)
    out = report.to_dict()
    out["checkpoint"] = str(args.out)
    out["seconds_per_step"] = report.seconds_per_step
    _write_json(out, args.report)
    return EXIT_OK


def _system_with_external(args, system, n_windows, l, c):
    if args.prior:
        ext = load_prior_for_windows(args.prior, n_windows, l, c)
        if system.denoiser.n_priors != 1:
            raise ConfigError("--prior replaces the expert of a single-prior checkpoint only")
        system = BridgeTS([ext], system.denoiser, system.schedule, system.sampler)
    return system


def cmd_impute(args):
    system, meta = BridgeTS.load(args.ckpt)
    cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else TrainConfig()
    windows, stats = load_split_windows(args.data, cfg)
    w = windows[("train", "val", "test").index(args.split)]
    if args.mask:
        m = np.load(args.mask).astype(np.float64)
        if m.shape != w.shape:
            raise DataError(f"{args.mask}: mask shape {m.shape} != windows {w.shape}")
    else:
        m = gen_mask(w.shape, args.ratio, make_rng(args.mask_seed), cfg.mask_mode)
    system = _system_with_external(args, system, *w.shape)
    idx = np.arange(len(w))
    pred = system.impute(w * m, m, make_rng(args.seed), indices=idx)
    if args.raw_units:
        pred = stats.denormalize(pred)
    np.save(args.out, pred)
    return EXIT_OK


def cmd_evaluate(args):
    seeds = _seeds(args.seeds)
    expect = args.expect_hash
    if args.config:
        d = _read_json(args.config)
        d["data"] = args.data
        expect = TrainConfig.from_dict(d).hash()
    system, meta = BridgeTS.load(args.ckpt, expect)
    cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else TrainConfig()
    (_, _, te), _ = load_split_windows(args.data, cfg)
    ratio = args.ratio if args.ratio is not None else cfg.mask_ratio
    system = _system_with_external(args, system, *te.shape)
    res = evaluate_checkpoint(system, te, ratio, seeds, mask_mode=cfg.mask_mode, rng_algorithm=cfg.rng)
    res["ratio"] = ratio
    _write_json(res, args.out)
    return EXIT_OK


def cmd_matrix(args):
    m = ExperimentMatrix.from_json(args.config)
    if args.max_steps is not None:
        m.base = replace(m.base, max_steps=args.max_steps)
    t = run_matrix(m, root=args.cache)
    if t.rows:
        emit_report(t, "csv", args.out)
    for cell, err in sorted(t.failures.items()):
        print(f"FAILED {cell}: {err}", file=sys.stderr)
    print(f"{len(t.rows)} cells ok, {len(t.failures)} failed, {t.trained_cells} computed")
    return EXIT_DATA if t.failures else EXIT_OK


def cmd_report(args):
    t = read_results_csv(args.results)
    if args.out:
        emit_report(t, args.format, args.out)
    else:
        print(table_to_markdown(t) if args.format == "markdown" else table_to_csv(t), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="bridgets", description="Bridge time-series imputation with expert priors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def train_opts(sp):
        sp.add_argument("--config", help="TrainConfig JSON file")
        sp.add_argument("--data", help="CSV dataset (overrides config)")
        sp.add_argument("--ratio", type=float)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("ingest", help="validate a CSV and print split/normalization summary")
    sp.add_argument("data")
    sp.add_argument("--seq-len", type=int, default=96)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="write a synthetic sinusoid-mixture CSV")
    sp.add_argument("out")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--components", type=int, default=3)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("mask-gen", help="write seeded observation masks (.npy, 1 = observed)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ratio", type=float, required=True)
    sp.add_argument("--mask-seed", type=int, required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--seq-len", type=int, default=96)
    sp.add_argument("--mode", choices=("bernoulli", "exact"), default="bernoulli")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mask_gen)

    sp = sub.add_parser("train-expert", help="pretrain a conv expert")
    train_opts(sp)
    sp.add_argument("--expert", default="conv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_expert)

    sp = sub.add_parser("train-bridge", help="train the bridge denoiser and experts")
    train_opts(sp)
    sp.add_argument("--priors", help="expert specs joined by '+', e.g. conv+linear")
    sp.add_argument("--regime", choices=("joint", "frozen", "mse_aux", "mse_aux_random_init"))
    sp.add_argument("--deterministic", action="store_true", help="train the deterministic variant")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_train_bridge)

    for name, func in (("impute", cmd_impute), ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--prior", help="external:<file> estimates replacing the checkpoint's expert")
        sp.add_argument("--ratio", "--mask-ratio", dest="ratio", type=float,
                        default=None if name == "evaluate" else 0.25)
        sp.add_argument("--out", required=name == "impute")
        sp.set_defaults(func=func)
        if name == "impute":
            sp.add_argument("--split", choices=("train", "val", "test"), default="test")
            sp.add_argument("--mask", help=".npy mask from mask-gen")
            sp.add_argument("--mask-seed", type=int, default=0)
            sp.add_argument("--seed", type=int, default=0, help="sampler seed")
            sp.add_argument("--raw-units", action="store_true")
        else:
            sp.add_argument("--seeds", default="1,2,3")
            sp.add_argument("--expect-hash", help="refuse checkpoints whose config hash differs")
            sp.add_argument("--config", help="TrainConfig JSON; its hash (with --data) must match the checkpoint")

    sp = sub.add_parser("matrix", help="run datasets x ratios x variants with a resumable ledger")
    sp.add_argument("--config", required=True, help="ExperimentMatrix JSON")
    sp.add_argument("--out", required=True, help="results CSV")
    sp.add_argument("--cache", help="ledger/checkpoint directory (default $BRIDGETS_CACHE)")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("report", help="render a results CSV as csv or markdown tables")
    sp.add_argument("results")
    sp.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
