"""Training and evaluation of the composed expert-prior + bridge system."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bridge import SamplerConfig, bridge_loss_batch, sample_imputation
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .composition import stack_priors
from .data import Dataset, gen_mask, make_rng, make_windows, stack_windows, substream
from .errors import ConfigError, DataError, NumericalError
from .experts import (
    ConvExpert, ExternalPrior, LinearExpert, PretrainConfig, evaluate_expert,
    load_expert, load_external_prior, pretrain_expert,
)
from .metrics import masked_sums
from .model import DenoiserModel, OptimizerState, adam_step
from .schedule import BridgeSchedule

log = logging.getLogger(__name__)

REGIMES = ("joint", "frozen", "mse_aux", "mse_aux_random_init")


@dataclass
class TrainConfig:
    mask_ratio: float = 0.25
    seq_len: int = 96
    batch_size: int = 16
    max_steps: int = 2000
    seed: int = 0
    prior_regime: str = "joint"
    probabilistic: bool = True
    schedule: BridgeSchedule = field(default_factory=BridgeSchedule)
    priors: list = field(default_factory=lambda: ["conv"])
    eval_every: int = 250
    data: str = None
    split: tuple = (0.7, 0.1, 0.2)
    stride: int = 1
    lr: float = 1e-3
    aux_weight: float = 1.0
    fixed_masks: bool = False
    mask_mode: str = "bernoulli"
    rng: str = "philox"
    eval_max_windows: int = None
    model: dict = field(default_factory=lambda: {"blocks": 4, "hidden": 64, "kernel": 3, "time_embed_dim": 32})
    expert: dict = field(default_factory=lambda: {"blocks": 4, "hidden": 64, "kernel": 3})
    expert_pretrain: dict = field(default_factory=lambda: {"steps": 1000, "batch_size": 16, "lr": 1e-3, "eval_every": 100})
    sampler: dict = field(default_factory=lambda: {"steps": 8, "clamp_observed": True, "fuse_per_step": False})

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = BridgeSchedule.from_dict(self.schedule)
        self.split = tuple(self.split)
        self.priors = list(self.priors)
        if self.prior_regime not in REGIMES:
            raise ConfigError(f"prior_regime must be one of {REGIMES}, got {self.prior_regime!r}")
        if not self.priors:
            raise ConfigError("priors must list at least one expert")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.max_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("max_steps >= 0, batch_size >= 1 and eval_every >= 1 are required")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"no such config file: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        d["split"] = list(self.split)
        return d

    def hash(self):
        return config_hash(self.to_dict())

    def sampler_config(self):
        opts = dict(self.sampler)
        opts["stochastic"] = bool(self.probabilistic and opts.get("stochastic", True))
        return SamplerConfig(**opts)


@dataclass
class EvalRecord:
    step: int
    val_mse: float
    val_mae: float
    loss: float = None


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_step: int = 0
    best_val_mse: float = float("inf")
    seconds_per_step: float = 0.0
    checkpoint: object = field(default=None, repr=False)

    def to_dict(self):
        return {
            "records": [asdict(r) for r in self.records],
            "best_step": self.best_step,
            "best_val_mse": self.best_val_mse,
        }

    def record_at(self, step):
        for r in self.records:
            if r.step == step:
                return r
        raise KeyError(step)


class TrainingDiverged(NumericalError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


# ---------------------------------------------------------------- expert specs


def parse_expert_spec(spec):
    """``"linear"``, ``"conv"``, ``"conv:kernel=5,hidden=32"``, ``"conv:<ckpt>"``, ``"external:<file>"``."""
    kind, _, rest = spec.partition(":")
    if kind == "linear":
        return {"kind": "linear"}
    if kind == "external":
        if not rest:
            raise ConfigError("external prior needs a file path")
        return {"kind": "external", "path": rest}
    if kind == "conv":
        if rest and "=" not in rest:
            return {"kind": "conv", "ckpt": rest}
        opts = {}
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            if key not in ("blocks", "hidden", "kernel", "seed"):
                raise ConfigError(f"unknown conv expert option {key!r} in {spec!r}")
            opts[key] = int(val)
        return {"kind": "conv", "opts": opts}
    raise ConfigError(f"unknown expert spec {spec!r}")


def build_expert(spec, n_channels, cfg, index=0, rng=None):
    """Untrained expert for ``spec``. Conv experts are randomly initialised from ``rng``."""
    p = parse_expert_spec(spec)
    if p["kind"] == "linear":
        return LinearExpert()
    if p["kind"] == "external":
        raise ConfigError("external priors are inference-only; use them with impute/evaluate")
    if "ckpt" in p:
        return load_expert(p["ckpt"])
    arch = dict(cfg.expert)
    opts = dict(p["opts"])
    opts.pop("seed", None)
    arch.update(opts)
    e = ConvExpert(n_channels, id=spec if spec != "conv" else f"conv{index}" if index else "conv", **arch)
    return e.init(rng or substream(cfg.seed, f"expert-init-{index}", cfg.rng))


def resolve_experts(cfg, train_windows, val_windows, n_channels):
    """Build the configured experts, pretraining conv experts unless the regime wants random init.

    Returns ``(experts, val_mses)``.
    """
    experts, scores = [], []
    pre = PretrainConfig(mask_mode=cfg.mask_mode, **cfg.expert_pretrain)
    for i, spec in enumerate(cfg.priors):
        p = parse_expert_spec(spec)
        seed = p.get("opts", {}).get("seed", cfg.seed)
        e = build_expert(spec, n_channels, cfg, i, substream(seed, f"expert-init-{i}", cfg.rng))
        if e.trainable and "ckpt" not in p and cfg.prior_regime != "mse_aux_random_init":
            pre.seed = seed
            e, val, _ = pretrain_expert(e, train_windows, val_windows, cfg.mask_ratio, pre)
        else:
            masks = gen_mask(val_windows.shape, cfg.mask_ratio,
                             substream(seed, "expert-val-mask", cfg.rng), cfg.mask_mode)
            val = evaluate_expert(e, val_windows, masks)
        experts.append(e)
        scores.append(val)
    return experts, scores


# ---------------------------------------------------------------- composed system


class BridgeTS:
    """Experts, denoiser, schedule and sampler settings as one imputer."""

    def __init__(self, experts, denoiser, schedule, sampler=None):
        if not experts:
            raise ConfigError("need at least one expert")
        if denoiser.n_priors != len(experts):
            raise ConfigError(f"denoiser built for {denoiser.n_priors} priors, got {len(experts)} experts")
        self.experts = list(experts)
        self.denoiser = denoiser
        self.schedule = schedule
        self.sampler = sampler or SamplerConfig()

    @property
    def source_ids(self):
        return [e.id for e in self.experts]

    def param_sizes(self):
        return [self.denoiser.params.size] + [e.n_params for e in self.experts]

    def get_params(self):
        return np.concatenate([self.denoiser.params] + [e.params for e in self.experts])

    def set_params(self, flat):
        sizes = self.param_sizes()
        if flat.size != sum(sizes):
            raise DataError(f"expected {sum(sizes)} parameters, got {flat.size}")
        parts = np.split(flat, np.cumsum(sizes)[:-1])
        self.denoiser.params = parts[0].copy()
        for e, p in zip(self.experts, parts[1:]):
            e.params = p.copy()

    def copy(self):
        return BridgeTS([e.copy() for e in self.experts], self.denoiser.copy(), self.schedule,
                        SamplerConfig(**asdict(self.sampler)))

    def priors(self, x_ob, mask, indices=None):
        ests = [e.forward(x_ob, mask, indices)[0] for e in self.experts]
        return stack_priors(ests).values

    def impute(self, x_ob, mask, rng=None, indices=None, batch=128):
        """Impute a ``(B, L, C)`` batch; windows are processed in chunks of ``batch``."""
        x_ob = np.asarray(x_ob, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        out = np.empty_like(x_ob)
        for s in range(0, len(x_ob), batch):
            sl = slice(s, s + batch)
            idx = None if indices is None else np.asarray(indices)[sl]
            prior = self.priors(x_ob[sl], mask[sl], idx)
            out[sl] = sample_imputation(self.denoiser, x_ob[sl], prior, mask[sl],
                                        self.schedule, self.sampler, rng)
        return out

    # -- persistence

    def save(self, path, cfg=None, report=None):
        blocks = {"denoiser": self.denoiser.params}
        descr = []
        for i, e in enumerate(self.experts):
            if isinstance(e, ConvExpert):
                blocks[f"expert.{i}"] = e.params
                descr.append({"kind": "conv", "id": e.id, "arch": e.arch})
            elif isinstance(e, LinearExpert):
                descr.append({"kind": "linear", "id": e.id})
            else:
                raise ConfigError(f"cannot checkpoint expert {e.id!r}")
        meta = {
            "kind": "bridge",
            "n_channels": self.denoiser.n_channels,
            "denoiser_arch": self.denoiser.arch,
            "experts": descr,
            "schedule": self.schedule.to_dict(),
            "sampler": asdict(self.sampler),
            "config": cfg.to_dict() if cfg is not None else None,
            "config_hash": cfg.hash() if cfg is not None else None,
            "seed": cfg.seed if cfg is not None else None,
            "report": report.to_dict() if report is not None else None,
        }
        save_checkpoint(path, blocks, meta)

    @classmethod
    def load(cls, path, expect_hash=None):
        blocks, meta = load_checkpoint(path, expect_hash)
        if meta.get("kind") != "bridge":
            raise DataError(f"{path}: not a bridge checkpoint")
        c = meta["n_channels"]
        experts = []
        for i, d in enumerate(meta["experts"]):
            if d["kind"] == "linear":
                experts.append(LinearExpert())
            else:
                experts.append(ConvExpert(c, id=d["id"], params=blocks[f"expert.{i}"], **d["arch"]))
        den = DenoiserModel(c, len(experts), params=blocks["denoiser"], **meta["denoiser_arch"])
        sys = cls(experts, den, BridgeSchedule.from_dict(meta["schedule"]), SamplerConfig(**meta["sampler"]))
        return sys, meta


def score_imputation(system, windows, masks, rng, indices=None):
    """Masked ``(mse, mae)`` of ``system.impute`` over fixed windows and masks."""
    pred = system.impute(windows * masks, masks, rng, indices)
    sq, ab, n = masked_sums(pred, windows, masks)
    return (sq / n, ab / n) if n else (0.0, 0.0)


def _windows(split, cfg):
    if isinstance(split, Dataset):
        return stack_windows(make_windows(split, cfg.seq_len, cfg.stride), split.n_channels)
    return np.asarray(split, dtype=np.float64)


def _subsample(windows, cap):
    if cap is None or len(windows) <= cap:
        return windows
    idx = np.linspace(0, len(windows) - 1, cap).round().astype(int)
    return windows[idx]


# ---------------------------------------------------------------- training loop


def train(cfg, splits, experts=None):
    """Train the bridge (and, per regime, the experts) on ``splits = (train, val[, test])``.

    Splits are normalized :class:`~bridgets.data.Dataset` objects or window
    arrays ``(W, L, C)``. ``experts`` may pass already-resolved experts, which
    are copied and not modified. The returned report's ``checkpoint`` is the
    system at the best validation step.
    """
    train_w = _windows(splits[0], cfg)
    val_w = _subsample(_windows(splits[1], cfg), cfg.eval_max_windows)
    if len(train_w) == 0 or len(val_w) == 0:
        raise DataError(f"splits too short for seq_len={cfg.seq_len}")
    n_channels = train_w.shape[-1]
    if experts is None:
        experts, _ = resolve_experts(cfg, train_w, val_w, n_channels)
    else:
        experts = [e.copy() for e in experts]
    if cfg.prior_regime == "mse_aux_random_init":
        for i, e in enumerate(experts):
            if e.trainable:
                e.init(substream(cfg.seed, f"expert-init-{i}", cfg.rng))

    den = DenoiserModel(n_channels, len(experts), **cfg.model).init(substream(cfg.seed, "denoiser-init", cfg.rng))
    system = BridgeTS(experts, den, cfg.schedule, cfg.sampler_config())
    params = system.get_params()
    sizes = system.param_sizes()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    opt = OptimizerState(params.size, lr=cfg.lr)
    train_experts = cfg.prior_regime != "frozen"
    aux = cfg.aux_weight if cfg.prior_regime in ("mse_aux", "mse_aux_random_init") else 0.0

    rng = substream(cfg.seed, "train", cfg.rng)
    val_masks = gen_mask(val_w.shape, cfg.mask_ratio, substream(cfg.seed, "val-mask", cfg.rng), cfg.mask_mode)
    fixed = None
    if cfg.fixed_masks:
        fixed = gen_mask(train_w.shape, cfg.mask_ratio, substream(cfg.seed, "train-mask", cfg.rng), cfg.mask_mode)

    report = TrainReport()

    def evaluate(step, loss):
        system.set_params(params)
        try:
            mse, mae = score_imputation(system, val_w, val_masks, substream(cfg.seed, "val-sampler", cfg.rng))
        except NumericalError as exc:
            raise TrainingDiverged(f"evaluation at step {step} failed: {exc}", report) from exc
        if not (np.isfinite(mse) and np.isfinite(mae)):
            raise TrainingDiverged(f"non-finite validation metrics at step {step}", report)
        report.records.append(EvalRecord(step, mse, mae, loss))
        if mse < report.best_val_mse:
            report.best_val_mse, report.best_step = mse, step
            report.checkpoint = system.copy()
        log.debug("step %d: loss %s val mse %.5f mae %.5f", step, loss, mse, mae)

    evaluate(0, None)
    t0 = time.perf_counter()
    loss = None
    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, len(train_w), size=cfg.batch_size)
        x = train_w[idx]
        m = fixed[idx] if fixed is not None else gen_mask(x.shape, cfg.mask_ratio, rng, cfg.mask_mode)
        x_ob = x * m
        outs = []
        for i, e in enumerate(experts):
            ep = params[offsets[i + 1]:offsets[i + 2]]
            outs.append(e.forward(x_ob, m, params=ep))
        prior = np.stack([o[0] for o in outs], axis=-1)
        need_prior_grad = train_experts and any(e.trainable for e in experts)
        loss, dden, dprior = bridge_loss_batch(
            den, params[:offsets[1]], x, prior, m, cfg.schedule, rng,
            probabilistic=cfg.probabilistic, need_prior_grad=need_prior_grad,
        )
        grads = np.zeros_like(params)
        grads[:offsets[1]] = dden
        if aux:
            w = 1.0 - m
            count = float(np.sum(w))
            for i, (est, _) in enumerate(outs):
                if count:
                    diff = (est - x) * w
                    loss += aux * float(np.sum(diff * diff)) / count / len(experts)
        if need_prior_grad:
            w = 1.0 - m
            count = float(np.sum(w))
            for i, e in enumerate(experts):
                if not e.trainable:
                    continue
                up = dprior[..., i]
                if aux and count:
                    up = up + aux * 2.0 * (outs[i][0] - x) * w / count / len(experts)
                grads[offsets[i + 1]:offsets[i + 2]] = e.backward(outs[i][1], up)
        if not np.isfinite(loss):
            report.seconds_per_step = (time.perf_counter() - t0) / step
            raise TrainingDiverged(f"non-finite loss at step {step}", report)
        opt, params = adam_step(opt, params, grads)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            evaluate(step, loss)
    report.seconds_per_step = (time.perf_counter() - t0) / max(cfg.max_steps, 1)
    return report


# ---------------------------------------------------------------- evaluation


def evaluate_checkpoint(ckpt, test_windows, mask_ratio, seeds, expect_hash=None,
                        mask_mode="bernoulli", rng_algorithm="philox"):
    """Score a trained system on missing entries over several mask seeds.

    Masks for seed ``s`` are ``gen_mask(shape, ratio, make_rng(s))``, the same
    masks ``bridgets mask-gen --mask-seed s`` writes.
    """
    if isinstance(ckpt, (str, Path)):
        system, _ = BridgeTS.load(ckpt, expect_hash)
    else:
        system = ckpt
    windows = np.asarray(test_windows, dtype=np.float64)
    idx = np.arange(len(windows))  # lets window-indexed external priors line up
    per_seed = []
    for seed in seeds:
        masks = gen_mask(windows.shape, mask_ratio, make_rng(seed, rng_algorithm), mask_mode)
        if isinstance(system, BridgeTS):
            mse, mae = score_imputation(system, windows, masks, substream(seed, "sampler", rng_algorithm), idx)
        else:
            pred, _ = system.forward(windows * masks, masks, idx)
            sq, ab, n = masked_sums(pred, windows, masks)
            mse, mae = (sq / n, ab / n) if n else (0.0, 0.0)
        per_seed.append({"seed": int(seed), "mse": mse, "mae": mae})
    mses = np.array([r["mse"] for r in per_seed])
    maes = np.array([r["mae"] for r in per_seed])
    return {
        "mse": float(mses.mean()), "mse_std": float(mses.std()),
        "mae": float(maes.mean()), "mae_std": float(maes.std()),
        "per_seed": per_seed,
    }


def load_prior_for_windows(spec, n_windows, seq_len, n_channels):
    p = parse_expert_spec(spec)
    if p["kind"] != "external":
        raise ConfigError(f"{spec!r} is not an external prior")
    ests = load_external_prior(p["path"], (n_windows, seq_len, n_channels), id=spec)
    return ExternalPrior(np.stack([e.values for e in ests]), id=spec)
