"""Expert priors: deterministic imputers whose estimates seed the bridge.

Every expert maps ``(x_ob, mask) -> estimate`` over ``(B, L, C)`` batches,
copies observed entries through unchanged, and never reads the values stored
at missing entries.
"""

import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import atomic_write_bytes, config_hash, load_checkpoint, save_checkpoint
from .data import gen_mask, substream
from .errors import ConfigError, DataError, NumericalError
from .metrics import masked_mse
from .model import OptimizerState, adam_step
from .network import ConvResNet

log = logging.getLogger(__name__)


@dataclass
class PriorEstimate:
    values: np.ndarray
    source_id: str


def _observed_only(x_ob, mask):
    x_ob = np.asarray(x_ob, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if x_ob.shape != mask.shape:
        raise DataError(f"window shape {x_ob.shape} != mask shape {mask.shape}")
    return np.where(mask > 0.5, x_ob, 0.0), mask


class ExpertPrior:
    id = "expert"
    trainable = False

    def __init__(self):
        self.params = np.zeros(0)

    @property
    def n_params(self):
        return self.params.size

    def forward(self, x_ob, mask, indices=None, params=None):
        """Batched ``(B, L, C)`` estimate and a cache for :meth:`backward`."""
        raise NotImplementedError

    def backward(self, cache, upstream):
        return np.zeros(self.n_params)

    def impute(self, x_ob, mask, indices=None):
        x_ob = np.asarray(x_ob, dtype=np.float64)
        single = x_ob.ndim == 2
        if single:
            x_ob, mask = x_ob[None], np.asarray(mask)[None]
            if indices is not None:
                indices = np.atleast_1d(indices)
        out, _ = self.forward(x_ob, mask, indices)
        return out[0] if single else out

    def copy(self):
        raise NotImplementedError


class LinearExpert(ExpertPrior):
    id = "linear"

    def forward(self, x_ob, mask, indices=None, params=None):
        x, m = _observed_only(x_ob, mask)
        return kernels.linear_fill(x, m), None

    def copy(self):
        return LinearExpert()


class ConvExpert(ExpertPrior):
    """Residual temporal conv net reading ``(observed values, mask)``.

    The network output fills missing entries; observed entries are copied.
    With all-zero parameters the missing entries equal the output bias.
    """

    trainable = True

    def __init__(self, n_channels, blocks=4, hidden=64, kernel=3, id="conv", params=None):
        super().__init__()
        self.id = id
        self.n_channels = int(n_channels)
        self.net = ConvResNet(2 * self.n_channels, self.n_channels,
                              blocks=blocks, hidden=hidden, kernel=kernel)
        if params is None:
            params = np.zeros(self.net.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.net.n_params,):
            raise DataError(f"expert {id!r} expects {self.net.n_params} parameters, got {params.shape}")
        self.params = params

    @property
    def arch(self):
        return {"blocks": self.net.blocks, "hidden": self.net.hidden, "kernel": self.net.kernel}

    def init(self, rng):
        self.params = self.net.init(rng)
        return self

    def forward(self, x_ob, mask, indices=None, params=None):
        x, m = _observed_only(x_ob, mask)
        if x.shape[-1] != self.n_channels:
            raise DataError(f"expert {self.id!r} built for C={self.n_channels}, got C={x.shape[-1]}")
        p = self.params if params is None else params
        y, cache = self.net.forward(p, np.concatenate([x, m], axis=-1))
        out = m * x + (1.0 - m) * y
        return out, (cache, m, p)

    def backward(self, cache, upstream):
        net_cache, m, p = cache
        grads, _ = self.net.backward(p, net_cache, (1.0 - m) * upstream)
        return grads

    def copy(self):
        return ConvExpert(self.n_channels, id=self.id, params=self.params.copy(), **self.arch)


class ExternalPrior(ExpertPrior):
    """Estimates produced elsewhere, looked up by window index."""

    def __init__(self, values, id="external"):
        super().__init__()
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"external prior must be (windows, L, C), got {self.values.shape}")
        self.id = id

    def forward(self, x_ob, mask, indices=None, params=None):
        x, m = _observed_only(x_ob, mask)
        if indices is None:
            if x.shape[0] != self.values.shape[0]:
                raise DataError(
                    f"external prior {self.id!r} holds {self.values.shape[0]} windows; "
                    f"batch of {x.shape[0]} needs explicit window indices"
                )
            indices = np.arange(x.shape[0])
        est = self.values[np.asarray(indices)]
        if est.shape != x.shape:
            raise DataError(f"external prior windows are {est.shape[1:]}, data windows are {x.shape[1:]}")
        return np.where(m > 0.5, x, est), None

    def copy(self):
        return ExternalPrior(self.values.copy(), self.id)


def impute_linear(x_ob, mask):
    return PriorEstimate(LinearExpert().impute(x_ob, mask), "linear")


def expert_forward(e, x_ob, mask, upstream=None, indices=None):
    """Estimate plus, for trainable experts, gradients of ``sum(upstream * estimate)``."""
    x_ob = np.asarray(x_ob, dtype=np.float64)
    single = x_ob.ndim == 2
    xb = x_ob[None] if single else x_ob
    mb = np.asarray(mask, dtype=np.float64)
    mb = mb[None] if single else mb
    out, cache = e.forward(xb, mb, indices)
    grads = None
    if upstream is not None and e.trainable:
        up = np.asarray(upstream, dtype=np.float64)
        grads = e.backward(cache, up[None] if single else up)
    return PriorEstimate(out[0] if single else out, e.id), grads


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    eval_every: int = 50
    seed: int = 0
    mask_mode: str = "bernoulli"


def evaluate_expert(e, windows, masks, indices=None, batch=256):
    """Masked MSE of an expert over ``windows`` (W, L, C) with fixed ``masks``."""
    sq, n = 0.0, 0.0
    for s in range(0, len(windows), batch):
        x, m = windows[s:s + batch], masks[s:s + batch]
        idx = None if indices is None else indices[s:s + batch]
        out, _ = e.forward(x, m, idx)
        w = 1.0 - m
        sq += float(np.sum(((out - x) * w) ** 2))
        n += float(np.sum(w))
    return sq / n if n else 0.0


def pretrain_expert(e, train_windows, val_windows, mask_ratio, config=None):
    """Fit a trainable expert by masked-MSE gradient descent.

    Returns ``(expert, best_val_mse, history)`` where ``expert`` carries the
    parameters of the evaluation with the lowest validation masked MSE.
    """
    if not e.trainable:
        raise ConfigError(f"expert {e.id!r} is not trainable")
    cfg = config or PretrainConfig()
    train_windows = np.asarray(train_windows, dtype=np.float64)
    val_windows = np.asarray(val_windows, dtype=np.float64)
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise DataError("pretraining needs non-empty train and validation windows")
    batch_rng = substream(cfg.seed, "expert-batches")
    val_masks = gen_mask(val_windows.shape, mask_ratio, substream(cfg.seed, "expert-val-mask"), cfg.mask_mode)
    params = e.params.copy()
    opt = OptimizerState(params.size, lr=cfg.lr)
    best = (evaluate_expert(e, val_windows, val_masks), 0, params.copy())
    history = [(0, best[0])]
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = batch_rng.integers(0, len(train_windows), size=cfg.batch_size)
        x = train_windows[idx]
        m = gen_mask(x.shape, mask_ratio, batch_rng, cfg.mask_mode)
        out, cache = e.forward(x, m, params=params)
        w = 1.0 - m
        n = float(np.sum(w))
        if n == 0:
            continue
        diff = (out - x) * w
        loss = float(np.sum(diff * diff)) / n
        if not np.isfinite(loss):
            raise NumericalError(f"expert {e.id!r} pretraining diverged at step {step}")
        grads = e.backward(cache, 2.0 * diff / n)
        opt, params = adam_step(opt, params, grads)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            e.params = params
            val = evaluate_expert(e, val_windows, val_masks)
            history.append((step, val))
            if val < best[0]:
                best = (val, step, params.copy())
    e.params = best[2]
    log.info("pretrained %s: best val mse %.5f at step %d (%.1fs)",
             e.id, best[0], best[1], time.perf_counter() - t0)
    return e, best[0], history


# ---------------------------------------------------------------- persistence


def save_expert(e, path, seed=None, config=None):
    meta = {
        "kind": "expert", "id": e.id, "expert_kind": "conv",
        "n_channels": e.n_channels, "arch": e.arch, "seed": seed,
        "config_hash": config_hash(config if config is not None else e.arch),
    }
    save_checkpoint(path, {f"expert.{e.id}": e.params}, meta)


def load_expert(path, expect_hash=None):
    blocks, meta = load_checkpoint(path, expect_hash)
    if meta.get("kind") != "expert":
        raise DataError(f"{path}: not an expert checkpoint")
    (params,) = blocks.values()
    return ConvExpert(meta["n_channels"], id=meta["id"], params=params, **meta["arch"])


def write_external_prior(path, values):
    """Write ``(windows, L, C)`` estimates as CSV or the flat binary layout.

    Binary: three little-endian int64 ``(windows, L, C)`` then row-major
    little-endian float64 values.
    """
    values = np.asarray(values, dtype=np.float64)
    path = Path(path)
    if path.suffix.lower() == ".csv":
        rows = values.reshape(-1, values.shape[-1])
        text = "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n"
        atomic_write_bytes(path, text.encode("utf-8"))
    else:
        head = struct.pack("<3q", *values.shape)
        atomic_write_bytes(path, head + values.astype("<f8").tobytes())


def load_external_prior(path, expected_shape, id=None):
    """Read externally produced estimates aligned to the window stream by index."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such prior file: {path}")
    w, l, c = (int(v) for v in expected_shape)
    if path.suffix.lower() == ".csv":
        rows = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header row
                raise DataError(f"{path}: line {lineno} is not numeric") from None
        if any(len(r) != c for r in rows):
            raise DataError(f"{path}: expected {c} columns per row")
        if len(rows) != w * l:
            raise DataError(f"{path}: expected {w * l} rows ({w} windows x {l} steps), got {len(rows)}")
        values = np.asarray(rows, dtype=np.float64).reshape(w, l, c)
    else:
        raw = path.read_bytes()
        if len(raw) < 24:
            raise DataError(f"{path}: truncated header")
        shape = struct.unpack("<3q", raw[:24])
        if tuple(shape) != (w, l, c):
            raise DataError(f"{path}: header shape {tuple(shape)} != expected {(w, l, c)}")
        body = raw[24:]
        if len(body) != 8 * w * l * c:
            got = len(body) // 8 // max(l * c, 1)
            raise DataError(f"{path}: expected {w} windows of {l}x{c}, file holds {got}")
        values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(w, l, c)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite values")
    sid = id or f"external:{path.name}"
    return [PriorEstimate(v, sid) for v in values]
