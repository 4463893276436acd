"""Tractable Schrodinger bridge between a target x0 and an expert prior xT.

With zero drift the bridge marginal is

    x_t ~ N( (sb2_t / s2_1) x0 + (s2_t / s2_1) xT,  s2_t * sb2_t / s2_1 )

where ``s2_t = int_0^t g^2`` and ``sb2_t = int_t^1 g^2``. Reverse simulation
uses the posterior of a Brownian bridge pinned at the predicted x0:

    x_{t'} | x_t, x0 ~ N( r x_t + (1 - r) x0,  s2_{t'} (s2_t - s2_{t'}) / s2_t ),  r = s2_{t'} / s2_t
"""

from dataclasses import dataclass

import numpy as np

from .composition import fuse_output
from .errors import DataError, NumericalError
from .schedule import coefficients


@dataclass
class MarginalParams:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class SamplerConfig:
    steps: int = 8
    grid: str = "uniform"
    stochastic: bool = True
    clamp_observed: bool = True
    fuse_per_step: bool = False

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("sampler.steps must be >= 1")
        if self.grid != "uniform":
            raise ValueError(f"unsupported time grid {self.grid!r}")

    def times(self):
        """Decreasing grid ``1 = t_K > ... > t_0 = 0``."""
        return np.linspace(1.0, 0.0, int(self.steps) + 1)


def _per_sample(c, ndim):
    """Reshape per-batch coefficients ``(B,)`` to broadcast over ``ndim``-D data."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return c
    return c.reshape(c.shape + (1,) * (ndim - 1))


def marginal_coefficients(s, t):
    """Return ``(w0, wT, var)`` with ``mean = w0 * x0 + wT * xT``."""
    c = coefficients(s, t)
    w0 = c.alpha_t * c.sigma2_bar_t / c.sigma2_1
    wT = c.alpha_bar_t * c.sigma2_t / c.sigma2_1
    var = c.alpha_t ** 2 * c.sigma2_bar_t * c.sigma2_t / c.sigma2_1
    return w0, wT, var


def marginal_params(s, x0, xT, t):
    x0 = np.asarray(x0, dtype=np.float64)
    xT = np.asarray(xT, dtype=np.float64)
    if x0.shape != xT.shape:
        raise DataError(f"x0 shape {x0.shape} != xT shape {xT.shape}")
    w0, wT, var = marginal_coefficients(s, t)
    nd = x0.ndim
    mean = _per_sample(w0, nd) * x0 + _per_sample(wT, nd) * xT
    return MarginalParams(mean, var)


def sample_marginal(s, x0, xT, t, rng, probabilistic=True):
    """Draw ``x_t`` from the bridge marginal; ``probabilistic=False`` returns the mean."""
    mp = marginal_params(s, x0, xT, t)
    if not probabilistic:
        return mp.mean
    eps = rng.standard_normal(mp.mean.shape)
    return mp.mean + _per_sample(np.sqrt(mp.var), mp.mean.ndim) * eps


def transition_params(s, x_t, x0_hat, t, t_prev):
    if not 0.0 <= t_prev < t <= 1.0:
        raise ValueError(f"need 0 <= t_prev < t <= 1, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x_t.shape != x0_hat.shape:
        raise DataError(f"x_t shape {x_t.shape} != x0_hat shape {x0_hat.shape}")
    s2_t = float(s.sigma2(t))
    s2_p = float(s.sigma2(t_prev))
    r = s2_p / s2_t
    mean = r * x_t + (1.0 - r) * x0_hat
    var = s2_p * (s2_t - s2_p) / s2_t
    return MarginalParams(mean, var)


def transition_sample(s, x_t, x0_hat, t, t_prev, rng=None, stochastic=True):
    """One ancestral step ``t -> t_prev`` of the bridge pinned at ``x0_hat``."""
    tp = transition_params(s, x_t, x0_hat, t, t_prev)
    if not stochastic or tp.var == 0.0:
        return tp.mean
    return tp.mean + np.sqrt(tp.var) * rng.standard_normal(tp.mean.shape)


# ---------------------------------------------------------------- training loss


def _prior_values(prior):
    return np.asarray(getattr(prior, "values", prior), dtype=np.float64)


def bridge_loss_batch(model, params, x, prior, mask, s, rng, probabilistic=True,
                      need_grad=True, need_prior_grad=False):
    """Fused masked-MSE bridge loss on a batch.

    ``x``: targets ``(B, L, C)``; ``prior``: stack ``(B, L, C, N)``; ``mask``:
    ``(B, L, C)``. Draws one ``t ~ U(t_min, 1)`` per window, then the bridge
    noise. Returns ``(loss, dparams, dprior)``; ``dprior`` covers both paths
    through which the prior enters (the ``x_t`` mean and the conditioning).
    """
    b, l, c, n = prior.shape
    if x.shape != (b, l, c) or mask.shape != (b, l, c):
        raise DataError(f"window {x.shape} / mask {mask.shape} do not match prior stack {prior.shape}")
    t = rng.uniform(s.t_min, 1.0, size=b)
    x0 = np.repeat(x[..., None], n, axis=-1)
    x_t = sample_marginal(s, x0, prior, t, rng, probabilistic)
    y, cache = model.apply(params, x_t, t, prior, mask)
    fused = fuse_output(y)
    w = 1.0 - mask
    count = float(np.sum(w))
    if count == 0.0:
        zp = np.zeros_like(params) if need_grad else None
        return 0.0, zp, (np.zeros_like(prior) if need_prior_grad else None)
    diff = (fused - x) * w
    loss = float(np.sum(diff * diff)) / count
    if not np.isfinite(loss):
        raise NumericalError("non-finite bridge loss")
    if not need_grad:
        return loss, None, None
    dfused = 2.0 * diff / count
    dy = np.repeat(dfused[..., None], n, axis=-1) / n
    dparams, dx_t, dprior_cond = model.grad(params, cache, dy, need_input_grad=need_prior_grad)
    dprior = None
    if need_prior_grad:
        _, wT, _ = marginal_coefficients(s, t)
        dprior = dprior_cond + _per_sample(wT, 4) * dx_t
    return loss, dparams, dprior


def bridge_loss(model, window, prior, mask, s, rng, probabilistic=True):
    """Loss and parameter gradients for one window (or a ``(B, L, C)`` batch).

    ``prior`` is a :class:`~bridgets.composition.PriorStack` or ``(L, C, N)`` array.
    """
    x = np.asarray(getattr(window, "values", window), dtype=np.float64)
    m = np.asarray(getattr(mask, "m", mask), dtype=np.float64)
    p = _prior_values(prior)
    if x.ndim == 2:
        x, m, p = x[None], m[None], p[None]
    if p.shape[:-1] != x.shape:
        raise DataError(f"prior stack {p.shape} does not match window {x.shape}")
    loss, grads, _ = bridge_loss_batch(model, model.params, x, p, m, s, rng, probabilistic)
    return loss, grads


# ---------------------------------------------------------------- sampling


def _predict(model, x, t, prior, mask):
    if hasattr(model, "apply"):
        y, _ = model.apply(model.params, x, t, prior, mask)
    else:
        y = model(x, t, prior, mask)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != x.shape:
        raise DataError(f"model output shape {y.shape} != state shape {x.shape}")
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"non-finite model output at t={t}")
    return y


def sample_imputation(model, x_ob, prior, mask, s, cfg=None, rng=None):
    """Refine a prior stack into an imputation by reverse bridge simulation.

    ``model`` is a :class:`~bridgets.model.DenoiserModel` or any callable
    ``(x_t, t, prior, mask) -> x0_hat`` on batched ``(B, L, C, N)`` arrays.
    Accepts a single window ``(L, C)`` or a batch ``(B, L, C)``.
    """
    cfg = cfg or SamplerConfig()
    x_ob = np.asarray(getattr(x_ob, "values", x_ob), dtype=np.float64)
    m = np.asarray(getattr(mask, "m", mask), dtype=np.float64)
    xT = _prior_values(prior)
    single = x_ob.ndim == 2
    if single:
        x_ob, m, xT = x_ob[None], m[None], xT[None]
    if xT.shape[:-1] != x_ob.shape or m.shape != x_ob.shape:
        raise DataError(f"prior {xT.shape}, window {x_ob.shape}, mask {m.shape} disagree")
    if cfg.stochastic and rng is None:
        raise ValueError("stochastic sampling needs an rng")
    grid = cfg.times()
    x = xT.copy()
    for t, t_prev in zip(grid[:-1], grid[1:]):
        x0_hat = _predict(model, x, float(t), xT, m)
        if cfg.fuse_per_step:
            x0_hat = np.repeat(fuse_output(x0_hat)[..., None], x.shape[-1], axis=-1)
        x = transition_sample(s, x, x0_hat, float(t), float(t_prev), rng, cfg.stochastic)
    out = fuse_output(x)
    if cfg.clamp_observed:
        out = np.where(m > 0.5, x_ob, out)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite imputation")
    return out[0] if single else out
