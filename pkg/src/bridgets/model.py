"""The x0-predicting denoiser, its optimizer, and gradient verification."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .network import ConvResNet


def _as_batch(a, ndim):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == ndim - 1:
        return a[None], True
    if a.ndim != ndim:
        raise DataError(f"expected a {ndim - 1}-D or {ndim}-D array, got shape {a.shape}")
    return a, False


class DenoiserModel:
    """``p_theta(x_t, t, prior, mask) -> x0`` over ``(L, C, N)`` stacks.

    Input features at each time step are the flattened ``x_t`` and ``prior``
    stacks plus the mask repeated over the N slices, ``3*C*N`` in all. A
    linear skip path from the input features to the output is initialised to
    copy ``x_t``, so an untrained model predicts ``x0 ~= x_t``.
    """

    def __init__(self, n_channels, n_priors=1, blocks=4, hidden=64, kernel=3,
                 time_embed_dim=32, params=None):
        self.n_channels = int(n_channels)
        self.n_priors = int(n_priors)
        cn = self.n_channels * self.n_priors
        self.net = ConvResNet(3 * cn, cn, blocks=blocks, hidden=hidden, kernel=kernel,
                              time_embed_dim=time_embed_dim, skip=True)
        if params is None:
            params = np.zeros(self.net.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.net.n_params,):
            raise DataError(f"denoiser expects {self.net.n_params} parameters, got {params.shape}")
        self.params = params
        self._cache = None

    @property
    def arch(self):
        return {
            "blocks": self.net.blocks, "hidden": self.net.hidden, "kernel": self.net.kernel,
            "time_embed_dim": self.net.time_embed_dim,
        }

    def init(self, rng):
        p = self.net.init(rng)
        cn = self.n_channels * self.n_priors
        self.net.views(p)["skip.W"][:cn, :] = np.eye(cn)
        self.params = p
        return self

    def _features(self, x_t, prior, mask):
        b, l, c, n = x_t.shape
        if prior.shape != x_t.shape:
            raise DataError(f"prior shape {prior.shape} != x_t shape {x_t.shape}")
        if (c, n) != (self.n_channels, self.n_priors):
            raise DataError(
                f"model built for C={self.n_channels}, N={self.n_priors}; got C={c}, N={n}"
            )
        if mask.shape != (b, l, c):
            raise DataError(f"mask shape {mask.shape} does not match {(b, l, c)}")
        m = np.repeat(mask[..., None], n, axis=-1)
        feats = np.concatenate(
            [x_t.reshape(b, l, c * n), prior.reshape(b, l, c * n), m.reshape(b, l, c * n)], axis=2
        )
        if not np.all(np.isfinite(feats)):
            raise NumericalError("non-finite denoiser input")
        return feats

    def apply(self, params, x_t, t, prior, mask):
        """Functional forward; returns ``(x0_hat, cache)`` for batched inputs."""
        feats = self._features(x_t, prior, mask)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
        y, cache = self.net.forward(params, feats, t)
        return y.reshape(x_t.shape), cache

    def grad(self, params, cache, upstream, need_input_grad=False):
        """Return ``(dparams, dx_t, dprior)``; input grads are None unless requested."""
        b, l, c, n = upstream.shape
        dy = upstream.reshape(b, l, c * n)
        dparams, dfeat = self.net.backward(params, cache, dy, need_input_grad)
        if not need_input_grad:
            return dparams, None, None
        cn = c * n
        return (dparams,
                dfeat[..., :cn].reshape(b, l, c, n),
                dfeat[..., cn:2 * cn].reshape(b, l, c, n))

    def forward(self, x_t, t, prior, mask):
        x_t, single = _as_batch(x_t, 4)
        prior, _ = _as_batch(prior, 4)
        mask, _ = _as_batch(mask, 3)
        y, cache = self.apply(self.params, x_t, t, prior, mask)
        self._cache = (cache, single)
        return y[0] if single else y

    __call__ = forward

    def backward(self, upstream_grad):
        """Parameter gradients of ``sum(upstream_grad * forward(...))`` for the last forward."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache, single = self._cache
        up = np.asarray(upstream_grad, dtype=np.float64)
        if single:
            up = up[None]
        dparams, _, _ = self.grad(self.params, cache, up)
        return dparams

    def copy(self):
        return DenoiserModel(self.n_channels, self.n_priors, params=self.params.copy(), **self.arch)


@dataclass
class OptimizerState:
    n: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.first_moment is None:
            self.first_moment = np.zeros(self.n)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.n)


def adam_step(state, params, grads):
    """One bias-corrected Adam update. Returns ``(state, new_params)``; inputs are not mutated."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or params.shape != state.first_moment.shape:
        raise DataError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericalError(f"non-finite gradient at coordinate {bad} (optimizer step {state.step + 1})")
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(state.n, state.lr, state.beta1, state.beta2, state.eps, step, m, v)
    return new_state, new_params


def finite_difference_grad(f, params, h=1e-5, indices=None):
    """Central differences of scalar ``f`` at ``params`` (all or selected coordinates)."""
    params = np.array(params, dtype=np.float64)
    idx = range(params.size) if indices is None else indices
    out = {}
    for i in idx:
        old = params[i]
        params[i] = old + h
        fp = f(params)
        params[i] = old - h
        fm = f(params)
        params[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """``max |a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries meaningful."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradient_check(f, params, grad, h=1e-5, indices=None):
    """Max relative error between ``grad`` and central differences of ``f``."""
    fd = finite_difference_grad(f, params, h, indices)
    keys = sorted(fd)
    return max_relative_error(np.asarray(grad)[keys], [fd[k] for k in keys])
