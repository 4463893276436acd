"""Hot inner loops with numba and numpy implementations.

Every public function dispatches on :func:`bridgets._accel.backend`. Both
paths evaluate the same arithmetic in the same order where it is practical;
GELU differs between the two by at most a few ulp because numba and numpy
ship different ``tanh`` implementations.
"""

import numpy as np

from ._accel import backend, njit

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


# ---------------------------------------------------------------- GELU (tanh form)


def _gelu_np(u):
    th = np.tanh(_GELU_C * (u + _GELU_A * u ** 3))
    return 0.5 * u * (1.0 + th)


def _gelu_grad_np(u, g):
    th = np.tanh(_GELU_C * (u + _GELU_A * u ** 3))
    d = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * u * u)
    return g * d


@njit
def _gelu_nb(u):
    flat = u.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        x = flat[i]
        th = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
        out[i] = 0.5 * x * (1.0 + th)
    return out.reshape(u.shape)


@njit
def _gelu_grad_nb(u, g):
    fu = u.ravel()
    fg = g.ravel()
    out = np.empty_like(fu)
    for i in range(fu.size):
        x = fu[i]
        th = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        out[i] = fg[i] * d
    return out.reshape(u.shape)


def gelu(u):
    if backend() == "numba":
        return _gelu_nb(np.ascontiguousarray(u))
    return _gelu_np(u)


def gelu_grad(u, g):
    """Chain ``g`` through GELU evaluated at pre-activation ``u``."""
    if backend() == "numba":
        return _gelu_grad_nb(np.ascontiguousarray(u), np.ascontiguousarray(g))
    return _gelu_grad_np(u, g)


# ---------------------------------------------------------------- im2col for 'same' 1-D conv


def _im2col_np(x, k):
    b, n, f = x.shape
    p = k // 2
    xp = np.zeros((b, n + 2 * p, f))
    xp[:, p:p + n] = x
    return np.concatenate([xp[:, j:j + n] for j in range(k)], axis=2)


def _col2im_np(dc, k, f):
    b, n, _ = dc.shape
    p = k // 2
    dxp = np.zeros((b, n + 2 * p, f))
    for j in range(k):
        dxp[:, j:j + n] += dc[:, :, j * f:(j + 1) * f]
    return dxp[:, p:p + n]


@njit
def _im2col_nb(x, k):
    b, n, f = x.shape
    p = k // 2
    out = np.zeros((b, n, k * f))
    for bi in range(b):
        for l in range(n):
            for j in range(k):
                src = l + j - p
                if src < 0 or src >= n:
                    continue
                for c in range(f):
                    out[bi, l, j * f + c] = x[bi, src, c]
    return out


@njit
def _col2im_nb(dc, k, f):
    b, n, _ = dc.shape
    p = k // 2
    out = np.zeros((b, n, f))
    # same accumulation order as the numpy path: tap j outer, padded index inner
    for bi in range(b):
        for j in range(k):
            for l in range(n):
                dst = l + j - p
                if dst < 0 or dst >= n:
                    continue
                for c in range(f):
                    out[bi, dst, c] += dc[bi, l, j * f + c]
    return out


def im2col(x, k):
    """Unfold ``(B, L, F)`` into ``(B, L, k*F)`` with zero 'same' padding."""
    if k == 1:
        return x
    if backend() == "numba":
        return _im2col_nb(np.ascontiguousarray(x), k)
    return _im2col_np(x, k)


def col2im(dc, k, f):
    """Adjoint of :func:`im2col`."""
    if k == 1:
        return dc
    if backend() == "numba":
        return _col2im_nb(np.ascontiguousarray(dc), k, f)
    return _col2im_np(dc, k, f)


# ---------------------------------------------------------------- linear interpolation


def _linear_fill_np(x, m):
    b, n, c = x.shape
    obs = m > 0.5
    idx = np.arange(n)[None, :, None]
    prev = np.maximum.accumulate(np.where(obs, idx, -1), axis=1)
    nxt = np.flip(np.minimum.accumulate(np.flip(np.where(obs, idx, n), axis=1), axis=1), axis=1)
    has_prev = prev >= 0
    has_next = nxt < n
    xp = np.take_along_axis(x, np.clip(prev, 0, n - 1), axis=1)
    xn = np.take_along_axis(x, np.clip(nxt, 0, n - 1), axis=1)
    span = np.where(has_prev & has_next & (nxt > prev), nxt - prev, 1)
    w = (idx - prev) / span
    inner = xp + (xn - xp) * w
    out = np.where(has_prev & has_next, inner, np.where(has_prev, xp, np.where(has_next, xn, 0.0)))
    return np.where(obs, x, out)


@njit
def _linear_fill_nb(x, m):
    b, n, c = x.shape
    out = np.zeros((b, n, c))
    for bi in range(b):
        for ci in range(c):
            prev = -1
            for l in range(n):
                if m[bi, l, ci] > 0.5:
                    out[bi, l, ci] = x[bi, l, ci]
                    if prev == -1:
                        for q in range(l):
                            out[bi, q, ci] = x[bi, l, ci]
                    elif l - prev > 1:
                        xp = x[bi, prev, ci]
                        xn = x[bi, l, ci]
                        span = l - prev
                        for q in range(prev + 1, l):
                            out[bi, q, ci] = xp + (xn - xp) * ((q - prev) / span)
                    prev = l
            if prev >= 0:
                for q in range(prev + 1, n):
                    out[bi, q, ci] = x[bi, prev, ci]
    return out


def linear_fill(x, m):
    """Per-channel linear interpolation over time of a ``(B, L, C)`` batch.

    Gaps between observations are interpolated, leading and trailing gaps
    copy the nearest observation, and channels with no observation are 0.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if backend() == "numba":
        return _linear_fill_nb(np.ascontiguousarray(x), np.ascontiguousarray(m))
    return _linear_fill_np(x, m)
