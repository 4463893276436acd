"""Temporal convolutional residual network with exact backpropagation.

Parameters live in one flat float64 vector; :attr:`ConvResNet.layout` maps
names to ``(offset, shape)``. Layer stack, per time step features ``F``::

    h   = conv_k(x) + b_in [+ time_proj(embed(t))]
    h  += conv_k(gelu(conv_k(gelu(h)) + b1)) + b2        (per block)
    y   = gelu(h) @ W_out + b_out [+ x @ W_skip]

Convolutions are 'same'-padded along time and implemented as im2col + matmul.
"""

import math

import numpy as np

from . import kernels


def time_embedding(t, dim, scale=1000.0, max_period=10000.0):
    """Sinusoidal embedding ``[sin(scale*t*f_i), cos(scale*t*f_i)]`` of shape ``(B, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    arg = scale * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class ConvResNet:
    def __init__(self, in_features, out_features, blocks=4, hidden=64, kernel=3,
                 time_embed_dim=0, skip=False):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.blocks = int(blocks)
        self.hidden = int(hidden)
        self.kernel = int(kernel)
        self.time_embed_dim = int(time_embed_dim)
        self.skip = bool(skip)

        k, fi, h, fo = self.kernel, self.in_features, self.hidden, self.out_features
        shapes = [("in.W", (k * fi, h)), ("in.b", (h,))]
        if self.time_embed_dim:
            shapes += [("temb.W", (self.time_embed_dim, h)), ("temb.b", (h,))]
        for i in range(self.blocks):
            shapes += [
                (f"block{i}.W1", (k * h, h)), (f"block{i}.b1", (h,)),
                (f"block{i}.W2", (k * h, h)), (f"block{i}.b2", (h,)),
            ]
        shapes += [("out.W", (h, fo)), ("out.b", (fo,))]
        if self.skip:
            shapes += [("skip.W", (fi, fo))]

        self.layout = {}
        off = 0
        for name, shape in shapes:
            self.layout[name] = (off, shape)
            off += int(np.prod(shape))
        self.n_params = off

    def arch(self):
        return {
            "in_features": self.in_features, "out_features": self.out_features,
            "blocks": self.blocks, "hidden": self.hidden, "kernel": self.kernel,
            "time_embed_dim": self.time_embed_dim, "skip": self.skip,
        }

    def views(self, params):
        return {
            name: params[off:off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self.layout.items()
        }

    def init(self, rng, out_scale=0.1):
        params = np.zeros(self.n_params)
        v = self.views(params)
        for name, (_, shape) in self.layout.items():
            if ".W" not in name or name == "skip.W":
                continue
            fan_in = shape[0]
            std = math.sqrt(2.0 / fan_in)
            if name.endswith("W2") or name == "out.W":
                std *= out_scale
            v[name][...] = rng.standard_normal(shape) * std
        return params

    def forward(self, params, x, t=None):
        """``x``: ``(B, L, F_in)``. Returns ``(y, cache)`` with ``y`` of shape ``(B, L, F_out)``."""
        v = self.views(params)
        k = self.kernel
        cols0 = kernels.im2col(x, k)
        h = cols0 @ v["in.W"] + v["in.b"]
        emb = None
        if self.time_embed_dim:
            if t is None:
                raise ValueError("this network needs a time input")
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
            emb = time_embedding(t, self.time_embed_dim)
            h = h + (emb @ v["temb.W"] + v["temb.b"])[:, None, :]
        block_cache = []
        for i in range(self.blocks):
            a1 = kernels.gelu(h)
            c1 = kernels.im2col(a1, k)
            u = c1 @ v[f"block{i}.W1"] + v[f"block{i}.b1"]
            a2 = kernels.gelu(u)
            c2 = kernels.im2col(a2, k)
            r = c2 @ v[f"block{i}.W2"] + v[f"block{i}.b2"]
            block_cache.append((h, c1, u, c2))
            h = h + r
        ao = kernels.gelu(h)
        y = ao @ v["out.W"] + v["out.b"]
        if self.skip:
            y = y + x @ v["skip.W"]
        cache = {"x": x, "cols0": cols0, "emb": emb, "blocks": block_cache, "h": h, "ao": ao}
        return y, cache

    def backward(self, params, cache, dy, need_input_grad=False):
        """Gradients w.r.t. the flat parameters and, optionally, the input ``x``."""
        v = self.views(params)
        grads = np.zeros(self.n_params)
        g = self.views(grads)
        k, hdim = self.kernel, self.hidden

        def flat(a):
            return a.reshape(-1, a.shape[-1])

        dyf = flat(dy)
        g["out.W"][...] = flat(cache["ao"]).T @ dyf
        g["out.b"][...] = dyf.sum(axis=0)
        dx = None
        if self.skip:
            g["skip.W"][...] = flat(cache["x"]).T @ dyf
            if need_input_grad:
                dx = dy @ v["skip.W"].T
        dh = kernels.gelu_grad(cache["h"], dy @ v["out.W"].T)
        for i in reversed(range(self.blocks)):
            h_in, c1, u, c2 = cache["blocks"][i]
            dhf = flat(dh)
            g[f"block{i}.W2"][...] = flat(c2).T @ dhf
            g[f"block{i}.b2"][...] = dhf.sum(axis=0)
            da2 = kernels.col2im(dh @ v[f"block{i}.W2"].T, k, hdim)
            du = kernels.gelu_grad(u, da2)
            duf = flat(du)
            g[f"block{i}.W1"][...] = flat(c1).T @ duf
            g[f"block{i}.b1"][...] = duf.sum(axis=0)
            da1 = kernels.col2im(du @ v[f"block{i}.W1"].T, k, hdim)
            dh = dh + kernels.gelu_grad(h_in, da1)
        dhf = flat(dh)
        if self.time_embed_dim:
            dhb = dh.sum(axis=1)
            g["temb.W"][...] = cache["emb"].T @ dhb
            g["temb.b"][...] = dhb.sum(axis=0)
        g["in.W"][...] = flat(cache["cols0"]).T @ dhf
        g["in.b"][...] = dhf.sum(axis=0)
        if need_input_grad:
            dx_in = kernels.col2im(dh @ v["in.W"].T, k, self.in_features)
            dx = dx_in if dx is None else dx + dx_in
        return grads, dx
