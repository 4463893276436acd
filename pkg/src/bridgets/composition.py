"""Stacking expert estimates along a prior axis, replicating targets, fusing outputs.

Stacks put the N priors on a new trailing axis: ``(..., L, C) -> (..., L, C, N)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class PriorStack:
    values: np.ndarray
    source_ids: list

    @property
    def n_priors(self):
        return self.values.shape[-1]


@dataclass
class ReplicatedTarget:
    values: np.ndarray


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def stack_priors(estimates):
    """Stack estimates in argument order; order is part of the model's conditioning."""
    if not estimates:
        raise DataError("need at least one prior estimate")
    arrays = [_values(e) for e in estimates]
    ref = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != ref:
            sid = getattr(estimates[i], "source_id", f"#{i}")
            raise DataError(f"estimate {i} ({sid}) has shape {a.shape}, expected {ref}")
    ids = [getattr(e, "source_id", f"prior{i}") for i, e in enumerate(estimates)]
    return PriorStack(np.stack(arrays, axis=-1), ids)


def replicate_target(x, n):
    if int(n) < 1:
        raise DataError(f"replication count must be >= 1, got {n}")
    v = _values(x)
    return ReplicatedTarget(np.repeat(v[..., None], int(n), axis=-1))


def fuse_output(y):
    """Arithmetic mean over the trailing prior axis.

    Computed as ``min + mean(sorted - min)``: the float result then does not
    depend on prior order, and identical slices fuse back to themselves exactly.
    """
    v = _values(y)
    if v.shape[-1] == 1:
        return v[..., 0].copy()
    v = np.sort(v, axis=-1)
    base = v[..., :1]
    return base[..., 0] + np.mean(v - base, axis=-1)
