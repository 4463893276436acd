import numpy as np


def _missing(mask):
    return 1.0 - np.asarray(mask, dtype=np.float64)


def masked_sums(pred, target, mask):
    """``(sum sq err, sum abs err, count)`` over missing (mask == 0) entries."""
    w = _missing(mask)
    err = (np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) * w
    return float(np.sum(err * err)), float(np.sum(np.abs(err))), float(np.sum(w))


def masked_mse(pred, target, mask):
    sq, _, n = masked_sums(pred, target, mask)
    return sq / n if n else 0.0


def masked_mae(pred, target, mask):
    _, ab, n = masked_sums(pred, target, mask)
    return ab / n if n else 0.0
