"""Diffusion schedules on t in [0, 1] and their closed-form bridge coefficients.

Drift is identically zero, so ``alpha_t = alpha_bar_t = 1`` and the variance
integrals reduce to integrals of ``g^2``:

* ``constant``: ``g^2(t) = beta0``
* ``gmax``:     ``g^2(t) = beta0 + t * (beta1 - beta0)``
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SCHEDULE_KINDS = ("constant", "gmax")


@dataclass(frozen=True)
class BridgeSchedule:
    kind: str = "constant"
    beta0: float = 1.0
    beta1: float = 20.0
    t_min: float = 1e-4

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not self.beta0 > 0:
            raise ConfigError("schedule.beta0 must be positive")
        if self.kind == "gmax" and self.beta1 < self.beta0:
            raise ConfigError("schedule.beta1 must be >= schedule.beta0")
        if not 0 < self.t_min <= 0.1:
            raise ConfigError("schedule.t_min must lie in (0, 0.1]")

    @classmethod
    def gmax(cls, beta0=0.01, beta1=20.0, t_min=1e-4):
        return cls("gmax", beta0, beta1, t_min)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        kind = d.get("kind", "constant")
        default_b0 = 0.01 if kind == "gmax" else 1.0
        return cls(
            kind=kind,
            beta0=float(d.get("beta0", default_b0)),
            beta1=float(d.get("beta1", 20.0)),
            t_min=float(d.get("t_min", 1e-4)),
        )

    def to_dict(self):
        return {"kind": self.kind, "beta0": self.beta0, "beta1": self.beta1, "t_min": self.t_min}

    def g2(self, t):
        """Diffusion-squared ``g^2(t)``."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return np.full_like(t, self.beta0)
        return self.beta0 + t * (self.beta1 - self.beta0)

    def sigma2(self, t):
        """``sigma_t^2 = int_0^t g^2``; vectorised, no range check."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return self.beta0 * t
        return self.beta0 * t + (self.beta1 - self.beta0) * t * t / 2.0

    @property
    def sigma2_1(self):
        return float(self.sigma2(1.0))


@dataclass(frozen=True)
class ScheduleCoefficients:
    alpha_t: float
    alpha_bar_t: float
    sigma2_t: float
    sigma2_bar_t: float
    sigma2_1: float


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def _complement(total, part):
    """``total - part`` nudged by ulps so that ``part + result == total`` in floats."""
    rest = np.asarray(total - part, dtype=np.float64)
    for _ in range(4):
        over = part + rest > total
        under = part + rest < total
        if not (np.any(over) or np.any(under)):
            break
        rest = np.where(over, np.nextafter(rest, -np.inf), rest)
        rest = np.where(under, np.nextafter(rest, np.inf), rest)
    return np.maximum(rest, 0.0)


def coefficients(s, t):
    """Closed-form ``alpha_t, alpha_bar_t, sigma_t^2, sigma_bar_t^2, sigma_1^2``.

    Accepts a scalar or an array of times; fields then carry matching arrays.
    """
    t = _check_t(t)
    s2 = s.sigma2(t)
    s2_1 = s.sigma2_1
    s2_bar = _complement(s2_1, s2)
    if t.ndim == 0:
        return ScheduleCoefficients(1.0, 1.0, float(s2), float(s2_bar), s2_1)
    one = np.ones_like(t)
    return ScheduleCoefficients(one, one.copy(), s2, s2_bar, s2_1)


def snr_boundary_check(s, table=None, tol=1e-12):
    """Residuals ``(sigma^2(0), sigma_bar^2(1))`` and whether both are within ``tol``.

    ``table`` optionally maps ``t -> ScheduleCoefficients``, which lets a caller
    audit a stored coefficient table instead of the live closed form.
    """
    if table is None:
        c0, c1 = coefficients(s, 0.0), coefficients(s, 1.0)
    else:
        c0, c1 = table[0.0], table[1.0]
    r0 = abs(float(c0.sigma2_t))
    r1 = abs(float(c1.sigma2_bar_t))
    return {"sigma2_at_0": r0, "sigma2_bar_at_1": r1, "ok": r0 <= tol and r1 <= tol}
