"""Diffusion noise schedule and distillation-time sampling.

The forward perturbation is ``x_t = alpha_t * x0 + sigma_t * eps`` with the
trigonometric variance-preserving pair ``alpha_t = cos(pi t / 2)``,
``sigma_t = sin(pi t / 2)``.
"""

from dataclasses import dataclass

import numpy as np


class ScheduleDomainError(ValueError):
    """Raised for diffusion times outside ``[0, 1]``."""


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ScheduleDomainError(f"diffusion time must lie in [0, 1], got {t}")
    return t


def alpha_sigma(t):
    """Return ``(alpha_t, sigma_t)``; works elementwise on arrays.

    Endpoints are pinned exactly (``cos(pi/2)`` is not exactly zero in
    floating point).
    """
    t = _check_t(t)
    half = 0.5 * np.pi * t
    a = np.where(t == 1.0, 0.0, np.cos(half))
    s = np.where(t == 1.0, 1.0, np.sin(half))
    if a.ndim == 0:
        return float(a), float(s)
    return a, s


def weight(t):
    """Distillation weight ``omega(t) = sigma_t ** 2``."""
    _, s = alpha_sigma(t)
    return s * s


def perturb(x0, t, noise):
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} does not match x0 shape {x0.shape}")
    a, s = alpha_sigma(t)
    return a * x0 + s * noise


@dataclass(frozen=True)
class TimeSchedule:
    """Two-phase uniform time sampler.

    Steps before ``switch_step`` draw ``t ~ U(phase1)``, later steps draw
    ``t ~ U(phase2)``.  A schedule with ``phase2 == phase1`` is the plain
    uniform schedule.
    """

    phase1: tuple = (0.02, 0.98)
    phase2: tuple = (0.02, 0.50)
    switch_step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phase1", tuple(float(v) for v in self.phase1))
        object.__setattr__(self, "phase2", tuple(float(v) for v in self.phase2))
        for name, (lo, hi) in (("phase1", self.phase1), ("phase2", self.phase2)):
            if not (0.0 < lo <= hi < 1.0):
                raise ValueError(f"{name} must be a nonempty subinterval of (0, 1), got {(lo, hi)}")
        if not (self.phase1[0] <= self.phase2[0] and self.phase2[1] <= self.phase1[1]):
            raise ValueError(f"phase2 {self.phase2} must lie inside phase1 {self.phase1}")
        if int(self.switch_step) < 0:
            raise ValueError("switch_step must be nonnegative")
        object.__setattr__(self, "switch_step", int(self.switch_step))

    @classmethod
    def uniform(cls, lo=0.02, hi=0.98):
        return cls(phase1=(lo, hi), phase2=(lo, hi), switch_step=0)

    @classmethod
    def annealed(cls, total_steps, fraction=0.2):
        return cls(switch_step=int(round(total_steps * fraction)))

    def range_at(self, step):
        return self.phase1 if step < self.switch_step else self.phase2


def sample_time(step, schedule, rng, size=None):
    lo, hi = schedule.range_at(step)
    if lo == hi:
        return lo if size is None else np.full(size, lo)
    return rng.uniform(lo, hi, size=size)
