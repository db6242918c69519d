"""Reference ancestral sampler from the guided analytic model."""

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .schedule import alpha_sigma

DELTA = 0.02


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 200
    n_samples: int = 10000
    guidance_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if not self.guidance_scale >= 0:
            raise ValueError("guidance_scale must be >= 0")


def ancestral_sample(guided, config, rng=None):
    """DDPM-style ancestral sampling on a uniform grid from ``1-DELTA`` to ``DELTA``.

    Each transition ``t -> s`` predicts ``x0`` from the guided noise
    prediction and draws from the Gaussian posterior ``q(x_s | x_t, x0)``.
    A final noiseless step maps the last grid point to ``t = 0``.
    """
    if rng is None:
        rng = rng_mod.stream(config.seed, "ancestral")
    guided = guided.with_scale(config.guidance_scale)
    n, d = config.n_samples, guided.dim
    if n == 0:
        return np.empty((0, d))
    grid = np.linspace(1.0 - DELTA, DELTA, config.n_steps)
    x = rng.standard_normal((n, d))
    for k, t in enumerate(grid):
        a_t, s_t = alpha_sigma(t)
        eps = guided.noise_prediction(x, float(t))
        x0 = (x - s_t * eps) / a_t
        if k + 1 == len(grid):
            return x0
        a_s, s_s = alpha_sigma(grid[k + 1])
        a_ts = a_t / a_s
        var_ts = s_t**2 - a_ts**2 * s_s**2
        mean = (a_ts * s_s**2 / s_t**2) * x + (a_s * var_ts / s_t**2) * x0
        std = np.sqrt(var_ts * s_s**2 / s_t**2)
        x = mean + std * rng.standard_normal((n, d))
    return x


def mode_assign(samples, model):
    """Histogram of highest-responsibility components (ties go to the lower index)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    counts = np.zeros(model.n_components, dtype=np.int64)
    if samples.shape[0] == 0:
        return counts
    labels = np.argmax(model.component_log_resp(samples), axis=1)
    np.add.at(counts, labels, 1)
    return counts
