"""Estimators of the rendered-image noise prediction ``-sigma_t grad log q_t``.

Three estimators share one batch interface
``estimate(particles, renderer, x_t, t, angles, noise) -> (B, m)``:

* ``DiracEstimator`` returns the injected noise, which turns the particle
  update into plain score distillation (SDS).
* ``EmpiricalEstimator`` is the exact score of the Gaussian-smoothed
  empirical render distribution of the current particles.
* ``LearnedEstimator`` is a small tanh MLP trained with the denoising
  objective on renders of the particles, conditioned on ``t`` and camera.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .analytic_model import SingularTimeError
from .schedule import alpha_sigma


class NumericError(FloatingPointError):
    """A non-finite value appeared in an estimator or gradient."""


@dataclass
class ParticleEnsemble:
    particles: np.ndarray

    def __post_init__(self):
        p = np.array(self.particles, dtype=np.float64)
        if p.ndim == 1:
            p = p[None, :]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("a particle ensemble needs at least one particle of shape (d,)")
        self.particles = p

    @property
    def n(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    def copy(self):
        return ParticleEnsemble(self.particles.copy())


def _particles(ensemble):
    if isinstance(ensemble, ParticleEnsemble):
        return ensemble.particles
    p = np.asarray(ensemble, dtype=np.float64)
    return p[None, :] if p.ndim == 1 else p


# --------------------------------------------------------------------------
# Dirac


def dirac_estimate(x_t, t, noise):
    """Score of ``N(alpha_t x0, sigma_t^2 I)`` at ``x_t``, i.e. the noise itself."""
    return np.asarray(noise, dtype=np.float64)


class DiracEstimator:
    kind = "dirac"

    def estimate(self, particles, renderer, x_t, t, angles, noise):
        return dirac_estimate(x_t, t, noise)


# --------------------------------------------------------------------------
# empirical mixture


def _canonical(centers):
    """Rows in lexicographic order, so mixture sums do not depend on particle order."""
    if centers.shape[0] < 2:
        return centers
    return centers[np.lexsort(centers.T[::-1])]


def _project(particles, matrix):
    """``particles @ matrix.T`` with per-row results independent of row position.

    BLAS blocking can round a row differently depending on where it sits in
    the batch, which would break exact invariance to particle order.
    """
    out = particles[:, 0:1] * matrix[:, 0]
    for j in range(1, particles.shape[1]):
        out = out + particles[:, j : j + 1] * matrix[:, j]
    return out


def empirical_batch(particles, renderer, x_t, t, angles):
    """Batch empirical estimate; row ``b`` uses time ``t[b]`` and camera ``angles[b]``."""
    particles = _particles(particles)
    if particles.shape[0] < 1:
        raise ValueError("empirical estimate needs a nonempty ensemble")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
    a, s = alpha_sigma(t)
    if np.any(s <= 0.0):
        raise SingularTimeError("empirical estimate is undefined at t = 0")
    if renderer.is_identity:
        return _kernels.iso_mixture(x_t, _canonical(particles), a, s)[1]
    out = np.empty_like(x_t)
    for b in range(x_t.shape[0]):
        centers = _canonical(_project(particles, renderer.matrix(angles[b])))
        out[b] = _kernels.iso_mixture(x_t[b : b + 1], centers, a[b : b + 1], s[b : b + 1])[1][0]
    return out


def empirical_estimate(ensemble, renderer, camera, x_t, t):
    angle = getattr(camera, "angle", camera)
    x_t = np.asarray(x_t, dtype=np.float64)
    out = empirical_batch(ensemble, renderer, x_t[None, :], np.array([t], dtype=np.float64), np.array([angle]))
    return out[0]


def smoothed_log_density(particles, renderer, angle, x, t):
    """``log q_t(x | c)`` of the smoothed empirical render distribution."""
    particles = _particles(particles)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a, s = alpha_sigma(t)
    centers = particles if renderer.is_identity else _project(particles, renderer.matrix(angle))
    return _kernels.iso_mixture(x, _canonical(centers), a, s)[0]


class EmpiricalEstimator:
    kind = "empirical"

    def estimate(self, particles, renderer, x_t, t, angles, noise):
        return empirical_batch(particles, renderer, x_t, t, angles)


# --------------------------------------------------------------------------
# learned


def time_camera_features(t, angles):
    t = np.asarray(t, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    return np.stack(
        [np.sin(2 * np.pi * t), np.cos(2 * np.pi * t), t, np.cos(angles), np.sin(angles)], axis=1
    )


class LearnedEstimator:
    """Two-hidden-layer tanh MLP ``eps_phi(x_t, t, c)``.

    The output layer starts at zero so the initial prediction is zero
    everywhere.  Gradients are exact reverse-mode through the fixed
    architecture; the optimizer is plain SGD or Adam.
    """

    kind = "learned"

    def __init__(
        self,
        image_dim,
        hidden=64,
        lr=1e-4,
        optimizer="sgd",
        momentum=0.9,
        batch_size=1,
        t_range=(0.02, 0.98),
        rng=None,
    ):
        if optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {optimizer!r}")
        self.image_dim = int(image_dim)
        self.hidden = int(hidden)
        self.lr = float(lr)
        self.optimizer = optimizer
        self.momentum = float(momentum)
        self.batch_size = int(batch_size)
        self.t_range = tuple(t_range)
        self.steps = 0
        rng = rng if rng is not None else np.random.default_rng(0)
        n_in = self.image_dim + 5
        h = self.hidden
        self.params = {
            "W1": rng.standard_normal((n_in, h)) / math.sqrt(n_in),
            "b1": np.zeros(h),
            "W2": rng.standard_normal((h, h)) / math.sqrt(h),
            "b2": np.zeros(h),
            "W3": np.zeros((h, self.image_dim)),
            "b3": np.zeros(self.image_dim),
        }
        self._slots = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in self.params.items()}

    # -- network

    def _inputs(self, x_t, t, angles):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        B = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        angles = np.broadcast_to(np.asarray(angles, dtype=np.float64), (B,))
        return np.concatenate([x_t, time_camera_features(t, angles)], axis=1)

    def _forward(self, inp):
        p = self.params
        h1 = np.tanh(inp @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        out = h2 @ p["W3"] + p["b3"]
        return out, (inp, h1, h2)

    def predict(self, x_t, t, angles):
        out, _ = self._forward(self._inputs(x_t, t, angles))
        if not np.all(np.isfinite(out)):
            raise NumericError("learned estimator produced a non-finite prediction")
        return out

    def estimate(self, particles, renderer, x_t, t, angles, noise):
        return self.predict(x_t, t, angles)

    def loss_and_grads(self, x_t, t, angles, eps):
        """Mean over the batch of ``||eps_phi - eps||^2`` and its parameter gradient."""
        out, (inp, h1, h2) = self._forward(self._inputs(x_t, t, angles))
        B = out.shape[0]
        r = out - eps
        loss = float(np.sum(r * r) / B)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite estimator loss at estimator step {self.steps}")
        p = self.params
        g_out = 2.0 * r / B
        g = {"W3": h2.T @ g_out, "b3": g_out.sum(0)}
        g_h2 = (g_out @ p["W3"].T) * (1.0 - h2 * h2)
        g["W2"] = h1.T @ g_h2
        g["b2"] = g_h2.sum(0)
        g_h1 = (g_h2 @ p["W2"].T) * (1.0 - h1 * h1)
        g["W1"] = inp.T @ g_h1
        g["b1"] = g_h1.sum(0)
        return loss, g

    def apply_gradients(self, grads, lr=None):
        lr = self.lr if lr is None else float(lr)
        self.steps += 1
        if lr == 0.0:
            return
        if self.optimizer == "sgd":
            for k, g in grads.items():
                self.params[k] -= lr * g
        elif self.optimizer == "momentum":
            for k, g in grads.items():
                buf = self._slots[k][0]
                buf *= self.momentum
                buf += g
                self.params[k] -= lr * buf
        else:
            b1, b2, tiny = 0.9, 0.999, 1e-8
            c1 = 1.0 - b1**self.steps
            c2 = 1.0 - b2**self.steps
            for k, g in grads.items():
                m, v = self._slots[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                self.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + tiny)

    # -- persistence

    def state_arrays(self):
        out = {}
        for k, v in self.params.items():
            out[k] = v
            out[k + ".m"], out[k + ".v"] = self._slots[k]
        return out

    def load_state_arrays(self, arrays, steps):
        for k in self.params:
            self.params[k] = np.array(arrays[k], dtype=np.float64).reshape(self.params[k].shape)
            m, v = self._slots[k]
            m[...] = np.asarray(arrays[k + ".m"]).reshape(m.shape)
            v[...] = np.asarray(arrays[k + ".v"]).reshape(v.shape)
        self.steps = int(steps)


def draw_training_batch(particles, renderer, rng, batch_size, t_range):
    """Sample ``(x_t, t, angles, eps)`` from renders of random particles."""
    particles = _particles(particles)
    idx = rng.integers(0, particles.shape[0], size=batch_size)
    lo, hi = t_range
    t = rng.uniform(lo, hi, size=batch_size) if hi > lo else np.full(batch_size, lo)
    angles = renderer.sample_angles(rng, batch_size)
    eps = rng.standard_normal((batch_size, renderer.image_dim))
    x0 = renderer.render_batch(particles[idx], angles)
    a, s = alpha_sigma(t)
    x_t = a[:, None] * x0 + s[:, None] * eps
    return x_t, t, angles, eps


def train_step(est, ensemble, renderer, rng, lr=None, t_range=None):
    """One stochastic step on the denoising loss; returns the pre-step loss."""
    if lr is not None and lr < 0:
        raise ValueError("estimator learning rate must be nonnegative")
    batch = draw_training_batch(
        ensemble, renderer, rng, est.batch_size, t_range if t_range is not None else est.t_range
    )
    loss, grads = est.loss_and_grads(*batch)
    est.apply_gradients(grads, lr)
    return loss


def learned_estimate(est, x_t, t, camera):
    angle = getattr(camera, "angle", camera)
    return est.predict(np.asarray(x_t)[None, :], np.array([t]), np.array([angle]))[0]


def make_estimator(kind, image_dim, rng=None, **learned_kwargs):
    if kind == "dirac":
        return DiracEstimator()
    if kind == "empirical":
        return EmpiricalEstimator()
    if kind == "learned":
        return LearnedEstimator(image_dim, rng=rng, **learned_kwargs)
    raise ValueError(f"estimator must be one of dirac, empirical, learned; got {kind!r}")
