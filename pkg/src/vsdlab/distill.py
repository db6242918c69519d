"""Score-distillation gradients and the alternating particle/estimator loop.

One step of :class:`Distiller` picks ``particle_batch`` particles uniformly
without replacement, draws ``mc_batch`` tuples ``(t, eps, c)`` for each,
averages the per-draw gradients in draw order, and moves the particles.
With a learned estimator it then takes ``estimator_steps`` denoising steps
on renders of the updated particles.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_mod
from .schedule import TimeSchedule, alpha_sigma, sample_time
from .variational_score import (
    DiracEstimator,
    LearnedEstimator,
    NumericError,
    ParticleEnsemble,
    dirac_estimate,
    make_estimator,
    train_step,
)

METHODS = ("sds", "vsd")
ESTIMATORS = ("dirac", "empirical", "learned")
CHECKPOINT_MAGIC = "# vsdlab-checkpoint v1"


class NumericAbort(RuntimeError):
    """Distillation hit a non-finite gradient or loss."""


@dataclass
class LearnedConfig:
    hidden: int = 64
    lr: float = 1e-4
    optimizer: str = "sgd"
    batch_size: int = 1
    steps_per_update: int = 1


@dataclass
class DistillConfig:
    method: str = "vsd"
    estimator: str = "empirical"
    n_particles: int = 64
    steps: int = 2000
    particle_lr: float = 0.03
    particle_batch: int = 1
    particle_optimizer: str = "sgd"
    mc_batch: int = 1
    guidance_scale: float = 0.0
    time_schedule: TimeSchedule = field(default_factory=TimeSchedule.uniform)
    init_mean: tuple = ()
    init_std: float = 2.0
    snapshot_stride: int = 100
    seed: int = 0
    learned: LearnedConfig = field(default_factory=LearnedConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.method == "sds" and self.estimator != "dirac":
            raise ValueError("method 'sds' requires estimator 'dirac'")
        for name in ("n_particles", "mc_batch", "particle_batch", "snapshot_stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.particle_batch > self.n_particles:
            raise ValueError("particle_batch cannot exceed n_particles")
        if int(self.steps) < 0:
            raise ValueError("steps must be >= 0")
        if not self.particle_lr > 0:
            raise ValueError("particle_lr must be > 0")
        if not self.guidance_scale >= 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.particle_optimizer not in ("sgd", "adam"):
            raise ValueError("particle_optimizer must be 'sgd' or 'adam'")
        if not self.init_std >= 0:
            raise ValueError("init_std must be >= 0")

    def to_dict(self):
        d = asdict(self)
        ts = self.time_schedule
        d["time_schedule"] = {"phase1": list(ts.phase1), "phase2": list(ts.phase2), "switch_step": ts.switch_step}
        d["init_mean"] = list(self.init_mean)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["time_schedule"] = TimeSchedule(**d["time_schedule"])
        d["learned"] = LearnedConfig(**d["learned"])
        d["init_mean"] = tuple(d.get("init_mean", ()))
        return cls(**d)


# --------------------------------------------------------------------------
# gradients


def sds_gradient(theta, guided, renderer, t, eps, camera, omega):
    """Single-sample SDS gradient ``J^T [omega (eps_pretrain(x_t) - eps)]``."""
    x0 = renderer.render(theta, camera)
    a, s = alpha_sigma(t)
    x_t = a * x0 + s * np.asarray(eps, dtype=np.float64)
    resid = guided.noise_prediction(x_t, t) - eps
    return renderer.apply_jacobian_transpose(theta, camera, omega * resid)


def vsd_gradient(theta, guided, estimator, renderer, t, eps, camera, omega, particles=None):
    """Single-sample VSD gradient ``J^T [omega (eps_pretrain(x_t) - eps_est(x_t))]``.

    ``particles`` is the ensemble the estimator conditions on (defaults to
    ``theta`` alone).
    """
    x0 = renderer.render(theta, camera)
    a, s = alpha_sigma(t)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = a * x0 + s * eps
    if isinstance(estimator, DiracEstimator):
        est = dirac_estimate(x_t, t, eps)
    else:
        ens = np.atleast_2d(theta) if particles is None else particles
        angle = getattr(camera, "angle", camera)
        est = estimator.estimate(ens, renderer, x_t[None, :], np.array([t]), np.array([angle]), eps[None, :])[0]
    resid = guided.noise_prediction(x_t, t) - est
    return renderer.apply_jacobian_transpose(theta, camera, omega * resid)


def batch_gradients(thetas, guided, estimator, renderer, t, eps, angles, particles):
    """Per-draw gradients for a batch; the estimator sees one particle snapshot."""
    a, s = alpha_sigma(t)
    x0 = renderer.render_batch(thetas, angles)
    x_t = a[:, None] * x0 + s[:, None] * eps
    if isinstance(estimator, DiracEstimator):
        est = dirac_estimate(x_t, t, eps)
    else:
        est = estimator.estimate(particles, renderer, x_t, t, angles, eps)
    resid = guided.noise_prediction(x_t, t) - est
    return renderer.jvp_transpose_batch(angles, (s * s)[:, None] * resid)


# --------------------------------------------------------------------------
# trajectory


@dataclass
class Trajectory:
    """Per-step scalars plus strided particle snapshots."""

    dim: int
    steps: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    t_mean: list = field(default_factory=list)
    est_loss: list = field(default_factory=list)
    snapshot_steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    snapshot_grad_norm: list = field(default_factory=list)
    snapshot_t: list = field(default_factory=list)
    snapshot_loss: list = field(default_factory=list)

    def record(self, step, grad_norm, t_mean, est_loss):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("trajectory steps must be strictly increasing")
        self.steps.append(step)
        self.grad_norm.append(grad_norm)
        self.t_mean.append(t_mean)
        self.est_loss.append(est_loss)

    def snapshot(self, step, particles, grad_norms, last_t, est_loss):
        self.snapshot_steps.append(step)
        self.snapshots.append(particles.copy())
        self.snapshot_grad_norm.append(grad_norms.copy())
        self.snapshot_t.append(last_t.copy())
        self.snapshot_loss.append(est_loss)

    def csv_rows(self):
        header = ["step", "particle"] + [f"coord_{j}" for j in range(self.dim)] + ["grad_norm", "t", "est_loss"]
        yield header
        for k, step in enumerate(self.snapshot_steps):
            P = self.snapshots[k]
            for i in range(P.shape[0]):
                yield [step, i, *P[i], self.snapshot_grad_norm[k][i], self.snapshot_t[k][i], self.snapshot_loss[k]]

    def to_bytes(self):
        return "\n".join(",".join(_fmt(v) for v in row) for row in self.csv_rows()).encode() + b"\n"


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --------------------------------------------------------------------------
# loop


class Distiller:
    """Stateful driver for one distillation run; supports checkpoint/resume."""

    STREAMS = ("init", "select", "draws", "estimator-init", "estimator-train")

    def __init__(self, config, guided, renderer):
        config.validate()
        self.config = config
        self.guided = guided.with_scale(config.guidance_scale)
        self.renderer = renderer
        if renderer.image_dim != guided.dim:
            raise ValueError(f"renderer image_dim {renderer.image_dim} does not match target dimension {guided.dim}")
        self.rngs = {name: rng_mod.stream(config.seed, name) for name in self.STREAMS}
        n, d = config.n_particles, renderer.param_dim
        mean = np.zeros(d) if not config.init_mean else np.asarray(config.init_mean, dtype=np.float64)
        if mean.shape != (d,):
            raise ValueError(f"init_mean must have dimension {d}")
        self.particles = mean + config.init_std * self.rngs["init"].standard_normal((n, d))
        self.initial = self.particles.copy()
        if config.method == "sds":
            self.estimator = DiracEstimator()
        else:
            lc = config.learned
            self.estimator = make_estimator(
                config.estimator,
                renderer.image_dim,
                rng=self.rngs["estimator-init"],
                hidden=lc.hidden,
                lr=lc.lr,
                optimizer=lc.optimizer,
                batch_size=lc.batch_size,
                t_range=config.time_schedule.phase1,
            )
        self.step = 0
        self._adam = (np.zeros((n, d)), np.zeros((n, d)), np.zeros(n, dtype=np.int64))
        self.last_grad_norm = np.full(n, np.nan)
        self.last_t = np.full(n, np.nan)
        self.last_loss = math.nan
        self.trajectory = Trajectory(dim=d)
        self.trajectory.snapshot(0, self.particles, self.last_grad_norm, self.last_t, self.last_loss)

    # -- single step

    def _update(self, idx, grad):
        cfg = self.config
        if cfg.particle_optimizer == "sgd":
            self.particles[idx] -= cfg.particle_lr * grad
            return
        m, v, k = self._adam
        k[idx] += 1
        m[idx] = 0.9 * m[idx] + 0.1 * grad
        v[idx] = 0.999 * v[idx] + 0.001 * grad * grad
        c1 = (1.0 - 0.9 ** k[idx])[:, None]
        c2 = (1.0 - 0.999 ** k[idx])[:, None]
        self.particles[idx] -= cfg.particle_lr * (m[idx] / c1) / (np.sqrt(v[idx] / c2) + 1e-8)

    def do_step(self):
        cfg = self.config
        step = self.step
        n, d = self.particles.shape
        pb, mc = cfg.particle_batch, cfg.mc_batch
        if pb == n:
            idx = np.arange(n)
        else:
            idx = np.sort(self.rngs["select"].choice(n, size=pb, replace=False))
        draws = self.rngs["draws"]
        B = pb * mc
        t = np.asarray(sample_time(step, cfg.time_schedule, draws, size=B), dtype=np.float64)
        eps = draws.standard_normal((B, self.renderer.image_dim))
        angles = self.renderer.sample_angles(draws, B)
        thetas = np.repeat(self.particles[idx], mc, axis=0)
        snapshot = self.particles.copy()
        g = batch_gradients(thetas, self.guided, self.estimator, self.renderer, t, eps, angles, snapshot)
        grad = g.reshape(pb, mc, d).mean(axis=1)
        if not np.all(np.isfinite(grad)):
            bad = idx[~np.all(np.isfinite(grad), axis=1)]
            raise NumericAbort(f"non-finite gradient at step {step} for particles {bad.tolist()[:8]}")
        self._update(idx, grad)
        norms = np.sqrt((grad * grad).sum(axis=1))
        self.last_grad_norm[idx] = norms
        self.last_t[idx] = t.reshape(pb, mc)[:, 0]

        loss = math.nan
        if isinstance(self.estimator, LearnedEstimator):
            rng = self.rngs["estimator-train"]
            t_range = cfg.time_schedule.range_at(step)
            for _ in range(cfg.learned.steps_per_update):
                try:
                    loss = train_step(self.estimator, self.particles, self.renderer, rng, t_range=t_range)
                except NumericError as exc:
                    raise NumericAbort(f"step {step}: {exc}") from exc
        self.last_loss = loss
        self.step += 1
        self.trajectory.record(self.step, float(norms.mean()), float(t.mean()), loss)
        if self.step % cfg.snapshot_stride == 0 or self.step == cfg.steps:
            self.trajectory.snapshot(self.step, self.particles, self.last_grad_norm, self.last_t, loss)

    def run(self, callback=None):
        while self.step < self.config.steps:
            self.do_step()
            if callback is not None:
                callback(self)
        return ParticleEnsemble(self.particles.copy()), self.trajectory

    # -- checkpointing

    def checkpoint_text(self):
        lines = [CHECKPOINT_MAGIC, "config " + json.dumps(self.config.to_dict(), sort_keys=True)]
        lines.append(f"step {self.step}")
        lines.append(f"last_loss {_fmt(self.last_loss)}")
        for name in self.STREAMS:
            lines.append(f"rng {name} " + json.dumps(rng_mod.get_state(self.rngs[name]), sort_keys=True))
        arrays = {
            "particles": self.particles,
            "last_grad_norm": self.last_grad_norm,
            "last_t": self.last_t,
            "adam_m": self._adam[0],
            "adam_v": self._adam[1],
            "adam_k": self._adam[2],
        }
        if isinstance(self.estimator, LearnedEstimator):
            lines.append(f"estimator_steps {self.estimator.steps}")
            for k, v in self.estimator.state_arrays().items():
                arrays["est." + k] = v
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            shape = "x".join(str(s) for s in arr.shape)
            lines.append(f"array {name} {shape} " + " ".join(_fmt(v) for v in arr.reshape(-1)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_checkpoint(cls, text, guided, renderer):
        lines = text.splitlines()
        if not lines or lines[0] != CHECKPOINT_MAGIC:
            raise ValueError("not a vsdlab v1 checkpoint")
        fields = {}
        rng_states = {}
        arrays = {}
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            if key == "rng":
                name, _, payload = rest.partition(" ")
                rng_states[name] = json.loads(payload)
            elif key == "array":
                name, shape, *vals = rest.split(" ")
                shp = tuple(int(s) for s in shape.split("x")) if shape else ()
                arrays[name] = np.array([float(v) for v in vals], dtype=np.float64).reshape(shp)
            else:
                fields[key] = rest
        config = DistillConfig.from_dict(json.loads(fields["config"]))
        self = cls(config, guided, renderer)
        self.step = int(fields["step"])
        self.last_loss = float(fields["last_loss"])
        for name, st in rng_states.items():
            rng_mod.set_state(self.rngs[name], st)
        self.particles = arrays["particles"]
        self.last_grad_norm = arrays["last_grad_norm"]
        self.last_t = arrays["last_t"]
        self._adam = (arrays["adam_m"], arrays["adam_v"], arrays["adam_k"].astype(np.int64))
        if isinstance(self.estimator, LearnedEstimator):
            est = {k[4:]: v for k, v in arrays.items() if k.startswith("est.")}
            self.estimator.load_state_arrays(est, int(fields["estimator_steps"]))
        self.trajectory = Trajectory(dim=renderer.param_dim)
        return self


def run(config, guided, renderer, callback=None):
    """Run distillation to completion; returns ``(ParticleEnsemble, Trajectory)``."""
    return Distiller(config, guided, renderer).run(callback)
