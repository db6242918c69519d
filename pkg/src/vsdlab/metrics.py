"""Distribution distances, diversity and finite-difference audits."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .schedule import ScheduleDomainError, alpha_sigma, weight
from .variational_score import _particles, smoothed_log_density


@dataclass(frozen=True)
class GridSpec:
    bounds: tuple = ((-8.0, 8.0), (-8.0, 8.0))
    points: tuple = (256, 256)

    def __post_init__(self):
        bounds = tuple(tuple(float(v) for v in b) for b in self.bounds)
        points = tuple(int(p) for p in self.points)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "points", points)
        if len(bounds) != len(points) or not 1 <= len(bounds) <= 2:
            raise ValueError("grid must have one or two axes with matching bounds and point counts")
        for (lo, hi), p in zip(bounds, points):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid grid bounds {(lo, hi)}")
            if p < 16:
                raise ValueError("grid needs at least 16 points per axis")

    @classmethod
    def square(cls, dim, bound=8.0, points=None):
        points = points or (512 if dim == 1 else 256)
        return cls(((-bound, bound),) * dim, (points,) * dim)

    @property
    def dim(self):
        return len(self.points)

    def axes(self):
        return [np.linspace(lo, hi, p) for (lo, hi), p in zip(self.bounds, self.points)]

    def coords(self):
        """Grid points, shape ``(N, dim)`` in C order over the axes."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def integrate(self, values):
        vals = np.asarray(values).reshape(self.points)
        for ax in reversed(self.axes()):
            vals = np.trapezoid(vals, ax, axis=-1)
        return float(vals)


@dataclass(frozen=True)
class KLResult:
    value: float
    divergent: bool = False

    def __float__(self):
        return self.value


def _evaluate(density, grid):
    pts = grid.coords()
    vals = np.asarray(density(pts) if callable(density) else density, dtype=np.float64).reshape(-1)
    if vals.shape[0] != pts.shape[0]:
        raise ValueError("density values do not match the grid size")
    return vals


def grid_kl(q_density, p_density, grid):
    """Trapezoidal ``KL(q || p)`` with both densities renormalised on the grid.

    Arguments are callables mapping ``(N, dim)`` points to densities, or
    precomputed arrays over ``grid.coords()``.
    """
    q = _evaluate(q_density, grid)
    p = _evaluate(p_density, grid)
    q = q / grid.integrate(q)
    p = p / grid.integrate(p)
    divergent = bool(np.any((p <= 0.0) & (q > 1e-12)))
    mask = (q >= 1e-300) & (p > 0.0)
    integrand = np.zeros_like(q)
    integrand[mask] = q[mask] * (np.log(q[mask]) - np.log(p[mask]))
    return KLResult(grid.integrate(integrand), divergent)


def distillation_objective(ensemble, renderer, guided, grid, t_samples, rng=None, n_cameras=8):
    """Weighted mean over ``t`` and cameras of ``KL(q_t(.|c) || p_t)``.

    ``q_t`` is the Gaussian-smoothed empirical render distribution of the
    particles and ``p_t`` the diffused conditional target; the weight is
    ``(sigma_t / alpha_t) * omega(t)``.
    """
    particles = _particles(ensemble)
    if grid.dim != renderer.image_dim:
        raise ValueError("grid dimension must equal the renderer image dimension")
    if renderer.is_identity:
        angles = [0.0]
    else:
        if rng is None:
            angles = list(np.arange(n_cameras) * 2 * math.pi / n_cameras)
        else:
            angles = list(renderer.sample_angles(rng, n_cameras))
    pts = grid.coords()
    target = guided.conditional if hasattr(guided, "conditional") else guided
    total = 0.0
    count = 0
    for t in t_samples:
        a, s = alpha_sigma(t)
        if a <= 0.0 or s <= 0.0:
            raise ScheduleDomainError(f"objective weight is singular at t = {t}")
        p_log, _ = target.diffused_eval(pts, t)
        p = np.exp(p_log)
        w = (s / a) * weight(t)
        for ang in angles:
            q = np.exp(smoothed_log_density(particles, renderer, ang, pts, t))
            total += w * grid_kl(q, p, grid).value
            count += 1
    return total / count


def _w2_1d(u, v):
    """Exact W2 between two 1D empirical measures by merging their quantile grids."""
    u = np.sort(u)
    v = np.sort(v)
    nu, nv = u.shape[0], v.shape[0]
    if nu == nv:
        return math.sqrt(float(np.mean((u - v) ** 2)))
    cuts = np.union1d(np.arange(1, nu) / nu, np.arange(1, nv) / nv)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    iu = np.minimum((mids * nu).astype(np.int64), nu - 1)
    iv = np.minimum((mids * nv).astype(np.int64), nv - 1)
    return math.sqrt(float(np.sum(np.diff(edges) * (u[iu] - v[iv]) ** 2)))


def sliced_w2(a, b, n_projections=64, rng=None):
    """Mean over random unit directions of the 1D W2 between projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sliced_w2 needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    d = a.shape[1]
    if rng is None:
        rng = np.random.default_rng(0)
    if d == 1:
        dirs = np.ones((1, 1))
    else:
        dirs = rng.standard_normal((n_projections, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = a @ dirs.T
    pb = b @ dirs.T
    return float(np.mean([_w2_1d(pa[:, k], pb[:, k]) for k in range(dirs.shape[0])]))


def diversity(points):
    """Mean pairwise Euclidean distance."""
    pts = np.atleast_2d(np.asarray(_particles(points), dtype=np.float64))
    if pts.shape[0] < 2:
        raise ValueError("diversity needs at least two points")
    return float(np.mean(pdist(pts)))


def finite_diff_score_audit(model, points, h=1e-5, t=None):
    """Worst relative error of central differences of ``log p`` against the score.

    The error at a point is ``|fd - score| / max(|score|, 1)`` so that points
    where the score vanishes are judged on an absolute scale.  ``t`` audits
    the mixture diffused to that time.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if t is None:
        logp = model.log_density
        score = model.score(pts)
    else:

        def logp(x):
            return model.diffused_eval(x, t)[0]

        score = model.diffused_eval(pts, t)[1]
    d = pts.shape[1]
    fd = np.empty_like(pts)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fd[:, j] = (logp(pts + e) - logp(pts - e)) / (2 * h)
    err = np.linalg.norm(fd - score, axis=1) / np.maximum(np.linalg.norm(score, axis=1), 1.0)
    return float(err.max())
