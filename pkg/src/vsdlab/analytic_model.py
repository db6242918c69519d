"""Closed-form Gaussian-mixture targets standing in for a pretrained model.

A mixture diffused to time ``t`` is again a mixture, with component means
``alpha_t * m_k`` and covariances ``alpha_t^2 S_k + sigma_t^2 I``, so every
score and noise prediction below is exact.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .schedule import alpha_sigma


class InvalidMixtureError(ValueError):
    """Mixture parameters violate weight or covariance invariants."""


class SingularTimeError(ValueError):
    """A noise prediction was requested where ``sigma_t == 0``."""


def _as_cov(cov, d):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        return float(cov) * np.eye(d)
    if cov.ndim == 1:
        if cov.shape[0] != d:
            raise InvalidMixtureError(f"diagonal covariance has length {cov.shape[0]}, expected {d}")
        return np.diag(cov)
    if cov.shape != (d, d):
        raise InvalidMixtureError(f"covariance shape {cov.shape} does not match dimension {d}")
    return cov.copy()


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Immutable Gaussian mixture ``sum_k w_k N(m_k, S_k)``.

    Queries accept a single point of shape ``(d,)`` or a batch ``(B, d)``.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        K, d = means.shape
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != K:
            raise InvalidMixtureError(f"{weights.shape[0]} weights for {K} components")
        if np.any(~(weights > 0)):
            raise InvalidMixtureError("mixture weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidMixtureError(f"mixture weights sum to {weights.sum()!r}, not 1")
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim != 3:
            covs = np.stack([_as_cov(c, d) for c in np.atleast_1d(covs)])
        if covs.shape != (K, d, d):
            raise InvalidMixtureError(f"expected {K} covariances of shape ({d}, {d})")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=1e-14):
            raise InvalidMixtureError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise InvalidMixtureError("covariances must be positive definite") from exc
        for arr in (weights, means, covs, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def from_components(cls, components, dim=None):
        """Build from ``[{"weight": w, "mean": [...], "cov": c}, ...]``.

        ``cov`` may be a scalar (times identity), a diagonal list, or a full
        matrix.
        """
        if not components:
            raise InvalidMixtureError("a mixture needs at least one component")
        means = [np.atleast_1d(np.asarray(c["mean"], dtype=np.float64)) for c in components]
        d = dim or means[0].shape[0]
        if any(m.shape != (d,) for m in means):
            raise InvalidMixtureError("all component means must share one dimension")
        covs = np.stack([_as_cov(c.get("cov", 1.0), d) for c in components])
        return cls(np.array([c["weight"] for c in components], dtype=np.float64), np.stack(means), covs)

    @classmethod
    def isotropic(cls, means, var, weights=None):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        K, d = means.shape
        if weights is None:
            weights = np.full(K, 1.0 / K)
        return cls(weights, means, np.stack([var * np.eye(d)] * K))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    def _eval(self, x, alpha=1.0, sigma=0.0):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[-1] != self.dim:
            raise ValueError(f"point dimension {xb.shape[-1]} does not match mixture dimension {self.dim}")
        logp, score = _kernels.gmm(xb, alpha, sigma, np.log(self.weights), self.means, self.covs)
        if single:
            return logp[0], score[0]
        return logp, score

    def log_density(self, x):
        return self._eval(x)[0]

    def density(self, x):
        return np.exp(self.log_density(x))

    def score(self, x):
        return self._eval(x)[1]

    def component_log_resp(self, x):
        """Log responsibilities, shape ``(B, K)``."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        comp = np.empty((xb.shape[0], self.n_components))
        for k in range(self.n_components):
            diff = xb - self.means[k]
            z = np.linalg.solve(self._chol[k], diff.T).T
            logdet = 2.0 * np.log(np.diag(self._chol[k])).sum()
            comp[:, k] = np.log(self.weights[k]) - 0.5 * (z * z).sum(1) - 0.5 * logdet - 0.5 * self.dim * _kernels.LOG_2PI
        mx = comp.max(axis=1, keepdims=True)
        return comp - (mx + np.log(np.exp(comp - mx).sum(axis=1, keepdims=True)))

    def diffused_eval(self, x, t):
        """``(log p_t(x), grad log p_t(x))`` with a scalar or per-point ``t``."""
        a, s = alpha_sigma(t)
        return self._eval(x, a, s)

    def sample(self, n, rng):
        if n == 0:
            return np.empty((0, self.dim))
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum("nij,nj->ni", self._chol[comps], z)


def diffused(model, t):
    """The mixture ``p_t`` obtained by pushing ``model`` through the forward process."""
    a, s = alpha_sigma(t)
    d = model.dim
    return GaussianMixture(model.weights.copy(), a * model.means, a * a * model.covs + s * s * np.eye(d))


def log_density(model, x):
    return model.log_density(x)


def score(model, x):
    return model.score(x)


def sample(model, n, rng):
    return model.sample(n, rng)


@dataclass(frozen=True)
class GuidedModel:
    """Conditional/unconditional mixture pair combined by classifier-free guidance."""

    conditional: GaussianMixture
    unconditional: GaussianMixture
    guidance_scale: float = 0.0

    def __post_init__(self):
        if self.conditional.dim != self.unconditional.dim:
            raise InvalidMixtureError("conditional and unconditional mixtures differ in dimension")
        if not self.guidance_scale >= 0:
            raise ValueError(f"guidance scale must be nonnegative, got {self.guidance_scale}")

    @property
    def dim(self):
        return self.conditional.dim

    @classmethod
    def broadened(cls, conditional, guidance_scale=0.0, cov_scale=4.0, mean_scale=0.5):
        """Pair ``conditional`` with a wider, shrunken copy as the unconditional model."""
        uncond = GaussianMixture(conditional.weights.copy(), mean_scale * conditional.means, cov_scale * conditional.covs)
        return cls(conditional, uncond, float(guidance_scale))

    def with_scale(self, s):
        return GuidedModel(self.conditional, self.unconditional, float(s))

    def noise_prediction(self, x_t, t):
        """Guided noise prediction ``(1+s) eps_c - s eps_u``; ``t`` scalar or per-point."""
        a, s_t = alpha_sigma(t)
        if np.any(np.asarray(s_t) <= 0.0):
            raise SingularTimeError("noise prediction is undefined at t = 0 (sigma_t = 0)")
        eps_c = -s_t_col(s_t, x_t) * self.conditional._eval(x_t, a, s_t)[1]
        if self.guidance_scale == 0.0:
            return eps_c
        eps_u = -s_t_col(s_t, x_t) * self.unconditional._eval(x_t, a, s_t)[1]
        return cfg_combine(eps_c, eps_u, self.guidance_scale)


def s_t_col(s, x):
    """Broadcast per-point ``sigma_t`` against points of shape ``(B, d)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1 and np.ndim(x) == 2:
        return s[:, None]
    return s


def cfg_combine(eps_c, eps_u, s):
    """``(1+s) eps_c - s eps_u``, written so that ``eps_c == eps_u`` returns ``eps_c`` exactly."""
    eps_c = np.asarray(eps_c, dtype=np.float64)
    return eps_c + s * (eps_c - np.asarray(eps_u, dtype=np.float64))


def noise_prediction(guided, x_t, t):
    return guided.noise_prediction(x_t, t)
