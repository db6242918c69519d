"""Differentiable linear renderers ``g(theta, c)``.

Only linear maps are provided, so a render is ``R(c) @ theta`` and the
Jacobian-transpose product is ``R(c).T @ v``.
"""

import math
from dataclasses import dataclass

import numpy as np

IDENTITY = "identity"
LINEAR = "linear"
KINDS = (IDENTITY, LINEAR)


@dataclass(frozen=True)
class Camera:
    angle: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.angle):
            raise ValueError("camera angle must be finite")

    def features(self):
        return np.array([math.cos(self.angle), math.sin(self.angle)])


@dataclass(frozen=True)
class Renderer:
    """``identity`` returns theta unchanged; ``linear`` projects onto ``image_dim``
    unit directions at angles ``c + k*pi/image_dim`` in the first two
    coordinates of theta."""

    kind: str = IDENTITY
    param_dim: int = 2
    image_dim: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"renderer kind must be one of {KINDS}, got {self.kind!r}")
        if self.param_dim < 1 or self.image_dim < 1:
            raise ValueError("renderer dimensions must be positive")
        if self.kind == IDENTITY and self.image_dim != self.param_dim:
            raise ValueError("identity renderer requires image_dim == param_dim")
        if self.kind == LINEAR:
            if self.param_dim < 2:
                raise ValueError("linear projection needs param_dim >= 2")
            if self.image_dim > self.param_dim:
                raise ValueError("linear projection requires image_dim <= param_dim")

    @classmethod
    def identity(cls, dim=2):
        return cls(IDENTITY, dim, dim)

    @classmethod
    def linear(cls, param_dim=2, image_dim=1):
        return cls(LINEAR, param_dim, image_dim)

    @property
    def is_identity(self):
        return self.kind == IDENTITY

    def sample_camera(self, rng):
        if self.is_identity:
            return Camera(0.0)
        return Camera(float(rng.uniform(0.0, 2.0 * math.pi)))

    def sample_angles(self, rng, size):
        if self.is_identity:
            return np.zeros(size)
        return rng.uniform(0.0, 2.0 * math.pi, size=size)

    def matrix(self, angle):
        """Rendering matrix ``R(c)`` of shape ``(image_dim, param_dim)``."""
        if self.is_identity:
            return np.eye(self.param_dim)
        m = self.image_dim
        R = np.zeros((m, self.param_dim))
        ang = float(angle) + np.arange(m) * math.pi / m
        R[:, 0] = np.cos(ang)
        R[:, 1] = np.sin(ang)
        return R

    def matrices(self, angles):
        """Stack of rendering matrices, shape ``(B, image_dim, param_dim)``."""
        angles = np.asarray(angles, dtype=np.float64)
        if self.is_identity:
            return np.broadcast_to(np.eye(self.param_dim), (angles.shape[0], self.param_dim, self.param_dim))
        m = self.image_dim
        ang = angles[:, None] + np.arange(m)[None, :] * math.pi / m
        R = np.zeros((angles.shape[0], m, self.param_dim))
        R[:, :, 0] = np.cos(ang)
        R[:, :, 1] = np.sin(ang)
        return R

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.param_dim:
            raise ValueError(f"theta has dimension {theta.shape[-1]}, renderer expects {self.param_dim}")
        return theta

    def render(self, theta, camera):
        theta = self._check_theta(theta)
        if self.is_identity:
            return theta.copy()
        return theta @ self.matrix(_angle(camera)).T

    def render_batch(self, thetas, angles):
        """Render row ``b`` of ``thetas`` with camera ``angles[b]``."""
        thetas = self._check_theta(thetas)
        if self.is_identity:
            return thetas.copy()
        return np.einsum("bmd,bd->bm", self.matrices(angles), thetas)

    def apply_jacobian_transpose(self, theta, camera, v):
        self._check_theta(theta)
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.image_dim:
            raise ValueError(f"image-space vector has dimension {v.shape[-1]}, expected {self.image_dim}")
        if self.is_identity:
            return v.copy()
        return v @ self.matrix(_angle(camera))

    def jvp_transpose_batch(self, angles, v):
        v = np.asarray(v, dtype=np.float64)
        if self.is_identity:
            return v.copy()
        return np.einsum("bmd,bm->bd", self.matrices(angles), v)


def _angle(camera):
    return camera.angle if isinstance(camera, Camera) else float(camera)


def sample_camera(renderer, rng):
    return renderer.sample_camera(rng)


def render(renderer, theta, camera):
    return renderer.render(theta, camera)


def apply_jacobian_transpose(renderer, theta, camera, v):
    return renderer.apply_jacobian_transpose(theta, camera, v)
