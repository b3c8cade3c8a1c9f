from dataclasses import dataclass

import numpy as np

from ..camera import rotation_from_rng
from ..mesh import Mesh


@dataclass(frozen=True, eq=False)
class DeformBasis:
    """Low-frequency trigonometric displacement fields over template space."""
    directions: np.ndarray   # [B, 3] unit displacement directions
    wavevectors: np.ndarray  # [B, 3] in 1/mm
    phases: np.ndarray       # [B]

    @classmethod
    def make(cls, n=8, seed=0, length_scale=100.0):
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        k = rng.normal(size=(n, 3))
        k /= np.linalg.norm(k, axis=1, keepdims=True)
        k *= rng.uniform(0.6, 1.6, size=(n, 1)) / length_scale
        return cls(d, k, rng.uniform(0, 2 * np.pi, size=n))

    def evaluate(self, points):
        """Unit-amplitude fields at ``points [P, 3]`` -> ``[B, P, 3]``."""
        s = np.sin(points @ self.wavevectors.T + self.phases)  # [P, B]
        return s.T[:, :, None] * self.directions[:, None, :]


@dataclass(frozen=True, eq=False)
class DeformationField:
    """x -> R (x + scale * sum_b c_b f_b(x) - pivot) + pivot + t.

    The blend coefficients satisfy sum |c_b| <= 1, so the non-rigid
    displacement never exceeds ``scale``.
    """
    basis: DeformBasis
    coefficients: np.ndarray
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    pivot: np.ndarray

    @classmethod
    def identity(cls, basis, pivot=(0.0, 0.0, 0.0)):
        n = len(basis.phases)
        return cls(basis, np.zeros(n), 0.0, np.eye(3), np.zeros(3), np.asarray(pivot, float))

    @classmethod
    def random(cls, basis, seed, scale, max_angle_deg=8.0, max_shift=8.0, pivot=(0, 0, 0)):
        rng = np.random.default_rng(seed)
        n = len(basis.phases)
        c = rng.uniform(-1.0, 1.0, size=n)
        c *= rng.uniform(0.5, 1.0) / np.abs(c).sum()
        axis = rotation_from_rng(rng)[:, 0]
        ang = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
        Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(ang) * Kx + (1 - np.cos(ang)) * Kx @ Kx
        t = rng.uniform(-max_shift, max_shift, size=3)
        return cls(basis, c, float(scale), R, t, np.asarray(pivot, float))

    def displacement(self, points):
        f = self.basis.evaluate(np.asarray(points, dtype=np.float64))
        return self.scale * np.einsum("b,bpd->pd", self.coefficients, f)

    def __call__(self, points):
        p = np.asarray(points, dtype=np.float64)
        x = p + self.displacement(p) - self.pivot
        return x @ self.rotation.T + self.pivot + self.translation


def apply_deformation(field, mesh):
    return Mesh(field(mesh.vertices), mesh.faces)
