"""Pinhole cameras, projection, and regular sampling grids (units: mm, px)."""
import json
import logging
from dataclasses import dataclass

import numpy as np

from .core import trace
from .core.autodiff import make
from .core.ops import _node

log = logging.getLogger(__name__)

BEHIND_EPS = 1e-9
MIN_DEPTH = 1.0


def _check_rotation(R, what):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"{what}: expected 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
        raise ValueError(f"{what}: not a proper rotation")
    return R


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", _check_rotation(self.R, f"camera {self.name!r} rotation"))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"camera {self.name!r}: focal lengths must be positive")
        if abs(K[0, 1]) > 0 or K[1, 0] or K[2, 0] or K[2, 1] or K[2, 2] != 1.0:
            raise ValueError(f"camera {self.name!r}: intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError(f"camera {self.name!r}: principal point outside the image")

    @property
    def center(self):
        return -self.R.T @ self.t

    def projection_matrix(self):
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def to_json(self):
        return {"name": self.name, "width": int(self.width), "height": int(self.height),
                "K": self.K.ravel().tolist(), "R": self.R.ravel().tolist(), "t": self.t.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(K=np.array(d["K"], dtype=np.float64).reshape(3, 3),
                   R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                   t=np.array(d["t"], dtype=np.float64), width=int(d["width"]),
                   height=int(d["height"]), name=d.get("name", ""))


def look_at(eye, target, up, f, width, height, name=""):
    """Camera at ``eye`` looking at ``target``; +z forward, +y down in image."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    K = np.array([[f, 0, (width - 1) / 2.0], [0, f, (height - 1) / 2.0], [0, 0, 1.0]])
    return Camera(K=K, R=R, t=-R @ eye, width=width, height=height, name=name)


def save_rig(path, cameras):
    with open(path, "w") as fh:
        json.dump([c.to_json() for c in cameras], fh, indent=1)


def load_rig(path):
    with open(path) as fh:
        return [Camera.from_json(d) for d in json.load(fh)]


def project(point, camera):
    """Project one world point (or ``[P, 3]`` points) to pixel coordinates.

    Raises ``ValueError`` ("behind camera") at depth <= 1e-9 mm.
    """
    p = np.asarray(point, dtype=np.float64)
    xc = p @ camera.R.T + camera.t
    z = xc[..., 2]
    if np.any(z <= BEHIND_EPS):
        raise ValueError(f"point behind camera {camera.name!r}")
    u = camera.K[0, 0] * xc[..., 0] / z + camera.K[0, 2]
    v = camera.K[1, 1] * xc[..., 1] / z + camera.K[1, 2]
    return np.stack([u, v], axis=-1)


class ClampCounter:
    """Counts depth-clamp events in the differentiable projection."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_events = ClampCounter()


def project_points(points, cameras):
    """Differentiable projection of ``points [P, 3]`` into every camera -> ``[K, P, 2]``.

    Depth is clamped to 1 mm so degenerate points keep finite gradients;
    clamps are tallied in :data:`clamp_events`.
    """
    points = _node(points)
    P = points.value
    Rs = np.stack([c.R for c in cameras])
    ts = np.stack([c.t for c in cameras])
    f = np.array([[c.K[0, 0], c.K[1, 1]] for c in cameras])
    cc = np.array([[c.K[0, 2], c.K[1, 2]] for c in cameras])
    xc = np.matmul(P[None], np.transpose(Rs, (0, 2, 1))) + ts[:, None, :]
    z = xc[..., 2]
    clamped = z < MIN_DEPTH
    trace.record("depth_clamp", np.packbits(clamped))
    n = int(clamped.sum())
    if n:
        clamp_events.count += n
        log.debug("clamped %d projections to %.1f mm depth", n, MIN_DEPTH)
    zc = np.where(clamped, MIN_DEPTH, z)
    uv = f[:, None, :] * xc[..., :2] / zc[..., None] + cc[:, None, :]

    def bw(g):
        # g [K, P, 2] -> camera-frame gradient -> world
        gx = g[..., 0] * f[:, None, 0] / zc
        gy = g[..., 1] * f[:, None, 1] / zc
        gz = -(g[..., 0] * f[:, None, 0] * xc[..., 0] + g[..., 1] * f[:, None, 1] * xc[..., 1]) / zc ** 2
        gz = np.where(clamped, 0.0, gz)
        gc = np.stack([gx, gy, gz], axis=-1)
        return (np.matmul(gc, Rs).sum(axis=0),)
    return make(uv, (points,), "project", bw)


@dataclass(frozen=True, eq=False)
class Grid3D:
    center: np.ndarray
    spacing: float
    resolution: int
    orientation: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        R = np.eye(3) if self.orientation is None else self.orientation
        object.__setattr__(self, "orientation", _check_rotation(R, "grid orientation"))
        if self.resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        if self.spacing <= 0:
            raise ValueError("grid spacing must be positive")


def lattice_offsets(resolution, spacing):
    """Grid-frame offsets ``[r^3, 3]``, symmetric about zero, x fastest then y then z."""
    a = (np.arange(resolution) - (resolution - 1) / 2.0) * spacing
    z, y, x = np.meshgrid(a, a, a, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def grid_points(grid):
    return grid.center + lattice_offsets(grid.resolution, grid.spacing) @ grid.orientation.T


def random_rotation(seed):
    """Uniform random rotation from a unit quaternion; deterministic per seed."""
    rng = np.random.default_rng(seed)
    return rotation_from_rng(rng)


def rotation_from_rng(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # re-orthonormalize so R^T R = I holds to ~1e-15
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:  # pragma: no cover - svd of a rotation keeps the sign
        u[:, -1] *= -1
        R = u @ vt
    return R
