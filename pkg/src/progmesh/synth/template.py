import numpy as np

from ..mesh import Mesh

TEMPLATE_RADIUS = 100.0

# 16 fixed directions for landmark picking
LANDMARK_DIRECTIONS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    + [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
    + [[0, 1, 1], [0, -1, 1]], dtype=np.float64)
LANDMARK_DIRECTIONS /= np.linalg.norm(LANDMARK_DIRECTIONS, axis=1, keepdims=True)


def icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(subdivisions):
    """Unit icosphere; 10 * 4**s + 2 vertices, outward CCW faces."""
    v, f = icosahedron()
    verts = list(v)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(nf, dtype=np.int64)
    return Mesh(np.array(verts), f)


def _blob_radius(dirs, rng):
    """Smooth asymmetric radial profile; a few Gaussian bumps on the sphere."""
    r = np.ones(len(dirs))
    centers = rng.normal(size=(5, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    amps = rng.uniform(-0.12, 0.18, size=5)
    widths = rng.uniform(0.5, 0.9, size=5)
    for c, a, w in zip(centers, amps, widths):
        r += a * np.exp(-((dirs - c) ** 2).sum(1) / w ** 2)
    # a protrusion toward +z, loosely a nose
    r += 0.22 * np.exp(-((dirs - np.array([0.0, 0.15, 1.0]) / np.hypot(0.15, 1.0)) ** 2).sum(1) / 0.12)
    return r


def make_template(seed=0, subdivisions=3):
    """Deformed icosphere (fixed per seed) plus 16 landmark vertex indices."""
    if not 1 <= subdivisions <= 4:
        raise ValueError("subdivisions must be in [1, 4]")
    sph = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    dirs = sph.vertices
    r = _blob_radius(dirs, rng)
    scale = np.array([0.8, 1.0, 0.9])
    V = TEMPLATE_RADIUS * dirs * r[:, None] * scale
    mesh = Mesh(V, sph.faces)
    return mesh, pick_landmarks(V)


def pick_landmarks(V):
    centered = V - V.mean(0)
    out = []
    for d in LANDMARK_DIRECTIONS:
        for i in np.argsort(-(centered @ d), kind="stable"):
            if int(i) not in out:
                out.append(int(i))
                break
    return out
