import logging
from dataclasses import dataclass

import numpy as np

from ..core.autodiff import make
from ..core.ops import _node

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces)

    def triangles(self):
        return self.vertices[self.faces]

    def edges(self):
        """Unique undirected edges, sorted ``[E, 2]``."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


def face_normals(vertices, faces):
    """Unnormalized face normals; magnitude is twice the triangle area."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return np.cross(b - a, c - a)


def _accumulate(faces, per_face, n):
    out = np.zeros((n, 3))
    for j in range(3):
        for d in range(3):
            out[:, d] += np.bincount(faces[:, j], weights=per_face[:, d], minlength=n)
    return out


def vertex_normals(vertices, faces):
    """Area-weighted unit vertex normals (plain numpy)."""
    m = _accumulate(faces, face_normals(vertices, faces), len(vertices))
    norm = np.linalg.norm(m, axis=1)
    bad = norm <= 1e-300
    if np.any(bad):
        log.warning("%d vertices with a zero-area star; normal set to +z", int(bad.sum()))
    out = np.where(bad[:, None], 0.0, m / np.where(bad, 1.0, norm)[:, None])
    out[bad] = (0.0, 0.0, 1.0)
    return out


def vertex_normals_op(V, faces):
    """Differentiable area-weighted vertex normals of a ``[N, 3]`` node."""
    V = _node(V)
    v = V.value
    faces = np.asarray(faces, dtype=np.int64)
    n = len(v)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    e1, e2 = b - a, c - a
    fn = np.cross(e1, e2)
    m = _accumulate(faces, fn, n)
    norm = np.linalg.norm(m, axis=1)
    bad = norm <= 1e-300
    if np.any(bad):
        log.warning("%d vertices with a zero-area star; normal set to +z", int(bad.sum()))
    safe = np.where(bad, 1.0, norm)
    out = m / safe[:, None]
    out[bad] = (0.0, 0.0, 1.0)

    def bw(g):
        # d(m/|m|) = (I - n n^T) dm / |m|
        gm = (g - out * (g * out).sum(1, keepdims=True)) / safe[:, None]
        gm[bad] = 0.0
        G = gm[faces[:, 0]] + gm[faces[:, 1]] + gm[faces[:, 2]]
        ge1 = np.cross(e2, G)
        ge2 = np.cross(G, e1)
        per = np.zeros((len(faces), 3, 3))
        per[:, 0] = -(ge1 + ge2)
        per[:, 1] = ge1
        per[:, 2] = ge2
        gv = np.zeros((n, 3))
        for j in range(3):
            for d in range(3):
                gv[:, d] += np.bincount(faces[:, j], weights=per[:, j, d], minlength=n)
        return (gv,)
    return make(out, (V,), "vertex_normals", bw)


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{lineno}: only triangular faces are supported "
                                    f"(got {len(idx)} vertices)")
                faces.append([int(tok.split("/")[0]) - 1 for tok in idx])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh, path):
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
