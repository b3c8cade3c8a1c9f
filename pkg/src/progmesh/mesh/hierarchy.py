"""Mesh hierarchies: barycentric embedding (Q), normal displacement (D), upsampling."""
import csv
import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..core import ops
from .bvh import TriangleBVH
from .decimate import decimate
from .mesh import Mesh, load_obj, save_obj, vertex_normals, vertex_normals_op


@dataclass(eq=False)
class HierarchyLevel:
    """Upsampling record from ``template`` (level k) to level k + 1."""
    template: Mesh
    Q: sp.csr_matrix
    D: sp.csr_matrix

    @property
    def n_coarse(self):
        return self.Q.shape[1]

    @property
    def n_fine(self):
        return self.Q.shape[0]


@dataclass(eq=False)
class MeshHierarchy:
    templates: list
    levels: list

    def __post_init__(self):
        counts = [t.n_vertices for t in self.templates]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"vertex counts must increase with level: {counts}")
        if len(self.levels) != len(self.templates) - 1:
            raise ValueError("need exactly one upsampling record between consecutive templates")

    @property
    def depth(self):
        return len(self.levels)

    @property
    def vertex_counts(self):
        return [t.n_vertices for t in self.templates]

    @property
    def full(self):
        return self.templates[-1]


def embed(fine, coarse):
    """Embed ``fine`` vertices in the ``coarse`` surface.

    Row j of Q holds the barycentric weights of fine vertex j's closest point
    on the coarse surface. Row j of D carries the residual's component along
    the interpolated coarse normal m_j, scaled so (D N)_j = (r_j . m̂_j) m̂_j.
    """
    if coarse.n_vertices == 0 or len(coarse.faces) == 0:
        raise ValueError("cannot embed into an empty coarse mesh")
    bvh = TriangleBVH(coarse.vertices, coarse.faces)
    tri, bary, _ = bvh.query(fine.vertices)
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)
    cols = coarse.faces[tri]
    q = np.einsum("pk,pkd->pd", bary, coarse.vertices[cols])
    r = fine.vertices - q
    N = vertex_normals(coarse.vertices, coarse.faces)
    m = np.einsum("pk,pkd->pd", bary, N[cols])
    mlen = np.linalg.norm(m, axis=1)
    if np.any(mlen < 1e-12):
        raise ValueError("interpolated coarse normal vanishes; hierarchy levels disagree too much")
    s = (r * m).sum(1) / mlen
    dvals = (s / mlen)[:, None] * bary

    rows = np.repeat(np.arange(fine.n_vertices), 3)
    keep = bary.ravel() > 0
    shape = (fine.n_vertices, coarse.n_vertices)
    Q = sp.csr_matrix((bary.ravel()[keep], (rows[keep], cols.ravel()[keep])), shape=shape)
    D = sp.csr_matrix((dvals.ravel()[keep], (rows[keep], cols.ravel()[keep])), shape=shape)
    D.eliminate_zeros()
    return HierarchyLevel(template=coarse, Q=Q, D=D)


def upsample(V, level):
    """Ṽ = Q V + D N(V) for coarse vertices ``V`` (array or node) -> node ``[N_fine, 3]``."""
    V = ops._node(V)
    if V.value.shape != (level.n_coarse, 3):
        raise ValueError(f"upsample: got {V.value.shape} vertices, level expects ({level.n_coarse}, 3)")
    N = vertex_normals_op(V, level.template.faces)
    return ops.add(ops.spmm(level.Q, V), ops.spmm(level.D, N))


def build_hierarchy(full, targets):
    """Decimate ``full`` to each of ``targets`` (ascending) and embed level by level."""
    targets = sorted(targets)
    templates = []
    src = full
    for t in reversed(targets):
        src = decimate(src, t)
        templates.append(src)
    templates = templates[::-1] + [full]
    levels = [embed(templates[k + 1], templates[k]) for k in range(len(templates) - 1)]
    return MeshHierarchy(templates, levels)


def _write_triplets(path, M):
    M = M.tocoo()
    order = np.lexsort((M.col, M.row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for i in order:
            w.writerow([int(M.row[i]), int(M.col[i]), repr(float(M.data[i]))])


def _read_triplets(path, shape):
    rows, cols, vals = [], [], []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["row", "col", "value"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for r, c, v in rd:
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def save_hierarchy(hier, directory):
    """Write OBJ templates, triplet CSVs and ``hierarchy.json``; returns the index path."""
    os.makedirs(directory, exist_ok=True)
    index = {"levels": [], "Q": [], "D": []}
    for k, t in enumerate(hier.templates):
        name = f"level_{k}.obj"
        save_obj(t, os.path.join(directory, name))
        index["levels"].append(name)
    for k, lv in enumerate(hier.levels):
        for key, M in (("Q", lv.Q), ("D", lv.D)):
            name = f"{key}_{k}.csv"
            _write_triplets(os.path.join(directory, name), M)
            index[key].append(name)
    path = os.path.join(directory, "hierarchy.json")
    with open(path, "w") as fh:
        json.dump(index, fh, indent=1)
    return path


def load_hierarchy(path):
    if os.path.isdir(path):
        path = os.path.join(path, "hierarchy.json")
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        index = json.load(fh)
    res = lambda p: p if os.path.isabs(p) else os.path.join(base, p)
    templates = [load_obj(res(p)) for p in index["levels"]]
    levels = []
    for k in range(len(templates) - 1):
        shape = (templates[k + 1].n_vertices, templates[k].n_vertices)
        levels.append(HierarchyLevel(templates[k], _read_triplets(res(index["Q"][k]), shape),
                                     _read_triplets(res(index["D"][k]), shape)))
    return MeshHierarchy(templates, levels)


def hierarchy_to_tensors(hier, prefix="hierarchy/"):
    out = {}
    for k, t in enumerate(hier.templates):
        out[f"{prefix}level_{k}/vertices"] = t.vertices
        out[f"{prefix}level_{k}/faces"] = t.faces.astype(np.float64)
    for k, lv in enumerate(hier.levels):
        for key, M in (("Q", lv.Q), ("D", lv.D)):
            c = M.tocoo()
            out[f"{prefix}{key}_{k}"] = np.stack([c.row, c.col, c.data], axis=1).astype(np.float64)
    return out


def hierarchy_from_tensors(tensors, prefix="hierarchy/"):
    templates = []
    k = 0
    while f"{prefix}level_{k}/vertices" in tensors:
        templates.append(Mesh(tensors[f"{prefix}level_{k}/vertices"],
                              tensors[f"{prefix}level_{k}/faces"].astype(np.int64)))
        k += 1
    levels = []
    for k in range(len(templates) - 1):
        shape = (templates[k + 1].n_vertices, templates[k].n_vertices)
        mats = []
        for key in ("Q", "D"):
            t = tensors[f"{prefix}{key}_{k}"].reshape(-1, 3)
            mats.append(sp.csr_matrix((t[:, 2], (t[:, 0].astype(np.int64), t[:, 1].astype(np.int64))),
                                      shape=shape))
        levels.append(HierarchyLevel(templates[k], *mats))
    return MeshHierarchy(templates, levels)
