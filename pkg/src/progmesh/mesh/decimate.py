"""Quadric-error edge collapse followed by projection onto the input surface."""
import heapq
import itertools

import numpy as np

from .bvh import TriangleBVH
from .mesh import Mesh, face_normals

MIN_VERTICES = 4


class DecimationError(ValueError):
    def __init__(self, msg, achieved=None):
        super().__init__(msg)
        self.achieved = achieved


def _plane_quadrics(V, F):
    n = face_normals(V, F)
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(ln > 0, ln, 1.0)
    d = -(n * V[F[:, 0]]).sum(1)
    p = np.concatenate([n, d[:, None]], axis=1)
    Kp = p[:, :, None] * p[:, None, :]
    Q = np.zeros((len(V), 4, 4))
    for j in range(3):
        np.add.at(Q, F[:, j], Kp)
    return Q


def _best_position(Qe, a, b):
    A = Qe.copy()
    A[3] = (0, 0, 0, 1)
    cands = [a, b, 0.5 * (a + b)]
    if abs(np.linalg.det(A)) > 1e-12:
        x = np.linalg.solve(A, np.array([0.0, 0.0, 0.0, 1.0]))[:3]
        # keep the optimum only when it stays near the edge
        if np.linalg.norm(x - 0.5 * (a + b)) <= np.linalg.norm(b - a):
            cands.insert(0, x)
    best, bcost = None, np.inf
    for c in cands:
        h = np.append(c, 1.0)
        cost = float(h @ Qe @ h)
        if cost < bcost - 1e-15:
            best, bcost = c, cost
    return best, max(bcost, 0.0)


def decimate(mesh, target):
    """Collapse edges by quadric error until ``target`` vertices remain.

    Surviving vertices are projected back onto the input surface. Raises
    :class:`DecimationError` when the target is out of range or no valid
    collapse remains before reaching it.
    """
    N = mesh.n_vertices
    if target < MIN_VERTICES:
        raise DecimationError(f"target {target} below the minimum of {MIN_VERTICES} vertices",
                              achieved=None)
    if target >= N:
        raise DecimationError(f"target {target} must be below the input vertex count {N}")
    V = mesh.vertices.copy()
    F = mesh.faces.copy()
    Q = _plane_quadrics(V, F)
    alive_v = np.ones(N, dtype=bool)
    alive_f = np.ones(len(F), dtype=bool)
    vfaces = [set() for _ in range(N)]
    for fi, f in enumerate(F):
        for v in f:
            vfaces[v].add(fi)
    version = np.zeros(N, dtype=np.int64)

    def neighbors(v):
        out = set()
        for fi in vfaces[v]:
            out.update(F[fi])
        out.discard(v)
        return out

    heap = []
    tick = itertools.count()

    def push(u, v):
        if u > v:
            u, v = v, u
        pos, cost = _best_position(Q[u] + Q[v], V[u], V[v])
        heapq.heappush(heap, (cost, u, v, next(tick), version[u], version[v], pos))

    for u, v in mesh.edges():
        push(int(u), int(v))

    count = N
    while count > target:
        if not heap:
            raise DecimationError(
                f"could not reach {target} vertices; stopped at {count}", achieved=count)
        cost, u, v, _, vu, vv, pos = heapq.heappop(heap)
        if not (alive_v[u] and alive_v[v]) or version[u] != vu or version[v] != vv:
            continue
        shared = vfaces[u] & vfaces[v]
        if not shared:
            continue
        nu, nv = neighbors(u), neighbors(v)
        common = nu & nv
        opp = set()
        for fi in shared:
            opp.update(F[fi])
        opp -= {u, v}
        # link condition keeps the surface manifold
        if common != opp or len(nu | nv) - 2 < 3:
            continue
        # reject collapses that flip or crush a surviving face
        ok = True
        for w in (u, v):
            for fi in vfaces[w] - shared:
                f = F[fi]
                tri = V[f].copy()
                before = np.cross(tri[1] - tri[0], tri[2] - tri[0])
                tri[list(f).index(w)] = pos
                after = np.cross(tri[1] - tri[0], tri[2] - tri[0])
                la, lb = np.linalg.norm(after), np.linalg.norm(before)
                if la <= 1e-12 * max(lb, 1e-300) or np.dot(before, after) <= 0.2 * la * lb:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        for fi in shared:
            alive_f[fi] = False
            for w in F[fi]:
                vfaces[w].discard(fi)
        for fi in vfaces[v]:
            F[fi][F[fi] == v] = u
            vfaces[u].add(fi)
        vfaces[v] = set()
        alive_v[v] = False
        V[u] = pos
        Q[u] = Q[u] + Q[v]
        version[u] += 1
        count -= 1
        for w in neighbors(u):
            push(u, int(w))

    keep = np.flatnonzero(alive_v)
    remap = -np.ones(N, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    faces = remap[F[alive_f]]
    bvh = TriangleBVH(mesh.vertices, mesh.faces)
    proj, _, _, _ = bvh.closest_points(V[keep])
    return Mesh(proj, faces)
