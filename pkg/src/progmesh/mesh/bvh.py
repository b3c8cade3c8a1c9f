"""Closest-point queries on triangle meshes.

A median-split BVH (leaves of at most 4 triangles) is traversed by a numba
kernel; with numba disabled the same queries run as a chunked brute-force
numpy scan. Both return the same triangle choice: exact distance ties go to
the lowest triangle index.
"""
import numpy as np

from .._accel import NUMBA_ENABLED, njit

LEAF_SIZE = 4


@njit
def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p, with barycentric weights (Ericson)."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


def build_bvh(tris):
    """Build a BVH over ``tris [F, 3, 3]``; returns a dict of flat arrays."""
    F = len(tris)
    cent = tris.mean(axis=1)
    lo_t = tris.min(axis=1)
    hi_t = tris.max(axis=1)
    order = np.arange(F)
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(idx):
        bmin.append(lo_t[idx].min(0))
        bmax.append(hi_t[idx].max(0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(bmin) - 1

    # explicit stack; segments of `order` are partitioned in place
    root = new_node(order)
    stack = [(root, 0, F)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        if e - s <= LEAF_SIZE:
            start[node], count[node] = s, e - s
            continue
        ext = cent[idx].max(0) - cent[idx].min(0)
        axis = int(np.argmax(ext))
        # stable sort keeps construction deterministic under equal keys
        srt = idx[np.argsort(cent[idx, axis], kind="stable")]
        order[s:e] = srt
        mid = s + (e - s) // 2
        ln = new_node(order[s:mid])
        rn = new_node(order[mid:e])
        left[node], right[node] = ln, rn
        stack.append((rn, mid, e))
        stack.append((ln, s, mid))
    return {
        "bmin": np.array(bmin), "bmax": np.array(bmax),
        "left": np.array(left, dtype=np.int64), "right": np.array(right, dtype=np.int64),
        "start": np.array(start, dtype=np.int64), "count": np.array(count, dtype=np.int64),
        "order": order.astype(np.int64),
    }


@njit
def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            t = lo[k] - p[k]
            d += t * t
        elif p[k] > hi[k]:
            t = p[k] - hi[k]
            d += t * t
    return d


@njit
def _query_bvh(points, tris, bmin, bmax, left, right, start, count, order):
    P = points.shape[0]
    out_tri = np.empty(P, dtype=np.int64)
    out_bary = np.empty((P, 3))
    out_d2 = np.empty(P)
    stack = np.empty(128, dtype=np.int64)
    for i in range(P):
        p = points[i]
        best = np.inf
        best_t = -1
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, bmin[node], bmax[node]) > best:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t = order[j]
                    a = tris[t, 0]
                    b = tris[t, 1]
                    c = tris[t, 2]
                    u, v, w = _closest_on_triangle(p, a, b, c)
                    d2 = 0.0
                    for k in range(3):
                        q = u * a[k] + v * b[k] + w * c[k] - p[k]
                        d2 += q * q
                    if d2 < best or (d2 == best and t < best_t):
                        best = d2
                        best_t = t
                        b0 = u
                        b1 = v
                        b2 = w
            else:
                l = left[node]
                r = right[node]
                dl = _box_dist2(p, bmin[l], bmax[l])
                dr = _box_dist2(p, bmin[r], bmax[r])
                # push the farther child first so the nearer is visited first
                if dl <= dr:
                    stack[sp] = r
                    stack[sp + 1] = l
                else:
                    stack[sp] = l
                    stack[sp + 1] = r
                sp += 2
        out_tri[i] = best_t
        out_bary[i, 0] = b0
        out_bary[i, 1] = b1
        out_bary[i, 2] = b2
        out_d2[i] = best
    return out_tri, out_bary, out_d2


def _closest_bary_np(p, a, b, c):
    """Vectorized Ericson: ``p [n,3]`` against triangles ``a, b, c [n,3]``."""
    dot = lambda x, y: (x * y).sum(-1)
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    n = len(p)
    bary = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def put(mask, u, v, w):
        m = mask & ~done
        bary[m, 0] = np.broadcast_to(u, n)[m]
        bary[m, 1] = np.broadcast_to(v, n)[m]
        bary[m, 2] = np.broadcast_to(w, n)[m]
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        put((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v, v, 0.0)
        put((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - w, 0.0, w)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - w, w)
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        put(np.ones(n, dtype=bool), 1.0 - v - w, v, w)
    return bary


def closest_points_brute(points, tris, chunk=64):
    """Exhaustive closest-point scan; same contract as :meth:`TriangleBVH.query`."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    F = len(tris)
    P = len(points)
    out_tri = np.empty(P, dtype=np.int64)
    out_bary = np.empty((P, 3))
    out_d2 = np.empty(P)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    for s in range(0, P, chunk):
        pts = points[s:s + chunk]
        m = len(pts)
        pp = np.repeat(pts, F, axis=0)
        bary = _closest_bary_np(pp, np.tile(a, (m, 1)), np.tile(b, (m, 1)), np.tile(c, (m, 1)))
        q = (bary[:, 0:1] * np.tile(a, (m, 1)) + bary[:, 1:2] * np.tile(b, (m, 1))
             + bary[:, 2:3] * np.tile(c, (m, 1)))
        d2 = ((q - pp) ** 2).sum(1).reshape(m, F)
        # argmin returns the first (lowest index) minimum
        t = d2.argmin(axis=1)
        out_tri[s:s + m] = t
        out_d2[s:s + m] = d2[np.arange(m), t]
        out_bary[s:s + m] = bary.reshape(m, F, 3)[np.arange(m), t]
    return out_tri, out_bary, out_d2


class TriangleBVH:
    def __init__(self, vertices, faces):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if len(self.faces) == 0:
            raise ValueError("closest-point search on an empty mesh")
        self.tris = np.ascontiguousarray(self.vertices[self.faces])
        self.nodes = build_bvh(self.tris)

    def query(self, points):
        """Closest surface point per query.

        Returns ``(tri_index [P], barycentric [P, 3], distance [P])``; the
        closest point is ``bary @ tris[tri_index]``.
        """
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if NUMBA_ENABLED:
            tri, bary, d2 = self._walk(points)
        else:
            # interpreted traversal is slower than the vectorized scan
            tri, bary, d2 = closest_points_brute(points, self.tris)
        return tri, bary, np.sqrt(d2)

    def traverse(self, points):
        """Like :meth:`query` but always walks the tree, whatever the backend."""
        tri, bary, d2 = self._walk(np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3))
        return tri, bary, np.sqrt(d2)

    def _walk(self, points):
        n = self.nodes
        return _query_bvh(points, self.tris, n["bmin"], n["bmax"], n["left"], n["right"],
                          n["start"], n["count"], n["order"])

    def closest_points(self, points):
        tri, bary, d = self.query(points)
        return np.einsum("pk,pkd->pd", bary, self.tris[tri]), tri, bary, d
