"""Numba vs pure-numpy timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both paths are called in one process (the numpy path is what
``PROGMESH_NUMBA=0`` selects), and their outputs are compared before timing.
"""
import argparse
import json
import time

import numpy as np

from progmesh import _accel
from progmesh.core import kernels
from progmesh.mesh import bvh
from progmesh.synth import render
from progmesh.synth.template import icosphere


def _best(fn, repeat):
    fn()  # warm-up (JIT compile on the first call)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _cases(rng):
    K, H, W, C, P = 4, 64, 64, 8, 20000
    fm = rng.normal(size=(K, H, W, C))
    uv = rng.uniform(-2, W + 2, size=(K, P, 2))
    g = rng.normal(size=(K, P, C))
    yield ("bilinear forward", lambda: kernels.bilinear_forward_np(fm, uv),
           lambda: kernels.bilinear_forward_nb(fm, uv))
    yield ("bilinear backward", lambda: kernels.bilinear_backward_np(fm, uv, g),
           lambda: kernels.bilinear_backward_nb(fm, uv, g))

    dcol = rng.normal(size=(2, 8, 8, 8, 16, 3, 3, 3))
    shape = (2, 16, 17, 17, 17)
    yield ("col2im 3x3x3 s2", lambda: kernels.col2im_np(dcol, shape, 2),
           lambda: kernels.col2im_nb(dcol, shape, 2))

    sph = icosphere(4)
    V = sph.vertices * 100.0 + np.array([0.0, 0.0, 400.0])
    f = 300.0
    uvz = np.stack([f * V[:, 0] / V[:, 2] + 64, f * V[:, 1] / V[:, 2] + 64], 1)
    xy = np.ascontiguousarray(uvz[sph.faces])
    inv_z = np.ascontiguousarray((1.0 / V[:, 2])[sph.faces])
    yield ("rasterize 128^2", lambda: render._raster_np(xy, inv_z, 128, 128),
           lambda: render._raster_nb(xy, inv_z, 128, 128))

    tree = bvh.TriangleBVH(sph.vertices * 100.0, sph.faces)
    pts = rng.normal(size=(500, 3)) * 120.0
    n = tree.nodes

    def bvh_nb():
        return bvh._query_bvh(pts, tree.tris, n["bmin"], n["bmax"], n["left"], n["right"],
                              n["start"], n["count"], n["order"])
    yield ("closest point (brute vs BVH)", lambda: bvh.closest_points_brute(pts, tree.tris), bvh_nb)


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    out = 0.0
    for x, y in zip(a, b):
        x, y = np.asarray(x, float), np.asarray(y, float)
        with np.errstate(invalid="ignore"):
            d = np.where(x == y, 0.0, np.abs(x - y))  # equal infinities (empty depth) count as 0
        out = max(out, float(np.max(d)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args()
    if not _accel.NUMBA_ENABLED:
        raise SystemExit("numba path disabled (PROGMESH_NUMBA=0); nothing to compare")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, f_np, f_nb in _cases(rng):
        diff = _agree(f_np(), f_nb())
        t_np, t_nb = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "max_abs_diff": diff})
        print(f"{name:32s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.1f} {diff:11.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
