"""The numba kernels against their pure-numpy twins.

In-process tests call both variants directly (without numba the ``_nb``
functions run interpreted, so sizes stay small). The subprocess test runs the
whole pipeline under ``PROGMESH_NUMBA=0`` and compares with this process.
"""
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from progmesh import _accel
from progmesh.core import kernels
from progmesh.mesh import TriangleBVH, closest_points_brute
from progmesh.synth import render
from progmesh.synth.template import icosphere


def _uv(rng, K, P, H, W):
    uv = rng.uniform(-2, max(H, W) + 2, size=(K, P, 2))
    uv[:, :5] = np.round(uv[:, :5])          # exact lattice points
    uv[:, 5, 0] = W - 1                      # last column / row edge cases
    uv[:, 6, 1] = H - 1
    return uv


def test_bilinear_forward_parity(rng):
    fm = rng.normal(size=(2, 9, 7, 3))
    uv = _uv(rng, 2, 40, 9, 7)
    a = kernels.bilinear_forward_np(fm, uv)
    b = kernels.bilinear_forward_nb(fm, uv)
    assert a.shape == b.shape == (2, 40, 3)
    assert np.allclose(a, b, rtol=0, atol=1e-13)


def test_bilinear_backward_parity(rng):
    fm = rng.normal(size=(2, 9, 7, 3))
    uv = _uv(rng, 2, 40, 9, 7)
    g = rng.normal(size=(2, 40, 3))
    for x, y in zip(kernels.bilinear_backward_np(fm, uv, g), kernels.bilinear_backward_nb(fm, uv, g)):
        assert x.shape == y.shape
        assert np.allclose(x, y, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_col2im_parity_bitwise(rng, stride):
    O = 3
    dcol = rng.normal(size=(2, O, O, O, 4, 3, 3, 3))
    n = stride * (O - 1) + 3
    shape = (2, 4, n, n, n)
    assert np.array_equal(kernels.col2im_np(dcol, shape, stride), kernels.col2im_nb(dcol, shape, stride))


def test_raster_parity():
    sph = icosphere(1)
    V = sph.vertices * 100.0 + np.array([0.0, 0.0, 400.0])
    uv = np.stack([90 * V[:, 0] / V[:, 2] + 12, 90 * V[:, 1] / V[:, 2] + 12], 1)
    xy = np.ascontiguousarray(uv[sph.faces])
    inv_z = np.ascontiguousarray((1.0 / V[:, 2])[sph.faces])
    a = render._raster_np(xy, inv_z, 24, 24)
    b = render._raster_nb(xy, inv_z, 24, 24)
    assert np.array_equal(a[0], b[0])
    assert (a[0] >= 0).sum() > 100
    assert np.allclose(a[1], b[1], rtol=0, atol=1e-12)
    assert np.array_equal(np.isinf(a[2]), np.isinf(b[2]))
    fin = np.isfinite(a[2])
    assert np.allclose(a[2][fin], b[2][fin], rtol=0, atol=1e-12)


def test_bvh_traversal_matches_backend_query(rng):
    sph = icosphere(2)
    tree = TriangleBVH(sph.vertices * 50.0, sph.faces)
    pts = rng.normal(size=(60, 3)) * 70.0
    d_walk = tree.traverse(pts)[2]
    d_brute = np.sqrt(closest_points_brute(pts, tree.tris)[2])
    assert np.allclose(d_walk, d_brute, rtol=0, atol=1e-9)
    assert np.allclose(tree.query(pts)[2], d_brute, rtol=0, atol=1e-9)


def test_dispatch_follows_flag():
    if _accel.NUMBA_ENABLED:
        assert kernels.bilinear_forward is kernels.bilinear_forward_nb
        assert _accel.backend() == "numba"
    else:
        assert kernels.bilinear_forward is kernels.bilinear_forward_np
        assert _accel.backend() == "numpy"


_SCRIPT = """
import json, sys
import numpy as np
from progmesh import _accel
from progmesh.gradcheck import tiny_setup, full_loss
from progmesh.core.autodiff import backward
from progmesh.pipeline import infer
model, sample = tiny_setup(1)
res = infer(sample.capture, model)
loss = full_loss(model, sample)
g = {n.name: v for n, v in backward(loss).items()}
np.savez(sys.argv[1], V=res.mesh.vertices, loss=loss.value,
         grad=g["global/out/w"], img=sample.capture.images[0])
print(json.dumps({"backend": _accel.backend()}))
"""


def _run(tmp_path, flag):
    out = tmp_path / f"run_{flag}.npz"
    env = dict(os.environ, PROGMESH_NUMBA=flag)
    r = subprocess.run([sys.executable, "-c", _SCRIPT, str(out)], env=env, capture_output=True, text=True,
                       timeout=600)
    assert r.returncode == 0, r.stderr
    return json.loads(r.stdout.strip().splitlines()[-1])["backend"], np.load(out)


def test_numpy_backend_end_to_end_matches_numba(tmp_path):
    name0, a = _run(tmp_path, "0")
    name1, b = _run(tmp_path, "1")
    assert name0 == "numpy" and name1 == "numba"
    assert np.allclose(a["img"], b["img"], rtol=0, atol=1e-12)      # rasterizer
    assert np.allclose(a["V"], b["V"], rtol=0, atol=1e-9)           # sampling, conv, soft-argmax
    assert abs(float(a["loss"]) - float(b["loss"])) <= 1e-9 * max(1.0, abs(float(b["loss"])))
    assert np.allclose(a["grad"], b["grad"], rtol=1e-8, atol=1e-12)  # backward kernels
