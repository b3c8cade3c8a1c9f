import logging

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from progmesh.camera import random_rotation
from progmesh.core import ops
from progmesh.core.autodiff import param
from progmesh.mesh import (DecimationError, Mesh, MeshError, MeshHierarchy, TriangleBVH, build_hierarchy,
                           closest_points_brute, decimate, embed, load_hierarchy, load_obj, save_hierarchy,
                           save_obj, upsample, vertex_normals, vertex_normals_op)
from progmesh.synth.template import icosphere, make_template

from conftest import check_grad


@pytest.fixture(scope="module")
def blob():
    return make_template(0, 3)[0]


@pytest.fixture(scope="module")
def hier(blob):
    return build_hierarchy(blob, [42, 162])


# ------------------------------------------------------------------- normals

@pytest.mark.parametrize("level", [0, 1, 4])
def test_icosphere_normals_radial(level):
    # area weighting is off by 1.2e-2 at 642 vertices (skinny-face valence-5 stars); 2562 is within 1e-2
    s = icosphere(level)
    n = vertex_normals(s.vertices, s.faces)
    radial = s.vertices / np.linalg.norm(s.vertices, axis=1, keepdims=True)
    assert np.max(np.linalg.norm(n - radial, axis=1)) < 1e-2
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)


def test_planar_fan_normals_up():
    ang = np.linspace(0, 2 * np.pi, 7)[:-1]
    V = np.vstack([[0, 0, 0], np.stack([np.cos(ang), np.sin(ang), np.zeros(6)], 1)])
    F = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    assert np.allclose(vertex_normals(V, F), [0, 0, 1], atol=1e-15)


def test_zero_area_star_gets_plus_z(caplog):
    V = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    with caplog.at_level(logging.WARNING):
        n = vertex_normals(V, np.array([[0, 1, 2]]))
    assert np.array_equal(n, np.tile([0, 0, 1.0], (3, 1)))
    assert "zero-area" in caplog.text


def test_normals_op_gradient(blob, rng):
    m = decimate(blob, 42)
    V = param(m.vertices.copy())
    proj = rng.normal(size=V.value.shape)
    build = lambda: ops.sum(ops.mul(vertex_normals_op(V, m.faces), proj))
    assert check_grad(build, [V]) <= 1e-5
    assert np.allclose(vertex_normals_op(V, m.faces).value, vertex_normals(m.vertices, m.faces), atol=1e-15)


# ---------------------------------------------------------------- decimation

def test_decimate_icosphere_count_and_deviation():
    s = icosphere(3)
    s = Mesh(s.vertices * 100.0, s.faces)
    d = decimate(s, 162)
    assert abs(d.n_vertices - 162) <= 8
    _, _, d2 = closest_points_brute(d.vertices, s.vertices[s.faces])
    assert np.sqrt(d2).max() < 0.02 * s.bbox_diagonal()


def test_decimate_single_collapse():
    s = icosphere(2)
    d = decimate(s, s.n_vertices - 1)
    assert d.n_vertices == s.n_vertices - 1
    assert len(d.faces) == len(s.faces) - 2   # one edge collapse removes two triangles


def test_decimate_lower_bound():
    tet = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
               np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))
    with pytest.raises(DecimationError):
        decimate(tet, 3)


def test_decimated_mesh_is_watertight(hier):
    for t in hier.templates:
        e = np.concatenate([t.faces[:, [0, 1]], t.faces[:, [1, 2]], t.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        assert np.all(counts == 2)
        assert set(np.unique(t.faces)) == set(range(t.n_vertices))


# ------------------------------------------------------------------ embedding

def test_embed_coincident_vertex():
    coarse = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    lv = embed(Mesh(np.array([[1, 0, 0.0], [0.2, 0.2, 0.0], [0, 1, 0.0]]), np.array([[0, 1, 2]])), coarse)
    assert np.allclose(lv.Q.toarray()[0], [0, 1, 0])
    assert np.allclose(lv.D.toarray()[0], 0)


def test_embed_planar_centroid_height():
    coarse = Mesh(np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0.0]]), np.array([[0, 1, 2]]))
    h = 0.7
    fine = Mesh(np.array([[1, 1, h], [0, 0, 0.0], [3, 0, 0.0]]), np.array([[0, 1, 2]]))
    lv = embed(fine, coarse)
    assert np.allclose(lv.Q.toarray()[0], [1 / 3] * 3, atol=1e-12)
    out = upsample(coarse.vertices, lv).value
    assert np.allclose(out[0], [1, 1, h], atol=1e-12)


def test_embed_empty_coarse_rejected():
    with pytest.raises(ValueError):
        embed(icosphere(1), Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


def test_q_and_d_invariants(hier):
    for lv in hier.levels:
        Q = lv.Q.toarray()
        assert np.all(Q >= 0)
        assert np.allclose(Q.sum(1), 1.0, atol=1e-12)
        assert np.all((Q > 0).sum(1) <= 3)
        D = lv.D.toarray()
        assert np.all((D != 0) <= (Q > 0))
        assert lv.Q.shape[1] == lv.template.n_vertices


def test_residual_orthogonal_to_interpolated_normal(hier):
    for k, lv in enumerate(hier.levels):
        fine = hier.templates[k + 1]
        coarse = lv.template
        N = vertex_normals(coarse.vertices, coarse.faces)
        q = lv.Q @ coarse.vertices
        m = lv.Q @ N
        mhat = m / np.linalg.norm(m, axis=1, keepdims=True)
        res = fine.vertices - upsample(coarse.vertices, lv).value
        assert np.max(np.abs((res * mhat).sum(1))) <= 1e-9
        # the tangential part is what Q alone leaves behind
        assert np.all(np.linalg.norm(fine.vertices - q, axis=1) + 1e-12 >= np.linalg.norm(res, axis=1))


def test_hierarchy_structure(hier, blob):
    assert hier.vertex_counts == [42, 162, 642]
    assert hier.full is blob or np.array_equal(hier.full.vertices, blob.vertices)
    with pytest.raises(ValueError):
        MeshHierarchy([hier.templates[1], hier.templates[0]], [hier.levels[0]])


# ------------------------------------------------------------------ upsample

def test_upsample_pure_barycentric_lies_on_coarse_surface(hier, rng):
    lv = hier.levels[0]
    zero = type(lv)(lv.template, lv.Q, sp.csr_matrix(lv.D.shape))
    V = lv.template.vertices + rng.normal(size=lv.template.vertices.shape)
    out = upsample(V, zero).value
    Q = lv.Q.tocsr()
    for j in range(0, out.shape[0], 7):
        cols = Q.indices[Q.indptr[j]:Q.indptr[j + 1]]
        w = Q.data[Q.indptr[j]:Q.indptr[j + 1]]
        assert np.allclose(out[j], w @ V[cols], atol=1e-12)
        # all support vertices belong to one coarse face
        assert any(set(cols) <= set(f) for f in lv.template.faces)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_upsample_rigid_equivariance(hier, seed):
    r = np.random.default_rng(seed)
    lv = hier.levels[1]
    V = lv.template.vertices + r.normal(size=lv.template.vertices.shape)
    R, t = random_rotation(seed), r.normal(size=3) * 50
    base = upsample(V, lv).value
    assert np.allclose(upsample(V @ R.T, lv).value, base @ R.T, atol=1e-9)
    assert np.allclose(upsample(V + t, lv).value, base + t, atol=1e-9)


def test_upsample_shape_mismatch(hier):
    with pytest.raises(ValueError):
        upsample(np.zeros((10, 3)), hier.levels[0])


def test_upsample_gradient(hier, rng):
    lv = hier.levels[0]
    V = param(lv.template.vertices + rng.normal(size=lv.template.vertices.shape))
    proj = rng.normal(size=(lv.n_fine, 3))
    assert check_grad(lambda: ops.sum(ops.mul(upsample(V, lv), proj)), [V]) <= 1e-5


# ----------------------------------------------------------------------- I/O

def test_obj_round_trip(tmp_path, blob):
    save_obj(blob, tmp_path / "m.obj")
    back = load_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, blob.faces)
    assert np.array_equal(back.vertices, blob.vertices)   # %.17g is exact


def test_obj_quad_face_error(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match=":5:"):
        load_obj(p)


def test_obj_slash_indices_and_unknown_records(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("# comment\no thing\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\n"
                 "usemtl x\nf 1/1/1 2/1/1 3//1\n")
    m = load_obj(p)
    assert m.faces.tolist() == [[0, 1, 2]] and m.n_vertices == 3


def test_mesh_validation():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


def test_hierarchy_file_round_trip(tmp_path, hier):
    import json
    save_hierarchy(hier, tmp_path / "h")
    index = json.loads((tmp_path / "h" / "hierarchy.json").read_text())
    assert set(index) == {"levels", "Q", "D"} and len(index["Q"]) == 2
    assert (tmp_path / "h" / index["Q"][0]).read_text().startswith("row,col,value\n")
    back = load_hierarchy(tmp_path / "h")
    assert back.vertex_counts == hier.vertex_counts
    for a, b in zip(hier.levels, back.levels):
        assert (a.Q != b.Q).nnz == 0 and (a.D != b.D).nnz == 0


# ------------------------------------------------------------------------ BVH

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_bvh_equals_brute_force(seed):
    r = np.random.default_rng(seed)
    s = icosphere(2)
    V = s.vertices * r.uniform(20, 80) + r.normal(size=s.vertices.shape) * 3
    tree = TriangleBVH(V, s.faces)
    pts = r.normal(size=(100, 3)) * 60
    tri, bary, d = tree.traverse(pts)
    _, _, d2 = closest_points_brute(pts, V[s.faces])
    assert np.allclose(d, np.sqrt(d2), atol=1e-9, rtol=0)
    assert np.allclose(tree.query(pts)[2], d, atol=1e-9, rtol=0)
    # the reported closest point really is at that distance
    cp = np.einsum("pk,pkd->pd", bary, tree.tris[tri])
    assert np.allclose(np.linalg.norm(cp - pts, axis=1), d, atol=1e-9, rtol=0)


def test_bvh_empty_mesh_rejected():
    with pytest.raises(ValueError):
        TriangleBVH(np.zeros((3, 3)), np.zeros((0, 3), int))
