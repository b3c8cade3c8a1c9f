"""Z-buffered triangle rasterizer with perspective-correct interpolation."""
import numpy as np

from .._accel import NUMBA_ENABLED, njit
from ..mesh.mesh import vertex_normals

NEAR = 1.0
LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
AMBIENT = 0.75


@njit
def _raster_nb(xy, inv_z, H, W):
    F = xy.shape[0]
    tri_id = -np.ones((H, W), dtype=np.int64)
    bary = np.zeros((H, W, 3))
    depth = np.full((H, W), np.inf)
    for f in range(F):
        x0, y0 = xy[f, 0, 0], xy[f, 0, 1]
        x1, y1 = xy[f, 1, 0], xy[f, 1, 1]
        x2, y2 = xy[f, 2, 0], xy[f, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), W - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), H - 1)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
                w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                iz = w0 * inv_z[f, 0] + w1 * inv_z[f, 1] + w2 * inv_z[f, 2]
                z = 1.0 / iz
                if z < depth[py, px]:
                    depth[py, px] = z
                    tri_id[py, px] = f
                    bary[py, px, 0] = w0 * inv_z[f, 0] * z
                    bary[py, px, 1] = w1 * inv_z[f, 1] * z
                    bary[py, px, 2] = w2 * inv_z[f, 2] * z
    return tri_id, bary, depth


def _raster_np(xy, inv_z, H, W):
    tri_id = -np.ones((H, W), dtype=np.int64)
    bary = np.zeros((H, W, 3))
    depth = np.full((H, W), np.inf)
    for f in range(len(xy)):
        (x0, y0), (x1, y1), (x2, y2) = xy[f]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), W - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), H - 1)
        if xmax < xmin or ymax < ymin:
            continue
        py, px = np.mgrid[ymin:ymax + 1, xmin:xmax + 1].astype(np.float64)
        w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
        w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
        w2 = 1.0 - w0 - w1
        iz = w0 * inv_z[f, 0] + w1 * inv_z[f, 1] + w2 * inv_z[f, 2]
        with np.errstate(divide="ignore"):
            z = 1.0 / iz
        win = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (z < depth[ymin:ymax + 1, xmin:xmax + 1])
        if not win.any():
            continue
        yy, xx = py[win].astype(np.int64), px[win].astype(np.int64)
        zz = z[win]
        depth[yy, xx] = zz
        tri_id[yy, xx] = f
        bary[yy, xx, 0] = w0[win] * inv_z[f, 0] * zz
        bary[yy, xx, 1] = w1[win] * inv_z[f, 1] * zz
        bary[yy, xx, 2] = w2[win] * inv_z[f, 2] * zz
    return tri_id, bary, depth


def rasterize(vertices, faces, camera):
    """Per-pixel nearest triangle, perspective-correct barycentrics and depth."""
    xc = vertices @ camera.R.T + camera.t
    z = xc[:, 2]
    if np.any(z <= NEAR):
        raise ValueError(f"mesh behind camera {camera.name!r}")
    uv = np.stack([camera.K[0, 0] * xc[:, 0] / z + camera.K[0, 2],
                   camera.K[1, 1] * xc[:, 1] / z + camera.K[1, 2]], axis=1)
    xy = np.ascontiguousarray(uv[faces])
    inv_z = np.ascontiguousarray((1.0 / z)[faces])
    fn = _raster_nb if NUMBA_ENABLED else _raster_np
    return fn(xy, inv_z, camera.height, camera.width)


class ProceduralTexture:
    """Sum-of-sinusoids 3D albedo, evaluated at template-space positions."""

    def __init__(self, seed, n_waves=4, wavelengths=(25.0, 60.0), amplitude=0.12):
        rng = np.random.default_rng(seed)
        k = rng.normal(size=(3, n_waves, 3))
        k /= np.linalg.norm(k, axis=2, keepdims=True)
        lam = rng.uniform(*wavelengths, size=(3, n_waves, 1))
        self.k = 2 * np.pi * k / lam
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amplitude = amplitude

    def __call__(self, points):
        s = np.sin(np.einsum("cwd,pd->pcw", self.k, points) + self.phase)
        return np.clip(0.5 + self.amplitude * s.sum(-1), 0.0, 1.0)


def shade(normals):
    return AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, None)


def render_view(mesh, template_vertices, camera, texture):
    """Render one ``[3, H, W]`` image; background is exactly 0."""
    tri, bary, _ = rasterize(mesh.vertices, mesh.faces, camera)
    img = np.zeros((camera.height, camera.width, 3))
    hit = tri >= 0
    if hit.any():
        f = mesh.faces[tri[hit]]
        w = bary[hit]
        tpos = np.einsum("pk,pkd->pd", w, template_vertices[f])
        nrm = np.einsum("pk,pkd->pd", w, vertex_normals(mesh.vertices, mesh.faces)[f])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        img[hit] = texture(tpos) * shade(nrm)[:, None]
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def render_views(mesh, cameras, texture_seed, template_vertices=None):
    """Render ``mesh`` in every camera; texture is anchored to ``template_vertices``."""
    bad = []
    for i, cam in enumerate(cameras):
        z = (mesh.vertices @ cam.R.T + cam.t)[:, 2]
        if np.any(z <= NEAR):
            bad.append(cam.name or str(i))
    if bad:
        raise ValueError(f"mesh behind camera in views: {', '.join(bad)}")
    tex = texture_seed if isinstance(texture_seed, ProceduralTexture) else ProceduralTexture(texture_seed)
    tv = mesh.vertices if template_vertices is None else template_vertices
    return [render_view(mesh, tv, cam, tex) for cam in cameras]
