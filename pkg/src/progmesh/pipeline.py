"""Volumetric feature sampling, the global stage and the iterative local stage."""
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import camera as cam
from .camera import Grid3D, grid_points, lattice_offsets, project_points
from .core import ops
from .core.autodiff import Node, const
from .mesh import Mesh, upsample
from .networks import NetConfig, run_network

log = logging.getLogger(__name__)

FUSION_MODES = ("mean_std", "max")


@dataclass
class PipelineConfig:
    global_center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    global_spacing: float = 10.0
    global_resolution: int = 16
    local_spacing: float = 2.5
    local_resolution: int = 8
    fusion: str = "mean_std"
    levels: int = 2
    rotate_global: bool = False
    rotate_local: bool = True
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        self.global_center = [float(x) for x in self.global_center]
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if not self.local_spacing < self.global_spacing:
            raise ValueError("local spacing must be smaller than global spacing")
        if self.global_resolution % 4 or self.local_resolution % 4:
            raise ValueError("grid resolutions must be divisible by 4 (two downsampling stages)")

    @classmethod
    def for_template(cls, template, levels, global_resolution=16, local_resolution=8,
                     extent_factor=1.2, local_ratio=0.25, **kw):
        """Global grid centred on the template, spanning ``extent_factor`` x its bbox diagonal."""
        spacing = extent_factor * template.bbox_diagonal() / (global_resolution - 1)
        return cls(global_center=template.vertices.mean(0).tolist(), global_spacing=spacing,
                   global_resolution=global_resolution, local_spacing=local_ratio * spacing,
                   local_resolution=local_resolution, levels=levels, **kw)

    def global_grid(self, orientation=None):
        return Grid3D(np.array(self.global_center), self.global_spacing, self.global_resolution, orientation)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ------------------------------------------------------------------ features

def extract_features(images, model):
    """``[K, 3, H, W]`` (or ``[3, H, W]``) images -> feature maps ``[K, 8, H, W]``."""
    x = images if isinstance(images, Node) else const(np.asarray(images, dtype=np.float64))
    return run_network(model.extractor, model.params, x)


def sample_point_features(points, cameras, fmaps, fusion="mean_std"):
    """Project ``points [G, 3]`` into every view, sample and fuse -> ``[G, C_f]``."""
    if len(cameras) == 0:
        raise ValueError("need at least one view")
    uv = project_points(points, cameras)            # [K, G, 2]
    s = ops.bilinear_sample_views(fmaps, uv)        # [K, G, C]
    return ops.fuse_views(s, fusion)


def sample_volume_features(points, cameras, fmaps, fusion="mean_std"):
    """Grid points ``[r^3, 3]`` -> fused feature volume ``[C_f, r, r, r]``."""
    G = points.value.shape[0] if isinstance(points, Node) else len(points)
    r = round(G ** (1.0 / 3.0))
    if r ** 3 != G:
        raise ValueError(f"{G} grid points do not form a cube")
    f = sample_point_features(points, cameras, fmaps, fusion)
    return ops.transpose(ops.reshape(f, (r, r, r, f.value.shape[1])), (3, 0, 1, 2))


# -------------------------------------------------------------------- stages

def global_stage_batch(fmaps_list, cameras_list, model, orientation=None):
    """Batched global stage; returns ``[B, N_0, 3]``."""
    cfg = model.config
    grid = cfg.global_grid(orientation)
    pts = grid_points(grid)
    vols = [sample_volume_features(pts, c, f, cfg.fusion) for f, c in zip(fmaps_list, cameras_list)]
    r = cfg.global_resolution
    vol = ops.reshape(ops.concat([ops.reshape(v, (1,) + v.value.shape) for v in vols], 0),
                      (len(vols), -1, r, r, r))
    logits = run_network(model.global_net, model.params, vol)
    return ops.softmax_expectation(logits, pts)


def global_stage(capture, model, fmaps=None, orientation=None):
    """V_0 ``[N_0, 3]`` in world millimetres."""
    if fmaps is None:
        fmaps = extract_features(capture.stacked(), model)
    out = global_stage_batch([fmaps], [capture.cameras], model, orientation)
    return ops.reshape(out, out.value.shape[1:])


def _rows(x, start, stop):
    return ops.take_rows(x, np.arange(start, stop))


def local_stage_batch(fmaps_list, cameras_list, V_list, level, model, rotation=None,
                      subsets=None, chunk=None):
    """One refinement level for a batch of captures.

    ``V_list`` holds level-k vertex nodes; returns level-(k+1) nodes. With
    ``subsets`` only the listed fine vertices are refined and returned.
    ``chunk`` bounds the number of vertices per network call.
    """
    cfg = model.config
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    off = lattice_offsets(cfg.local_resolution, cfg.local_spacing)   # grid frame
    off_w = off @ R.T
    G = len(off)
    r = cfg.local_resolution
    centers = []
    for b, V in enumerate(V_list):
        if V.value.shape[0] != level.n_coarse:
            raise ValueError(f"level expects {level.n_coarse} coarse vertices, got {V.value.shape[0]}")
        Vt = upsample(V, level)
        if subsets is not None and subsets[b] is not None:
            Vt = ops.take_rows(Vt, subsets[b])
        centers.append(Vt)

    # per-sample sampling, then all vertices through the network in chunks
    vols, counts = [], []
    for Vt, f, c in zip(centers, fmaps_list, cameras_list):
        P = Vt.value.shape[0]
        pts = ops.add(ops.reshape(Vt, (P, 1, 3)), off_w[None])
        feat = sample_point_features(ops.reshape(pts, (P * G, 3)), c, f, cfg.fusion)
        C = feat.value.shape[1]
        vols.append(ops.transpose(ops.reshape(feat, (P, r, r, r, C)), (0, 4, 1, 2, 3)))
        counts.append(P)
    vol = vols[0] if len(vols) == 1 else ops.concat(vols, 0)
    total = sum(counts)
    step = total if not chunk else int(chunk)
    deltas = []
    for s in range(0, total, step):
        part = vol if step >= total else _rows(vol, s, min(total, s + step))
        logits = run_network(model.local_net, model.params, part)
        e = ops.softmax_expectation(logits, off)         # [n, 1, 3] in the grid frame
        e = ops.reshape(e, (e.value.shape[0], 3))
        deltas.append(ops.matmul(e, R.T))
    delta = deltas[0] if len(deltas) == 1 else ops.concat(deltas, 0)
    out, s = [], 0
    for Vt, P in zip(centers, counts):
        d = delta if len(counts) == 1 else _rows(delta, s, s + P)
        out.append(ops.add(Vt, d))
        s += P
    return out


def local_stage(capture, V, level, model, rotation=None, fmaps=None, chunk=None):
    if fmaps is None:
        fmaps = extract_features(capture.stacked(), model)
    V = V if isinstance(V, Node) else const(V)
    return local_stage_batch([fmaps], [capture.cameras], [V], level, model, rotation, chunk=chunk)[0]


@dataclass
class InferenceResult:
    mesh: Mesh
    levels: list           # V_0 .. V_L as arrays
    timings: dict
    clamp_events: int


def infer(capture, model, chunk=256):
    """Full coarse-to-fine inference; the output mesh uses the finest template's faces."""
    hier = model.hierarchy
    if hier.depth != model.config.levels:
        raise ValueError(f"model expects {model.config.levels} levels, hierarchy has {hier.depth}")
    for c, img in zip(capture.cameras, capture.images):
        if img.shape[0] != 3:
            raise ValueError(f"view {c.name!r}: expected 3 channels")
    before = cam.clamp_events.count
    t0 = time.perf_counter()
    fmaps = extract_features(capture.stacked(), model)
    fmaps = const(fmaps.value)
    t1 = time.perf_counter()
    V = global_stage(capture, model, fmaps)
    t2 = time.perf_counter()
    out = [V.value]
    for level in hier.levels:
        V = local_stage(capture, const(V.value), level, model, fmaps=fmaps, chunk=chunk)
        out.append(V.value)
    t3 = time.perf_counter()
    timings = {"features_s": t1 - t0, "global_s": t2 - t1, "local_s": t3 - t2}
    n_clamp = cam.clamp_events.count - before
    log.info("inference: features %.3fs, global %.3fs, local %.3fs", *timings.values())
    return InferenceResult(Mesh(out[-1], hier.full.faces.copy()), out, timings, n_clamp)
