"""Synthetic multi-view capture datasets.

Layout::

    <root>/dataset.json            generator settings
    <root>/rig.json                camera rig
    <root>/hierarchy/...           mesh hierarchy (OBJ + triplet CSV)
    <root>/samples/<seed>/view_<i>.pfm
    <root>/samples/<seed>/ground_truth_level_<k>.obj
    <root>/samples/<seed>/landmarks.json
    <root>/samples/<seed>/meta.json
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..camera import Camera, load_rig, look_at, save_rig
from ..mesh import Mesh, build_hierarchy, load_hierarchy, load_obj, save_hierarchy, save_obj
from .deform import DeformBasis, DeformationField, apply_deformation
from .render import ProceduralTexture, render_views
from .template import make_template

log = logging.getLogger(__name__)


@dataclass
class DatasetConfig:
    template_seed: int = 0
    subdivisions: int = 3
    hierarchy_targets: list = field(default_factory=lambda: [42, 162])
    n_views: int = 4
    image_size: int = 128
    rig_radius_factor: float = 2.5
    deform_max_fraction: float = 0.15
    basis_size: int = 8
    basis_seed: int = 1
    texture_seed: int = 2
    max_angle_deg: float = 8.0
    max_shift_mm: float = 8.0
    noise_sigma: float = 0.0


@dataclass(eq=False)
class CaptureInput:
    images: list
    cameras: list

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("capture needs at least one view")
        if len(self.images) != len(self.cameras):
            raise ValueError(f"{len(self.images)} images but {len(self.cameras)} cameras")
        shp = self.images[0].shape
        for img, cam in zip(self.images, self.cameras):
            if img.shape != shp:
                raise ValueError("all images must share extents")
            if img.shape[0] != 3 or (cam.height, cam.width) != img.shape[1:]:
                raise ValueError(f"camera {cam.name!r} image size does not match image {img.shape}")

    def subset(self, views):
        return CaptureInput([self.images[i] for i in views], [self.cameras[i] for i in views])

    def stacked(self):
        return np.stack(self.images)


@dataclass(eq=False)
class Sample:
    capture: CaptureInput
    ground_truth: list
    landmark_indices: list
    landmark_positions: np.ndarray
    seed: int
    split: str = "train"


def split_of(seed):
    return "train" if seed % 2 == 0 else "test"


# ------------------------------------------------------------------- PFM I/O

def write_pfm(path, image):
    """3-channel little-endian PFM; ``image`` is ``[3, H, W]``."""
    img = np.asarray(image, dtype="<f4").transpose(1, 2, 0)
    H, W, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"PF\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        W, H = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        ch = 3 if tag == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dt, count=W * H * ch)
    img = data.reshape(H, W, ch)[::-1].astype(np.float64)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


# --------------------------------------------------------------------- setup

def make_rig(template, cfg):
    """Cameras evenly spaced on a horizontal ring, aimed at the template centroid."""
    c = template.vertices.mean(0)
    diag = template.bbox_diagonal()
    dist = cfg.rig_radius_factor * diag
    # the bound on the blend displacement is rarely attained; half of it plus the
    # rigid shift keeps every sampled seed inside the frame (checked in tests)
    reach = np.linalg.norm(template.vertices - c, axis=1).max() \
        + 0.5 * cfg.deform_max_fraction * diag + cfg.max_shift_mm
    half = np.arcsin(min(reach / dist, 0.99))
    W = H = cfg.image_size
    f = 0.95 * (W / 2.0) / np.tan(half)
    cams = []
    for i in range(cfg.n_views):
        th = 2 * np.pi * i / cfg.n_views
        eye = c + dist * np.array([np.sin(th), 0.0, np.cos(th)])
        cams.append(look_at(eye, c, up=np.array([0.0, 1.0, 0.0]), f=f, width=W, height=H,
                            name=f"cam{i}"))
    return cams


@dataclass(eq=False)
class SynthWorld:
    """Everything shared by the samples of one dataset."""
    config: DatasetConfig
    template: Mesh
    landmarks: list
    hierarchy: object
    rig: list
    basis: DeformBasis
    texture: ProceduralTexture

    @classmethod
    def build(cls, cfg, hierarchy=None):
        template, landmarks = make_template(cfg.template_seed, cfg.subdivisions)
        if hierarchy is None:
            hierarchy = build_hierarchy(template, cfg.hierarchy_targets)
        rig = make_rig(template, cfg)
        basis = DeformBasis.make(cfg.basis_size, cfg.basis_seed,
                                 length_scale=template.bbox_diagonal() / 3.0)
        return cls(cfg, template, landmarks, hierarchy, rig, basis, ProceduralTexture(cfg.texture_seed))

    def field(self, seed):
        diag = self.template.bbox_diagonal()
        return DeformationField.random(
            self.basis, seed, self.config.deform_max_fraction * diag,
            max_angle_deg=self.config.max_angle_deg, max_shift=self.config.max_shift_mm,
            pivot=self.template.vertices.mean(0))

    def sample(self, seed, cameras=None):
        cams = self.rig if cameras is None else cameras
        fld = self.field(seed)
        gt = [fld(t.vertices) for t in self.hierarchy.templates]
        full = apply_deformation(fld, self.hierarchy.full)
        images = render_views(full, cams, self.texture, template_vertices=self.hierarchy.full.vertices)
        if self.config.noise_sigma > 0:
            rng = np.random.default_rng(10_000 + seed)
            images = [im + rng.normal(scale=self.config.noise_sigma, size=im.shape) for im in images]
        # PFM stores float32; round here so in-memory and on-disk samples agree
        images = [im.astype(np.float32).astype(np.float64) for im in images]
        idx = list(self.landmarks)
        return Sample(CaptureInput(images, list(cams)), gt, idx, gt[-1][idx], seed, split_of(seed))


def write_sample(sample, root):
    d = os.path.join(root, "samples", str(sample.seed))
    os.makedirs(d, exist_ok=True)
    for i, img in enumerate(sample.capture.images):
        write_pfm(os.path.join(d, f"view_{i}.pfm"), img)
    return d


def generate_dataset(cfg, seeds, root):
    """Write a dataset for ``seeds`` under ``root``; returns the world."""
    os.makedirs(root, exist_ok=True)
    world = SynthWorld.build(cfg)
    with open(os.path.join(root, "dataset.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=1)
    save_rig(os.path.join(root, "rig.json"), world.rig)
    save_hierarchy(world.hierarchy, os.path.join(root, "hierarchy"))
    write_samples(cfg, root, seeds, world)
    return world


def write_samples(cfg, root, seeds, world=None):
    """Per-sample files only; safe to call from several processes on disjoint seeds."""
    world = world or SynthWorld.build(cfg)
    faces = world.hierarchy.templates
    for seed in seeds:
        s = world.sample(int(seed))
        d = write_sample(s, root)
        for k, V in enumerate(s.ground_truth):
            save_obj(Mesh(V, faces[k].faces), os.path.join(d, f"ground_truth_level_{k}.obj"))
        with open(os.path.join(d, "landmarks.json"), "w") as fh:
            json.dump({"indices": s.landmark_indices,
                       "positions": s.landmark_positions.tolist()}, fh, indent=1)
        with open(os.path.join(d, "meta.json"), "w") as fh:
            json.dump({"seed": s.seed, "split": s.split, "n_views": len(s.capture.images)}, fh, indent=1)
        log.info("wrote sample %d (%s)", s.seed, s.split)


class SynthDataset:
    """Reads a dataset directory written by :func:`generate_dataset`."""

    def __init__(self, root):
        self.root = root
        with open(os.path.join(root, "dataset.json")) as fh:
            self.config = DatasetConfig(**json.load(fh))
        self.rig = load_rig(os.path.join(root, "rig.json"))
        self.hierarchy = load_hierarchy(os.path.join(root, "hierarchy"))
        sd = os.path.join(root, "samples")
        self.seeds = sorted(int(s) for s in os.listdir(sd)) if os.path.isdir(sd) else []

    def seeds_for(self, split):
        return [s for s in self.seeds if split_of(s) == split]

    def load(self, seed):
        d = os.path.join(self.root, "samples", str(seed))
        with open(os.path.join(d, "meta.json")) as fh:
            meta = json.load(fh)
        images = [read_pfm(os.path.join(d, f"view_{i}.pfm")) for i in range(meta["n_views"])]
        gt = [load_obj(os.path.join(d, f"ground_truth_level_{k}.obj")).vertices
              for k in range(len(self.hierarchy.templates))]
        with open(os.path.join(d, "landmarks.json")) as fh:
            lm = json.load(fh)
        return Sample(CaptureInput(images, list(self.rig[:len(images)])), gt, lm["indices"],
                      np.array(lm["positions"]), seed, meta["split"])
