"""Evaluation metrics and report writing."""
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, TriangleBVH


def scan_to_mesh(points, mesh):
    """Distance from each point ``[S, 3]`` to the closest point on ``mesh``."""
    _, _, d = TriangleBVH(mesh.vertices, mesh.faces).query(np.asarray(points, dtype=np.float64))
    return d


def sample_surface(mesh, n, seed=0):
    """Area-weighted uniform samples on the surface."""
    rng = np.random.default_rng(seed)
    tri = mesh.triangles()
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    f = rng.choice(len(tri), size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return np.einsum("nk,nkd->nd", w, tri[f])


def scan_points(mesh, factor=10, seed=0):
    """Stand-in for a raw scan: the mesh vertices plus ``factor`` x as many surface samples."""
    return np.concatenate([mesh.vertices, sample_surface(mesh, factor * mesh.n_vertices, seed)])


def v2v(predicted, ground_truth):
    """Per-vertex distance between same-index vertices; meshes must share topology."""
    if predicted.n_vertices != ground_truth.n_vertices or not np.array_equal(predicted.faces, ground_truth.faces):
        raise ValueError("v2v needs identical topology (same vertex count and face list)")
    return np.linalg.norm(predicted.vertices - ground_truth.vertices, axis=1)


def landmark_error(predicted, indices, positions):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= predicted.n_vertices):
        raise IndexError(f"landmark index out of range for a mesh with {predicted.n_vertices} vertices")
    return np.linalg.norm(predicted.vertices[idx] - np.asarray(positions, dtype=np.float64), axis=1)


def cumulative_curve(distances, thresholds):
    """``[(t, fraction of distances <= t)]`` for ascending thresholds."""
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    d = np.sort(np.asarray(distances, dtype=np.float64))
    if d.size == 0:
        return [(float(x), 0.0) for x in t]
    counts = np.searchsorted(d, t, side="right")
    return [(float(x), float(c) / d.size) for x, c in zip(t, counts)]


@dataclass
class EvalReport:
    samples: list = field(default_factory=list)    # per-sample dicts
    curve: list = field(default_factory=list)      # s2m cumulative curve
    views: int = 0

    def median(self, key, level=None):
        if level is None:
            vals = np.concatenate([s[key] for s in self.samples])
        else:
            vals = np.concatenate([s[key][level] for s in self.samples])
        return float(np.median(vals))

    def stage_medians(self):
        L = len(self.samples[0]["v2v_levels"])
        return [self.median("v2v_levels", k) for k in range(L)]

    def summary(self):
        return {
            "n_samples": len(self.samples),
            "views": self.views,
            "median_s2m_mm": self.median("s2m"),
            "median_v2v_mm": self.median("v2v"),
            "median_landmark_mm": self.median("landmarks"),
            "median_v2v_per_stage_mm": self.stage_medians(),
        }


def evaluate_sample(result, sample, hierarchy, scan_factor=10, scan_seed=0):
    """Metrics for one :class:`~progmesh.pipeline.InferenceResult`."""
    full = hierarchy.full
    gt = Mesh(sample.ground_truth[-1], full.faces)
    pred = result.mesh
    levels = []
    for k, (V, T) in enumerate(zip(result.levels, sample.ground_truth)):
        f = hierarchy.templates[k].faces
        levels.append(v2v(Mesh(V, f), Mesh(T, f)))
    return {
        "seed": int(sample.seed),
        "s2m": scan_to_mesh(scan_points(gt, scan_factor, seed=[int(sample.seed), int(scan_seed)]), pred),
        "v2v": v2v(pred, gt),
        "landmarks": landmark_error(pred, sample.landmark_indices, sample.landmark_positions),
        "v2v_levels": levels,
        "timings": result.timings,
        "clamp_events": result.clamp_events,
    }


def _evaluate_one(payload):
    from .pipeline import infer
    model, s, views, scan_factor, scan_seed = payload
    cap = s.capture if views is None else s.capture.subset(views)
    return evaluate_sample(infer(cap, model), s, model.hierarchy, scan_factor, scan_seed)


def evaluate(model, samples, views=None, thresholds=None, scan_factor=10, n_thresholds=51,
             scan_seed=0, jobs=1):
    """Infer and score every sample; ``jobs > 1`` spreads samples over processes
    (results are identical, order is preserved)."""
    payloads = [(model, s, views, scan_factor, scan_seed) for s in samples]
    if jobs > 1 and len(samples) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(jobs, len(samples))) as ex:
            per = list(ex.map(_evaluate_one, payloads))
    else:
        per = [_evaluate_one(p) for p in payloads]
    rep = EvalReport(samples=per)
    rep.views = len(samples[0].capture.images) if views is None else len(views)
    if thresholds is None:
        top = max(float(np.max(x["s2m"])) for x in rep.samples)
        thresholds = np.linspace(0.0, top, n_thresholds)
    rep.curve = cumulative_curve(np.concatenate([x["s2m"] for x in rep.samples]), thresholds)
    return rep


def _svg(curve, width=480, height=320, pad=40):
    xs = np.array([c[0] for c in curve])
    ys = np.array([c[1] for c in curve])
    xmax = xs.max() if xs.size and xs.max() > 0 else 1.0
    px = pad + (width - 2 * pad) * xs / xmax
    py = height - pad - (height - 2 * pad) * ys
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">'
        f's2m threshold (mm), max {xmax:.3g}</text>\n'
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
        f'text-anchor="middle">fraction</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>\n'
        "</svg>\n")


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    doc = dict(report.summary())
    doc["samples"] = [{
        "seed": s["seed"],
        "median_s2m_mm": float(np.median(s["s2m"])),
        "median_v2v_mm": float(np.median(s["v2v"])),
        "median_landmark_mm": float(np.median(s["landmarks"])),
        "median_v2v_per_stage_mm": [float(np.median(x)) for x in s["v2v_levels"]],
        "landmark_errors_mm": [float(x) for x in s["landmarks"]],
        "clamp_events": s["clamp_events"],
    } for s in report.samples]
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
    with open(os.path.join(out_dir, "curve.csv"), "w") as fh:
        fh.write("threshold_mm,fraction\n")
        for t, f in report.curve:
            fh.write(f"{t!r},{f!r}\n")
    with open(os.path.join(out_dir, "curve.svg"), "w") as fh:
        fh.write(_svg(report.curve))
    return doc
