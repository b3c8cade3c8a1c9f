"""End-to-end finite-difference check of the multi-level loss gradient.

The tiny configuration (2 views, 8x8 images, 4^3 global grid, 12 -> 42
vertex hierarchy, two-channel networks) keeps the per-parameter central
differences affordable.
"""
import time
from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.autodiff import backward, const
from .core.trace import tracing
from .networks import ModelParams, NetConfig
from .pipeline import PipelineConfig, extract_features, global_stage, local_stage
from .synth.dataset import DatasetConfig, SynthWorld
from .train import multilevel_loss

STEP = 1e-5
TOLERANCE = 1e-4


def tiny_setup(seed=0):
    dcfg = DatasetConfig(subdivisions=1, hierarchy_targets=[12], n_views=2, image_size=8)
    world = SynthWorld.build(dcfg)
    sample = world.sample(seed)
    net = NetConfig(extractor_widths=[2, 2, 2], global_widths=[2, 2, 2, 2, 2],
                    local_widths=[2, 2, 2, 2, 2])
    cfg = PipelineConfig.for_template(world.hierarchy.full, levels=1, global_resolution=4,
                                      local_resolution=8, net=net)
    model = ModelParams(cfg, world.hierarchy, seed=seed)
    # Zero biases on a zero-valued background put pre-activations exactly on the
    # leaky-relu kink; a small seeded bias offset moves the check to a generic point.
    rng = np.random.default_rng([seed, 99])
    for name in sorted(model.params):
        if name.endswith("/b"):
            p = model.params[name]
            p.value[...] = rng.uniform(-0.05, 0.05, size=p.value.shape)
    return model, sample


def full_loss(model, sample, frozen=None):
    """Multi-level loss with every stage differentiable (nothing frozen).

    ``frozen`` may carry precomputed ``fmaps`` and/or ``V0`` values; the
    finite-difference loop passes them when the perturbed parameter lies
    downstream, which leaves the loss value unchanged.
    """
    cap = sample.capture
    frozen = frozen or {}
    fm = frozen.get("fmaps")
    if fm is None:
        fm = extract_features(cap.stacked(), model)
    V = frozen.get("V0")
    if V is None:
        V = global_stage(cap, model, fm)
    Vs = [V]
    for level in model.hierarchy.levels:
        V = local_stage(cap, V, level, model, fmaps=fm)
        Vs.append(V)
    return multilevel_loss(Vs, sample.ground_truth)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_params: int
    per_group: dict
    seconds: float
    loss: float
    kink_retries: int = 0          # entries re-differenced with a smaller step
    kink_skipped: tuple = ()       # entries whose stencil still straddled a kink

    @property
    def passed(self):
        return self.max_rel_error <= TOLERANCE


ROUNDOFF_FACTOR = 64.0


def roundoff_bound(loss, step):
    """Round-off of a central difference: a few hundred ulps of ``loss`` over ``2 h``."""
    return ROUNDOFF_FACTOR * np.finfo(np.float64).eps * abs(loss) / step


def relative_error(analytic, numeric, scale, noise=0.0):
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor is the larger of 1e-6 of the largest gradient magnitude and
    ``noise / TOLERANCE``: an entry whose true derivative is ~0 then passes iff
    its finite difference is within the round-off bound ``noise``.
    """
    floor = max(1e-6 * max(scale, 1.0), noise / TOLERANCE)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(model=None, sample=None, step=STEP, names=None, min_step=1e-8):
    """Compare analytic gradients of :func:`full_loss` with central differences.

    A stencil whose probes take a different branch than the unperturbed pass
    (see :mod:`progmesh.core.trace`) straddles a kink; it is re-differenced with
    steps of ``step / 10``, ``step / 100``, ... down to ``min_step``. Entries
    that never become smooth are listed in ``kink_skipped`` and excluded.
    """
    t0 = time.perf_counter()
    if model is None:
        model, sample = tiny_setup()
    loss = full_loss(model, sample)
    for p in model.params.values():
        p.grad = None
    grads = {n.name: g for n, g in backward(loss).items()}
    names = sorted(model.params) if names is None else names
    analytic = {k: grads.get(k, np.zeros_like(model.params[k].value)) for k in names}
    fm = const(extract_features(sample.capture.stacked(), model).value)
    V0 = const(global_stage(sample.capture, model, fm).value)
    upstream = {"extractor": {}, "global": {"fmaps": fm}, "local": {"fmaps": fm, "V0": V0}}
    numeric = {}
    base = {}
    retried, skipped = 0, []
    for k in names:
        group = k.split("/")[0]
        frozen = upstream[group]
        if group not in base:
            with tracing() as t:
                full_loss(model, sample, frozen)
            base[group] = t["signature"]
        v = model.params[k].value
        num = np.zeros_like(v)
        flat, nflat = v.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            h = step
            while True:
                d, smooth = _central(model, sample, frozen, flat, i, h, base[group])
                if smooth or h < min_step:
                    break
                h /= 10.0
            if h != step:
                retried += 1
            if not smooth:
                skipped.append(f"{k}[{i}]")
            nflat[i] = d
        numeric[k] = num
    scale = max(float(np.max(np.abs(a))) for a in analytic.values())
    worst, worst_name, per_group, n = 0.0, "", {}, 0
    for k in names:
        err = relative_error(analytic[k], numeric[k], scale, roundoff_bound(loss.value, step))
        for label in skipped:
            if label.startswith(k + "["):
                err.reshape(-1)[int(label[len(k) + 1:-1])] = 0.0
        n += err.size
        e = float(err.max())
        g = k.split("/")[0]
        per_group[g] = max(per_group.get(g, 0.0), e)
        if e >= worst:
            worst, worst_name = e, k
    return GradCheckReport(worst, worst_name, n, per_group, time.perf_counter() - t0,
                           float(loss.value), retried, skipped)


def _central(model, sample, frozen, flat, i, h, signature):
    """Central difference at entry ``i``; also reports whether both probes
    took the same branches as the unperturbed pass."""
    old = flat[i]
    flat[i] = old + h
    with tracing() as tp:
        lp = float(full_loss(model, sample, frozen).value)
    flat[i] = old - h
    with tracing() as tm:
        lm = float(full_loss(model, sample, frozen).value)
    flat[i] = old
    smooth = tp["signature"] == signature and tm["signature"] == signature
    return (lp - lm) / (2 * h), smooth
