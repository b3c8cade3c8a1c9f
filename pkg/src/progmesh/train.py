"""Stage-wise training: global stage first, then the local stage with the global stage frozen."""
import csv
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .camera import rotation_from_rng
from .core import ops
from .core.autodiff import backward, const
from .core.optim import AdamState, adam_step
from .pipeline import extract_features, global_stage_batch, local_stage_batch

log = logging.getLogger(__name__)

STAGES = ("global", "local")
TRAINABLE = {"global": ("extractor", "global"), "local": ("local",)}


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    stage: str = "global"
    iterations: int = 2000
    lr: float = 1e-4
    batch_size: int = 2
    seed: int = 7
    finest_subset: int = 64        # fine vertices supervised per sample at the last level; 0 = all
    checkpoint_every: int = 0      # 0 = final checkpoint only

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


def global_loss(V0, V0_true):
    """Mean over vertices of the squared Euclidean error (mm^2)."""
    return ops.squared_distance_mean(V0, V0_true)


def multilevel_loss(Vs, Vs_true):
    """Unit-weight sum of per-level losses."""
    if len(Vs) != len(Vs_true):
        raise ValueError(f"{len(Vs)} predicted levels but {len(Vs_true)} ground-truth levels")
    total = None
    for V, T in zip(Vs, Vs_true):
        term = global_loss(V, T)
        total = term if total is None else ops.add(total, term)
    return total


def batch_schedule(n, batch_size, iterations, rng):
    """Epoch-wise shuffled batches of sample indices."""
    order = []
    out = []
    for _ in range(iterations):
        b = []
        while len(b) < batch_size:
            if not order:
                order = list(rng.permutation(n))
            b.append(int(order.pop(0)))
        out.append(b)
    return out


def _stack(rows):
    return np.stack(rows)


def _global_step_loss(model, batch, rng):
    R = rotation_from_rng(rng) if model.config.rotate_global else None
    fm = [extract_features(s.capture.stacked(), model) for s in batch]
    V0 = global_stage_batch(fm, [s.capture.cameras for s in batch], model, R)
    return global_loss(ops.reshape(V0, (-1, 3)),
                       _stack([s.ground_truth[0] for s in batch]).reshape(-1, 3))


class _FrozenCache:
    """Feature maps and V_0 of the frozen global stage, computed once per sample."""

    def __init__(self, model, samples):
        self.fmaps, self.V0 = [], []
        for s in samples:
            f = extract_features(s.capture.stacked(), model)
            f = const(f.value)
            V0 = global_stage_batch([f], [s.capture.cameras], model)
            self.fmaps.append(f)
            self.V0.append(V0.value[0])


def local_forward(model, fmaps, cameras, V0s, rotations=None, subsets=None):
    """Levels 1..L for a batch; returns per-level lists of vertex nodes."""
    V = [const(v) for v in V0s]
    levels = [V]
    L = model.hierarchy.depth
    for k, level in enumerate(model.hierarchy.levels):
        R = None if rotations is None else rotations[k]
        sub = subsets if k == L - 1 else None
        V = local_stage_batch(fmaps, cameras, V, level, model, R, subsets=sub)
        levels.append(V)
    return levels


def _local_step_loss(model, cache, batch_idx, samples, tcfg, rng):
    L = model.hierarchy.depth
    rots = [rotation_from_rng(rng) for _ in range(L)] if model.config.rotate_local else None
    n_fine = model.hierarchy.vertex_counts[-1]
    subsets = None
    if tcfg.finest_subset and tcfg.finest_subset < n_fine:
        subsets = [np.sort(rng.choice(n_fine, tcfg.finest_subset, replace=False)) for _ in batch_idx]
    levels = local_forward(model, [cache.fmaps[i] for i in batch_idx],
                           [samples[i].capture.cameras for i in batch_idx],
                           [cache.V0[i] for i in batch_idx], rots, subsets)
    pred, true = [], []
    for k, Vk in enumerate(levels):
        rows, trows = [], []
        for b, i in enumerate(batch_idx):
            gt = samples[i].ground_truth[k]
            if k == L and subsets is not None:
                gt = gt[subsets[b]]
            rows.append(Vk[b])
            trows.append(gt)
        pred.append(rows[0] if len(rows) == 1 else ops.concat(rows, 0))
        true.append(np.concatenate(trows, 0))
    return multilevel_loss(pred, true)


@dataclass
class TrainResult:
    losses: list
    adam: AdamState
    checkpoints: list
    seconds: float


def write_loss_log(path, losses):
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def read_loss_log(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["iteration", "loss"]:
        raise ValueError(f"{path}: not a loss log")
    return [float(r[1]) for r in rows[1:]]


def train_stage(samples, model, tcfg, out_dir=None, adam=None, progress_every=50):
    """Adam on the stage loss; mutates ``model.params`` in place.

    Writes ``loss_<stage>.csv`` and checkpoints under ``out_dir`` when given.
    A non-finite loss aborts with :class:`TrainingAborted`, leaving the last
    good checkpoint on disk.
    """
    if not samples:
        raise ValueError("no training samples")
    t0 = time.perf_counter()
    # separate streams: the first n steps of a run do not depend on its length
    schedule = batch_schedule(len(samples), tcfg.batch_size, tcfg.iterations,
                              np.random.default_rng([tcfg.seed, 0]))
    rng = np.random.default_rng([tcfg.seed, 1])
    names = [k for k in sorted(model.params) if k.split("/")[0] in TRAINABLE[tcfg.stage]]
    if adam is None:
        adam = AdamState(lr=tcfg.lr)
    values = {k: model.params[k].value for k in names}
    cache = _FrozenCache(model, samples) if tcfg.stage == "local" else None
    losses, ckpts = [], []
    last_good = None

    def save(tag):
        if out_dir is None:
            return None
        path = os.path.join(out_dir, f"{tcfg.stage}_{tag}.ckpt")
        model.save(path, adam=adam, extra={"meta/train": [tcfg.iterations, tcfg.seed, len(losses)]})
        ckpts.append(path)
        return path

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for it, batch_idx in enumerate(schedule):
        for k in names:
            model.params[k].grad = None
        if tcfg.stage == "global":
            loss = _global_step_loss(model, [samples[i] for i in batch_idx], rng)
        else:
            loss = _local_step_loss(model, cache, batch_idx, samples, tcfg, rng)
        lv = float(loss.value)
        if not np.isfinite(lv):
            if out_dir is not None:
                write_loss_log(os.path.join(out_dir, f"loss_{tcfg.stage}.csv"), losses)
            raise TrainingAborted(f"non-finite loss at iteration {it}", last_good)
        losses.append(lv)
        grads = backward(loss)
        by_name = {n.name: g for n, g in grads.items() if n.name in values}
        g = {k: by_name.get(k, np.zeros_like(values[k])) for k in names}
        adam_step(values, g, adam)
        if progress_every and (it % progress_every == 0 or it == tcfg.iterations - 1):
            log.info("%s iter %d loss %.4f (%.1fs)", tcfg.stage, it, lv, time.perf_counter() - t0)
        if tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0 and it + 1 < tcfg.iterations:
            last_good = save(f"{it + 1:06d}")
    last_good = save("final")
    if out_dir is not None:
        write_loss_log(os.path.join(out_dir, f"loss_{tcfg.stage}.csv"), losses)
        from .config import save_toml
        save_toml(os.path.join(out_dir, f"train_{tcfg.stage}.toml"), {"train": asdict(tcfg)})
    return TrainResult(losses, adam, ckpts, time.perf_counter() - t0)
