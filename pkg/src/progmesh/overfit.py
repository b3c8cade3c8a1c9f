"""The pinned synthetic overfit experiment.

Eight training identities (even seeds 0..14), four views at 128x128, global
stage 2000 iterations then local stage 1000 iterations (lr 1e-4, batch 2,
seed 7). Held-out identities are the odd seeds 1, 3, 5, 7.

    python3 -m progmesh.overfit --out tests/fixtures/overfit
"""
import argparse
import json
import logging
import os
import platform
import time

import numpy as np

from . import _accel
from .config import RunConfig
from .networks import ModelParams
from .synth.dataset import SynthWorld
from .train import train_stage

TRAIN_SEEDS = tuple(range(0, 16, 2))
TEST_SEEDS = (1, 3, 5, 7)

log = logging.getLogger(__name__)


def build(cfg=None):
    """World, training samples and a freshly initialized model."""
    cfg = cfg or RunConfig()
    world = SynthWorld.build(cfg.dataset)
    samples = [world.sample(s) for s in TRAIN_SEEDS]
    model = ModelParams(cfg.pipeline.build(world.hierarchy), world.hierarchy, seed=cfg.model_seed)
    return cfg, world, samples, model


def run(out_dir, cfg=None, stages=("global", "local"), global_model=None):
    """Train the requested stages into ``out_dir``; returns per-stage results.

    ``global_model`` starts the local stage from an existing checkpoint
    instead of training the global stage first.
    """
    cfg, world, samples, model = build(cfg)
    if global_model is not None:
        model, _, _ = ModelParams.load(global_model, expect_config=model.config)
    out = {}
    for stage in stages:
        tcfg = cfg.train_global if stage == "global" else cfg.train_local
        out[stage] = train_stage(samples, model, tcfg, out_dir=out_dir)
    return out, model, world


def main(argv=None):
    ap = argparse.ArgumentParser(description="train the pinned overfit fixture")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.perf_counter()
    res, _, _ = run(args.out)
    meta = {
        "train_seeds": list(TRAIN_SEEDS),
        "test_seeds": list(TEST_SEEDS),
        "seconds": {k: r.seconds for k, r in res.items()},
        "total_seconds": time.perf_counter() - t0,
        "final_loss": {k: r.losses[-1] for k, r in res.items()},
        "numba": _accel.NUMBA_ENABLED,
        "numpy": np.__version__,
        "machine": platform.machine(),
    }
    with open(os.path.join(args.out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    print(json.dumps(meta, indent=1))


if __name__ == "__main__":
    main()
