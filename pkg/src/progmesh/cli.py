"""``progmesh`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import datetime
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

log = logging.getLogger("progmesh")
LOG_LEVELS = ("debug", "info", "warning", "error")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _IsoFormatter(logging.Formatter):
    def formatTime(self, record, datefmt=None):
        t = datetime.datetime.fromtimestamp(record.created).astimezone()
        return t.isoformat(timespec="milliseconds")


def _setup_logging(level):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_IsoFormatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(h)
    root.setLevel(getattr(logging, level.upper()))


def parse_seeds(text):
    """``"0-7"`` (inclusive), ``"0,2,5"`` or a mix such as ``"0-3,10"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            a, _, b = part.partition("-")
            a, b = int(a), int(b or a)
        except ValueError:
            raise UsageError(f"bad seed list entry {part!r}") from None
        if a < 0 or b < a:
            raise UsageError(f"bad seed range {part!r}")
        out.extend(range(a, b + 1))
    if not out:
        raise UsageError("no seeds given")
    if len(set(out)) != len(out):
        raise UsageError("duplicate seeds")
    return out


# ------------------------------------------------------------------ helpers

def _load_cfg(args):
    from .config import load_config
    return load_config(getattr(args, "config", None))


def _echo_config(cfg, out):
    from .config import save_config
    os.makedirs(out, exist_ok=True)
    save_config(os.path.join(out, "resolved_config.toml"), cfg)


def _apply_overrides(cfg, pairs):
    from .config import set_value
    import tomli_w  # noqa: F401  (only to share the TOML value syntax)
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        cfg = set_value(cfg, key.strip(), value)
    return cfg


def _dataset_samples(root, split, seeds=None):
    from .synth.dataset import SynthDataset
    ds = SynthDataset(root)
    chosen = ds.seeds if split == "all" else ds.seeds_for(split)
    if seeds is not None:
        missing = sorted(set(seeds) - set(ds.seeds))
        if missing:
            raise FileNotFoundError(f"{root}: no samples for seeds {missing}")
        chosen = seeds
    if not chosen:
        raise FileNotFoundError(f"{root}: no {split} samples")
    return ds, [ds.load(s) for s in chosen]


# ----------------------------------------------------------------- commands

def cmd_hierarchy_build(args, cfg):
    from .mesh import build_hierarchy, save_hierarchy
    from .synth.template import make_template
    d = cfg.dataset
    template, _ = make_template(d.template_seed, d.subdivisions)
    hier = build_hierarchy(template, d.hierarchy_targets)
    save_hierarchy(hier, os.path.join(args.out, "hierarchy"))
    log.info("hierarchy vertex counts %s", hier.vertex_counts)
    print(" -> ".join(str(n) for n in hier.vertex_counts))


def _generate_one(payload):
    cfg, root, seeds = payload
    from .synth.dataset import write_samples
    write_samples(cfg, root, seeds)


def cmd_synth_generate(args, cfg):
    from .synth.dataset import generate_dataset
    seeds = parse_seeds(args.seeds)
    if args.jobs > 1 and len(seeds) > 1:
        generate_dataset(cfg.dataset, [], args.out)
        chunks = [seeds[i::args.jobs] for i in range(args.jobs)]
        with ProcessPoolExecutor(args.jobs) as ex:
            list(ex.map(_generate_one, [(cfg.dataset, args.out, c) for c in chunks if c]))
    else:
        generate_dataset(cfg.dataset, seeds, args.out)
    log.info("wrote %d samples under %s", len(seeds), args.out)


def _model_for_dataset(ds, cfg):
    from .networks import ModelParams
    pcfg = cfg.pipeline.build(ds.hierarchy)
    return ModelParams(pcfg, ds.hierarchy, seed=cfg.model_seed)


def cmd_train(args, cfg):
    from .networks import ModelParams
    from .train import train_stage
    ds, samples = _dataset_samples(args.data, "train")
    if args.stage == "global":
        tcfg = cfg.train_global
        model = _model_for_dataset(ds, cfg)
    else:
        tcfg = cfg.train_local
        model, _, _ = ModelParams.load(args.model)
        expected = cfg.pipeline.build(model.hierarchy)
        if expected.to_dict() != model.config.to_dict():
            raise ValueError(f"{args.model}: model configuration does not match the run configuration")
    log.info("training %s stage on %d samples for %d iterations", args.stage, len(samples), tcfg.iterations)
    res = train_stage(samples, model, tcfg, out_dir=args.out)
    log.info("%s stage done in %.1fs; final loss %.4f", args.stage, res.seconds, res.losses[-1])
    print(res.checkpoints[-1])


def cmd_infer(args, cfg):
    from .camera import load_rig
    from .mesh import Mesh, save_obj
    from .networks import ModelParams
    from .pipeline import infer
    from .synth.dataset import CaptureInput, read_pfm
    model, _, _ = ModelParams.load(args.model)
    rig = load_rig(args.rig)
    images = []
    for i in range(len(rig)):
        p = os.path.join(args.images, f"view_{i}.pfm")
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing image {p} for camera {rig[i].name!r}")
        images.append(read_pfm(p))
    res = infer(CaptureInput(images, rig), model, chunk=args.chunk)
    os.makedirs(args.out, exist_ok=True)
    save_obj(res.mesh, os.path.join(args.out, "mesh_final.obj"))
    if args.levels:
        for k, V in enumerate(res.levels):
            save_obj(Mesh(V, model.hierarchy.templates[k].faces), os.path.join(args.out, f"mesh_level_{k}.obj"))
    with open(os.path.join(args.out, "inference.json"), "w") as fh:
        json.dump({"vertex_counts": [len(V) for V in res.levels], "clamp_events": res.clamp_events,
                   "views": len(images)}, fh, indent=1)
    # wall-clock numbers live in their own file so the rest stays byte-reproducible
    with open(os.path.join(args.out, "timings.json"), "w") as fh:
        json.dump(res.timings, fh, indent=1)
    log.info("timings: %s", ", ".join(f"{k} {v:.3f}" for k, v in res.timings.items()))


def cmd_eval(args, cfg):
    from .metrics import evaluate, write_report
    from .networks import ModelParams
    model, _, _ = ModelParams.load(args.model)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    _, samples = _dataset_samples(args.data, args.split, seeds)
    views = list(range(args.views)) if args.views else None
    # scan points are drawn from (sample seed, --seed)
    rep = evaluate(model, samples, views=views, scan_factor=cfg.eval.scan_factor,
                   n_thresholds=cfg.eval.n_thresholds, scan_seed=args.seed, jobs=args.jobs)
    doc = write_report(rep, args.out)
    print(json.dumps({k: v for k, v in doc.items() if k != "samples"}, indent=1))


def cmd_selfcheck_grad(args, cfg):
    from .gradcheck import TOLERANCE, check_gradients, tiny_setup
    model, sample = tiny_setup(args.seed)
    rep = check_gradients(model, sample)
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_params} parameters "
          f"(worst {rep.worst}); kink retries {rep.kink_retries}, skipped {len(rep.kink_skipped)}; "
          f"{rep.seconds:.1f}s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump({"max_rel_error": rep.max_rel_error, "worst": rep.worst, "n_params": rep.n_params,
                       "per_group": rep.per_group, "kink_retries": rep.kink_retries,
                       "kink_skipped": list(rep.kink_skipped), "tolerance": TOLERANCE}, fh, indent=1)
    if not rep.passed:
        raise RuntimeError(f"gradient check failed: {rep.max_rel_error:.3e} > {TOLERANCE:g}")


# ------------------------------------------------------------------- parser

def _common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory for every artifact")
    p.add_argument("--config", help="TOML run configuration (unknown keys are rejected)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config value, e.g. --set train_global.iterations=10")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic choice of this command")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1, reproducible)")
    p.add_argument("--log-level", default=argparse.SUPPRESS, choices=LOG_LEVELS,
                   help="stderr log verbosity (default info)")
    p.set_defaults(subparser=p)


def build_parser():
    ap = _Parser(prog="progmesh", description="Progressive multi-view mesh inference toolkit.")
    ap.add_argument("--log-level", default="info", choices=LOG_LEVELS,
                    help="stderr log verbosity")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, required=True)

    h = sub.add_parser("hierarchy", help="mesh hierarchy tools")
    hs = h.add_subparsers(dest="action", parser_class=_Parser, required=True)
    p = hs.add_parser("build", help="build the template hierarchy (OBJ + triplet CSV)")
    _common(p)
    p.set_defaults(func=cmd_hierarchy_build, seed_target="hierarchy")

    s = sub.add_parser("synth", help="synthetic data")
    ss = s.add_subparsers(dest="action", parser_class=_Parser, required=True)
    p = ss.add_parser("generate", help="render a synthetic multi-view dataset")
    _common(p)
    p.add_argument("--seeds", required=True, help="identity seeds, e.g. 0-11 or 0,2,4 (even = train, odd = test)")
    p.set_defaults(func=cmd_synth_generate, seed_target="synth")

    t = sub.add_parser("train", help="train one stage")
    ts = t.add_subparsers(dest="stage", parser_class=_Parser, required=True)
    p = ts.add_parser("global", help="train extractor and global network")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--iterations", type=int, help="override train_global.iterations")
    p.set_defaults(func=cmd_train, seed_target="train")
    p = ts.add_parser("local", help="train the local network with the global stage frozen")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, help="checkpoint from 'train global'")
    p.add_argument("--iterations", type=int, help="override train_local.iterations")
    p.set_defaults(func=cmd_train, seed_target="train")

    p = sub.add_parser("infer", help="reconstruct a mesh from calibrated images")
    _common(p)
    p.add_argument("--model", required=True, help="trained checkpoint")
    p.add_argument("--rig", required=True, help="rig.json with one camera per view")
    p.add_argument("--images", required=True, help="directory of view_<i>.pfm images")
    p.add_argument("--levels", action="store_true", help="also write mesh_level_<k>.obj for every level")
    p.add_argument("--chunk", type=int, default=256, help="vertices per local-network call")
    p.set_defaults(func=cmd_infer, seed_target=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--model", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "test", "all"], help="which samples")
    p.add_argument("--seeds", help="explicit sample seeds (overrides --split)")
    p.add_argument("--views", type=int, default=0, help="use only the first N views (0 = all)")
    p.set_defaults(func=cmd_eval, seed_target="eval")

    c = sub.add_parser("selfcheck", help="self checks")
    cs = c.add_subparsers(dest="action", parser_class=_Parser, required=True)
    p = cs.add_parser("grad", help="end-to-end finite-difference gradient check")
    _common(p, out_required=False)
    p.add_argument("--tiny", action="store_true",
                   help="tiny configuration (2 views, 8x8, 4^3 grid, 12->42 vertices); the only one offered")
    p.set_defaults(func=cmd_selfcheck_grad, seed_target="selfcheck")
    return ap


def _seeded(cfg, target, seed):
    """Route ``--seed`` to the settings of the command that consumes it."""
    if seed is None:
        return cfg
    if target in ("hierarchy", "synth"):
        cfg.dataset.template_seed = seed
        cfg.dataset.basis_seed = seed + 1
        cfg.dataset.texture_seed = seed + 2
    elif target == "train":
        cfg.model_seed = seed
        cfg.train_global.seed = seed
        cfg.train_local.seed = seed
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        if getattr(args, "seeds", None):
            parse_seeds(args.seeds)
        cfg = _load_cfg(args)
        cfg = _apply_overrides(cfg, args.set)
        cfg = _seeded(cfg, args.seed_target, args.seed)
        if getattr(args, "iterations", None) is not None:
            from .config import set_value
            cfg = set_value(cfg, f"train_{args.stage}.iterations", args.iterations)
        if args.seed is None:
            args.seed = 0
    except (UsageError, ValueError, OSError) as exc:  # ConfigError is a ValueError
        args.subparser.print_help(sys.stderr)
        print(f"{args.subparser.prog}: error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.out:
            _echo_config(cfg, args.out)
        args.func(args, cfg)
    except UsageError as exc:
        args.subparser.print_help(sys.stderr)
        print(f"{args.subparser.prog}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 2
    return 0


def main_entry():
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
