"""Command-line entry point: ``pcomplete {datagen,train,complete,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes a resolved-config snapshot next to its outputs and
refuses to overwrite existing outputs unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import apply_overrides, dump_config, load_config, parse_value
from .data import (DatasetConfig, check_ratio, load_dataset, make_dataset, make_frames, read_xyz, unique_completes,
                   write_dataset, write_xyz)
from .errors import StateError
from .evaluation import (CSV_SCHEMA, DEFAULT_RATIOS, MetricReport, chamfer, consistency, eval_cd, fidelity,
                         fingerprint, robustness_sweep, write_sweep_csv)
from .model import CompletionModel, ModelConfig
from .train import TrainConfig, train_stage

log = logging.getLogger("pcomplete")

SNAPSHOT = "resolved_config.txt"


class UsageError(Exception):
    pass


def _thread_limit():
    n = os.environ.get("PCOMPLETE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _base_config(args) -> dict:
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        return apply_overrides(cfg, getattr(args, "set", None))
    except (OSError, ValueError) as e:
        raise UsageError(f"--config: {e}") from None


def _prepare_dir(path: Path, force: bool):
    if path.exists() and not path.is_dir():
        raise UsageError(f"--out {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"--out {path} is not empty; use --force to overwrite")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create --out {path}: {e}") from None


def _prepare_file(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"--out {path} exists; use --force to overwrite")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create directory for --out {path}: {e}") from None


def _write_snapshot(path: Path, cfg: dict):
    path.write_text(dump_config(cfg))


def cmd_datagen(args) -> int:
    cfg = _base_config(args)
    data = cfg.setdefault("data", {})
    for key, flag in (("mode", "mode"), ("shapes", "shapes"), ("n_points", "points"),
                      ("visible_ratio", "ratio"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    if args.categories:
        data["categories"] = args.categories.split(",")
    ratio = data.get("visible_ratio", 0.5)
    if isinstance(ratio, str):
        ratio = [parse_value(v) for v in ratio.split(":")] if ":" in ratio else parse_value(ratio)
    try:
        data["visible_ratio"] = check_ratio(ratio)
    except ValueError as e:
        raise UsageError(f"--ratio: {e}") from None
    try:
        dcfg = DatasetConfig(**data)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad data config: {e}") from None
    out = Path(args.out)
    _prepare_dir(out, args.force)
    dataset = make_dataset(dcfg)
    write_dataset(out, dataset)
    cfg["data"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(dcfg).items()}
    cfg["run"] = {"command": "datagen"}
    _write_snapshot(out / SNAPSHOT, cfg)
    n = sum(len(v) for v in dataset.values())
    print(f"wrote {n} pairs to {out}")
    return 0


def _model_config(section: dict) -> ModelConfig:
    section = dict(section)
    preset = section.pop("preset", "default")
    if preset == "desk":
        return ModelConfig.desk(**section)
    if preset == "default":
        return ModelConfig.from_dict(section)
    raise UsageError(f"unknown model.preset {preset!r}")


def cmd_train(args) -> int:
    cfg = _base_config(args)
    tsec = cfg.setdefault("train", {})
    tsec["stage"] = args.stage
    if args.from_scratch:
        tsec["from_scratch"] = True
    run = cfg.setdefault("run", {})
    data_dir = args.data or run.get("data")
    init = args.init or run.get("init")
    if data_dir is None:
        raise UsageError("--data (or run.data in the config) is required")
    if args.stage == 2 and not init:
        raise UsageError("stage 2 needs the stage-1 checkpoint via --init")
    if args.stage == 3 and not init and not tsec.get("from_scratch"):
        raise UsageError("stage 3 needs the stage-2 checkpoint via --init (or --from-scratch)")
    if init and not Path(init).is_file():
        raise UsageError(f"--init checkpoint {init} not found")
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"--resume checkpoint {args.resume} not found")
    try:
        tcfg = TrainConfig.from_dict(tsec)
        mcfg = _model_config(cfg.get("model", {})) if (args.stage == 1 or not init) else None
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from None
    try:
        dataset = load_dataset(data_dir)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    # resuming continues inside the interrupted run's directory
    _prepare_dir(out, args.force or bool(args.resume))
    try:
        result = train_stage(tcfg, dataset, init if args.stage > 1 else None, mcfg, out, args.resume)
    except StateError as e:
        if "requires" in str(e):
            raise UsageError(str(e)) from None
        raise
    cfg["train"] = tcfg.to_dict()
    cfg["model"] = result.model.config.to_dict()
    run.update({"command": "train", "data": str(data_dir)})
    if init:
        run["init"] = str(init)
    _write_snapshot(out / SNAPSHOT, cfg)
    last = result.history[-1] if result.history else {}
    print(f"stage {tcfg.stage} done: {result.checkpoint} "
          + " ".join(f"{k}={last[k]:.6g}" for k in ("feat", "cd_coarse", "cd_fine") if last.get(k) is not None))
    if result.val_curve:
        (step0, v0), (step1, v1) = result.val_curve[0], result.val_curve[-1]
        print(f"val feat_match: step {step0} {v0:.6g} -> step {step1} {v1:.6g}")
    return 0


def _load_model(path) -> CompletionModel:
    if not Path(path).is_file():
        raise UsageError(f"--ckpt {path} not found")
    try:
        return CompletionModel.from_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise UsageError(f"--ckpt {path}: {e}") from None


def cmd_complete(args) -> int:
    model = _load_model(args.ckpt)
    if not Path(args.input).is_file():
        raise UsageError(f"--input {args.input} not found")
    partial = read_xyz(args.input)
    resolution = args.resolution or model.config.coarse_points * (2 if model.config.refine else 1)
    try:
        model.config.iterations_for(resolution)
    except ValueError as e:
        raise UsageError(f"--resolution: {e}") from None
    out = Path(args.out)
    _prepare_dir(out, args.force)
    coarse, fine = model.complete(partial, resolution)
    write_xyz(out / "coarse.xyz", coarse)
    write_xyz(out / "fine.xyz", fine)
    cfg = {"run": {"command": "complete", "ckpt": str(args.ckpt), "input": str(args.input),
                   "resolution": resolution}, "model": model.config.to_dict()}
    print(f"wrote {len(coarse)} coarse and {len(fine)} fine points to {out}")
    if args.gt:
        gt = read_xyz(args.gt)
        cfg["run"]["gt"] = str(args.gt)
        print(f"cd_p {chamfer(fine, gt, 'cdp')!r}")
    _write_snapshot(out / SNAPSHOT, cfg)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    try:
        dataset = load_dataset(args.dataset)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    pairs = dataset.get(args.split, [])
    if not pairs:
        raise UsageError(f"split {args.split!r} of {args.dataset} is empty")
    out = Path(args.out)
    _prepare_file(out, args.force)
    cfg = {"run": {"command": "eval", "ckpt": str(args.ckpt), "dataset": str(args.dataset),
                   "metric": args.metric, "split": args.split, "seed": args.seed, "frames": args.frames,
                   "pairing": args.pairing},
           "model": model.config.to_dict()}
    fp = fingerprint(cfg)
    resolution = len(pairs[0].complete)

    def completer(partial):
        return model.complete(partial, resolution)[1]

    if args.metric in ("cdt", "cdp"):
        report = eval_cd(completer, pairs, args.metric, fp)
        report.to_csv(out)
        print(report.format())
    elif args.metric == "fidelity":
        report = MetricReport("fidelity", fingerprint=fp)
        vals: dict = {}
        for p in pairs:
            vals.setdefault(p.category, []).append(fidelity(p.partial, completer(p.partial)))
        report.per_category = {c: float(np.mean(v)) for c, v in vals.items()}
        report.counts = {c: len(v) for c, v in vals.items()}
        report.to_csv(out)
        print(report.format())
    elif args.metric == "consistency":
        items = []
        for p in unique_completes(pairs):
            for fr in make_frames(p.complete, p.visible_ratio, args.frames, p.instance_id, p.category):
                items.append((fr.instance_id, fr.frame_id, completer(fr.partial)))
        if args.frames < 2:
            raise UsageError("--frames: consistency needs at least 2 frames per instance")
        value = consistency(items, pairing=args.pairing)
        out.write_text(f"metric,value,frames,pairing,instances,fingerprint,schema\n"
                       f"consistency,{value!r},{args.frames},{args.pairing},"
                       f"{len(unique_completes(pairs))},{fp},{CSV_SCHEMA}\n")
        print(f"consistency {value:.6g}")
    else:
        rows = robustness_sweep(completer, unique_completes(pairs), DEFAULT_RATIOS, args.seed)
        write_sweep_csv(out, rows)
        for r in rows:
            print(f"R_v={r.visible_ratio:.1f}  cd_p x1e3 = {r.scaled:.4f}  (n={r.count})")
    _write_snapshot(out.with_name(out.name + ".config.txt"), cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcomplete", description="Point cloud completion toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    d = sub.add_parser("datagen", help="generate a synthetic dataset")
    common(d)
    d.add_argument("--mode", choices=("c3d", "pcn"))
    d.add_argument("--shapes", type=int)
    d.add_argument("--points", type=int)
    d.add_argument("--ratio", help="visible ratio in (0, 1], or LO:HI to draw one per pair")
    d.add_argument("--seed", type=int)
    d.add_argument("--categories", help="comma-separated subset of sphere,cuboid,cylinder,composite")
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--data", help="dataset directory from datagen")
    t.add_argument("--init", help="checkpoint of the previous stage")
    t.add_argument("--resume", help="checkpoint of this stage to continue from")
    t.add_argument("--from-scratch", action="store_true", help="stage 3 without earlier stages")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("complete", help="complete a single partial cloud")
    common(c, config=False)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--resolution", type=int,
                   help="output points, coarse_points * 2^m (default: 2 * coarse_points)")
    c.add_argument("--gt", help="ground-truth cloud; prints CD-P against it")
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(e, config=False)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--metric", choices=("cdt", "cdp", "fidelity", "consistency", "sweep"), default="cdp")
    e.add_argument("--split", default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--frames", type=int, default=3, help="frames per instance for consistency")
    e.add_argument("--pairing", choices=("adjacent", "all"), default="adjacent",
                   help="which frame pairs consistency compares")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"pcomplete {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"pcomplete {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
