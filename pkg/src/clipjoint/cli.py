"""Command-line entry point: ``clipjoint {gen-data,train,eval,infer,gradcheck}``.

Exit codes: 0 success, 1 validation/format/I-O error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import artifacts
from .config import ConfigValidationError, RunConfig, load_config, parse_config
from .evalmap import UndefinedMetricError, evaluate
from .nanodet import generate_dataset
from .numerics import NumericError
from .trainer import GROUPS, GRADCHECK_TOL, Model, Trainer, TrainingAborted, gradcheck_all, predict
from .vlhead import FormatError

log = logging.getLogger("clipjoint")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "seed": cfg.train.seed}


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else cfg.replace("train", seed=seed)


def cmd_gen_data(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    count = cfg.train.n_train if args.count is None else args.count
    if count < 0:
        raise ConfigValidationError("--count must be >= 0")
    scenes = generate_dataset(cfg.scene, cfg.train.seed, count, split=args.split)
    artifacts.write_dataset(args.out, scenes)
    artifacts.write_json(artifacts.meta_path(args.out),
                         {**_provenance(cfg), "count": count, "split": args.split})
    log.info("wrote %d scenes to %s", count, args.out)
    return EXIT_OK


def _train_config(args) -> RunConfig:
    cfg = _with_seed(load_config(args.config), args.seed)
    if args.epochs is not None:
        cfg = cfg.replace("train", epochs=args.epochs)
    if args.baseline:
        # detector-only objective and detector-only scoring
        cfg = cfg.replace("train", lambda_cont=0.0, lambda_aux=0.0, alpha=1.0, freeze_vl=True)
        cfg = cfg.replace("eval", alpha=1.0)
    if args.text_embeddings is not None:
        cfg = cfg.replace("vlhead", text_embeddings=args.text_embeddings)
    data = args.data or cfg.paths.data
    val = args.val_data or cfg.paths.val_data
    out_dir = args.out_dir or cfg.paths.out_dir
    if out_dir is None:
        raise ConfigValidationError("an output directory is required (--out-dir or paths.out_dir)")
    if data is None and not args.generate:
        raise ConfigValidationError("give --data (or paths.data) or --generate")
    return cfg.replace("paths", data=data, val_data=val, out_dir=out_dir)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    tc, sc = cfg.train, cfg.scene
    if cfg.paths.data is not None:
        train_scenes = artifacts.read_dataset(cfg.paths.data, sc)
    else:
        train_scenes = generate_dataset(sc, tc.seed, tc.n_train, split=0)
    if cfg.paths.val_data is not None:
        val_scenes = artifacts.read_dataset(cfg.paths.val_data, sc)
    elif args.generate:
        val_scenes = generate_dataset(sc, tc.seed, tc.n_val, split=1)
    else:
        val_scenes = []
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    trainer = Trainer(tc, sc, train_scenes, val_scenes, vl_branch=not args.no_vl_branch, vl=cfg.vlhead)
    try:
        trainer.fit()
    finally:
        # partial history is still worth keeping after an abort
        artifacts.write_json(out / "metrics.json", artifacts.metrics_doc(trainer, echo))
        artifacts.write_json(out / "config.json", _provenance(cfg))
    artifacts.save_checkpoint(out / "checkpoint.json", trainer, echo, vl_branch=not args.no_vl_branch)
    last = trainer.history[-1] if trainer.history else None
    log.info("trained %d epoch(s); last record: %s", trainer.epoch, last)
    return EXIT_OK


def _load_model(path):
    doc = artifacts.load_checkpoint(path)
    try:
        cfg = parse_config(doc["config"])
    except ConfigValidationError as e:
        raise FormatError(f"checkpoint config: {e}") from e
    # text rows come from the checkpoint, so the original import file is not needed
    vl = dataclasses.replace(cfg.vlhead, text_embeddings=None)
    model = Model.init(cfg.scene, cfg.train.seed, bool(doc["vl_branch"]), vl)
    artifacts.restore_model(model, doc)
    return cfg, model


def _alpha(args, cfg: RunConfig) -> float:
    alpha = cfg.eval.alpha if args.alpha is None else args.alpha
    if not 0.0 <= alpha <= 1.0:
        raise ConfigValidationError("--alpha must lie in [0, 1]")
    return alpha


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.detections is None):
        raise ConfigValidationError("give exactly one of --checkpoint or --detections")
    if args.checkpoint is not None:
        cfg, model = _load_model(args.checkpoint)
        scenes = artifacts.read_dataset(args.data, cfg.scene)
        alpha = _alpha(args, cfg)
        dets = predict(model, scenes, cfg.scene, alpha, cfg.eval.obj_threshold, cfg.eval.nms_iou)
    else:
        cfg = load_config(args.config)
        scenes = artifacts.read_dataset(args.data, cfg.scene)
        by_id = artifacts.read_detections(args.detections)
        missing = [s.scene_id for s in scenes if s.scene_id not in by_id]
        if missing:
            raise FormatError(f"no detections for scene(s) {missing[:5]}")
        dets = [by_id[s.scene_id] for s in scenes]
        alpha = args.alpha
    summary = evaluate(dets, [s.gts for s in scenes])
    doc = {**summary, "alpha": alpha, "n_images": len(scenes), **_provenance(cfg)}
    artifacts.write_json(args.out, doc)
    print(f"map50={summary['map50']:.4f} map5095={summary['map5095']:.4f} n_images={len(scenes)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, model = _load_model(args.checkpoint)
    scenes = artifacts.read_dataset(args.data, cfg.scene)
    thr = cfg.eval.obj_threshold if args.obj_threshold is None else args.obj_threshold
    alpha = _alpha(args, cfg)
    dets = predict(model, scenes, cfg.scene, alpha, thr, cfg.eval.nms_iou)
    artifacts.write_detections(args.out, [s.scene_id for s in scenes], dets)
    artifacts.write_json(artifacts.meta_path(args.out),
                         {**_provenance(cfg), "alpha": alpha, "obj_threshold": thr})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    seed0 = cfg.train.seed if args.seed is None else args.seed
    ok = True
    for seed in range(seed0, seed0 + args.seeds):
        rep = gradcheck_all(seed, weights=cfg.train.weights, scene_config=cfg.scene, gate=cfg.train.vl_gate)
        print(f"seed {seed}  ({rep.n_positives} positive rows, {rep.seconds:.1f}s)")
        for g in GROUPS:
            err = rep.errors[g]
            verdict = "PASS" if err < GRADCHECK_TOL else "FAIL"
            print(f"  {g:<16} max_rel_err={err:.3e}  probes={rep.probes[g]:<4d} {verdict}")
        ok &= rep.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipjoint", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--split", type=int, default=0, help="0 train, 1 val; any int gives a disjoint stream")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write checkpoint.json, metrics.json, config.json")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--val-data")
    t.add_argument("--generate", action="store_true", help="generate train/val scenes from the config")
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--baseline", action="store_true",
                   help="detector-only run: zero VL loss weights, alpha 1, frozen VL branch")
    t.add_argument("--no-vl-branch", action="store_true", help="build the detector without the VL branch")
    t.add_argument("--text-embeddings", help="JSON file of class text embeddings")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute mAP@0.5 and mAP@[.5:.95]")
    e.add_argument("--checkpoint")
    e.add_argument("--detections", help="evaluate a detections.jsonl file instead of a checkpoint")
    e.add_argument("--config", help="scene config used with --detections")
    e.add_argument("--data", required=True)
    e.add_argument("--alpha", type=float)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write post-NMS detections as JSON lines")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--alpha", type=float)
    i.add_argument("--obj-threshold", type=float)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingAborted, NumericError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigValidationError, FormatError, UndefinedMetricError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
