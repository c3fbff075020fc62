"""Command-line entry point: ``anchorad <command> [options]``.

Every command works inside one run directory (``--out``).  Relative run
directories are resolved under ``$ANCHORAD_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout
from PIL import Image

from . import checkpoint
from .config import ConfigError, config_hash, load_config
from .evaluation import anchors_for, evaluate, export_diagnostics
from .head import infer
from .pretrain import PretrainConfig, entanglement, pretrain
from .prompts import ClassRegistry, load_bank, load_caption_bank
from .synthdata import (SplitSpec, load_dataset, make_split, make_validation, write_dataset, write_manifest)
from .training import AdapterConfig, StageConfig, TrainLog, one_stage_train, stage1_train, stage2_train

log = logging.getLogger("anchorad")

OUTPUT_ROOT_ENV = "ANCHORAD_OUTPUT_ROOT"
DATA_DIR = "data"
CHECKPOINTS = {"pretrain": "pretrain.ckpt", "stage1": "stage1.ckpt", "stage2": "stage2.ckpt",
               "one_stage": "one_stage.ckpt"}


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


class StageOrderError(RuntimeError):
    pass


def resolve_out(out: str) -> Path:
    path = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _dtype(cfg):
    try:
        return {"float32": torch.float32, "float64": torch.float64}[cfg["precision"]]
    except KeyError:
        raise UsageError(f"precision must be float32 or float64, got {cfg['precision']!r}") from None


def _resources(cfg):
    return load_bank(cfg["prompts"]["bank"]), ClassRegistry.load(cfg["prompts"]["registry"])


def _split_spec(cfg) -> SplitSpec:
    d = cfg["data"]
    return SplitSpec(shots=d["shots"], train_classes=d["train_classes"], test_classes=d["test_classes"],
                     full_per_class=d["full_per_class"], test_per_class=d["test_per_class"])


def _stage_config(cfg, stage: int) -> StageConfig:
    sec = dict(cfg[f"stage{stage}"])
    sec.pop("one_stage", None)
    sec["betas"] = tuple(sec["betas"])
    factory = StageConfig.stage1 if stage == 1 else StageConfig.stage2
    return factory(seed=cfg["seed"], **sec)


def _require(path: Path, message: str) -> Path:
    if not path.is_file():
        raise StageOrderError(message)
    return path


def _record(out: Path, cfg: dict, command: str, started: float, extra: dict | None = None) -> None:
    """Append reproduction metadata for this command to ``run.jsonl``."""
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    row = {"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"],
           "wall_time_s": round(time.time() - started, 3), "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
           **(extra or {})}
    with open(out / "run.jsonl", "a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_gen_data(args, cfg, out: Path) -> dict:
    spec = _split_spec(cfg)
    try:
        spec.train_per_class
    except ValueError as err:
        raise UsageError(str(err)) from None
    seed, workers = cfg["seed"], cfg["data"]["workers"]
    train, test = make_split(spec, seed, workers)
    val = make_validation(spec, seed, cfg["data"]["val_per_class"])
    root = out / DATA_DIR
    rows = []
    for name, samples in (("train", train), ("test", test), ("val", val)):
        rows += write_dataset(samples, root, name)
    write_manifest(rows, root / "manifest.jsonl")
    counts = {}
    for r in rows:
        key = f"{r['split']}/{'anomaly' if r['label'] else 'normal'}"
        counts[key] = counts.get(key, 0) + 1
    print(json.dumps(counts, sort_keys=True))
    return {"counts": counts}


def cmd_pretrain(args, cfg, out: Path) -> dict:
    bank, registry = _resources(cfg)
    pcfg = PretrainConfig(**cfg["pretrain"])
    model, report = pretrain(registry, load_caption_bank(), pcfg, cfg["backbone"], _dtype(cfg))
    ent = entanglement(model, bank, registry, list(registry))
    bundle = checkpoint.Bundle(model, "pretrain", meta={"pretrain_report": report, "entanglement": ent})
    checkpoint.save(bundle, out / CHECKPOINTS["pretrain"])
    (out / "pretrain_report.json").write_text(json.dumps({**report, "entanglement": ent}, indent=2))
    print(f"retrieval top-1 {report['retrieval_top1']:.4f}")
    return {"retrieval_top1": report["retrieval_top1"]}


def _load_split(out: Path, split: str):
    root = out / DATA_DIR
    _require(root / "manifest.jsonl", f"no dataset in {root}; run gen-data first")
    return load_dataset(root, split)


def cmd_adapt(args, cfg, out: Path) -> dict:
    bank, registry = _resources(cfg)
    adapters = AdapterConfig(**cfg["adapters"])
    train_log = TrainLog()
    dtype = _dtype(cfg)
    if args.stage == 1:
        pre = checkpoint.load(_require(out / CHECKPOINTS["pretrain"],
                                       "pretrained backbone required: run pretrain first"))
        pre.backbone.to(dtype)
        train = _load_split(out, "train")
        if cfg["stage2"]["one_stage"]:
            bundle = one_stage_train(pre, train, bank, registry, _stage_config(cfg, 2), adapters, train_log)
            name = "one_stage"
        else:
            bundle = stage1_train(pre, train, bank, registry, _stage_config(cfg, 1), adapters, train_log)
            name = "stage1"
    else:
        path = out / CHECKPOINTS["stage1"]
        if not path.is_file():
            raise StageOrderError("stage-1 anchors required: run `adapt --stage 1` first")
        s1 = checkpoint.load(path)
        train, val = _load_split(out, "train"), _load_split(out, "val")
        bundle = stage2_train(s1, train, _stage_config(cfg, 2), adapters, val, train_log)
        name = "stage2"
    checkpoint.save(bundle, out / CHECKPOINTS[name])
    train_log.write(out / f"{name}_log.jsonl")
    (out / f"{name}_digests.json").write_text(json.dumps(train_log.digests, indent=2))
    if train_log.validation:
        (out / f"{name}_validation.json").write_text(json.dumps(train_log.validation, indent=2))
    print(f"wrote {out / CHECKPOINTS[name]}")
    return {"digests": train_log.digests}


def _checkpoint_path(args, out: Path) -> Path:
    if args.checkpoint:
        return _require(Path(args.checkpoint), f"checkpoint not found: {args.checkpoint}")
    for name in ("stage2", "one_stage", "stage1", "pretrain"):
        if (out / CHECKPOINTS[name]).is_file():
            return out / CHECKPOINTS[name]
    raise StageOrderError(f"no checkpoint in {out}; pass --checkpoint")


def cmd_eval(args, cfg, out: Path) -> dict:
    bank, registry = _resources(cfg)
    path = _checkpoint_path(args, out)
    bundle = checkpoint.load(path)
    samples = _load_split(out, args.split)
    classes = sorted({s.class_id for s in samples})
    anchors = anchors_for(bundle.backbone, classes, bank, registry)
    metrics = evaluate(bundle.detector(cfg["eval"]["temperature"]), samples, anchors, cfg["eval"]["batch_size"])
    report = {"split": args.split, "checkpoint": str(path), "stage": bundle.stage, **metrics}
    target = out / f"metrics_{bundle.stage}_{args.split}.json"
    target.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({k: report[k] for k in ("split", "stage", "image_auroc", "pixel_auroc")}))
    return {"metrics": str(target)}


def read_image(path) -> torch.Tensor:
    """An 8-bit RGB image as an (H, W, 3) float tensor in [0, 1]."""
    try:
        img = Image.open(path)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read image {path}: {err}") from None
    return torch.from_numpy(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)


def cmd_infer(args, cfg, out: Path) -> dict:
    bank, registry = _resources(cfg)
    bundle = checkpoint.load(_checkpoint_path(args, out))
    image = read_image(args.image)
    size = bundle.backbone.vision_spec.image_size
    if tuple(image.shape[:2]) != (size, size):
        raise UsageError(f"image must be {size}x{size}, got {image.shape[1]}x{image.shape[0]}")
    # classes missing from the registry fall back to their own name as description
    description = registry.get(args.class_id, args.class_id.replace("_", " "))
    anchors = anchors_for(bundle.backbone, [args.class_id], bank, {args.class_id: description})[args.class_id]
    pred = infer(image.to(bundle.backbone.dtype), anchors, bundle.detector(cfg["eval"]["temperature"]))
    stem = Path(args.image).stem
    map_path = out / f"{stem}_map.png"
    heat = np.round(pred.anomaly_map.double().numpy() * 255).astype(np.uint8)
    Image.fromarray(heat, mode="L").save(map_path)
    np.save(out / f"{stem}_map.npy", pred.anomaly_map.double().numpy())
    result = {"image": str(args.image), "class": args.class_id, "score": float(pred.anomaly_score),
              "p_cls": [float(v) for v in pred.p_cls], "map": str(map_path)}
    (out / f"{stem}_score.json").write_text(json.dumps(result, indent=2))
    print(f"score {result['score']:.6f}")
    return result


def cmd_export_diagnostics(args, cfg, out: Path) -> dict:
    bank, registry = _resources(cfg)
    bundle = checkpoint.load(_checkpoint_path(args, out))
    summary = export_diagnostics(bundle, list(registry), bank, registry, out / f"diagnostics_{bundle.stage}")
    print(f"normal/anomaly block mean {summary['normal_anomaly_block_mean']:.4f}")
    return {"normal_anomaly_block_mean": summary["normal_anomaly_block_mean"]}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "infer": cmd_infer, "export-diagnostics": cmd_export_diagnostics}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults are built in)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config value")
    common.add_argument("--out", default="run", help="run directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. stage1.lr=1e-5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="anchorad", description="Two-stage anomaly-aware adaptation of a "
                                     "miniature dual encoder on synthetic defect data.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    sub.add_parser("pretrain", parents=[common], help="contrastive pretraining from scratch")
    p = sub.add_parser("adapt", parents=[common], help="run one adaptation stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p = sub.add_parser("eval", parents=[common], help="AUROC metrics on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test", "val"))
    p = sub.add_parser("infer", parents=[common], help="anomaly map and score for one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_id", required=True, help="class id; need not have been trained on")
    p = sub.add_parser("export-diagnostics", parents=[common], help="anchor similarity and embedding dumps")
    p.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = resolve_out(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise UsageError(f"cannot create run directory {out}: {err}") from None
        started = time.time()
        with FileLock(str(out / ".lock"), timeout=0):
            extra = COMMANDS[args.command](args, cfg, out)
            _record(out, cfg, args.command + (f" --stage {args.stage}" if args.command == "adapt" else ""),
                    started, {"result": extra})
        return 0
    except (ConfigError, UsageError) as err:
        parser.print_usage(sys.stderr)
        print(f"anchorad: error: {err}", file=sys.stderr)
        return 2
    except Timeout:
        print(f"anchorad: error: run directory {out} is locked by another command", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - any runtime failure is reported, not traced
        log.debug("command failed", exc_info=True)
        print(f"anchorad: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
