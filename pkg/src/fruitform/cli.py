"""Command line entry point: ``fruitform <subcommand> ...``.

Exit codes: 0 success, 1 I/O failure, 2 validation error. Option values
resolve as command-line flag > ``--config`` JSON file > built-in default,
and the effective configuration is written to ``<out>/run.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from fruitform.errors import FruitformError, ValidationError
from fruitform.io_utils import atomic_write_text, sha256_file

log = logging.getLogger("fruitform")

# per-subcommand defaults; argparse options default to None so explicit flags are detectable
DEFAULTS: Dict[str, dict] = {
    "dataset ingest": {"root": None, "fruit": "Apple", "labels": None, "name": None},
    "dataset balance": {"manifest": None, "target": 5000},
    "dataset augment": {"manifest": None, "plan": None, "name": None},
    "dataset split": {"manifest": None, "ratios": "0.8,0.1,0.1", "name": None},
    "silhouette": {"mode": "builtin", "manifest": None, "mask_dir": None, "tol": 30.0,
                   "report": None, "min_area": 0.05, "max_area": 0.95},
    "shapegen": {"per_class": 50, "side": 64, "background": "uniform", "thresholds": "0.97,0.93,0.88",
                 "margin": 0.005, "source": "Synthetic", "name": "procedural"},
    "train": {"manifest": None, "synthetic_manifest": None, "mask_dir": None, "backbone": "tiny",
              "side": 64, "feature_dim": None, "hidden": "256", "optimizer": "adam", "lr": 1e-3,
              "batch_size": 32, "max_epochs": 30, "fine_lr": 1e-4, "fine_epochs": 30,
              "weights": None},
    "eval": {"manifest": None, "model_dir": None, "split": "Test", "mask_dir": None, "name": None},
    "report": {"reports": None},
}
GLOBAL_DEFAULTS = {"out": ".", "seed": 0}


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--out", default=d, help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, default=d, help="master seed (default 0)")
    p.add_argument("--config", default=d, help="flat JSON file with option values")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    parser = argparse.ArgumentParser(prog="fruitform", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", parents=[common], help="ingest, balance, augment or split manifests")
    dsub = ds.add_subparsers(dest="action", required=True)
    p = dsub.add_parser("ingest", parents=[common])
    p.add_argument("--root")
    p.add_argument("--fruit", choices=["Apple", "Mango", "Strawberry", "Procedural"])
    p.add_argument("--labels", help="dir=Class pairs, e.g. extra=ExtraClass,first=FirstClass "
                                    "(default: directories named after the classes)")
    p.add_argument("--name")
    p = dsub.add_parser("balance", parents=[common])
    p.add_argument("--manifest")
    p.add_argument("--target", type=int)
    p = dsub.add_parser("augment", parents=[common])
    p.add_argument("--manifest")
    p.add_argument("--plan")
    p.add_argument("--name")
    p = dsub.add_parser("split", parents=[common])
    p.add_argument("--manifest")
    p.add_argument("--ratios")
    p.add_argument("--name")

    p = sub.add_parser("silhouette", parents=[common], help="produce masks and an exclusion report")
    p.add_argument("mode", nargs="?", choices=["builtin", "ingest"])
    p.add_argument("--manifest")
    p.add_argument("--mask-dir", help="external masks (<record_id>.mask.png) for ingest mode")
    p.add_argument("--tol", type=float)
    p.add_argument("--report")
    p.add_argument("--min-area", type=float)
    p.add_argument("--max-area", type=float)

    p = sub.add_parser("shapegen", parents=[common], help="build a procedural dataset")
    p.add_argument("--per-class", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--background", choices=["uniform", "noisy"])
    p.add_argument("--thresholds")
    p.add_argument("--margin", type=float)
    p.add_argument("--source", choices=["Synthetic", "Real"])
    p.add_argument("--name")

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("regime", choices=["single", "pretrain-finetune", "multi"])
    p.add_argument("--manifest", help="split manifest (the real set for pretrain-finetune)")
    p.add_argument("--synthetic-manifest")
    p.add_argument("--mask-dir")
    p.add_argument("--backbone", choices=["tiny", "cidis", "mobilenetv2", "vgg16"])
    p.add_argument("--side", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--hidden", help="comma separated MLP widths (multi-input)")
    p.add_argument("--optimizer", choices=["adam", "nadam", "rmsprop"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--fine-lr", type=float)
    p.add_argument("--fine-epochs", type=int)
    p.add_argument("--weights", help="initial weights file for the (RGB) backbone")

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    p.add_argument("--manifest")
    p.add_argument("--model-dir")
    p.add_argument("--split", choices=["Train", "Val", "Test"])
    p.add_argument("--mask-dir")
    p.add_argument("--name")

    p = sub.add_parser("report", parents=[common], help="compare evaluation reports")
    p.add_argument("--reports", help="directory of *.report.json files")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    key = args.command if args.command != "dataset" else f"dataset {args.action}"
    cfg = dict(GLOBAL_DEFAULTS)
    cfg.update(DEFAULTS[key])
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValidationError("config file must hold a flat JSON object")
        unknown = sorted(set(file_cfg) - set(cfg) - {"regime"})
        if unknown:
            raise ValidationError(f"unknown config keys for {key!r}: {unknown}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("command", "action", "config", "verbose"):
            continue
        if v is not None:
            cfg[k] = v
    cfg["command"] = key
    return cfg


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if not cfg.get(n)]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join(
            "--" + n.replace("_", "-") for n in missing))


def _floats(text: str, n: Optional[int] = None, what: str = "values") -> List[float]:
    try:
        vals = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"cannot parse {what} {text!r}") from None
    if n is not None and len(vals) != n:
        raise ValidationError(f"expected {n} comma separated {what}, got {text!r}")
    return vals


def _stem(manifest_path: str) -> str:
    name = Path(manifest_path).name
    return name[: -len(".manifest.jsonl")] if name.endswith(".manifest.jsonl") else Path(name).stem


# -- subcommands -------------------------------------------------------------------

def cmd_dataset(cfg: dict, out: Path) -> None:
    from fruitform.data import (AugmentationPlan, DatasetManifest, DeformityClass, FruitKind,
                                apply_augmentation, ingest_directory, plan_balancing,
                                stratified_split)

    action = cfg["command"].split()[1]
    if action == "ingest":
        _require(cfg, "root")
        if cfg["labels"]:
            labeling = {}
            for pair in str(cfg["labels"]).split(","):
                d, _, c = pair.partition("=")
                labeling[d.strip()] = DeformityClass.parse(c.strip())
        else:
            labeling = {c.name: c for c in DeformityClass}
        manifest = ingest_directory(cfg["root"], FruitKind(cfg["fruit"]), labeling)
        for w in manifest.warnings:
            print(f"warning: {w}", file=sys.stderr)
        path = manifest.save(out / f"{cfg['name'] or cfg['fruit'].lower()}.manifest.jsonl")
        _print_counts(manifest)
        print(path)
    elif action == "balance":
        _require(cfg, "manifest")
        manifest = DatasetManifest.load(cfg["manifest"])
        plan = plan_balancing(manifest, int(cfg["target"]))
        for cls, n in plan.planned_per_class.items():
            print(f"{cls.name}\t{manifest.class_counts[cls]}\t+{n}")
        print(atomic_write_text(out / "plan.json", json.dumps(plan.to_dict(), indent=1) + "\n"))
    elif action == "augment":
        _require(cfg, "manifest", "plan")
        manifest = DatasetManifest.load(cfg["manifest"])
        with open(cfg["plan"], encoding="utf-8") as fh:
            plan = AugmentationPlan.from_dict(json.load(fh))
        augmented = apply_augmentation(manifest, plan, out / "augmented")
        name = cfg["name"] or f"{_stem(cfg['manifest'])}-augmented"
        _print_counts(augmented)
        print(augmented.save(out / f"{name}.manifest.jsonl"))
    else:
        _require(cfg, "manifest")
        ratios = _floats(cfg["ratios"], 3, "ratios")
        manifest = DatasetManifest.load(cfg["manifest"])
        split = stratified_split(manifest, ratios, seed=int(cfg["seed"]))
        name = cfg["name"] or f"{_stem(cfg['manifest'])}-split"
        print(split.save(out / f"{name}.manifest.jsonl"))


def _print_counts(manifest) -> None:
    for cls, n in manifest.class_counts.items():
        print(f"{cls.name}\t{n}")


def cmd_silhouette(cfg: dict, out: Path) -> None:
    import numpy as np

    from fruitform import silhouette as sil
    from fruitform.data import DatasetManifest
    from fruitform.data.augment import load_rgb

    _require(cfg, "manifest")
    manifest = DatasetManifest.load(cfg["manifest"])
    masks = []
    if cfg["mode"] == "ingest":
        _require(cfg, "mask_dir")
        for r in manifest.records:
            src = sil.mask_path(cfg["mask_dir"], r.id)
            if not src.exists():
                empty = np.zeros((r.height, r.width), dtype=np.uint8)
                masks.append(sil.SilhouetteMask(r.id, empty, "missing mask"))
                continue
            masks.append(sil.ingest_external_mask(r.id, src, (r.width, r.height)))
    else:
        for r in manifest.records:
            masks.append(sil.segment_uniform_background(load_rgb(r.path), float(cfg["tol"]), r.id))
    kept, excluded = sil.quality_filter(masks, (float(cfg["min_area"]), float(cfg["max_area"])))
    mask_dir = out / "masks"
    for m in kept:
        sil.save_mask(m, mask_dir)
    report = Path(cfg["report"]) if cfg["report"] else out / "exclusions.csv"
    sil.write_exclusion_report(excluded, report)
    print(f"kept {len(kept)}, excluded {len(excluded)}; masks in {mask_dir}; report {report}")


def cmd_shapegen(cfg: dict, out: Path) -> None:
    from fruitform.data import Source
    from fruitform.shapegen import GradeThresholds, build_procedural_dataset

    cuts = _floats(cfg["thresholds"], 3, "thresholds")
    ds = build_procedural_dataset(out, int(cfg["per_class"]), side=int(cfg["side"]),
                                  thresholds=GradeThresholds(*cuts), seed=int(cfg["seed"]),
                                  background=cfg["background"], source=Source(cfg["source"]),
                                  name=cfg["name"], margin=float(cfg["margin"]))
    _print_counts(ds.manifest)
    print(ds.manifest_path)


def _load_masks(manifest, mask_dir):
    from fruitform.silhouette import load_mask, mask_path

    masks = {}
    for r in manifest.records:
        if mask_path(mask_dir, r.id).exists():
            masks[r.id] = load_mask(mask_dir, r.id, (r.width, r.height))
    return masks


def _model_spec(cfg: dict, multi: bool):
    from fruitform.nets import BackboneSpec, MultiInputSpec, SingleInputSpec

    kind, side, seed = cfg["backbone"], int(cfg["side"]), int(cfg["seed"])
    fd = cfg["feature_dim"]
    if fd is None:
        fd = {"tiny": 32, "cidis": 128, "mobilenetv2": 1280, "vgg16": 512}[kind]
    rgb = BackboneSpec(kind, side, 3, int(fd), seed=seed, weights=cfg["weights"])
    if not multi:
        return SingleInputSpec(rgb, seed=seed)
    sil = BackboneSpec(kind, side, 1, int(fd), seed=seed + 1)
    hidden = tuple(int(h) for h in _floats(cfg["hidden"], what="hidden widths"))
    return MultiInputSpec(rgb, sil, hidden=hidden, seed=seed)


def _train_config(cfg: dict, fine: bool = False):
    from fruitform.trainer import TrainConfig

    return TrainConfig(optimizer=cfg["optimizer"],
                       learning_rate=float(cfg["fine_lr"] if fine else cfg["lr"]),
                       batch_size=int(cfg["batch_size"]),
                       max_epochs=int(cfg["fine_epochs"] if fine else cfg["max_epochs"]),
                       seed=int(cfg["seed"]))


def cmd_train(cfg: dict, out: Path) -> None:
    from fruitform.data import DatasetManifest
    from fruitform.nets import build_model, save_weights
    from fruitform.trainer import pretrain_then_finetune, train, train_multi

    regime = cfg["regime"]
    config = _train_config(cfg)
    fine_config = _train_config(cfg, fine=True) if regime == "pretrain-finetune" else None
    _require(cfg, "manifest")
    if regime == "multi":
        _require(cfg, "mask_dir")
    if regime == "pretrain-finetune":
        _require(cfg, "synthetic_manifest")
    spec = _model_spec(cfg, multi=regime == "multi")
    manifest = DatasetManifest.load(cfg["manifest"])
    model = build_model(spec)
    histories = {}
    if regime == "single":
        model, histories["history"] = train(model, manifest, config)
    elif regime == "multi":
        masks = _load_masks(manifest, cfg["mask_dir"])
        model, histories["history"] = train_multi(model, manifest, masks, config)
    else:
        synthetic = DatasetManifest.load(cfg["synthetic_manifest"])
        model, h_pre, h_fine = pretrain_then_finetune(model, synthetic, manifest, config, fine_config)
        histories["history_pretrain"], histories["history"] = h_pre, h_fine
    for stem, hist in histories.items():
        hist.save(out / f"{stem}.csv")
    save_weights(model, out / "weights.npz")
    model_meta = {"spec": spec.to_dict(), "regime": regime, "fruit": manifest.fruit.value}
    atomic_write_text(out / "model.json", json.dumps(model_meta, indent=2, sort_keys=True) + "\n")
    h = histories["history"]
    print(f"best epoch {h.best_epoch}: val_accuracy={h.best.val_accuracy:.4f} "
          f"val_loss={h.best.val_loss:.4f}")


def cmd_eval(cfg: dict, out: Path) -> None:
    from fruitform.data import DatasetManifest
    from fruitform.evalkit import evaluate
    from fruitform.nets import build_model, is_multi, load_weights, spec_from_dict

    _require(cfg, "manifest", "model_dir")
    model_dir = Path(cfg["model_dir"])
    with open(model_dir / "model.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = build_model(spec_from_dict(meta["spec"]))
    load_weights(model, model_dir / "weights.npz")
    manifest = DatasetManifest.load(cfg["manifest"])
    masks = None
    if is_multi(model):
        _require(cfg, "mask_dir")
        masks = _load_masks(manifest, cfg["mask_dir"])
    sidecar = model_dir / "history.json"
    ref = sha256_file(sidecar) if sidecar.exists() else ""
    report = evaluate(model, manifest, cfg["split"], masks, config_ref=ref)
    name = cfg["name"] or f"{meta['fruit'].lower()}-{_model_name(meta)}-{meta['regime']}"
    data = report.to_dict()
    data.update(fruit=meta["fruit"], model=_model_name(meta), regime=meta["regime"])
    json_path = out / f"{name}.report.json"
    atomic_write_text(json_path, json.dumps(data, indent=2, sort_keys=True) + "\n")
    atomic_write_text(json_path.with_suffix(".csv"), report.to_csv())
    print(report.to_csv(), end="")
    print(json_path)


def _model_name(meta: dict) -> str:
    spec = meta["spec"]
    branch = spec.get("backbone") or spec.get("rgb_branch")
    return branch["kind"]


def cmd_report(cfg: dict, out: Path) -> None:
    from fruitform.evalkit import MetricsReport, render_comparison

    _require(cfg, "reports")
    rdir = Path(cfg["reports"])
    if not rdir.is_dir():
        raise ValidationError(f"report directory not found: {rdir}")
    reports = {}
    for path in sorted(rdir.glob("*.report.json")):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        key = (d.get("fruit", "?"), d.get("model", path.stem), d.get("regime", "?"))
        reports[key] = MetricsReport.from_dict(d)
    if not reports:
        raise ValidationError(f"no *.report.json files in {rdir}")
    table = render_comparison(reports)
    table.save(out)
    print(table.text, end="")


COMMANDS = {"dataset": cmd_dataset, "silhouette": cmd_silhouette, "shapegen": cmd_shapegen,
            "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
        # written last so a failed invocation never clobbers the record of a good run
        atomic_write_text(out / "run.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FruitformError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
