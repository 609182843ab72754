"""``metadapt`` command line: synth, calibrate, train, pretrain, adapt, evaluate, report.

Every subcommand resolves one experiment config (built-in defaults, then an
optional JSON/YAML file, then flags) and writes the resolved copy as
``config.json`` in its output directory. Exit codes: 0 success, 2 usage or
config error, 3 runtime or data error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .evaluation import (
    DegradationSpec,
    default_suite,
    forgetting_report,
    generate_synthetic_benchmark,
    robustness_report,
    write_confusion_csv,
    write_json,
    write_rows_csv,
)
from .imaging import EmptyCalibrationError, build_calibration_profile
from .losses import GuidedLossConfig
from .metadomain import LabeledDataset, read_manifests, write_dataset
from .model import Checkpoint, EncoderConfig
from .training import TrainConfig, ct_pretrain, guided_tune, train_supervised

log = logging.getLogger("metadapt")

OUTPUT_ROOT_ENV = "METADAPT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags, config keys or input paths (exit 2)."""


def _defaults() -> dict:
    tc, gc, enc = TrainConfig(), GuidedLossConfig(), EncoderConfig()
    return {
        "data": {"source": [], "target": [], "class_count": None, "label_map": None},
        "encoder": enc.to_dict(),
        "training": {
            "epochs": tc.epochs,
            "batch_size": tc.batch_size,
            "lr": tc.lr,
            "adapt_source_batch": tc.adapt_source_batch,
            "augment_probability": tc.augment_probability,
            "generic_blur_sigma": tc.generic_blur_sigma,
            "freeze_encoder": tc.freeze_encoder,
        },
        "guided": {
            "k": gc.k,
            "beta1": gc.beta1,
            "beta2": gc.beta2,
            "inner_lr": gc.inner_lr,
            "calibration_fraction": tc.calibration_fraction,
        },
        "contrastive": {"temperature": tc.temperature, "n_views": tc.n_views, "standard_denominator": tc.standard_denominator},
        "seed": 0,
        "output_dir": None,
    }


DEFAULTS = _defaults()


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where + key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
    except Exception as exc:
        raise UsageError(f"{path}: cannot parse config ({exc})") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a mapping at top level")
    return doc


# flag dest -> config path
_FLAG_KEYS = {
    "seed": ("seed",),
    "epochs": ("training", "epochs"),
    "batch_size": ("training", "batch_size"),
    "lr": ("training", "lr"),
    "adapt_source_batch": ("training", "adapt_source_batch"),
    "freeze_encoder": ("training", "freeze_encoder"),
    "k": ("guided", "k"),
    "beta1": ("guided", "beta1"),
    "beta2": ("guided", "beta2"),
    "inner_lr": ("guided", "inner_lr"),
    "calibration_fraction": ("guided", "calibration_fraction"),
    "temperature": ("contrastive", "temperature"),
    "n_views": ("contrastive", "n_views"),
    "source": ("data", "source"),
    "target": ("data", "target"),
    "class_count": ("data", "class_count"),
    "label_map": ("data", "label_map"),
    "out": ("output_dir",),
}


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        cfg = _merge(cfg, load_config_file(args.config))
    for dest, keys in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    if cfg["output_dir"] is None:
        cfg["output_dir"] = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command)
    return cfg


def train_config(cfg: dict, regime: str) -> TrainConfig:
    t, g, c = cfg["training"], cfg["guided"], cfg["contrastive"]
    try:
        return TrainConfig(
            regime=regime,
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            seed=int(cfg["seed"]),
            n_views=int(c["n_views"]),
            temperature=float(c["temperature"]),
            standard_denominator=bool(c["standard_denominator"]),
            guided=GuidedLossConfig(float(g["beta1"]), float(g["beta2"]), int(g["k"]), float(g["inner_lr"])),
            calibration_fraction=float(g["calibration_fraction"]),
            adapt_source_batch=int(t["adapt_source_batch"]),
            augment_probability=float(t["augment_probability"]),
            generic_blur_sigma=float(t["generic_blur_sigma"]),
            freeze_encoder=bool(t["freeze_encoder"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def encoder_config(cfg: dict) -> EncoderConfig:
    allowed = {f.name for f in fields(EncoderConfig)}
    unknown = set(cfg["encoder"]) - allowed
    if unknown:
        raise UsageError(f"unknown config key(s) in encoder: {sorted(unknown)}")
    try:
        return EncoderConfig.from_dict(cfg["encoder"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid encoder config: {exc}") from None


def parse_label_map(value) -> dict[int, int] | None:
    """``"0:1,1:0"`` or a mapping such as ``{"0": 1, "1": 0}``."""
    if value is None:
        return None
    try:
        if isinstance(value, dict):
            return {int(k): int(v) for k, v in value.items()}
        pairs = [p.split(":") for p in str(value).split(",") if p.strip()]
        return {int(a): int(b) for a, b in pairs}
    except ValueError:
        raise UsageError(f"label map {value!r} must look like '0:1,1:0'") from None


def manifest_paths(spec: str | Path) -> list[Path]:
    """A manifest CSV, or a directory holding train/val/test manifests."""
    p = Path(spec)
    if p.is_dir():
        found = [p / f"{s}.csv" for s in ("train", "val", "test") if (p / f"{s}.csv").is_file()]
        if not found:
            raise UsageError(f"no train/val/test manifests in {p}")
        return found
    if not p.is_file():
        raise UsageError(f"manifest not found: {p}")
    return [p]


def load_dataset(specs, class_count=None) -> LabeledDataset:
    if isinstance(specs, (str, Path)):
        specs = [specs]
    if not specs:
        raise UsageError("no dataset given")
    paths = [m for s in specs for m in manifest_paths(s)]
    first = Path(specs[0])
    name = first.name if first.is_dir() else first.parent.name
    try:
        return read_manifests(paths, name, class_count)
    except EmptyCalibrationError as exc:
        raise UsageError(str(exc)) from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg, out / "config.json")
    return out


def _write_run(ckpt: Checkpoint, out: Path) -> None:
    ckpt.save(out / "model.ckpt")
    if ckpt.log:
        write_rows_csv(ckpt.log, out / "metrics.csv")
    if ckpt.metrics:
        write_json(ckpt.metrics, out / "final_metrics.json")
    for w in ckpt.warnings:
        log.warning(w)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> int:
    if args.per_class < 10:
        raise UsageError(f"--per-class must be >= 10 (got {args.per_class}); each class needs train/val/test samples")
    try:
        bm = generate_synthetic_benchmark(int(cfg["seed"]), args.per_class, args.classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(cfg)
    written = []
    for ds in (bm.domain_a, bm.domain_b):
        written += write_dataset(ds, out / ds.domain_name)
    write_json(bm.config, out / "benchmark.json")
    print(f"wrote {len(written)} manifests under {out}")
    return EXIT_OK


def cmd_calibrate(args, cfg) -> int:
    ds = load_dataset(args.manifest, cfg["data"]["class_count"])
    if args.split:
        ds = ds.split(args.split)
    if len(ds) == 0:
        raise UsageError(f"no images in split {args.split!r}")
    profile = build_calibration_profile(list(ds.images))
    out = _out_dir(cfg)
    (out / "profile.json").write_text(profile.to_json() + "\n")
    print(f"profile of {profile.source_image_count} images -> {out / 'profile.json'}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = load_dataset(cfg["data"]["source"], cfg["data"]["class_count"])
    init = load_checkpoint(args.init) if args.init else None
    if args.regime != "naive" and init is None:
        raise UsageError(f"--regime {args.regime} needs --init CHECKPOINT")
    tc = train_config(cfg, args.regime)
    out = _out_dir(cfg)
    ckpt = train_supervised(data, init, tc, encoder_config(cfg))
    _write_run(ckpt, out)
    print(f"{args.regime}: test accuracy {ckpt.metrics.get('accuracy', float('nan')):.4f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    data = load_dataset(cfg["data"]["source"], cfg["data"]["class_count"])
    tc = train_config(cfg, "ct_pretrain")
    out = _out_dir(cfg)
    ckpt = ct_pretrain(data, tc, encoder_config(cfg))
    _write_run(ckpt, out)
    print(f"pretrained encoder -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_adapt(args, cfg) -> int:
    if not args.source_checkpoint:
        raise UsageError("adapt needs --source-checkpoint")
    src_ckpt = load_checkpoint(args.source_checkpoint)
    source = load_dataset(cfg["data"]["source"], cfg["data"]["class_count"])
    target = load_dataset(cfg["data"]["target"], None if cfg["data"]["label_map"] else cfg["data"]["class_count"])
    tc = train_config(cfg, "guided")
    label_map = parse_label_map(cfg["data"]["label_map"])
    out = _out_dir(cfg)
    ckpt = guided_tune(src_ckpt, source, target, tc, label_map)
    _write_run(ckpt, out)
    print(f"adapted: target test accuracy {ckpt.metrics.get('accuracy', float('nan')):.4f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def _suite(args) -> list[DegradationSpec]:
    if args.no_suite:
        return []
    return default_suite(args.severity)


def cmd_evaluate(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, cfg["data"]["class_count"])
    split = None if args.split == "all" else args.split
    out = _out_dir(cfg)
    rep = robustness_report(ckpt, data, _suite(args), split, int(cfg["seed"]))
    write_rows_csv(rep.rows(), out / "robustness.csv")
    write_confusion_csv(rep.clean, out / "confusion.csv")
    write_json(
        {"clean": rep.clean.to_dict(), "mean_accuracy_drop": rep.mean_accuracy_drop, "conditions": rep.rows()},
        out / "robustness.json",
    )
    print(f"clean accuracy {rep.clean.accuracy:.4f}, mean drop {rep.mean_accuracy_drop:.4f}")
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    domains = [load_dataset(d, cfg["data"]["class_count"]) for d in args.data]
    split = None if args.split == "all" else args.split
    out = _out_dir(cfg)
    rep = forgetting_report(ckpts, domains, split)
    write_rows_csv(rep.rows(), out / "forgetting.csv")
    acc = rep.accuracy_matrix()
    write_rows_csv(
        [{"stage": s, **{d: float(acc[i, j]) for j, d in enumerate(rep.domains)}} for i, s in enumerate(rep.stages)],
        out / "accuracy_matrix.csv",
    )
    write_json(
        {"stages": rep.stages, "domains": rep.domains, "accuracy": acc.tolist(), "backward_transfer": rep.backward_transfer},
        out / "forgetting.json",
    )
    print(f"{acc.shape[0]}x{acc.shape[1]} accuracy matrix, backward transfer {rep.backward_transfer}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML experiment config; flags override it")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>, else runs/<command>)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--class-count", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metadapt", description="Guided domain adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic two-domain benchmark")
    _common(p)
    p.add_argument("--per-class", type=int, default=100, help="images per class and domain (>= 10)")
    p.add_argument("--classes", type=int, default=3)

    p = sub.add_parser("calibrate", help="compute a calibration profile from manifests")
    _common(p)
    p.add_argument("--manifest", nargs="+", required=True, help="manifest CSVs or dataset directories")
    p.add_argument("--split", choices=("train", "val", "test"), help="restrict to one split")
    p.add_argument("--class-count", type=int)

    p = sub.add_parser("train", help="supervised training (naive, finetune, finetune_random_augment)")
    _common(p)
    _training_flags(p)
    p.add_argument("--regime", choices=("naive", "finetune", "finetune_random_augment"), default="naive")
    p.add_argument("--data", dest="source", nargs="+", help="training dataset manifests or directories")
    p.add_argument("--init", help="checkpoint to fine-tune")
    p.add_argument("--freeze-encoder", action="store_true", default=None)

    p = sub.add_parser("pretrain", help="contrastive multi-view pre-training")
    _common(p)
    _training_flags(p)
    p.add_argument("--data", dest="source", nargs="+")
    p.add_argument("--temperature", type=float)
    p.add_argument("--n-views", type=int)

    p = sub.add_parser("adapt", help="guided-tuning of a source checkpoint to a target domain")
    _common(p)
    _training_flags(p)
    p.add_argument("--source-checkpoint")
    p.add_argument("--source", nargs="+")
    p.add_argument("--target", nargs="+")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--calibration-fraction", type=float)
    p.add_argument("--adapt-source-batch", type=int)
    p.add_argument("--label-map", help="target-to-source label map, e.g. '0:1,1:0'")

    for name, helptext in (("evaluate", "clean and degraded metrics"), ("report", "forgetting matrix over checkpoints")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
        p.add_argument("--class-count", type=int)
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--data", nargs="+", required=True)
            p.add_argument("--severity", type=int, default=2, choices=(1, 2, 3))
            p.add_argument("--no-suite", action="store_true", help="clean metrics only")
        else:
            p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoints in training order")
            p.add_argument("--data", nargs="+", required=True, help="one directory or manifest per domain")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"metadapt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"metadapt {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
