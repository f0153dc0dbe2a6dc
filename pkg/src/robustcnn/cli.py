"""``robustcnn`` command line: flops, tune, train, distill, eval, corrupt-gen, presets.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import tensor as T
from .corruptions import FAMILIES, CorruptionSpec, canonical_family, corrupt
from .data import Dataset, load_dataset, save_dataset
from .evaluate import RobustnessReport, evaluate
from .flops import count_flops
from .losses import DistillConfig
from .models import (
    PRESETS,
    ConfigError,
    TuneError,
    build_model,
    format_config,
    get_preset,
    load_checkpoint,
    load_config,
    save_checkpoint,
    total_macs,
    tune_stage3_depth,
)
from .optim import TrainConfig
from .train import banner, train

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _spec(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        spec = load_config(path)
    elif args.preset:
        spec = get_preset(args.preset).spec
    else:
        raise ConfigError("one of --config or --preset is required")
    if getattr(args, "resolution", None):
        import dataclasses

        spec = dataclasses.replace(spec, input_resolution=args.resolution)
    spec.validate()
    return spec


def _dataset(path) -> Dataset:
    if not path:
        raise ConfigError("--dataset is required")
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _checkpoint(path):
    if not path or not Path(path).is_file():
        raise ConfigError(f"checkpoint {path!r} not found")
    return load_checkpoint(path)


def _families(text: str | None) -> list[str]:
    if not text:
        return []
    if text == "all":
        return list(FAMILIES)
    return [canonical_family(f) for f in text.split(",") if f.strip()]


def _severities(text: str) -> list[int]:
    sev = [int(s) for s in text.split(",")]
    if any(not 1 <= s <= 5 for s in sev):
        raise ConfigError("severities must lie in 1..5")
    return sev


# ------------------------------------------------------------------ commands


def cmd_flops(args, out):
    spec = _spec(args)
    report = count_flops(build_model(spec, symbolic=True))
    out.write(report.to_tsv() if args.format == "tsv" else report.to_text() + "\n")


def cmd_tune(args, out):
    spec = _spec(args)
    budget = args.budget
    if budget is None:
        if not args.preset or PRESETS[args.preset].budget is None:
            raise ConfigError("--budget is required for this model")
        budget = PRESETS[args.preset].budget
    depth = tune_stage3_depth(spec, budget, args.tol)
    macs = total_macs(spec.with_depth(2, depth))
    if args.format == "tsv":
        out.write(f"depth\t{depth}\nmacs\t{macs}\n")
    else:
        out.write(f"stage-3 depth {depth}: {macs / 1e9:.3f}G MACs (budget {budget / 1e9:.3f}G +- {args.tol:.0%})\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        min_lr=args.min_lr,
        warmup_epochs=args.warmup_epochs,
        weight_decay=args.weight_decay,
        mixup_alpha=args.mixup_alpha,
        cutmix_alpha=args.cutmix_alpha,
        erase_prob=args.erase_prob,
        drop_path=args.drop_path,
        label_smoothing=args.label_smoothing,
        seed=args.seed,
    )


def cmd_train(args, out, distill: bool = False):
    spec = _spec(args)
    try:
        config = _train_config(args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not args.out:
        raise ConfigError("--out checkpoint path is required")
    data = _dataset(args.dataset)
    val = _dataset(args.val_dataset) if args.val_dataset else None
    if data.num_classes > spec.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes but the model has {spec.num_classes}")
    if data.images.shape[2] != spec.input_resolution:
        raise ConfigError(f"dataset resolution {data.images.shape[2]} != model resolution {spec.input_resolution}")
    kd = None
    if distill:
        try:
            kd = DistillConfig(_checkpoint(args.teacher), args.temperature, args.kd_weight)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    model = build_model(spec, seed=args.seed)
    out.write(banner(config, kd) + "\n")
    result = train(model, data, config, kd, val)
    save_checkpoint(args.out, model)
    tsv = result.to_tsv()
    out.write(tsv)
    if args.log:
        Path(args.log).write_text(tsv, encoding="utf-8")


def cmd_eval(args, out):
    model = _checkpoint(args.checkpoint)
    data = _dataset(args.dataset)
    families = _families(args.corruptions)
    severities = _severities(args.severities)
    baseline = None
    if args.normalize_by:
        if not Path(args.normalize_by).is_file():
            raise ConfigError(f"baseline report {args.normalize_by} not found")
        baseline = RobustnessReport.load(args.normalize_by)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    report = evaluate(model, data, families, severities, seed=args.seed, threads=args.threads)
    if args.out:
        report.save(args.out)
    out.write(report.to_json() + "\n" if args.format == "tsv" else report.to_text(baseline) + "\n")


def cmd_corrupt_gen(args, out):
    data = _dataset(args.dataset)
    families = _families(args.corruptions or "all")
    severities = _severities(args.severities)
    if not args.out:
        raise ConfigError("--out directory is required")
    root = Path(args.out)
    for fam in families:
        for sev in severities:
            images = corrupt(data.images, CorruptionSpec(fam, sev, args.seed))
            save_dataset(root / fam / str(sev), Dataset(images, data.labels, data.classes))
            out.write(f"{fam}\t{sev}\t{root / fam / str(sev)}\n")


def cmd_presets(args, out):
    blocks = []
    for p in PRESETS.values():
        blocks.append(f"# {p.name}: {p.description}\n" + format_config(p.spec))
    out.write("\n".join(blocks))


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--config", help="key = value model config file")
        p.add_argument("--preset", help="named configuration, see `robustcnn presets`")
        p.add_argument("--resolution", type=int, help="override input resolution")

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("text", "tsv"), default="text")

    p = sub.add_parser("flops", help="per-layer MAC report")
    model_args(p)
    common(p)

    p = sub.add_parser("tune", help="pick the stage-3 depth that meets a MAC budget")
    model_args(p)
    common(p)
    p.add_argument("--budget", type=float, help="target MACs (defaults to the preset's reference)")
    p.add_argument("--tol", type=float, default=0.05)

    for name in ("train", "distill"):
        p = sub.add_parser(name, help="train a model" if name == "train" else "train with a distillation teacher")
        model_args(p)
        common(p)
        p.add_argument("--dataset", help="training dataset directory (manifest.tsv)")
        p.add_argument("--val-dataset")
        p.add_argument("--out", help="checkpoint to write")
        p.add_argument("--log", help="epoch metrics TSV to write")
        d = TrainConfig()
        p.add_argument("--epochs", type=int, default=d.epochs)
        p.add_argument("--batch-size", type=int, default=d.batch_size)
        p.add_argument("--lr", type=float, default=d.base_lr)
        p.add_argument("--min-lr", type=float, default=d.min_lr)
        p.add_argument("--warmup-epochs", type=int, default=d.warmup_epochs)
        p.add_argument("--weight-decay", type=float, default=d.weight_decay)
        p.add_argument("--mixup-alpha", type=float, default=d.mixup_alpha)
        p.add_argument("--cutmix-alpha", type=float, default=d.cutmix_alpha)
        p.add_argument("--erase-prob", type=float, default=d.erase_prob)
        p.add_argument("--drop-path", type=float, default=d.drop_path)
        p.add_argument("--label-smoothing", type=float, default=d.label_smoothing)
        if name == "distill":
            p.add_argument("--teacher", required=True, help="teacher checkpoint")
            p.add_argument("--temperature", type=float, default=1.0)
            p.add_argument("--kd-weight", type=float, default=0.5)

    p = sub.add_parser("eval", help="clean and corruption error of a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--corruptions", help="comma list of families or 'all'")
    p.add_argument("--severities", default="1,2,3,4,5")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--normalize-by", help="saved report used as mCE denominator")

    p = sub.add_parser("corrupt-gen", help="write corrupted copies of a dataset")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--corruptions", help="comma list of families or 'all' (default)")
    p.add_argument("--severities", default="1,2,3,4,5")
    p.add_argument("--out")

    p = sub.add_parser("presets", help="list named configurations")
    common(p)
    return parser


COMMANDS = {
    "flops": cmd_flops,
    "tune": cmd_tune,
    "train": cmd_train,
    "distill": lambda a, o: cmd_train(a, o, distill=True),
    "eval": cmd_eval,
    "corrupt-gen": cmd_corrupt_gen,
    "presets": cmd_presets,
}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args, out)
    except ConfigError as exc:
        err.write(f"robustcnn {args.command}: config error: {exc}\n")
        return EXIT_CONFIG
    except (TuneError, FloatingPointError, T.TapeError, OSError, ValueError) as exc:
        err.write(f"robustcnn {args.command}: error: {exc}\n")
        return EXIT_RUNTIME
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
