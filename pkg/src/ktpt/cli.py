"""Command-line entry point (``ktpt``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SPLITS, generate_synthetic, save_csv
from .errors import FormatError, ShapeError
from .harness import (
    ExperimentConfig,
    default_out_dir,
    emit_report,
    gradient_diagnostic,
    load_splits,
    run_tables,
    write_reports,
)
from .models import Mlp, StackedLstm, load_model, save_model
from .numerics import rng_for
from .pretrain import (
    PhaseConfigs,
    PretrainPlan,
    fine_tune,
    generate_soft_targets,
    load_soft_targets,
    pretrain_only,
    save_soft_targets,
)
from .train import HardLoss, evaluate_metrics, run_training

log = logging.getLogger("ktpt")

PRODUCERS = {
    "data": "gen-data",
    "teacher": "train-teacher",
    "targets": "distill",
    "pretrained": "pretrain",
    "model": "train-teacher, pretrain or finetune",
}


class MissingArtifact(Exception):
    pass


def require(path, kind):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing {kind} file {path}; produce it with `ktpt {PRODUCERS[kind]}`")
    return path


def parse_student(spec: str):
    """``lstm:LAYERSxHIDDEN`` (e.g. ``lstm:2x48``) or ``mlp:H1,H2,...``."""
    kind, _, body = spec.partition(":")
    try:
        if kind == "lstm":
            layers, hidden = (int(v) for v in body.split("x"))
            return "lstm", (layers, hidden)
        if kind == "mlp":
            return "mlp", [int(v) for v in body.split(",")]
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"bad student spec {spec!r}; use lstm:LxH or mlp:H1,H2")


def build_student(spec, splits, rng):
    kind, shape = spec
    d, k = splits.train.feature_dim, splits.train.num_classes
    if kind == "lstm":
        return StackedLstm.init(d, shape[1], shape[0], k, rng)
    return Mlp.init(d, shape, k, rng)


def sizes_arg(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None


def load_config(args) -> ExperimentConfig:
    """Config file first, then command-line flags on top."""
    config = ExperimentConfig.load(require_config(args.config)) if args.config else ExperimentConfig()
    if getattr(args, "data", None):
        require(Path(args.data) / "train.csv", "data")
        config.data_dir = args.data
    if args.seed:
        config.seeds = list(args.seed)
    if getattr(args, "temperature", None):
        config.temperatures = list(args.temperature)
        config.diagnostic_temperatures = list(args.temperature)
    if getattr(args, "workers", None):
        config.workers = args.workers
    if getattr(args, "timing", False):
        config.timing = True
    return config


def require_config(path):
    if not Path(path).exists():
        raise MissingArtifact(f"missing config file {path}")
    return path


def out_dir(args):
    path = Path(default_out_dir(args.out))
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_data(args):
    config = load_config(args)
    gen = config.data
    if args.seed:
        gen.seed = args.seed[0]
    splits = generate_synthetic(gen)
    out = out_dir(args)
    for name, split in zip(SPLITS, splits):
        save_csv(split, out / f"{name}.csv")
    (out / "dataset.json").write_text(json.dumps(gen.to_dict(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    print(f"wrote {', '.join(f'{n}.csv' for n in SPLITS)} and dataset.json to {out}")


def cmd_train_teacher(args):
    config = load_config(args)
    splits = load_splits(config)
    seed = config.seeds[0]
    sizes = args.hidden or config.teacher_sizes
    model = Mlp.init(splits.train.feature_dim, sizes, splits.train.num_classes,
                     rng_for(seed, f"teacher-{args.name}-init"))
    _, history = run_training(model, HardLoss(), splits, config.teacher_sgd,
                              rng_for(seed, f"teacher-{args.name}-train"))
    out = out_dir(args)
    save_model(model, out / "teacher.ktpt")
    history.to_csv(out / "teacher-history.csv")
    report_metrics(model, splits)


def cmd_distill(args):
    config = load_config(args)
    teacher = load_model(require(args.teacher, "teacher"))
    splits = load_splits(config)
    out = out_dir(args)
    for t in config.temperatures:
        targets = generate_soft_targets(teacher, splits.train, t, Path(args.teacher).stem)
        path = out / f"targets-T{t:g}.ktst"
        save_soft_targets(targets, path)
        print(f"wrote {path}")


def cmd_pretrain(args):
    config = load_config(args)
    splits = load_splits(config)
    seed = config.seeds[0]
    spec = args.student
    needs_targets = args.strategy in ("kt", "rbm_then_kt")
    targets = load_soft_targets(require(args.targets, "targets")) if needs_targets else None
    if args.strategy in ("rbm", "discriminative", "rbm_then_kt") and spec[0] != "mlp":
        raise ShapeError(f"strategy {args.strategy!r} builds an MLP; use --student mlp:...")
    sgd = config.lstm_sgd if spec[0] == "lstm" else config.mlp_sgd
    student = build_student(spec, splits, rng_for(seed, "student-init"))
    plan = PretrainPlan(args.strategy, targets.temperature if targets else None)
    hidden = spec[1] if spec[0] == "mlp" else None
    pre = pretrain_only(plan, student, splits, PhaseConfigs(sgd, sgd, config.cd),
                        rng_for(seed, f"pretrain-{args.strategy}"), targets=targets, hidden_sizes=hidden)
    out = out_dir(args)
    save_model(pre, out / "pretrained.ktpt")
    report_metrics(pre, splits)


def cmd_finetune(args):
    config = load_config(args)
    splits = load_splits(config)
    seed = config.seeds[0]
    if args.model:
        model = load_model(require(args.model, "pretrained"))
        reinit = args.reinit_output
    elif args.student:
        model = build_student(args.student, splits, rng_for(seed, "student-init"))
        reinit = False
    else:
        raise MissingArtifact("finetune needs --model (from `ktpt pretrain`) or --student for a raw run")
    sgd = config.lstm_sgd if model.sequential else config.mlp_sgd
    _, history = fine_tune(model, splits, sgd, reinit, rng_for(seed, "finetune"))
    out = out_dir(args)
    save_model(model, out / "finetuned.ktpt")
    history.to_csv(out / "finetune-history.csv")
    report_metrics(model, splits)


def report_metrics(model, splits):
    m = evaluate_metrics(model, splits, segments=True)
    print(json.dumps({
        "tr_fa": m.train_frame_accuracy,
        "cv_fa": m.cv_frame_accuracy,
        "test_error_rate": m.test_error_rate,
        "test_segment_error_rate": m.test_segment_error_rate,
    }, sort_keys=True))


def cmd_evaluate(args):
    config = load_config(args)
    model = load_model(require(args.model, "model"))
    report_metrics(model, load_splits(config))


def cmd_reproduce(args):
    config = load_config(args)
    config.out_dir = str(out_dir(args))
    tables = [1, 2, 3] if args.table == "all" else [int(args.table)]
    results = run_tables(config, tables)
    paths = write_reports(results, config.out_dir, args.format, timing=config.timing)
    for t, path in zip(sorted(results), paths):
        print(f"table {t}: {path}")
        if args.format == "markdown":
            print(emit_report(results[t], "markdown"))


def cmd_diagnose(args):
    config = load_config(args)
    splits = load_splits(config)
    student = load_model(require(args.model, "model")) if args.model else None
    rows = gradient_diagnostic(config, config.seeds[0], splits, student)
    out = out_dir(args)
    lines = ["temperature,variance,mean_norm,frames"]
    lines += [f"{r.temperature!r},{r.variance!r},{r.mean_norm!r},{r.frames}" for r in rows]
    text = "\n".join(lines) + "\n"
    (out / "gradient-diagnostic.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    common.add_argument("--out", help="output directory (default: $KTPT_OUT or ./ktpt-out)")
    common.add_argument("--data", help="directory with train/cv/test CSV from gen-data "
                                       "(default: generate in memory)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ktpt", description="Knowledge-transfer pre-training experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write synthetic CSV splits")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-teacher", parents=[common], help="train an MLP teacher")
    s.add_argument("--hidden", type=sizes_arg, help="hidden sizes, e.g. 64,64")
    s.add_argument("--name", default="strong", help="teacher name used for RNG streams")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", parents=[common], help="write teacher soft targets per temperature")
    s.add_argument("--teacher", required=True, help="teacher model file")
    s.add_argument("--temperature", type=float, action="append")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("pretrain", parents=[common], help="pre-train a student (no fine-tuning)")
    s.add_argument("--student", type=parse_student, default=parse_student("lstm:1x48"))
    s.add_argument("--strategy", default="kt", choices=["kt", "rbm", "discriminative", "rbm_then_kt"])
    s.add_argument("--targets", help="soft-target file from distill")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="hard-label training")
    s.add_argument("--model", help="pre-trained model file")
    s.add_argument("--student", type=parse_student, help="train a fresh student instead (raw)")
    s.add_argument("--reinit-output", action="store_true", help="redraw the output layer first")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", parents=[common], help="frame and segment metrics of a model")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("reproduce-tables", parents=[common], help="run the comparison tables")
    s.add_argument("--table", choices=["1", "2", "3", "all"], default="all")
    s.add_argument("--temperature", type=float, action="append")
    s.add_argument("--workers", type=int)
    s.add_argument("--format", choices=["csv", "markdown"], default="csv")
    s.add_argument("--timing", action="store_true", help="add a wall-time column")
    s.set_defaults(func=cmd_reproduce)

    s = sub.add_parser("diagnose-gradients", parents=[common], help="gradient spread versus temperature")
    s.add_argument("--model", help="student model (default: fresh 1-layer LSTM)")
    s.add_argument("--temperature", type=float, action="append")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MissingArtifact as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
