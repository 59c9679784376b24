"""Command-line front end: gen-data, train, distill, eval, compress, inspect.

Commands never modify their input files; outputs are written atomically.
Exit codes: 0 success, 1 usage error (bad flags or values), 2 malformed
or unreadable data/model files.
"""

from __future__ import annotations

import argparse
import os
import sys
from fractions import Fraction

import numpy as np

from .compress import (load_model, prune, save_model, serialize,
                       sparsity_report, to_half)
from .data import load_dataset, save_dataset, synth_generate
from .distill import DistillConfig, distill_train
from .fileio import FileFormatError
from .models import ArchSpec, build_model, param_count
from .train import INPUT_MODES, TrainConfig, evaluate, required_channels, train

__all__ = ["main"]

ARCH_NAMES = {"cnn3d": "baseline_cnn3d", "lstm": "baseline_lstm",
              "joint": "joint"}
WIDTHS = (Fraction(1), Fraction(1, 2), Fraction(1, 4))
ENCODING_NAMES = {0: "dense-f32", 1: "dense-f16", 2: "sparse-f32"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _width(text: str) -> Fraction:
    try:
        w = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid width {text!r}")
    if w not in WIDTHS:
        raise argparse.ArgumentTypeError(
            f"width must be one of 1, 1/2, 1/4; got {text!r}")
    return w


def _load_dataset(path: str, flag: str = "--data"):
    try:
        return load_dataset(path)
    except OSError as e:
        raise type(e)(f"{flag} {path}: {e.strerror or e}") from None
    except FileFormatError as e:
        raise type(e)(f"{flag}: {e}") from None


def _load_model(path: str, flag: str = "--model"):
    try:
        return load_model(path)
    except OSError as e:
        raise type(e)(f"{flag} {path}: {e.strerror or e}") from None
    except FileFormatError as e:
        raise type(e)(f"{flag} {path}: {e}") from None


def _default_input_mode(channels: int) -> str:
    return "combined" if channels == 4 else "upper_body"


def _print_confusion(confusion: np.ndarray) -> None:
    width = max(3, len(str(int(confusion.max()))))
    print("confusion matrix (rows: true class, columns: predicted):")
    for row in confusion:
        print("  " + " ".join(f"{int(v):{width}d}" for v in row))


def _cmd_gen_data(args) -> int:
    dataset = synth_generate(args.train, args.val, args.test, seed=args.seed)
    save_dataset(dataset, args.out)
    print(f"wrote {args.out}: {args.train}/{args.val}/{args.test} samples, "
          f"{dataset.manifest.class_count} classes, "
          f"{os.path.getsize(args.out)} bytes")
    return 0


def _train_config(args, loss_mode: str, input_mode: str) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                       seed=args.seed, loss_mode=loss_mode,
                       input_mode=input_mode,
                       clip_norm=getattr(args, "clip_norm", None))


def _report_and_save(model, dataset, input_mode: str, out: str) -> None:
    if dataset.test:
        accuracy, _ = evaluate(model, dataset.test, input_mode)
        print(f"test accuracy: {100.0 * accuracy:.2f}")
    save_model(model, out)
    print(f"wrote {out}: {param_count(model):,} parameters, "
          f"{os.path.getsize(out)} bytes")


def _cmd_train(args) -> int:
    dataset = _load_dataset(args.data)
    spec = ArchSpec(ARCH_NAMES[args.arch], args.width,
                    dataset.manifest.class_count,
                    required_channels(args.input))
    model = build_model(spec, seed=args.seed)
    best, _ = train(model, dataset, _train_config(args, "hard", args.input),
                    csv_path=args.history_csv, log=sys.stdout)
    _report_and_save(best, dataset, args.input, args.out)
    return 0


def _cmd_distill(args) -> int:
    teacher = _load_model(args.teacher, "--teacher")
    dataset = _load_dataset(args.data)
    input_mode = args.input or _default_input_mode(teacher.spec.input_channels)
    student_spec = ArchSpec(ARCH_NAMES[args.arch], args.width,
                            teacher.spec.class_count,
                            required_channels(input_mode))
    config = DistillConfig(teacher=teacher, student_spec=student_spec,
                           temperature=args.temperature, alpha=args.alpha,
                           t_squared=args.t_squared)
    best, _ = distill_train(config, dataset,
                            _train_config(args, "distill", input_mode),
                            csv_path=args.history_csv, log=sys.stdout)
    _report_and_save(best, dataset, input_mode, args.out)
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args.model)
    dataset = _load_dataset(args.data)
    input_mode = args.input or _default_input_mode(model.spec.input_channels)
    samples = dataset.samples if args.split == "all" \
        else getattr(dataset, args.split)
    if not samples:
        raise UsageError(f"--split {args.split} is empty in {args.data}")
    accuracy, confusion = evaluate(model, samples, input_mode)
    print(f"accuracy: {100.0 * accuracy:.2f}")
    _print_confusion(confusion)
    return 0


def _cmd_compress(args) -> int:
    model = _load_model(args.model)
    before = len(serialize(model))
    model, stats = prune(model, 2.0 ** args.prune_exp)
    print(f"pruned at 2^{args.prune_exp}: {stats['total_removed']} of "
          f"{stats['total_learnable']} weights removed")
    if args.half:
        model = to_half(model)
        print("storage precision: binary16")
    save_model(model, args.out)
    after = os.path.getsize(args.out)
    print(f"wrote {args.out}: {before} -> {after} bytes "
          f"({after / before:.3f}x)")
    return 0


def _cmd_inspect(args) -> int:
    model = _load_model(args.model)
    spec = model.spec
    report = sparsity_report(model, 2.0 ** args.prune_exp)
    print(f"family: {spec.family}  width: {spec.width_scale}  "
          f"classes: {spec.class_count}  input channels: "
          f"{spec.input_channels}")
    print(f"parameters: {param_count(model):,}")
    print(f"file size: {os.path.getsize(args.model)} bytes")
    print(f"sparsity threshold: 2^{args.prune_exp}")
    for name, t in model.tensors.items():
        encoding = ENCODING_NAMES[model.encodings[name]]
        entry = report["per_tensor"].get(name)
        below = "-" if entry is None else \
            f"{entry['below']}/{entry['size']} ({100 * entry['fraction']:.1f}%)"
        shape = "x".join(str(d) for d in t.data.shape)
        print(f"  {name:24s} {shape:>16s} {encoding:>10s}  below: {below}")
    print(f"total below threshold: {report['total_below']} of "
          f"{report['total_learnable']}")
    print(f"projected pruned size: {report['projected_file_bytes']} bytes")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic gesture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    def training_flags(p, out_required=True):
        p.add_argument("--data", required=True)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--batch", type=int, default=8)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--clip-norm", type=float, default=None,
                       dest="clip_norm")
        p.add_argument("--history-csv", default=None, dest="history_csv")
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("train", help="train a model with label supervision")
    p.add_argument("--arch", choices=sorted(ARCH_NAMES), required=True)
    p.add_argument("--width", type=_width, default=Fraction(1))
    p.add_argument("--input", choices=INPUT_MODES, default="upper_body")
    training_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("distill",
                       help="train a student against a trained teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--arch", choices=sorted(ARCH_NAMES), default="joint")
    p.add_argument("--width", type=_width, default=Fraction(1, 4))
    p.add_argument("--input", choices=INPUT_MODES, default=None)
    p.add_argument("--temperature", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--t-squared", action="store_true", dest="t_squared")
    training_flags(p)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("eval", help="report accuracy and confusion matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default="test")
    p.add_argument("--input", choices=INPUT_MODES, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compress", help="prune and/or quantize a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--prune-exp", type=int, default=-100, dest="prune_exp")
    p.add_argument("--half", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("inspect", help="describe a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--prune-exp", type=int, default=-100, dest="prune_exp")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
