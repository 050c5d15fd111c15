"""Command-line entry point.

Subcommands: extract, synth, train, eval, gradcheck, inspect. All
commands are deterministic given their flags and --seed (default 42,
always printed). Exit codes: 0 success, 1 usage, 2 data/format, 3
numeric divergence.

TFCMNN_THREADS caps internal parallelism; 0 (the default behavior) is
the serial reference mode. The implementation is serial throughout, so
every setting produces identical bytes.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from tfcmnn.data import (
    SyntheticSpec,
    generate_synthetic,
    read_feature_file,
    split_by_speaker,
    write_feature_file,
)
from tfcmnn.errors import DataFormatError, DivergenceError, DomainError, ShapeError
from tfcmnn.features import extract_directory
from tfcmnn.gradcheck import all_pass, gradient_check
from tfcmnn.model import (
    build_model,
    load_checkpoint,
    param_count,
    parse_structure,
    save_checkpoint,
)
from tfcmnn.numerics import SeededRng
from tfcmnn.training import (
    TrainConfig,
    evaluate,
    train,
    write_report_csv,
    write_report_json,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _threads_from_env() -> int:
    raw = os.environ.get("TFCMNN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"TFCMNN_THREADS={raw!r} is not an integer")
    if n < 0:
        raise DomainError(f"TFCMNN_THREADS must be >= 0, got {n}")
    return n


def _atomic_save_checkpoint(model, path: str) -> None:
    tmp = path + ".tmp"
    save_checkpoint(model, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_extract(args) -> int:
    dataset = extract_directory(args.wav_dir, args.label_dir, args.width, args.window_ms)
    write_feature_file(args.out, dataset)
    print(f"wrote {len(dataset)} frames to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_classes=args.classes, frames_per_class=args.frames_per_class,
                         noise=args.noise, width=args.width, n_speakers=args.speakers,
                         seed=args.seed)
    dataset = generate_synthetic(spec)
    write_feature_file(args.out, dataset)
    print(f"wrote {len(dataset)} synthetic patches to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = read_feature_file(args.data)
    if dataset.width == 0:
        raise DataFormatError(f"{args.data}: training needs context-windowed patches")
    train_set, dev_set, eval_set = split_by_speaker(dataset, args.dev_fraction,
                                                    args.eval_speakers, args.seed)
    spec = parse_structure(args.structure, pieces=args.k, dropout_keep=args.dropout,
                           width=dataset.width)
    model = build_model(args.model, spec, args.seed)
    config = TrainConfig(lr0=args.lr, batch_size=args.batch, max_norm=args.max_norm,
                         max_epochs=args.epochs, seed=args.seed, monitor=args.monitor)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    include_timing = not args.no_timing

    def _write(report):
        write_report_csv(report, str(out_dir / "report.csv"), include_timing)
        write_report_json(report, str(out_dir / "summary.json"),
                          extra={"structure": spec.canonical(), "model": args.model,
                                 "pieces": args.k, "dropout_keep": args.dropout,
                                 "width": dataset.width, "seed": args.seed},
                          include_timing=include_timing)

    try:
        report = train(config, model, train_set, dev_set, eval_set)
    except DivergenceError as exc:
        _write(exc.report)
        raise
    _atomic_save_checkpoint(model, str(out_dir / "model.tfcm"))
    _write(report)
    print(f"epochs: {len(report.epochs)}  dev: {report.final_dev_score:.4f}  "
          f"eval: {report.final_eval_score:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = read_feature_file(args.data)
    score = evaluate(model, dataset)
    print(f"recognition score: {score:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = parse_structure(args.structure, pieces=args.k, width=args.width)
    model = build_model(args.model, spec, args.seed)
    rng = SeededRng([args.seed, 505])
    # moderate input scale keeps the softmax away from saturation, where
    # finite differences lose precision
    patches = rng.normal(0.5, (3, 18, args.width))
    labels = np.asarray(rng.integers(0, model.head.n_classes, 3))
    results = gradient_check(model, patches, labels, corrupt=args.corrupt)
    for r in results:
        print(f"{r.name:16s} max_rel_err={r.max_rel_err:.3e}  ok={r.frac_ok:.4f}  "
              f"coords={r.n_coords}  ties_excluded={r.n_excluded}")
    if all_pass(results):
        print("gradcheck: PASS")
        return EXIT_OK
    print("gradcheck: FAIL")
    return EXIT_DIVERGENCE


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    total, items = param_count(model)
    print(f"kind: {model.kind}")
    print(f"structure: {model.structure.canonical()}")
    print(f"pieces: {model.structure.pieces}")
    print(f"dropout_keep: {model.structure.dropout_keep}")
    print(f"context_width: {model.structure.width}")
    for name, shape, count in items:
        print(f"  {name:16s} shape={shape}  params={count}")
    print(f"total_params: {total}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="tfcmnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=42, help="PRNG seed (default 42)")

    p = sub.add_parser("extract", help="WAV + label CSVs -> TFCF feature file")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--label-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-ms", type=float, default=23.0)
    p.add_argument("--width", type=int, default=15, help="context width (0 = raw frames)")
    add_seed(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="generate a synthetic TFCF dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--frames-per-class", type=int, default=700)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--width", type=int, default=15)
    p.add_argument("--speakers", type=int, default=14)
    add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a TFCF dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--structure", default="C40 K7 S2 F400 F400")
    p.add_argument("--model", choices=["tfcmnn", "cmnn-time", "cmnn-freq"], default="tfcmnn")
    p.add_argument("--k", type=int, default=2, help="maxout pieces")
    p.add_argument("--dropout", type=float, default=None, help="keep probability")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--max-norm", type=float, default=0.8)
    p.add_argument("--epochs", type=int, default=100, help="safety cap")
    p.add_argument("--monitor", choices=["dev", "eval"], default="dev")
    p.add_argument("--dev-fraction", type=float, default=0.05)
    p.add_argument("--eval-speakers", type=int, default=2)
    p.add_argument("--no-timing", action="store_true",
                   help="write 0.0 wall seconds so reruns are byte-identical")
    add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a TFCF dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--structure", default="C2 K3 S2 F8")
    p.add_argument("--model", choices=["tfcmnn", "cmnn-time", "cmnn-freq"], default="tfcmnn")
    p.add_argument("--width", type=int, default=12)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    add_seed(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print checkpoint structure and shapes")
    p.add_argument("checkpoint")
    add_seed(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads_from_env()
        if hasattr(args, "seed"):
            print(f"seed: {args.seed}")
        return args.func(args)
    except DivergenceError as exc:
        print(f"tfcmnn: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataFormatError, ShapeError, DomainError, FileNotFoundError) as exc:
        print(f"tfcmnn: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"tfcmnn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
