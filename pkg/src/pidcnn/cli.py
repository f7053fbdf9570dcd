"""Command line entry point.

Exit status: 0 success, 1 usage error, 2 file I/O or format error, 3 non-finite
training loss.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint
from .compare import compare_nonlinearity, compare_pooling
from .evaluation import ablate_residual, benchmark_inference, evaluate
from .network import Model
from .pid import kernel_report_csv, report_kernel_pid
from .scene import DatasetFormatError, assemble_batch, build_rig, generate_dataset, read_dataset
from .training import NumericError, TrainConfig, train_stage

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write(path, text: str) -> None:
    Path(path).write_text(text)


def _threads(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(1)


def cmd_gen_data(a) -> None:
    rig = build_rig(a.size, a.half_extent)
    generate_dataset(a.count, a.seed, rig, a.out)


def cmd_train(a) -> None:
    train = read_dataset(a.data)
    val = read_dataset(a.val) if a.val else None
    init = load_checkpoint(a.init) if a.init else None
    cfg = TrainConfig(stage=a.stage, epochs=a.epochs, batch_size=a.batch_size, initial_lr=a.lr,
                      schedule=a.schedule, seed=a.seed, checkpoint_out=a.out,
                      pooling=a.pooling, activation=a.activation)
    with _threads(a.deterministic):
        _, log = train_stage(cfg, train, val, init)
    _write(a.metrics or f"{a.out}.metrics.csv", log.to_csv())


def cmd_eval(a) -> None:
    ck = load_checkpoint(a.ckpt)
    report = evaluate(Model(ck.config, ck.store), read_dataset(a.data), seed=a.seed,
                      residual=not a.no_residual)
    _write(a.report, report.to_csv())


def cmd_ablate(a) -> None:
    ck = load_checkpoint(a.ckpt)
    _write(a.report, ablate_residual(Model(ck.config, ck.store), read_dataset(a.data), a.seed).to_csv())


def cmd_compare(a) -> None:
    harness = compare_pooling if a.what == "pooling" else compare_nonlinearity
    with _threads(a.deterministic):
        comp = harness(read_dataset(a.data), epochs=a.epochs, seed=a.seed, batch_size=a.batch_size)
    for arm, text in comp.curve_csvs().items():
        _write(f"{a.out_prefix}_{arm}.csv", text)
    _write(f"{a.out_prefix}_summary.csv", comp.summary_csv())


def cmd_analyze_kernels(a) -> None:
    _write(a.report, kernel_report_csv(report_kernel_pid(load_checkpoint(a.ckpt).store)))


def cmd_bench(a) -> None:
    ck = load_checkpoint(a.ckpt)
    ds = read_dataset(a.data)
    if len(ds) == 0:
        raise UsageError(f"{a.data}: dataset is empty")
    idx = np.arange(min(a.n, len(ds)))
    images, _ = assemble_batch(ds, idx, np.random.default_rng(a.seed), ck.config.frames)
    with _threads(a.deterministic):
        res = benchmark_inference(Model(ck.config, ck.store), images, n=a.n, warmup=a.warmup)
    _write(a.report, res.to_csv())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pidcnn", description="Binocular ball position, velocity and acceleration estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic binocular dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--half-extent", type=float, default=80.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one curriculum stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--init", help="previous-stage checkpoint, or same-stage checkpoint to resume")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=120)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, help="initial learning rate (default by stage)")
    t.add_argument("--schedule", choices=("cycle", "reset"), default="cycle")
    t.add_argument("--pooling", choices=("avg", "max"), default="avg")
    t.add_argument("--activation", choices=("prelu", "relu"), default="prelu")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--metrics", help="metrics CSV (default <out>.metrics.csv)")
    t.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="error report on a test set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-residual", action="store_true")
    e.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="with versus without residual heads")
    ab.add_argument("--ckpt", required=True)
    ab.add_argument("--data", required=True)
    ab.add_argument("--report", required=True)
    ab.add_argument("--seed", type=int, default=0)
    ab.set_defaults(func=cmd_ablate)

    c = sub.add_parser("compare", help="convergence curves for pooling or nonlinearity variants")
    c.add_argument("--what", choices=("pooling", "nonlinearity"), required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--epochs", type=int, default=1)
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-prefix", required=True)
    c.add_argument("--deterministic", action="store_true")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("analyze-kernels", help="PID decomposition of every conv kernel")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--report", required=True)
    k.set_defaults(func=cmd_analyze_kernels)

    b = sub.add_parser("bench", help="time single-sample inference")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--n", type=int, default=1024)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report", required=True)
    b.add_argument("--deterministic", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:     # --help
        return EXIT_OK if not err.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
