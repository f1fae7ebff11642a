import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .autograd import GradientError
from .checkpoint import CheckpointError
from .data import DataFormatError, download_mnist
from .model import CONFIG_FACTORIES
from .runner import NumericError, run_eval, run_gradcheck, run_inspect, run_params, run_train
from .settings import ConfigError, load_run_config
from .sfne import BranchError
from .tensor import ShapeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Raised for malformed command lines."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="terminator", description="Train and inspect slow-fast hyper-kernel networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    train = sub.add_parser("train", help="train a model from a JSON run config")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--data", default=None, help="dataset name (defaults to the training dataset)")
    evaluate.add_argument("--out", default=None)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor")
    gradcheck.add_argument("--config", required=True)
    gradcheck.add_argument("--out", default=None)
    gradcheck.add_argument("--model-only", action="store_true", help="skip the per-family graphs")

    inspect = sub.add_parser("inspect", help="dump feature and kernel heatmaps for one sample")
    inspect.add_argument("--ckpt", required=True)
    inspect.add_argument("--sample", type=int, default=0)
    inspect.add_argument("--data", default=None)
    inspect.add_argument("--out", default=None)

    params = sub.add_parser("params", help="parameter counts split into slow and fast networks")
    source = params.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="JSON run config")
    source.add_argument("--preset", choices=sorted(CONFIG_FACTORIES), help="built-in model size")
    params.add_argument("--out", default=None)

    download = sub.add_parser("download", help="fetch the MNIST IDX files")
    download.add_argument("--root", default=None, help="target directory (default $TERMINATOR_DATA_DIR or ./data)")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        report = run_train(load_run_config(args.config), args.out)
        last = report.history.last()
        print(f"trained {report.steps} steps; final test accuracy {last['test_acc']:.4f}; artifacts in {report.out_dir}")
        return EXIT_OK
    if args.command == "eval":
        report = run_eval(args.ckpt, args.data, args.out)
        print(f"accuracy {report.accuracy:.4f}")
        print(report.per_class().to_string(index=False))
        return EXIT_OK
    if args.command == "gradcheck":
        summary = run_gradcheck(load_run_config(args.config), args.out, families=not args.model_only)
        for row in summary.failures():
            logging.error("Gradient mismatch in %s (%s): max relative error %.3e", row["name"], row["family"], row["max_rel_error"])
        print(f"{len(summary.rows)} tensors checked, max relative error {summary.max_rel_error:.3e}: {'PASS' if summary.passed else 'FAIL'}")
        return EXIT_OK if summary.passed else EXIT_NUMERIC
    if args.command == "inspect":
        report = run_inspect(args.ckpt, args.sample, args.out, args.data)
        print("\n".join(report.files))
        return EXIT_OK
    if args.command == "params":
        if args.preset:
            frame = run_params(CONFIG_FACTORIES[args.preset](), out_dir=args.out)
        else:
            cfg = load_run_config(args.config)
            cfg.apply_precision()
            frame = run_params(cfg.model, seed=cfg.seed, out_dir=args.out)
        print(frame.to_string(index=False))
        return EXIT_OK
    if args.command == "download":
        print(download_mnist(Path(args.root) if args.root else None))
        return EXIT_OK
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"terminator: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    try:
        return _dispatch(args)
    except (NumericError, GradientError) as e:
        logging.error("Numeric failure: %s", e)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, ShapeError, BranchError) as e:
        logging.error("Data error: %s", e)
        return EXIT_DATA
    except (ConfigError, UsageError, ValueError) as e:
        logging.error("Usage error: %s", e)
        return EXIT_USAGE
    except KeyboardInterrupt:
        logging.info("Interrupted by user.")
        return EXIT_USAGE
