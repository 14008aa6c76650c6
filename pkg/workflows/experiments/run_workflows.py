"""Command-line entry point: python -m workflows.experiments.run_workflows <subcommand> ...

Exit codes: 0 success, 1 internal error, 2 config or parameter error,
3 data, dimension or model-file error, 4 transport or federation error.
"""

import argparse
import sys

from ..flynn import __version__
from ..flynn.errors import FlyNNError
from ..flynn.utils import get_logger, print_logo, set_log_level
from .config import load_config
from .experiment_workflows import cmd_bench, cmd_dp_sweep, cmd_fetch, cmd_hp_sweep, cmd_infer, cmd_scale, cmd_train

logger = get_logger(__name__)

EXIT_INTERNAL = 1

WORKFLOWS = {"bench": cmd_bench, "hp-sweep": cmd_hp_sweep, "scale": cmd_scale, "dp-sweep": cmd_dp_sweep}


def _add_config_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set grid.settings=5 (repeatable)")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--output", help="results CSV path")
    parser.add_argument("--repetitions", type=int, help="number of repetitions")
    parser.add_argument("--workers", type=int, help="worker processes for the task pool")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flynn", description="FlyHash nearest-neighbour classification experiments"
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no banner")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a model and write it to a file")
    _add_config_arguments(train)
    train.add_argument("--data", help="training CSV (overrides the configured dataset)")
    train.add_argument("--label-column", help="label column name or index")
    train.add_argument("--no-header", action="store_true", help="the CSV has no header row")
    train.add_argument("--model", help="model output path")

    infer = commands.add_parser("infer", help="predict every row of a CSV with a saved model")
    infer.add_argument("--model", required=True, help="model file")
    infer.add_argument("--data", required=True, help="feature CSV")
    infer.add_argument("--output", required=True, help="predictions CSV")
    infer.add_argument("--label-column", help="column to drop before scoring")
    infer.add_argument("--no-header", action="store_true", help="the CSV has no header row")

    for name, description in (
        ("bench", "cross-validated comparison with kNN, 1NN and SBFC"),
        ("hp-sweep", "FlyNN accuracy as each hyper-parameter varies with the others fixed"),
        ("scale", "federated training time against the number of parties"),
        ("dp-sweep", "private federated accuracy over epsilon and T"),
    ):
        _add_config_arguments(commands.add_parser(name, help=description))

    fetch = commands.add_parser("fetch", help="download a dataset into the local cache")
    fetch.add_argument("url")
    fetch.add_argument("--cache-dir", help="cache directory (default $FLYNN_CACHE_DIR or ~/.cache/flynn)")
    return parser


def _label_column(value):
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        return value


def _overrides(args) -> list:
    overrides = list(args.overrides)
    for name in ("seed", "output", "repetitions", "workers"):
        value = getattr(args, name)
        if value is not None:
            overrides.append(f"{name}={value}")
    if getattr(args, "data", None):
        overrides += ["dataset.source=csv", f"dataset.path={args.data}"]
        if args.label_column is not None:
            overrides.append(f"dataset.label_column={args.label_column}")
        if args.no_header:
            overrides.append("dataset.has_header=false")
    return overrides


def run(args) -> int:
    if args.command == "fetch":
        cmd_fetch(args.url, args.cache_dir)
    elif args.command == "infer":
        cmd_infer(args.model, args.data, args.output, not args.no_header, _label_column(args.label_column))
    else:
        config = load_config(args.config, _overrides(args), experiment=args.command)
        if args.command == "train":
            cmd_train(config, args.model)
        else:
            WORKFLOWS[args.command](config)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_log_level(args.verbose, args.quiet)
    if not args.quiet:
        print_logo("FlyNN", "FlyHash nearest-neighbour classification experiments", __version__)
    try:
        return run(args)
    except FlyNNError as e:
        logger.error(f"[FAILED] '{args.command}': {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.error(f"[FAILED] '{args.command}' interrupted")
        return EXIT_INTERNAL
    except Exception as e:
        logger.exception(f"[FAILED] '{args.command}': internal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
