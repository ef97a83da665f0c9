import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from granular_trainer.models import Variant
from granular_trainer.service import ExperimentService
from shared.errors import GranularError, NonFiniteError
from shared.utils import parse_float_list, parse_int_list, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

VARIANTS = [v.value for v in Variant]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        return parse_int_list(text)
    except GranularError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _float_list(text: str) -> List[float]:
    try:
        return parse_float_list(text)
    except GranularError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training (overrides --config)")
    group.add_argument("--config", type=str, help="key=value training config file")
    group.add_argument("--epochs", type=int)
    group.add_argument("--batch-size", type=int)
    group.add_argument("--lr-backbone", type=float)
    group.add_argument("--lr-heads", type=float)
    group.add_argument("--momentum", type=float)
    group.add_argument("--weight-decay", type=float)
    group.add_argument("--eval-every", type=int)
    group.add_argument(
        "--no-standardize",
        dest="standardize",
        action="store_const",
        const=False,
        help="Train on raw features",
    )
    group.add_argument(
        "--check-finite",
        action="store_const",
        const=True,
        help="Fail on the first NaN or Inf in a forward pass",
    )


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    keys = [
        "epochs",
        "batch_size",
        "lr_backbone",
        "lr_heads",
        "momentum",
        "weight_decay",
        "eval_every",
        "standardize",
        "loss_weights",
        "stop_gradient",
        "check_finite",
    ]
    return {key: getattr(args, key, None) for key in keys}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("--seed", type=int, default=None, help="Run seed (default 0)")

    parser = _Parser(
        prog="granular", description="Multi-granularity classification experiments"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", parents=[common], help="Synthesize a dataset")
    p.add_argument(
        "--tax-shape", type=_int_list, required=True, help="Level sizes, e.g. 4,16"
    )
    p.add_argument("--out-dir", type=str, required=True)
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--input-dim", type=int)
    p.add_argument("--coarse-scale", type=float)
    p.add_argument("--fine-scale", type=float)
    p.add_argument("--noise", type=float)

    p = commands.add_parser("train", parents=[common], help="Train one model")
    p.add_argument("--data-dir", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="Output directory")
    p.add_argument("--variant", choices=VARIANTS, default=Variant.OURS.value)
    p.add_argument("--taxonomy", type=str, help="Train against this taxonomy file")
    p.add_argument("--loss-weights", type=_float_list, help="w_1,...,w_K")
    p.add_argument("--hidden", type=_int_list, help="Backbone hidden widths")
    p.add_argument("--feature-dim", type=int, help="Backbone output width D")
    p.add_argument(
        "--no-gradient-control",
        dest="stop_gradient",
        action="store_const",
        const=False,
        help="Feed finer segments into coarser heads without stopping their gradient",
    )
    _add_training_flags(p)

    p = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data-dir", type=str, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--taxonomy", type=str)
    p.add_argument("--out", type=str, help="Metrics CSV path")

    p = commands.add_parser("sweep", parents=[common], help="Alpha/beta weight sweep")
    p.add_argument("--data-dir", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="Sweep CSV path")
    p.add_argument("--alphas", type=_float_list, required=True)
    p.add_argument("--betas", type=_float_list, required=True)
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--variant", choices=VARIANTS, default=Variant.OURS.value)
    p.add_argument("--jobs", type=int, default=1)
    _add_training_flags(p)

    p = commands.add_parser("compare", parents=[common], help="Compare variants")
    p.add_argument("--data-dir", type=str, required=True)
    p.add_argument("--variants", type=str, default=",".join(VARIANTS))
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--out", type=str, help="Per-run CSV path")
    p.add_argument("--loss-weights", type=_float_list)
    p.add_argument("--jobs", type=int, default=1)
    _add_training_flags(p)

    p = commands.add_parser(
        "build-hierarchy", parents=[common], help="Induce a taxonomy"
    )
    p.add_argument("--data-dir", type=str, required=True)
    p.add_argument(
        "--level-sizes", type=_int_list, required=True, help="C_1,...,C_{K-1}"
    )
    p.add_argument("--out", type=str, required=True, help="Taxonomy file path")
    p.add_argument("--checkpoint", type=str, help="Cluster backbone features instead")

    p = commands.add_parser("validate-tax", parents=[common], help="Check a taxonomy")
    p.add_argument("path", type=str)

    return parser


def _variants(text: str) -> List[Variant]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [n for n in names if n not in VARIANTS]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"Unknown variants {unknown}; choose from {VARIANTS}"
        )
    return [Variant(n) for n in names]


def _dispatch(service: ExperimentService, args: argparse.Namespace) -> None:
    handlers: Dict[str, Callable[[], object]] = {
        "gen-data": lambda: service.gen_data(
            args.tax_shape,
            args.out_dir,
            train_per_class=args.train_per_class,
            test_per_class=args.test_per_class,
            input_dim=args.input_dim,
            coarse_scale=args.coarse_scale,
            fine_scale=args.fine_scale,
            noise=args.noise,
        ),
        "train": lambda: service.train(
            args.data_dir,
            args.out,
            variant=Variant(args.variant),
            config_path=args.config,
            overrides=_overrides(args),
            taxonomy_path=args.taxonomy,
            hidden_widths=args.hidden,
            feature_dim=args.feature_dim,
        ),
        "eval": lambda: service.evaluate(
            args.checkpoint,
            args.data_dir,
            split=args.split,
            taxonomy_path=args.taxonomy,
            out_path=args.out,
        ),
        "sweep": lambda: service.sweep(
            args.data_dir,
            args.out,
            args.alphas,
            args.betas,
            args.seeds,
            variant=Variant(args.variant),
            config_path=args.config,
            overrides=_overrides(args),
            jobs=args.jobs,
        ),
        "compare": lambda: service.compare(
            args.data_dir,
            _variants(args.variants),
            args.seeds,
            out_path=args.out,
            config_path=args.config,
            overrides=_overrides(args),
            jobs=args.jobs,
        ),
        "build-hierarchy": lambda: service.build_hierarchy(
            args.data_dir,
            args.level_sizes,
            args.out,
            checkpoint_path=args.checkpoint,
        ),
        "validate-tax": lambda: service.validate_taxonomy(args.path),
    }
    handlers[args.command]()


def run(argv: Optional[List[str]] = None) -> int:
    """Parses `argv`, runs one subcommand and returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.verbose)
    service = ExperimentService(seed=args.seed)
    try:
        _dispatch(service, args)
    except argparse.ArgumentTypeError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        logger.debug("Numeric failure", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (GranularError, OSError, ValueError) as e:
        logger.debug("Run failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
