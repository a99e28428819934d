"""
The ``srnet`` command line.

Machine-readable output (CSV, tables, manifests) goes to standard output;
logs go to standard error.

Exit codes: 0 success, 1 usage, 2 invalid configuration or shapes,
3 runtime failure (I/O, checkpoints, failed gradient checks).

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import argparse
import logging
import pathlib
import sys
import textwrap
from typing import Callable, Dict, List, Optional, Sequence

try:
    from . import _pnm, constants, cost, data, gradcheck, training
    from .config import CONFIG_KEYS, RunConfig, load_config
    from .evaluation import evaluate_maps
    from .model import depth_sweep_config
    from .tensor import Tensor
    from .utils import ConfigError, ConvSpecError, DatasetError, ShapeError, SRNetException, parse_int_list
except ImportError:
    import _pnm
    import constants
    import cost
    import data
    import gradcheck
    import training
    from config import CONFIG_KEYS, RunConfig, load_config
    from evaluation import evaluate_maps
    from model import depth_sweep_config
    from tensor import Tensor
    from utils import ConfigError, ConvSpecError, DatasetError, ShapeError, SRNetException, parse_int_list

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {}
_LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"
_handler: Optional[logging.Handler] = None


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


class command:  # NOSONAR (lowercase, it's used as a decorator)
    """Decorator for registering a subcommand handler"""

    def __init__(self, name: str):
        self.name = name

    def __call__(self, func: Callable) -> Callable:
        COMMANDS[self.name] = func
        return func


def _configure_logging(verbose: bool, quiet: bool):
    global _handler

    package_logger = logging.getLogger(constants.__name__)
    if _handler is not None:
        package_logger.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    package_logger.addHandler(_handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)


def _emit(text: str):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def _write_report(directory: str, name: str, text: str) -> pathlib.Path:
    path = pathlib.Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def _settings_epilog() -> str:
    order = "Settings are layered: defaults, then --config FILE, then --set KEY=VALUE (repeatable), then --seed."
    keys = textwrap.fill("Keys: " + ", ".join(CONFIG_KEYS) + ".", width=100, subsequent_indent="  ")
    return f"{order}\n{keys}"


def build_parser() -> argparse.ArgumentParser:
    epilog = _settings_epilog()
    formatter = argparse.RawDescriptionHelpFormatter
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the seed setting")
    common.add_argument("--out", help="output directory of the command")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="overrides a config key (listed below)",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = _ArgumentParser(
        prog="srnet", description="Saliency reasoning network toolkit.", epilog=epilog, formatter_class=formatter
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {constants.__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_ArgumentParser)
    sub.required = True

    def add_command(name: str, summary: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=summary, epilog=epilog, formatter_class=formatter)

    gen = add_command("gen", "generate a synthetic dataset")
    gen.add_argument("--n", type=int, default=64, help="number of samples (default 64)")
    gen.add_argument("--size", type=int, help="image size (default: input_size)")

    add_command("train", "train a network on data_dir")

    infer = add_command("infer", "write saliency maps for a directory of images")
    infer.add_argument("--checkpoint", help="checkpoint to load (default: checkpoint_path)")
    infer.add_argument("--input", help="directory of img_*.ppm files (default: data_dir)")

    evaluate = add_command("eval", "score saliency maps against ground truth")
    evaluate.add_argument("--pred", required=True, help="directory of sal_*.pgm (or mask_*.pgm) maps")
    evaluate.add_argument("--gt", help="directory of mask_*.pgm files (default: data_dir)")

    cost_parser = add_command("cost", "parameter, mult-add and receptive field report")
    cost_parser.add_argument("--csv", action="store_true", help="CSV instead of an aligned table")
    cost_parser.add_argument("--timing", action="store_true", help="add measured seconds per component")

    add_command("manifest", "print the layer manifest")

    check = add_command("gradcheck", "finite-difference check of every op and the network")
    check.add_argument("--seeds", type=int, default=len(gradcheck.DEFAULT_SEEDS), help="seeds per probe")
    check.add_argument("--ops-only", action="store_true", help="skip the sampled check of the configured network")

    sweep = add_command("sweep-depth", "audit and train over reasoning depths")
    sweep.add_argument("--depths", default="1,9,12,18,24", help="depth-wise layer counts (default 1,9,12,18,24)")
    sweep.add_argument("--audit-only", action="store_true", help="skip training; report params and mult-adds")
    return parser


@command("gen")
def _gen(args: argparse.Namespace, config: RunConfig) -> int:
    out_dir = args.out or config.data_dir
    data.generate_synthetic(out_dir, args.n, args.size or config.input_size, config.seed)
    return constants.EXIT_OK


@command("train")
def _train(args: argparse.Namespace, config: RunConfig) -> int:
    samples = data.load_dataset(config.data_dir, config.input_size)
    train_set, held_out = data.split_dataset(samples, config.val_fraction, config.seed)
    logger.info("Training %s-%s on %d samples, %d held out", config.ablation, config.backbone, len(train_set), len(held_out))

    net = config.build()
    _emit("epoch,mean_loss,wall_seconds")
    result = training.train(
        net,
        train_set,
        config.train_config(),
        on_epoch=lambda log: _emit(log.csv()),
        held_out=held_out,
        n_thresholds=config.n_thresholds,
        beta_squared=config.beta_squared,
    )
    if result.held_out is not None:
        _write_report(args.out or config.report_dir, "heldout.csv", result.held_out.to_csv())
    return constants.EXIT_OK


@command("infer")
def _infer(args: argparse.Namespace, config: RunConfig) -> int:
    net = training.load_into(config.build(materialize=True), args.checkpoint or config.checkpoint_path)
    samples = data.load_dataset(args.input or config.data_dir, config.input_size)
    out_dir = pathlib.Path(args.out or pathlib.Path(config.report_dir) / "maps")
    out_dir.mkdir(parents=True, exist_ok=True)
    for sample, saliency in zip(samples, training.predict_maps(net, samples)):
        _pnm.write_pnm(out_dir / f"sal_{sample.name[len('img_'):]}.pgm", saliency[None])
    logger.info("Wrote %d saliency maps to %s", len(samples), out_dir)
    return constants.EXIT_OK


@command("eval")
def _eval(args: argparse.Namespace, config: RunConfig) -> int:
    gt_dir = pathlib.Path(args.gt or config.data_dir)
    pred_dir = pathlib.Path(args.pred)
    gt_paths = sorted(gt_dir.glob("mask_*.pgm"))
    if not gt_paths:
        raise DatasetError("No mask_*.pgm files found", str(gt_dir))

    preds, gts = [], []
    for gt_path in gt_paths:
        suffix = gt_path.stem[len("mask_") :]
        candidates = [pred_dir / f"sal_{suffix}.pgm", pred_dir / f"mask_{suffix}.pgm"]
        pred_path = next((path for path in candidates if path.exists()), None)
        if pred_path is None:
            raise DatasetError(f"No prediction for {gt_path.name}", str(candidates[0]))
        preds.append(_pnm.read_pnm(pred_path)[0])
        gts.append((_pnm.read_pnm(gt_path)[0] >= 0.5).astype(float))

    report = evaluate_maps(preds, gts, config.n_thresholds, config.beta_squared)
    _emit(report.to_csv())
    if args.out:
        _write_report(args.out, "eval.csv", report.to_csv())
    return constants.EXIT_OK


@command("cost")
def _cost(args: argparse.Namespace, config: RunConfig) -> int:
    net = config.build(materialize=args.timing)
    report = cost.cost_report(net, config.input_shape, timing=args.timing)
    text = report.to_csv() if args.csv else report.to_table()
    _emit(text)
    if args.out:
        _write_report(args.out, "cost.csv" if args.csv else "cost.txt", text)
    return constants.EXIT_OK


@command("manifest")
def _manifest(args: argparse.Namespace, config: RunConfig) -> int:
    text = config.build(materialize=False).manifest(config.input_shape)
    _emit(text)
    if args.out:
        _write_report(args.out, "manifest.txt", text)
    return constants.EXIT_OK


@command("gradcheck")
def _gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, not {args.seeds}")
    results = gradcheck.run_suite(range(config.seed, config.seed + args.seeds))
    if not args.ops_only:
        image, mask = data.synthetic_sample(config.input_size, config.seed)
        sample = data.Sample(Tensor(image[None]), Tensor(mask[None]), "synthetic")
        result = gradcheck.check_network(config.build(), sample.image, sample.mask, config.loss_config(), seed=config.seed)
        results.append(result)

    _emit(gradcheck.format_table(results))
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error("Gradient check failed for %s", ", ".join(failed))
        return constants.EXIT_RUNTIME
    return constants.EXIT_OK


@command("sweep-depth")
def _sweep_depth(args: argparse.Namespace, config: RunConfig) -> int:
    depths = parse_int_list(args.depths, "--depths")
    if not depths or min(depths) < 1:
        raise ConfigError(f"--depths must be positive integers, not {args.depths!r}")

    train_set = held_out = None
    if not args.audit_only:
        samples = data.load_dataset(config.data_dir, config.input_size)
        train_set, held_out = data.split_dataset(samples, config.val_fraction, config.seed)
        held_out = held_out or train_set

    lines = ["depth,fbeta_max,mae,params,mult_adds"]
    _emit(lines[0])
    for depth in depths:
        reasoning = depth_sweep_config(depth, config.reasoning_config())
        net = config.build(materialize=not args.audit_only, reasoning=reasoning)
        if net.depthwise_count() != depth:
            raise ShapeError(f"Depth {depth} produced {net.depthwise_count()} depth-wise layers")
        report = cost.cost_report(net, config.input_shape)

        fbeta = mae = ""
        if not args.audit_only:
            result = training.train(
                net,
                train_set,
                config.train_config(checkpoint=False),
                held_out=held_out,
                n_thresholds=config.n_thresholds,
                beta_squared=config.beta_squared,
            )
            fbeta, mae = repr(result.held_out.f_beta_max), repr(result.held_out.mae)
        lines.append(f"{depth},{fbeta},{mae},{report.total_params},{report.total_mult_adds}")
        _emit(lines[-1])

    if args.out:
        _write_report(args.out, "sweep_depth.csv", "\n".join(lines) + "\n")
    return constants.EXIT_OK


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parses ``argv`` and runs the subcommand.

    :return: The exit code. Exceptions never escape.
    :rtype: int
    """

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return constants.EXIT_USAGE
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)

    _configure_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config, args.overrides, seed=args.seed)
        return COMMANDS[args.command](args, config)
    except (ConfigError, ShapeError, ConvSpecError) as e:
        logger.error("%s", e)
        return constants.EXIT_VALIDATION
    except (SRNetException, OSError) as e:
        logger.error("%s", e)
        return constants.EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
