"""
Command line entry point.

    maxsr upscale --checkpoint x2.ckpt --input low.png --output high.png
    maxsr eval --checkpoint x2.ckpt --hr-dir Set5 --scale 2
    maxsr train-toy --config toy.json --out-checkpoint toy.ckpt
    maxsr gradcheck --seed 0
    maxsr bench-attention --sizes 16,32,64,128,256 --mode adaptive

Every command exits 0 on success and 1 on failure. Diagnostics and logs go to
stderr; tables and summaries go to stdout; every file is written atomically.
"""

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from maxsr.errors import ConfigError, MaxSRError
from maxsr.network import MaxSR, ModelConfig
from maxsr.pipelines import bench, diagnostics
from maxsr.pipelines.evaluate import (
    BicubicUpscaler,
    EvalReport,
    Upscaler,
    evaluate_dataset,
    self_ensemble_forward,
)
from maxsr.pipelines.imaging import ImageBuffer
from maxsr.pipelines.train import PairDataset, TrainConfig, train
from maxsr.utilities.general import Files, Settings
from maxsr.utilities.parsers import Parse

logger = logging.getLogger(__name__)

CLI_CONFIG_KEYS = ("preset", "model", "train_preset", "train", "eval")
EVAL_KEYS = ("hr_dir", "border", "self_ensemble")
SYNTHETIC_IMAGES = 8


@dataclass(frozen=True)
class CliConfig:
    """
    The JSON document behind `maxsr train-toy --config`.

    {
      "preset": "toy",              model preset, default "toy"
      "model": {"width": 16},       ModelConfig overrides
      "train_preset": "toy",        training preset, default "toy"
      "train": {"total_iters": 50}, TrainConfig overrides
      "eval": {"hr_dir": "Set5", "border": 2, "self_ensemble": false}
    }

    Every section is optional. With an "eval" section holding "hr_dir" the
    trained network is evaluated and a report written beside the checkpoint.
    """

    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("toy"))
    train: TrainConfig = field(default_factory=lambda: TrainConfig.preset("toy"))
    eval: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "CliConfig":
        unknown = sorted(set(values) - set(CLI_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        evaluation = dict(values.get("eval", {}))
        unknown = sorted(set(evaluation) - set(EVAL_KEYS))
        if unknown:
            raise ConfigError(f"Unknown eval keys: {', '.join(unknown)}")

        model = ModelConfig.preset(values.get("preset", "toy")).to_dict()
        model.update(values.get("model", {}))
        training = dataclasses.asdict(
            TrainConfig.preset(values.get("train_preset", "toy"))
        )
        training.update(values.get("train", {}))

        return cls(
            ModelConfig.from_dict(model), TrainConfig.from_dict(training), evaluation
        )

    @classmethod
    def read(cls, path: Optional[str]) -> "CliConfig":
        if path is None:
            return cls()
        return cls.from_dict(Parse.json_config(path, CLI_CONFIG_KEYS))


def _write_report(report: EvalReport, output_dir: Path) -> None:
    Files.write_text(output_dir / "report.json", report.to_json() + "\n")
    frame = report.to_frame(as_frame=True)
    per_image = frame.to_string(index=False) if len(frame) else "(no images)"
    Files.write_text(
        output_dir / "report.txt", f"{report.to_table()}\n\n{per_image}\n"
    )

    return


def cmd_upscale(args: argparse.Namespace) -> int:
    model = MaxSR.load(args.checkpoint)
    if args.attention:
        model = model.with_attention_mode(args.attention)
    image = ImageBuffer.read(args.input)
    pixels = image.to_float()
    restored = (
        self_ensemble_forward(model, pixels)
        if args.self_ensemble
        else model.upscale(pixels)
    )
    ImageBuffer.from_float(restored, image.name).write(args.output)
    logger.info("Upscaled %s x%d to %s", args.input, model.scale, args.output)

    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    upscaler: Upscaler
    if args.bicubic:
        upscaler = BicubicUpscaler(args.scale)
        mode = "bicubic"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --bicubic is given")
        model = MaxSR.load(args.checkpoint)
        if model.scale != args.scale:
            raise ConfigError(
                f"Checkpoint is x{model.scale} but --scale is {args.scale}"
            )
        if args.attention:
            model = model.with_attention_mode(args.attention)
        upscaler, mode = model, str(model.config.attention_mode)

    report = evaluate_dataset(
        upscaler,
        args.hr_dir,
        border=args.border,
        ensemble=args.self_ensemble,
        attention_mode=mode,
    )
    _write_report(report, Path(args.output_dir))
    print(report.to_table())

    return 0


def _training_data(args: argparse.Namespace, cfg: CliConfig) -> PairDataset:
    scale = cfg.model.scale
    if args.data_dir:
        return PairDataset.from_directory(args.data_dir, scale)
    logger.info("No --data-dir, training on %d synthetic images", SYNTHETIC_IMAGES)

    return PairDataset.synthetic(
        SYNTHETIC_IMAGES, 2 * cfg.train.patch_lr, scale, seed=cfg.train.seed
    )


def cmd_train_toy(args: argparse.Namespace) -> int:
    cfg = CliConfig.read(args.config)
    dataset = _training_data(args, cfg)
    model = MaxSR(cfg.model, seed=cfg.train.seed)
    logger.info("Training %r on %d images", model, len(dataset))

    prefetch = Settings.from_env().threads - 1
    _, trace = train(model, dataset, cfg.train, prefetch=prefetch)
    checkpoint = model.save(args.out_checkpoint)
    loss_csv = args.loss_csv or checkpoint.with_suffix(".loss.csv")
    trace.to_csv(loss_csv)
    if len(trace):
        window = min(20, len(trace))
        print(
            f"iterations {len(trace)}"
            f"  first-{window} loss {trace.mean_first(window):.5f}"
            f"  last-{window} loss {trace.mean_last(window):.5f}"
        )

    hr_dir = cfg.eval.get("hr_dir")
    if hr_dir:
        report = evaluate_dataset(
            model,
            hr_dir,
            border=cfg.eval.get("border"),
            ensemble=bool(cfg.eval.get("self_ensemble", False)),
            attention_mode=str(cfg.model.attention_mode),
        )
        _write_report(report, checkpoint.parent)
        print(report.to_table())

    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = diagnostics.run_gradcheck(args.seed, args.suite, corrupt=args.corrupt)
    frame = diagnostics.gradcheck_report(results, as_frame=True)
    print(frame.to_string(index=False))
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error("Gradient check failed for %s", ", ".join(failed))
        return 1

    return 0


def _sizes(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"Sizes must be integers: {text!r}") from err


def cmd_bench_attention(args: argparse.Namespace) -> int:
    table = bench.bench_attention(args.sizes, args.mode, timed=not args.no_time)
    Files.write_frame(args.output, table)
    slope = bench.fit_loglog_slope(table["tokens"], table["cost"])
    print(table.to_string(index=False))
    print(f"log-log slope of cost vs tokens ({args.mode}): {slope:.4f}")

    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxsr",
        description="Adaptive multi-axis attention super-resolution.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0,
        help="Log INFO (-v) or DEBUG (-vv) instead of MAXSR_LOG_LEVEL.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    defaults = argparse.ArgumentDefaultsHelpFormatter

    upscale = commands.add_parser(
        "upscale", help="Super-resolve one PNG.", formatter_class=defaults
    )
    upscale.add_argument("--checkpoint", required=True, help="Model checkpoint.")
    upscale.add_argument("--input", required=True, help="8-bit RGB PNG.")
    upscale.add_argument("--output", required=True, help="Upscaled PNG to write.")
    upscale.add_argument(
        "--self-ensemble", action="store_true",
        help="Average over the eight flips and rotations.",
    )
    upscale.add_argument(
        "--attention", default=None,
        help="Override the footage rule: exact, approx or fixed:P.",
    )
    upscale.set_defaults(handler=cmd_upscale)

    evaluate = commands.add_parser(
        "eval", help="Score a model on HR PNGs.", formatter_class=defaults
    )
    evaluate.add_argument("--checkpoint", default=None, help="Model checkpoint.")
    evaluate.add_argument("--hr-dir", required=True, help="Ground-truth PNG directory.")
    evaluate.add_argument("--scale", type=int, required=True, choices=(2, 3, 4, 8))
    evaluate.add_argument(
        "--border", type=int, default=None,
        help="Pixels shaved per side before scoring; the scale when omitted.",
    )
    evaluate.add_argument("--self-ensemble", action="store_true")
    evaluate.add_argument("--attention", default=None, help="Footage rule override.")
    evaluate.add_argument(
        "--bicubic", action="store_true", help="Score plain bicubic upscaling instead."
    )
    evaluate.add_argument(
        "--output-dir", default=".", help="Where report.json and report.txt go."
    )
    evaluate.set_defaults(handler=cmd_eval)

    toy = commands.add_parser(
        "train-toy", help="Train a small network.", formatter_class=defaults
    )
    toy.add_argument(
        "--config", default=None,
        help="JSON with preset, model, train_preset, train and eval sections; "
        "the toy presets when omitted.",
    )
    toy.add_argument(
        "--data-dir", default=None,
        help="HR PNG directory; synthetic images when omitted.",
    )
    toy.add_argument("--out-checkpoint", required=True, help="Checkpoint to write.")
    toy.add_argument(
        "--loss-csv", default=None,
        help="Per-iteration loss CSV; beside the checkpoint when omitted.",
    )
    toy.set_defaults(handler=cmd_train_toy)

    grad = commands.add_parser(
        "gradcheck", help="Finite-difference gradient checks.", formatter_class=defaults
    )
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument(
        "--suite", action="append", choices=sorted(diagnostics.SUITES), default=None,
        help="Run only this suite; repeatable. All suites when omitted.",
    )
    grad.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    grad.set_defaults(handler=cmd_gradcheck)

    bench_parser = commands.add_parser(
        "bench-attention", help="Attention cost per feature-map size.",
        formatter_class=defaults,
    )
    bench_parser.add_argument(
        "--sizes", type=_sizes, default=list(bench.DEFAULT_SIZES),
        help="Comma-separated square extents.",
    )
    bench_parser.add_argument(
        "--mode", default="adaptive", help="adaptive, approx, fixed:P or global."
    )
    bench_parser.add_argument(
        "--no-time", action="store_true", help="Count costs without timing."
    )
    bench_parser.add_argument(
        "--output", default="attention_cost.csv", help="CSV to write."
    )
    bench_parser.set_defaults(handler=cmd_bench_attention)

    return parser


def _configure_logging(verbose: int) -> None:
    if verbose >= 2:
        level = "DEBUG"
    elif verbose == 1:
        level = "INFO"
    else:
        level = Settings.from_env().log_level
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return 0 if exit_.code in (0, None) else 1
    try:
        _configure_logging(args.verbose)
        return int(args.handler(args))
    except (MaxSRError, OSError, ValueError, TypeError) as err:
        print(f"maxsr {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
