"""``crisscross-eeg`` command-line entry point."""

import argparse
import logging
import sys

from crisscross_eeg import __version__
from crisscross_eeg.cli import commands
from crisscross_eeg.cli.config import RunConfig, load_run_config
from crisscross_eeg.core.errors import ConfigError, CrissCrossError, exit_code_for
from crisscross_eeg.core.params import FAMILIES, TASK_PREFIX
from crisscross_eeg.core.renderers import IMAGE_FORMATS, ReportRenderer
from crisscross_eeg.core.reports import Report
from crisscross_eeg.core.utils import configure_threads

logger = logging.getLogger(__name__)


def _parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crisscross-eeg",
        description="Criss-cross transformer pre-training and evaluation for EEG.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="master seed (overrides seed=)")
    parser.add_argument("--out-dir", help="output directory (overrides paths.out_dir)")
    parser.add_argument("--threads", type=int, help="torch intra-op threads")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        type=_parse_override,
        default=[],
        metavar="KEY=VALUE",
        help="override one config key, e.g. --set model.n_layers=2",
    )
    parser.add_argument("--figure-format", choices=IMAGE_FORMATS, default="html")
    parser.add_argument("--dark", action="store_true", help="dark figure theme")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("synth", help="write a labelled synthetic sample set with splits")

    p = sub.add_parser("preprocess", help="clean recordings into sample sets")
    p.add_argument("--input", help="recording container or directory of containers")
    p.add_argument("--output", help="where sample-set containers are written")

    p = sub.add_parser("pretrain", help="masked-patch reconstruction pre-training")
    p.add_argument("--data", help="sample-set container")
    p.add_argument("--resume", help="checkpoint to continue from")

    verbs = {
        "finetune": "fine-tune on a labelled task",
        "evaluate": "score a split without training",
    }
    for verb, text in verbs.items():
        p = sub.add_parser(verb, help=text)
        p.add_argument("--data", help="labelled sample-set container")
        p.add_argument("--splits", help="directory of train/val/test index files")
        p.add_argument("--checkpoint", help="pre-trained (or fine-tuned) checkpoint")
        if verb == "finetune":
            p.add_argument("--frozen", action="store_true", help="train the head only")
            p.add_argument("--data-fraction", type=float, help="share of train split")
        else:
            p.add_argument("--split", choices=commands.SPLIT_NAMES, default="test")

    p = sub.add_parser("flops", help="per-variant FLOP and parameter accounting")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--seconds", type=float, default=10.0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    families = (*FAMILIES, TASK_PREFIX.rstrip("."))
    p.add_argument("--corrupt", choices=families, help="scale one family's backward")

    sub.add_parser("oracle", help="brute-force oracle suite")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.out_dir is not None:
        overrides["paths.out_dir"] = args.out_dir
    return load_run_config(args.config, overrides)


def dispatch(args: argparse.Namespace, cfg: RunConfig) -> Report:
    paths = cfg.paths
    out_dir = paths.out_dir
    match args.verb:
        case "synth":
            return commands.cmd_synth(cfg, out_dir)
        case "preprocess":
            source = commands.require_path(args.input or paths.recordings, "input")
            target = args.output or out_dir
            return commands.cmd_preprocess(cfg, source, target)
        case "pretrain":
            data = commands.require_path(args.data or paths.data, "data container")
            return commands.cmd_pretrain(cfg, data, out_dir, resume=args.resume)
        case "finetune":
            data = commands.require_path(args.data or paths.data, "data container")
            splits = commands.require_path(args.splits or paths.splits, "splits")
            return commands.cmd_finetune(
                cfg,
                data,
                splits,
                out_dir,
                checkpoint=args.checkpoint or paths.checkpoint,
                frozen=True if args.frozen else None,
                data_fraction=args.data_fraction,
            )
        case "evaluate":
            data = commands.require_path(args.data or paths.data, "data container")
            return commands.cmd_evaluate(
                cfg,
                data,
                args.splits or paths.splits,
                out_dir,
                checkpoint=args.checkpoint or paths.checkpoint,
                split=args.split,
            )
        case "flops":
            return commands.cmd_flops(cfg, args.channels, args.seconds)
        case "gradcheck":
            return commands.cmd_gradcheck(cfg, corrupt=args.corrupt)
        case "oracle":
            return commands.cmd_oracle(cfg)
    raise ConfigError(f"Unknown command {args.verb!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        configure_threads(cfg.threads)
        print(f"seed={cfg.seed}")
        report = dispatch(args, cfg)
        ReportRenderer(
            out_dir=cfg.paths.out_dir,
            dark_mode=args.dark,
            image_format=args.figure_format,
        ).render_report(report)
    except (CrissCrossError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
