import argparse
import logging
import sys
from typing import List, Optional

from pipeline import Pipeline
from utils.constants import DEFAULT_EPISODES, EvalMethod, SETTINGS_FILE, TITLE
from utils.errors import MetaLoraError, UsageError
from utils.settings import load_settings

COMMANDS = ("gen-data", "pretune", "invert", "meta-train", "eval", "flops", "all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def configure_logging(level: str) -> None:
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise UsageError(f"unknown log level {level!r}")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(numeric)


def build_parser() -> argparse.ArgumentParser:
    # accepted before or after the command
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--workdir", default=argparse.SUPPRESS, help="run directory for artifacts and reports")

    parser = _Parser(prog="metalora", description=f"{TITLE}: data-free meta-LoRA pipeline.",
                     parents=[common])
    parser.add_argument("--config", default=None, help=f"JSON settings file (e.g. {SETTINGS_FILE})")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one setting; may repeat")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--no-progress", action="store_true", help="hide progress bars")

    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate the toy meta-train and meta-test splits")
    sub.add_parser("pretune", parents=[common], help="pretrain the backbone and tune the teacher LoRAs")
    invert = sub.add_parser("invert", parents=[common], help="synthesize tasks from every teacher")
    invert.add_argument("--tasks-per-teacher", type=int, default=1)
    meta = sub.add_parser("meta-train", parents=[common], help="distill the meta-LoRA")
    meta.add_argument("--sparse", action="store_true", help="feed only the masked tokens to the student")
    meta.add_argument("--iterations", type=int, default=None)

    ev = sub.add_parser("eval", parents=[common], help="evaluate methods over few-shot episodes")
    ev.add_argument("--episodes", type=int, default=None,
                    help=f"episodes to sample ({DEFAULT_EPISODES} for final numbers)")
    ev.add_argument("--n", type=int, default=None)
    ev.add_argument("--k", type=int, default=None)
    ev.add_argument("--q", type=int, default=None)
    ev.add_argument("--methods", default=None,
                    help="comma separated subset of " + ",".join(m.value for m in EvalMethod))
    ev.add_argument("--sparse-ratio", type=float, default=None)

    fl = sub.add_parser("flops", parents=[common], help="FLOPs table for pruning plans and sparse ratios")
    fl.add_argument("--plan", action="append", default=None, help='pruning plan such as "11:0.75"; may repeat')
    fl.add_argument("--sparse-ratio", action="append", type=float, default=None)
    fl.add_argument("--reference", choices=("vit-b", "desk"), default=None)
    fl.add_argument("--measure", action="store_true", help="also time forward passes")

    sub.add_parser("all", parents=[common], help="run every stage in order")
    return parser


def _settings_from(args) -> dict:
    settings = load_settings(args.config, args.overrides)
    runtime = settings["runtime"]
    if getattr(args, "seed", None) is not None:
        runtime["seed"] = args.seed
    if getattr(args, "workdir", None) is not None:
        runtime["workdir"] = args.workdir
    if args.log_level is not None:
        runtime["log_level"] = args.log_level
    if args.no_progress:
        runtime["progress"] = False

    if args.command == "meta-train":
        if args.sparse:
            settings["meta"]["sparse"] = True
        if args.iterations is not None:
            settings["meta"]["iterations"] = args.iterations
    elif args.command == "eval":
        flags = {"episodes": args.episodes, "n_way": args.n, "k_shot": args.k, "q_query": args.q,
                 "sparse_ratio": args.sparse_ratio}
        for key, value in flags.items():
            if value is not None:
                settings["eval"][key] = value
        if args.methods:
            settings["eval"]["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    elif args.command == "flops":
        if args.plan is not None:
            settings["flops"]["plans"] = [""] + args.plan
        if args.sparse_ratio is not None:
            settings["flops"]["sparse_ratios"] = args.sparse_ratio
        if args.reference is not None:
            settings["flops"]["reference"] = args.reference
        if args.measure:
            settings["flops"]["measure"] = True
    return settings


def run(args) -> None:
    settings = _settings_from(args)
    configure_logging(settings["runtime"]["log_level"])
    pipeline = Pipeline(settings)
    if args.command == "gen-data":
        pipeline.gen_data()
    elif args.command == "pretune":
        pipeline.pretune()
    elif args.command == "invert":
        pipeline.invert(tasks_per_teacher=args.tasks_per_teacher)
    elif args.command == "meta-train":
        pipeline.meta_train()
    elif args.command == "eval":
        pipeline.evaluate()
    elif args.command == "flops":
        pipeline.flops()
    elif args.command == "all":
        pipeline.run_all()


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the pipeline."""
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        run(args)
    except UsageError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except MetaLoraError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: KeyboardInterrupt: interrupted", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
