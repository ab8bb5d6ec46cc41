"""``stin`` command line: synth, split, track, train, eval, fewshot, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import ConfigError, load_config
from .estimator import FrozenParamDrift, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic annotation corpus")
    _common(p)
    p.add_argument("--verbs", help="'basic', 'all' or a comma-separated verb list")
    p.add_argument("--videos-per-pair", type=int)
    p.add_argument("--frames", type=int)

    p = sub.add_parser("split", help="build a train/val split")
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--kind", choices=["compositional", "shuffled", "fewshot", "oneclass"])
    p.add_argument("--k", type=int, help="shots per novel class")
    p.add_argument("--noun", help="object noun for the one-class split")

    p = sub.add_parser("track", help="link per-frame detections into tracklets")
    _common(p)
    p.add_argument("--detections")

    p = sub.add_parser("train", help="train the classifier")
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--split")
    p.add_argument("--tracklets")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue training from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--split")
    p.add_argument("--tracklets")
    p.add_argument("--checkpoint")
    p.add_argument("--max-configs", type=int, help="object configurations searched per video")

    p = sub.add_parser("fewshot", help="fine-tune the classifier head on novel classes")
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--split")
    p.add_argument("--tracklets")
    p.add_argument("--checkpoint")

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    _common(p, out_required=False)
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    verbs = get("verbs")
    if verbs is not None and verbs not in ("basic", "all"):
        verbs = [v.strip() for v in verbs.split(",") if v.strip()]
    return {
        "seed": args.seed,
        "synth.verbs": verbs,
        "synth.videos_per_pair": get("videos_per_pair"),
        "synth.frames": get("frames"),
        "split.kind": get("kind"),
        "split.k": get("k"),
        "split.noun": get("noun"),
        "data.annotations": get("annotations"),
        "data.split": get("split"),
        "data.tracklets": get("tracklets"),
        "data.detections": get("detections"),
        "data.checkpoint": get("checkpoint"),
        "optimizer.epochs": get("epochs"),
        "search.max_configs": get("max_configs"),
    }


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
    except FileNotFoundError as exc:
        print(f"stin: config not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"stin: {exc}", file=sys.stderr)
        return EXIT_USAGE

    commands = {
        "synth": harness.cmd_synth,
        "split": harness.cmd_split,
        "track": harness.cmd_track,
        "train": lambda c, o: harness.cmd_train(c, o, resume=args.resume),
        "eval": harness.cmd_eval,
        "fewshot": harness.cmd_fewshot,
        "gradcheck": harness.cmd_gradcheck,
    }
    try:
        result = commands[args.command](cfg, args.out)
    except (NumericalError, FrozenParamDrift, harness.NumericalFailure, harness.GradcheckFailure) as exc:
        print(f"stin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except harness.DATA_ERRORS as exc:
        print(f"stin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"stin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.command != "gradcheck":
        print(json.dumps({k: v for k, v in result.items() if k != "loss_curve"}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
