"""Command-line entry point: ``train`` and ``score``.

Config file is TOML with a [trainer] section; CLI flags override it.
Exit codes: 0 success, 1 partial (some items failed to score), 2 invalid
input.
"""

import argparse
import json
import logging
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import TrainerConfig
from .training import load_checkpoint, score_steps, train_prm

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2


def build_config(args) -> TrainerConfig:
    settings = {}
    if args.config:
        with open(args.config, "rb") as fin:
            settings.update(tomllib.load(fin).get("trainer", {}))
    for key in ("lr", "epochs", "batch_size", "seed", "d_model"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return TrainerConfig(**settings)


def cmd_train(args) -> int:
    config = build_config(args)
    payload = train_prm(args.data, config, checkpoint_path=args.checkpoint)
    print(json.dumps({"final_loss": payload["manifest"]["final_loss"],
                      "trajectories": payload["manifest"]["trajectories"],
                      "checkpoint": args.checkpoint}))
    return EXIT_OK


def cmd_score(args) -> int:
    model, config, _ = load_checkpoint(args.checkpoint)
    report = score_steps(model, config, args.input, args.output)
    print(json.dumps({"written": report["written"],
                      "failures": len(report["failures"])}))
    return EXIT_PARTIAL if report["failures"] else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prm-trainer",
        description="Train a step-level reward model on soft labels and export step scores")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the model on a labeled dataset")
    p.add_argument("--data", required=True, help="labeled JSONL")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--d-model", dest="d_model", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="export step scores for trajectories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="trajectories JSONL")
    p.add_argument("--output", required=True, help="predictions JSONL")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
