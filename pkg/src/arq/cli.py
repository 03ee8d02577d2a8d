"""Command-line front end.

Every subcommand shares the same flags and resumes idempotently: rerunning
a finished stage replays nothing and exits immediately. Exit codes: 0 on
success, 1 when the stage completed but produced warnings (degraded stone
sets, skipped curation pools), 2 on errors (bad config, refused resume,
backend failure).
"""

from __future__ import annotations

import argparse
import hashlib
import sys

from . import stages
from .backend import BackendError
from .curation import CurationError
from .prompts import PromptError
from .scoring import ScoringError
from .store import StoreError, canonical_json

_COMMANDS: tuple[tuple[str, str], ...] = (
    ("solve", "run solver-only baseline rollouts"),
    ("generate", "generate stepping-stone sets for every problem"),
    ("score", "run rollouts and score every stone set"),
    ("select", "pick the best stone per problem from scored sets"),
    ("transfer", "re-evaluate chosen stones under the target solver"),
    ("curate", "export SFT/DPO training data from scored pools"),
    ("report", "rebuild report files from the run log"),
    ("run", "full pipeline: solve, generate, score, select, report"),
)

_STAGES = {
    "solve": stages.stage_solve,
    "generate": stages.stage_generate,
    "score": stages.stage_score,
    "select": stages.stage_select,
    "transfer": stages.stage_transfer,
    "curate": stages.stage_curate,
    "report": stages.stage_report,
    "run": stages.stage_run,
}

_USER_ERRORS = (
    stages.ConfigError,
    stages.StageError,
    StoreError,
    BackendError,
    PromptError,
    ScoringError,
    CurationError,
    ValueError,
    OSError,
)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="path to the JSON config file")
    parser.add_argument("--dataset", help="benchmark JSONL path (overrides the config)")
    parser.add_argument("--run-id", help="run identifier; defaults to a config digest, so reruns resume")
    parser.add_argument(
        "--strategy",
        choices=("single", "rand", "sequential", "recursive"),
        help="generation strategy (overrides the config)",
    )
    parser.add_argument("--stones", type=int, help="stones per set (overrides the config)")
    parser.add_argument("--sets", type=int, help="stone sets per problem (overrides the config)")
    parser.add_argument("--rollouts", type=int, help="rollouts per set (overrides the config)")
    parser.add_argument(
        "--mock",
        action="store_true",
        help="replace every backend with the built-in deterministic simulation",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arq",
        description="stepping-stone pipeline: generate, score, select, transfer, curate",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in _COMMANDS:
        sub = subparsers.add_parser(name, help=help_text)
        _add_common_flags(sub)
    return parser


def default_run_id(cfg: stages.Config) -> str:
    digest = hashlib.sha256(canonical_json(stages.config_record(cfg)).encode("utf-8")).hexdigest()
    return f"auto-{digest[:12]}"


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = stages.load_config(args.config)
        cfg = stages.apply_overrides(
            cfg,
            dataset=args.dataset,
            strategy=args.strategy,
            stones=args.stones,
            sets=args.sets,
            rollouts=args.rollouts,
        )
        run_id = args.run_id or default_run_id(cfg)
        result = _STAGES[args.command](cfg, run_id, mock=args.mock)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"run {run_id}")
    for line in result.lines:
        print(line)
    if result.warnings:
        print(f"completed with {result.warnings} warning(s)", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
