"""Stage orchestration: config parsing, run planning, phased cell
execution, and the entry points behind each CLI subcommand.

A stage's work is a list of cells (resumable units). Stages share one
executor pattern: compute the plan, skip cells already in the run log,
execute the rest phase by phase (generation before rollouts before
scoring), and append each cell's payload to the log as it completes.
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from . import curation, prompts, verify
from .backend import Backend, BackendConfig, HttpBackend, MockBackend, RoleSpec, SamplingParams, UnmatchedPrompt
from .pipeline import (
    Pipeline,
    Problem,
    StrategyConfig,
    attempt_record,
    load_benchmark,
    stone_record_dict,
    stone_record_from_dict,
)
from .scoring import StoneScore, score_row, select_best, set_id_for
from .store import CachedInvoker, CompletionCache, RunStore, cell_id, emit_report


class ConfigError(Exception):
    """Configuration file is structurally or semantically invalid."""


class StageError(Exception):
    """A stage cannot run with the given config or run state."""


# -- configuration ------------------------------------------------------------

_TOP_KEYS = {"run_root", "dataset", "workers", "backends", "roles", "strategy", "curation"}
_BACKEND_KEYS = {"base_url", "api_key_env", "max_concurrency", "max_retries", "retry_base_delay", "timeout"}
_ROLE_KEYS = {"backend", "model", "params", "non_reasoning"}
_PARAM_KEYS = {"temperature", "top_p", "max_tokens", "reasoning_effort"}
_STRATEGY_KEYS = {
    "strategy",
    "num_stones",
    "num_sets",
    "rollouts_per_set",
    "parse_retry_budget",
    "share_stone_solutions",
    "thinking",
}
_THINKING_KEYS = {"open_marker", "close_marker"}
_CURATION_KEYS = {"gap_threshold"}
ROLE_NAMES = ("generator", "solver", "reference_solver", "target_solver")


def _check_keys(section: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


@dataclass(frozen=True)
class Config:
    dataset: str
    backends: "dict[str, BackendConfig]"
    roles: "dict[str, RoleSpec]"
    strategy: StrategyConfig
    run_root: str = "arq-runs"
    workers: int = 8
    gap_threshold: float = curation.DEFAULT_GAP_THRESHOLD

    def target_strategy(self) -> StrategyConfig:
        target = self.roles.get("target_solver")
        if target is None:
            raise StageError("transfer requires a target_solver role in the config")
        return replace(self.strategy, solver=target)


def _parse_params(section: Mapping, where: str, non_reasoning: bool) -> SamplingParams:
    _check_keys(section, _PARAM_KEYS, where)
    effort = section.get("reasoning_effort", "none" if non_reasoning else "high")
    try:
        return SamplingParams(
            temperature=float(section.get("temperature", 1.0)),
            top_p=float(section.get("top_p", 1.0)),
            max_tokens=int(section.get("max_tokens", 8192)),
            reasoning_effort=str(effort),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_role(name: str, section: Mapping, backends: Mapping[str, BackendConfig]) -> RoleSpec:
    where = f"roles.{name}"
    _check_keys(section, _ROLE_KEYS, where)
    for required in ("backend", "model"):
        if required not in section:
            raise ConfigError(f"{where}: missing {required!r}")
    if section["backend"] not in backends:
        raise ConfigError(f"{where}: backend {section['backend']!r} is not declared")
    non_reasoning = bool(section.get("non_reasoning", False))
    params = _parse_params(section.get("params", {}), f"{where}.params", non_reasoning)
    try:
        return RoleSpec(
            backend=str(section["backend"]),
            model=str(section["model"]),
            params=params,
            non_reasoning=non_reasoning,
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(data: Mapping) -> Config:
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a JSON object")
    _check_keys(data, _TOP_KEYS, "config")
    for required in ("dataset", "backends", "roles"):
        if required not in data:
            raise ConfigError(f"config: missing {required!r}")

    backends: dict[str, BackendConfig] = {}
    if not data["backends"]:
        raise ConfigError("config: backends must declare at least one backend")
    for name, section in data["backends"].items():
        where = f"backends.{name}"
        _check_keys(section, _BACKEND_KEYS, where)
        try:
            backends[name] = BackendConfig(
                backend_id=name,
                base_url=str(section.get("base_url", "")),
                api_key_env=str(section.get("api_key_env", "")),
                max_concurrency=int(section.get("max_concurrency", 4)),
                max_retries=int(section.get("max_retries", 3)),
                retry_base_delay=float(section.get("retry_base_delay", 0.5)),
                timeout=float(section.get("timeout", 120.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    roles: dict[str, RoleSpec] = {}
    for name, section in data["roles"].items():
        if name not in ROLE_NAMES:
            raise ConfigError(f"unknown role {name!r}; expected one of {ROLE_NAMES}")
        roles[name] = _parse_role(name, section, backends)
    for required in ("generator", "solver"):
        if required not in roles:
            raise ConfigError(f"config: roles must include {required!r}")

    strat = dict(data.get("strategy", {}))
    _check_keys(strat, _STRATEGY_KEYS, "strategy")
    thinking_section = strat.get("thinking", {})
    _check_keys(thinking_section, _THINKING_KEYS, "strategy.thinking")
    try:
        thinking = prompts.ThinkingDelimiters(
            open_marker=str(thinking_section.get("open_marker", "<think>")),
            close_marker=str(thinking_section.get("close_marker", "</think>")),
        )
        strategy = StrategyConfig(
            generator=roles["generator"],
            solver=roles.get("reference_solver", roles["solver"]),
            strategy=str(strat.get("strategy", "single")),
            num_stones=int(strat.get("num_stones", 1)),
            num_sets=int(strat.get("num_sets", 20)),
            rollouts_per_set=int(strat.get("rollouts_per_set", 20)),
            parse_retry_budget=int(strat.get("parse_retry_budget", 2)),
            share_stone_solutions=bool(strat.get("share_stone_solutions", False)),
            thinking=thinking,
        )
    except ValueError as exc:
        raise ConfigError(f"strategy: {exc}") from exc

    cur = dict(data.get("curation", {}))
    _check_keys(cur, _CURATION_KEYS, "curation")

    try:
        workers = int(data.get("workers", 8))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"workers: {exc}") from exc
    if workers < 1:
        raise ConfigError("workers must be positive")

    return Config(
        dataset=str(data["dataset"]),
        backends=backends,
        roles=roles,
        strategy=strategy,
        run_root=str(data.get("run_root", "arq-runs")),
        workers=workers,
        gap_threshold=float(cur.get("gap_threshold", curation.DEFAULT_GAP_THRESHOLD)),
    )


def config_record(cfg: Config) -> dict:
    """Serialized config with every default made explicit; parse_config of
    this record reproduces cfg exactly."""
    backends = {
        name: {
            "base_url": b.base_url,
            "api_key_env": b.api_key_env,
            "max_concurrency": b.max_concurrency,
            "max_retries": b.max_retries,
            "retry_base_delay": b.retry_base_delay,
            "timeout": b.timeout,
        }
        for name, b in sorted(cfg.backends.items())
    }
    roles = {
        name: {
            "backend": r.backend,
            "model": r.model,
            "non_reasoning": r.non_reasoning,
            "params": {
                "temperature": r.params.temperature,
                "top_p": r.params.top_p,
                "max_tokens": r.params.max_tokens,
                "reasoning_effort": r.params.reasoning_effort,
            },
        }
        for name, r in sorted(cfg.roles.items())
    }
    s = cfg.strategy
    return {
        "dataset": cfg.dataset,
        "run_root": cfg.run_root,
        "workers": cfg.workers,
        "backends": backends,
        "roles": roles,
        "strategy": {
            "strategy": s.strategy,
            "num_stones": s.num_stones,
            "num_sets": s.num_sets,
            "rollouts_per_set": s.rollouts_per_set,
            "parse_retry_budget": s.parse_retry_budget,
            "share_stone_solutions": s.share_stone_solutions,
            "thinking": {
                "open_marker": s.thinking.open_marker,
                "close_marker": s.thinking.close_marker,
            },
        },
        "curation": {"gap_threshold": cfg.gap_threshold},
    }


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def apply_overrides(
    cfg: Config,
    dataset: str | None = None,
    strategy: str | None = None,
    stones: int | None = None,
    sets: int | None = None,
    rollouts: int | None = None,
) -> Config:
    updates: dict = {}
    if dataset is not None:
        updates["dataset"] = dataset
    strat = cfg.strategy
    strat_updates: dict = {}
    if strategy is not None:
        strat_updates["strategy"] = strategy
        if strategy in ("single", "rand") and stones is None:
            strat_updates["num_stones"] = 1
    if stones is not None:
        strat_updates["num_stones"] = stones
    if sets is not None:
        strat_updates["num_sets"] = sets
    if rollouts is not None:
        strat_updates["rollouts_per_set"] = rollouts
    if strat_updates:
        try:
            updates["strategy"] = replace(strat, **strat_updates)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return replace(cfg, **updates) if updates else cfg


# -- deterministic simulation backend -----------------------------------------

_SOLVER_ONLY_P = 0.35
_GUIDED_BASE_P = 0.2
_GUIDED_SPAN_P = 0.6

_EXAMPLE_RE = re.compile(r"Example:\n\n(.*?)\n\nSolution to Example:", re.DOTALL)


def _unit(*parts: str) -> float:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _wrong_answer(canonical: verify.Answer) -> str:
    if canonical.denominator == 1:
        return str(canonical.numerator + 1)
    return f"{canonical.numerator + 1}/{canonical.denominator}"


def build_simulation(
    problems: Sequence[Problem],
    delims: prompts.ThinkingDelimiters,
    backend_id: str,
    config: BackendConfig | None = None,
) -> MockBackend:
    """A self-contained model over the given benchmark: generators emit
    parseable stones of hash-determined quality, solvers answer targets
    correctly with probability 0.35 alone and 0.2 + 0.6*quality when
    stone/solution examples are present. Fully deterministic in the
    (prompt, seed_index) pair."""
    truths = {p.statement.strip(): p.truth for p in problems if p.truth is not None}
    o, c = delims.open_marker, delims.close_marker

    def answer_line(truth: verify.GroundTruth, correct: bool) -> str:
        text = verify.render_answer(truth.canonical) if correct else _wrong_answer(truth.canonical)
        return f"\\boxed{{{text}}}"

    def respond(req) -> str:
        prompt = req.user_prompt
        seed = str(req.params.seed_index)
        model = req.model
        if "Study the following example problems" in prompt:
            question = prompt.split("Final Problem:", 1)[1].strip()
            stones = _EXAMPLE_RE.findall(prompt)
            truth = truths.get(question)
            if truth is None:
                value = 1 + int(_unit("stone-answer", question) * 997)
                return f"{o}solving a practice step {seed}{c}\nThe answer is \\boxed{{{value}}}."
            quality = _unit("quality", *stones)
            p = _GUIDED_BASE_P + _GUIDED_SPAN_P * quality
            correct = _unit("final", model, prompt, seed) < p
            return (
                f"{o}guided attempt {seed}{c}\n"
                f"Following the worked examples, the final answer is {answer_line(truth, correct)}."
            )
        if "reason step by step to solve the question above" in prompt:
            question = prompt.split("Question:\n\n", 1)[1].rsplit("\n\n---", 1)[0].strip()
            truth = truths.get(question)
            if truth is None:
                value = 1 + int(_unit("stone-answer", question) * 997)
                return f"{o}working the subproblem {seed}{c}\nThe answer is \\boxed{{{value}}}."
            correct = _unit("direct", model, prompt, seed) < _SOLVER_ONLY_P
            return (
                f"{o}direct attempt {seed}{c}\n"
                f"Therefore the answer is {answer_line(truth, correct)}."
            )
        if "stepping stones towards solving" in prompt or "randomly generate" in prompt:
            key = "subproblem" if "subproblem: |" in prompt else "problem"
            a = 2 + int(_unit("a", model, prompt, seed) * 96)
            b = 2 + int(_unit("b", model, prompt, seed) * 96)
            m = 3 + int(_unit("m", model, prompt, seed) * 997)
            stone = f"Compute the remainder when {a}^{b} is divided by {m}."
            return (
                f"{o}designing a practice problem {seed}{c}\n"
                f"Here is a suitable {key}.\n```yaml\n{key}: |\n  {stone}\n```"
            )
        raise UnmatchedPrompt(f"simulation has no rule for prompt: {prompt[:120]!r}")

    if config is None:
        backend_config = BackendConfig(backend_id=backend_id, max_concurrency=16, max_retries=0)
    else:
        backend_config = replace(config, backend_id=backend_id)
    return MockBackend(default=respond, config=backend_config)


# -- cell planning -------------------------------------------------------------

def _solve_cells(problems: Sequence[Problem], n: int, kind: str = "solve") -> list[list]:
    return [[kind, p.id, r] for p in problems for r in range(n)]


def _gen_cells(problems: Sequence[Problem], num_sets: int) -> list[list]:
    return [["gen", p.id, s] for p in problems for s in range(num_sets)]


def _arq_cells(problems: Sequence[Problem], num_sets: int, n: int, kind: str = "arq") -> list[list]:
    return [[kind, p.id, s, r] for p in problems for s in range(num_sets) for r in range(n)]


def _per_problem_cells(problems: Sequence[Problem], kind: str) -> list[list]:
    return [[kind, p.id] for p in problems]


def plan_solve(cfg: Config, problems: Sequence[Problem]) -> list[list]:
    return _solve_cells(problems, cfg.strategy.rollouts_per_set)


def plan_generate(cfg: Config, problems: Sequence[Problem]) -> list[list]:
    return _gen_cells(problems, cfg.strategy.num_sets)


def plan_score(cfg: Config, problems: Sequence[Problem]) -> list[list]:
    s = cfg.strategy
    return (
        plan_solve(cfg, problems)
        + plan_generate(cfg, problems)
        + _arq_cells(problems, s.num_sets, s.rollouts_per_set)
        + _per_problem_cells(problems, "score")
    )


def plan_transfer(cfg: Config, problems: Sequence[Problem]) -> list[list]:
    s = cfg.strategy
    return (
        plan_score(cfg, problems)
        + _solve_cells(problems, s.rollouts_per_set, kind="tsolve")
        + _arq_cells(problems, s.num_sets, s.rollouts_per_set, kind="tarq")
        + _per_problem_cells(problems, "tscore")
        + _per_problem_cells(problems, "transfer")
    )


def plan_curate(cfg: Config, problems: Sequence[Problem]) -> list[list]:
    return plan_score(cfg, problems) + [["curate"]]


# Kinds grouped into dependency phases; later phases read earlier payloads.
_PHASES: tuple[tuple[str, ...], ...] = (
    ("solve", "gen"),
    ("arq",),
    ("score",),
    ("tsolve", "tarq"),
    ("tscore",),
    ("transfer",),
    ("curate",),
)


# -- run context and workers ---------------------------------------------------

@dataclass
class RunContext:
    cfg: Config
    problems: list[Problem]
    by_id: dict[str, Problem]
    store: RunStore
    invoker: CachedInvoker
    pipe: Pipeline
    target_pipe: Pipeline | None
    mock: bool


def _dataset_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_manifest(cfg: Config, mock: bool) -> dict:
    return {
        "config": config_record(cfg),
        "dataset": {"path": cfg.dataset, "sha256": _dataset_digest(cfg.dataset)},
        "templates": prompts.all_template_digests(),
        "mock": mock,
    }


def build_backends(cfg: Config, problems: Sequence[Problem], mock: bool) -> dict[str, Backend]:
    backends: dict[str, Backend] = {}
    for name, bconfig in cfg.backends.items():
        if mock:
            # distinct cache identity: simulated completions must never
            # satisfy a later live request against the same run root
            backends[name] = build_simulation(
                problems, cfg.strategy.thinking, backend_id=f"sim:{name}", config=bconfig
            )
        else:
            if not bconfig.base_url:
                raise ConfigError(f"backends.{name}: base_url required without --mock")
            backends[name] = HttpBackend(bconfig)
    return backends


@contextmanager
def open_run(cfg: Config, run_id: str, mock: bool = False) -> Iterator[RunContext]:
    problems = load_benchmark(cfg.dataset)
    backends = build_backends(cfg, problems, mock)
    cache = CompletionCache(Path(cfg.run_root) / "cache")
    invoker = CachedInvoker(cache, backends)
    store = RunStore.open(cfg.run_root, run_id, build_manifest(cfg, mock))
    target_pipe = None
    if "target_solver" in cfg.roles:
        target_pipe = Pipeline(invoker, cfg.target_strategy())
    ctx = RunContext(
        cfg=cfg,
        problems=problems,
        by_id={p.id: p for p in problems},
        store=store,
        invoker=invoker,
        pipe=Pipeline(invoker, cfg.strategy),
        target_pipe=target_pipe,
        mock=mock,
    )
    try:
        yield ctx
    finally:
        store.close()


def _mean(values: Sequence[int]) -> Fraction:
    return Fraction(sum(values), len(values))


def _stones_for(ctx: RunContext, snapshot: Mapping[str, dict], pid: str, set_index: int):
    payload = snapshot.get(cell_id(["gen", pid, set_index]))
    if payload is None:
        raise StageError(f"missing generated stones for problem {pid!r} set {set_index}")
    return [stone_record_from_dict(row) for row in payload["stones"]]


def _rollout_rewards(
    snapshot: Mapping[str, dict], kind: str, pid: str, set_index: int, n: int
) -> tuple[list[int], bool]:
    rewards: list[int] = []
    fallback = False
    for r in range(n):
        payload = snapshot.get(cell_id([kind, pid, set_index, r]))
        if payload is None:
            raise StageError(f"missing {kind} rollout {r} for problem {pid!r} set {set_index}")
        attempt = payload["attempt"]
        rewards.append(int(attempt["reward"]))
        fallback = fallback or bool(attempt.get("fallback"))
    return rewards, fallback


def _score_problem(
    ctx: RunContext, snapshot: Mapping[str, dict], pid: str, kind: str, solve_kind: str
) -> dict:
    """Score every set of one problem from logged rollouts and select the
    best. Shared by the reference (arq/solve) and target (tarq/tsolve)
    sides."""
    s = ctx.cfg.strategy
    n = s.rollouts_per_set
    scores: list[StoneScore] = []
    for set_index in range(s.num_sets):
        stones = _stones_for(ctx, snapshot, pid, set_index)
        rewards, fallback = _rollout_rewards(snapshot, kind, pid, set_index, n)
        scores.append(
            StoneScore.from_rewards(set_id_for(stones), set_index + 1, rewards, fallback=fallback)
        )
    solve_rewards = []
    for r in range(n):
        payload = snapshot.get(cell_id([solve_kind, pid, r]))
        if payload is None:
            raise StageError(f"missing {solve_kind} rollout {r} for problem {pid!r}")
        solve_rewards.append(int(payload["attempt"]["reward"]))
    baseline = _mean(solve_rewards)
    report = select_best(pid, scores, baseline_solver_only=baseline)
    chosen_position = report.chosen.position
    return {
        "scores": [
            score_row(pid, score, chosen=score.stone_id == report.chosen_stone_id)
            for score in scores
        ],
        "selection": {
            "target_id": pid,
            "chosen_stone_id": report.chosen_stone_id,
            "chosen_set": chosen_position - 1,
            "reported_score": str(report.reported_score),
            "baseline_solver_only": str(baseline),
        },
    }


def _curate_payload(ctx: RunContext, snapshot: Mapping[str, dict]) -> dict:
    cfg = ctx.cfg
    if cfg.strategy.num_stones != 1:
        raise StageError("curate requires single-stone pools (num_stones = 1)")
    pools: list[curation.ScoredPool] = []
    for problem in ctx.problems:
        score_payload = snapshot.get(cell_id(["score", problem.id]))
        if score_payload is None:
            raise StageError(f"missing scores for problem {problem.id!r}")
        rows_by_set = {row["position"] - 1: row for row in score_payload["scores"]}
        entries: list[curation.PoolEntry] = []
        for set_index in range(cfg.strategy.num_sets):
            stones = _stones_for(ctx, snapshot, problem.id, set_index)
            record = stones[0]
            row = rows_by_set[set_index]
            score = StoneScore.from_rewards(
                row["stone_id"], row["position"], row["rewards"], fallback=row["fallback"]
            )
            entries.append(curation.PoolEntry(record=record, score=score))
        pools.append(curation.ScoredPool(target=problem, entries=entries))

    sft = curation.build_sft(pools)
    dpo = curation.build_dpo(pools, gap_threshold=cfg.gap_threshold)
    covered = {e.target_id for e in sft}
    skipped = [p.target.id for p in pools if p.target.id not in covered]

    out = ctx.store.datasets_dir
    files = [str(curation.export_jsonl(sft, out / "sft.jsonl"))]
    if sft:
        files.append(str(curation.write_stats(curation.compute_stats(sft), out / "sft.stats.json")))
    files.append(str(curation.export_jsonl(dpo, out / "dpo.jsonl")))
    if dpo:
        files.append(str(curation.write_stats(curation.compute_stats(dpo), out / "dpo.stats.json")))
    files.append(str(curation.write_hyperparameters(out / "training_hyperparameters.json")))
    mean_gap = float(sum((p.gap for p in dpo), Fraction(0)) / len(dpo)) if dpo else None
    return {
        "sft_size": len(sft),
        "dpo_size": len(dpo),
        "mean_gap": mean_gap,
        "skipped_pools": skipped,
        "files": files,
    }


def _transfer_payload(ctx: RunContext, snapshot: Mapping[str, dict], pid: str) -> dict:
    n = ctx.cfg.strategy.rollouts_per_set
    reference = snapshot.get(cell_id(["score", pid]))
    if reference is None:
        raise StageError(f"no reference selection for problem {pid!r}")
    selection = reference["selection"]
    chosen_set = int(selection["chosen_set"])
    transfer_rewards, _fb = _rollout_rewards(snapshot, "tarq", pid, chosen_set, n)
    tsolve_rewards = []
    for r in range(n):
        payload = snapshot.get(cell_id(["tsolve", pid, r]))
        if payload is None:
            raise StageError(f"missing tsolve rollout {r} for problem {pid!r}")
        tsolve_rewards.append(int(payload["attempt"]["reward"]))
    tscore = snapshot.get(cell_id(["tscore", pid]))
    if tscore is None:
        raise StageError(f"missing target-side scores for problem {pid!r}")
    return {
        "stone_id": selection["chosen_stone_id"],
        "transfer_mean": str(_mean(transfer_rewards)),
        "target_solver_only": str(_mean(tsolve_rewards)),
        "target_self_selected": tscore["selection"]["reported_score"],
    }


def _execute_cell(ctx: RunContext, snapshot: Mapping[str, dict], cell: list) -> dict:
    kind = cell[0]
    if kind == "solve":
        _, pid, r = cell
        attempt = ctx.pipe.solver_only_attempt(ctx.by_id[pid], r)
        return {"attempt": attempt_record(attempt)}
    if kind == "gen":
        _, pid, s = cell
        records = ctx.pipe.generate_set(ctx.by_id[pid], s)
        invalid = sum(1 for rec in records if rec.parse_status != "ok")
        return {"stones": [stone_record_dict(rec) for rec in records], "invalid": invalid}
    if kind == "arq":
        _, pid, s, r = cell
        stones = _stones_for(ctx, snapshot, pid, s)
        x = ctx.by_id[pid]
        if all(rec.parse_status == "ok" for rec in stones):
            attempt = ctx.pipe.arq_attempt(x, stones, r)
        else:
            attempt = ctx.pipe.fallback_attempt(x, s, r)
        return {"attempt": attempt_record(attempt)}
    if kind == "score":
        return _score_problem(ctx, snapshot, cell[1], kind="arq", solve_kind="solve")
    if kind == "tsolve":
        _, pid, r = cell
        assert ctx.target_pipe is not None
        attempt = ctx.target_pipe.solver_only_attempt(
            ctx.by_id[pid], r, method="target_solver_only"
        )
        return {"attempt": attempt_record(attempt)}
    if kind == "tarq":
        _, pid, s, r = cell
        assert ctx.target_pipe is not None
        stones = _stones_for(ctx, snapshot, pid, s)
        x = ctx.by_id[pid]
        if all(rec.parse_status == "ok" for rec in stones):
            attempt = ctx.target_pipe.arq_attempt(x, stones, r)
        else:
            attempt = ctx.target_pipe.fallback_attempt(x, s, r)
        attempt = replace(attempt, method=f"target_{attempt.method}")
        return {"attempt": attempt_record(attempt)}
    if kind == "tscore":
        return _score_problem(ctx, snapshot, cell[1], kind="tarq", solve_kind="tsolve")
    if kind == "transfer":
        return _transfer_payload(ctx, snapshot, cell[1])
    if kind == "curate":
        return _curate_payload(ctx, snapshot)
    raise StageError(f"unknown cell kind {kind!r}")


def execute_plan(ctx: RunContext, plan: Sequence[Sequence]) -> None:
    """Run all pending cells of the plan, phase by phase. Within a phase,
    cells run on a thread pool; each records its payload on completion."""
    for phase in _PHASES:
        phase_cells = [c for c in plan if c[0] in phase]
        pending = ctx.store.pending(phase_cells)
        if not pending:
            continue
        snapshot = ctx.store.completed()

        def work(cell: list) -> None:
            payload = _execute_cell(ctx, snapshot, cell)
            ctx.store.record(cell, payload)

        if len(pending) == 1 or ctx.cfg.workers == 1:
            for cell in pending:
                work(cell)
        else:
            with ThreadPoolExecutor(max_workers=ctx.cfg.workers) as pool:
                futures = [pool.submit(work, cell) for cell in pending]
                for future in as_completed(futures):
                    future.result()


def infer_report_plan(ctx: RunContext) -> list[list]:
    """Planned cells implied by what the log already contains, so a report
    can verify completeness without knowing which subcommand produced the
    run."""
    completed = ctx.store.completed()
    kinds = {json.loads(key)[0] for key in completed}
    cfg, problems = ctx.cfg, ctx.problems
    plan: list[list] = []
    if "solve" in kinds:
        plan += plan_solve(cfg, problems)
    if "gen" in kinds:
        plan += plan_generate(cfg, problems)
    if kinds & {"arq", "score"}:
        plan = _merge(plan, plan_score(cfg, problems))
    if kinds & {"tsolve", "tarq", "tscore", "transfer"}:
        plan = _merge(plan, plan_transfer(cfg, problems))
    if "curate" in kinds:
        plan = _merge(plan, plan_curate(cfg, problems))
    return plan


def _merge(base: list[list], extra: list[list]) -> list[list]:
    seen = {cell_id(c) for c in base}
    out = list(base)
    for cell in extra:
        if cell_id(cell) not in seen:
            seen.add(cell_id(cell))
            out.append(cell)
    return out


def count_warnings(ctx: RunContext) -> int:
    """Completed-with-warnings signals: stone sets that degraded to
    fallback, plus pools curation had to skip."""
    warnings = 0
    for key, payload in ctx.store.completed().items():
        kind = json.loads(key)[0]
        if kind == "gen" and payload.get("invalid", 0) > 0:
            warnings += 1
        elif kind == "curate":
            warnings += len(payload.get("skipped_pools", []))
    return warnings


# -- stage entry points ---------------------------------------------------------

@dataclass
class StageResult:
    warnings: int
    lines: list[str]

    @property
    def exit_code(self) -> int:
        return 1 if self.warnings else 0


def _selection_lines(ctx: RunContext) -> list[str]:
    lines: list[str] = []
    completed = ctx.store.completed()
    for problem in ctx.problems:
        payload = completed.get(cell_id(["score", problem.id]))
        if payload is None:
            continue
        sel = payload["selection"]
        reported = float(Fraction(sel["reported_score"]))
        baseline = float(Fraction(sel["baseline_solver_only"]))
        lines.append(
            f"problem {problem.id}: chosen {sel['chosen_stone_id']} "
            f"reported {reported:.6f} baseline {baseline:.6f}"
        )
    return lines


def stage_solve(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    with open_run(cfg, run_id, mock) as ctx:
        execute_plan(ctx, plan_solve(cfg, ctx.problems))
        completed = ctx.store.completed()
        lines = []
        for problem in ctx.problems:
            rewards = [
                int(completed[cell_id(["solve", problem.id, r])]["attempt"]["reward"])
                for r in range(cfg.strategy.rollouts_per_set)
            ]
            lines.append(
                f"problem {problem.id}: solver-only mean {float(_mean(rewards)):.6f} "
                f"over {len(rewards)} rollouts"
            )
        emit_report(ctx.store, infer_report_plan(ctx))
        return StageResult(warnings=count_warnings(ctx), lines=lines)


def stage_generate(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    with open_run(cfg, run_id, mock) as ctx:
        execute_plan(ctx, plan_generate(cfg, ctx.problems))
        completed = ctx.store.completed()
        lines = []
        for problem in ctx.problems:
            invalid_sets = 0
            for s in range(cfg.strategy.num_sets):
                payload = completed[cell_id(["gen", problem.id, s])]
                if payload.get("invalid", 0) > 0:
                    invalid_sets += 1
            total = cfg.strategy.num_sets * cfg.strategy.num_stones
            lines.append(
                f"problem {problem.id}: generated {total} stones in "
                f"{cfg.strategy.num_sets} sets ({invalid_sets} unusable sets)"
            )
        return StageResult(warnings=count_warnings(ctx), lines=lines)


def stage_score(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    with open_run(cfg, run_id, mock) as ctx:
        execute_plan(ctx, plan_score(cfg, ctx.problems))
        lines = _selection_lines(ctx)
        emit_report(ctx.store, infer_report_plan(ctx))
        return StageResult(warnings=count_warnings(ctx), lines=lines)


def stage_select(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    """Selection is the tail of scoring; running it just ensures the score
    plan is complete and reprints the per-problem choices."""
    return stage_score(cfg, run_id, mock)


def stage_transfer(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    if "target_solver" not in cfg.roles:
        raise StageError("transfer requires a target_solver role in the config")
    with open_run(cfg, run_id, mock) as ctx:
        execute_plan(ctx, plan_transfer(cfg, ctx.problems))
        completed = ctx.store.completed()
        lines = []
        for problem in ctx.problems:
            payload = completed[cell_id(["transfer", problem.id])]
            lines.append(
                f"problem {problem.id}: transfer {float(Fraction(payload['transfer_mean'])):.6f} "
                f"target-solver-only {float(Fraction(payload['target_solver_only'])):.6f} "
                f"target-self-selected {float(Fraction(payload['target_self_selected'])):.6f}"
            )
        emit_report(ctx.store, infer_report_plan(ctx))
        return StageResult(warnings=count_warnings(ctx), lines=lines)


def stage_curate(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    if cfg.strategy.num_stones != 1:
        raise StageError("curate requires single-stone pools (num_stones = 1)")
    with open_run(cfg, run_id, mock) as ctx:
        execute_plan(ctx, plan_curate(cfg, ctx.problems))
        payload = ctx.store.completed()[cell_id(["curate"])]
        lines = [
            f"SFT examples: {payload['sft_size']} "
            f"(skipped pools: {len(payload['skipped_pools'])})",
            f"DPO pairs: {payload['dpo_size']}"
            + (f" (mean gap {payload['mean_gap']:.4f})" if payload["mean_gap"] is not None else ""),
        ]
        lines += [f"wrote {name}" for name in payload["files"]]
        return StageResult(warnings=count_warnings(ctx), lines=lines)


def stage_report(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    with open_run(cfg, run_id, mock) as ctx:
        written = emit_report(ctx.store, infer_report_plan(ctx))
        lines = [f"wrote {path}" for path in written]
        return StageResult(warnings=count_warnings(ctx), lines=lines)


def stage_run(cfg: Config, run_id: str, mock: bool = False) -> StageResult:
    with open_run(cfg, run_id, mock) as ctx:
        execute_plan(ctx, plan_score(cfg, ctx.problems))
        lines = _selection_lines(ctx)
        written = emit_report(ctx.store, infer_report_plan(ctx))
        lines += [f"wrote {path}" for path in written]
        return StageResult(warnings=count_warnings(ctx), lines=lines)


__all__ = [
    "ConfigError",
    "StageError",
    "Config",
    "parse_config",
    "config_record",
    "load_config",
    "apply_overrides",
    "build_simulation",
    "build_backends",
    "build_manifest",
    "open_run",
    "execute_plan",
    "plan_solve",
    "plan_generate",
    "plan_score",
    "plan_transfer",
    "plan_curate",
    "infer_report_plan",
    "count_warnings",
    "StageResult",
    "stage_solve",
    "stage_generate",
    "stage_score",
    "stage_select",
    "stage_transfer",
    "stage_curate",
    "stage_report",
    "stage_run",
]
