"""Inference chains: solver-only attempts, stone generation in four
strategies, and full stone-conditioned rollouts.

Every completion flows through an injected invoker (backend name, request)
-> (cache key, response), so callers control caching and backend routing.
Seeds are derived deterministically from (set, position, rollout) indices;
two runs over the same config replay the same cache keys.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import prompts, verify
from .backend import ChatMessage, ChatRequest, ChatResponse, RoleSpec

STRATEGIES = ("single", "rand", "sequential", "recursive")

Invoker = Callable[[str, ChatRequest], "tuple[str, ChatResponse]"]


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    truth: verify.GroundTruth | None = None
    source: str = "benchmark"

    def __post_init__(self) -> None:
        if self.source not in ("benchmark", "generated"):
            raise ValueError("source must be benchmark or generated")
        if self.source == "benchmark" and self.truth is None:
            raise ValueError(f"benchmark problem {self.id!r} lacks a ground-truth answer")
        if self.source == "generated" and self.truth is not None:
            raise ValueError("generated stones carry no ground truth")


@dataclass(frozen=True)
class StoneRecord:
    stone: Problem
    parent_id: str
    strategy: str
    position: int
    set_index: int
    prompt: str
    raw_completion: str
    cot: str
    parse_status: str
    transcript_key: str | None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.position < 1:
            raise ValueError("position is 1-based")
        if self.parse_status not in ("ok", "invalid"):
            raise ValueError("parse_status must be ok or invalid")
        if self.parse_status == "invalid" and self.stone.statement:
            raise ValueError("invalid stones must have an empty statement")
        if self.parse_status == "ok" and not self.stone.statement:
            raise ValueError("ok stones must have a statement")

    @property
    def stone_id(self) -> str:
        return self.stone.id


@dataclass(frozen=True)
class StoneSolution:
    stone_id: str
    text: str
    assumed_correct: bool = True

    def __post_init__(self) -> None:
        if self.assumed_correct is not True:
            raise ValueError("stone solutions are treated as correct by construction")


@dataclass(frozen=True)
class ContextPair:
    stone: Problem
    solution: StoneSolution


@dataclass(frozen=True)
class Attempt:
    target_id: str
    context: tuple[ContextPair, ...]
    final_solution: str
    reward: int
    transcript_refs: tuple[str, ...]
    method: str
    rollout_index: int
    set_index: int | None = None
    fallback: bool = False
    diagnostic: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "context", tuple(self.context))
        object.__setattr__(self, "transcript_refs", tuple(self.transcript_refs))
        if self.reward not in (0, 1):
            raise ValueError("reward must be 0 or 1")
        if self.method == "solver_only" and self.context:
            raise ValueError("solver-only attempts have empty context")
        if self.fallback and self.context:
            raise ValueError("fallback attempts have empty context")


@dataclass(frozen=True)
class StrategyConfig:
    generator: RoleSpec
    solver: RoleSpec
    strategy: str = "single"
    num_stones: int = 1
    num_sets: int = 20
    rollouts_per_set: int = 20
    parse_retry_budget: int = 2
    share_stone_solutions: bool = False
    thinking: prompts.ThinkingDelimiters = prompts.DEFAULT_DELIMITERS

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.num_stones < 1 or self.num_sets < 1 or self.rollouts_per_set < 1:
            raise ValueError("num_stones, num_sets, rollouts_per_set must be positive")
        if self.strategy in ("single", "rand") and self.num_stones != 1:
            raise ValueError(f"{self.strategy} strategy requires num_stones = 1")
        if self.parse_retry_budget < 0:
            raise ValueError("parse_retry_budget must be non-negative")


def role_record(role: RoleSpec) -> dict:
    return {
        "backend": role.backend,
        "model": role.model,
        "non_reasoning": role.non_reasoning,
        "params": {
            "temperature": role.params.temperature,
            "top_p": role.params.top_p,
            "max_tokens": role.params.max_tokens,
            "reasoning_effort": role.params.reasoning_effort,
        },
    }


def strategy_record(cfg: StrategyConfig) -> dict:
    return {
        "strategy": cfg.strategy,
        "num_stones": cfg.num_stones,
        "num_sets": cfg.num_sets,
        "rollouts_per_set": cfg.rollouts_per_set,
        "parse_retry_budget": cfg.parse_retry_budget,
        "share_stone_solutions": cfg.share_stone_solutions,
        "thinking": {
            "open_marker": cfg.thinking.open_marker,
            "close_marker": cfg.thinking.close_marker,
        },
        "generator": role_record(cfg.generator),
        "solver": role_record(cfg.solver),
    }


def load_benchmark(path: str | Path) -> list[Problem]:
    """Read a benchmark JSONL file with fields id, problem, answer."""
    problems: list[Problem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                pid = str(record["id"])
                statement = record["problem"]
                answer = str(record["answer"])
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad benchmark record: {exc}") from exc
            if pid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate problem id {pid!r}")
            seen.add(pid)
            try:
                truth = verify.GroundTruth.parse(answer)
            except verify.VerifyError as exc:
                raise ValueError(f"{path}:{lineno}: unusable answer {answer!r}: {exc}") from exc
            problems.append(Problem(id=pid, statement=statement, truth=truth))
    if not problems:
        raise ValueError(f"{path}: benchmark file is empty")
    return problems


def stone_id_for(parent_id: str, strategy: str, set_index: int, position: int) -> str:
    return f"{parent_id}.{strategy}.s{set_index:02d}.p{position}"


def _rand_base_seed(target_id: str, set_index: int) -> int:
    digest = hashlib.sha256(f"{target_id}|{set_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


class Pipeline:
    """Executes chains for one strategy config against an invoker."""

    def __init__(self, invoker: Invoker, cfg: StrategyConfig) -> None:
        self.invoker = invoker
        self.cfg = cfg

    # -- completion plumbing -------------------------------------------------

    def _complete(self, role: RoleSpec, prompt: str, seed: int) -> tuple[str, str, str]:
        """Issue one completion. Returns (cache key, visible text, thinking).

        Backends reporting thinking as a separate field bypass delimiter
        stripping; otherwise delimiter spans are removed from the content.
        """
        req = ChatRequest(
            model=role.model,
            messages=(ChatMessage("user", prompt),),
            params=role.params.with_seed(seed),
        )
        key, resp = self.invoker(role.backend, req)
        if resp.thinking is not None:
            return key, resp.content.strip(), resp.thinking
        cot, visible = prompts.split_thinking(resp.content, self.cfg.thinking)
        return key, visible, cot

    # -- solver-only ---------------------------------------------------------

    def solver_only_attempt(
        self, x: Problem, rollout_index: int, fallback: bool = False, method: str = "solver_only"
    ) -> Attempt:
        if x.truth is None:
            raise ValueError(f"problem {x.id!r} has no ground truth to score against")
        prompt = prompts.render("stone_solve", {"question": x.statement})
        key, visible, _cot = self._complete(self.cfg.solver, prompt, seed=rollout_index)
        reward, diagnostic = verify.judge(visible, x.truth)
        return Attempt(
            target_id=x.id,
            context=(),
            final_solution=visible,
            reward=reward,
            transcript_refs=(key,),
            method=method,
            rollout_index=rollout_index,
            set_index=None,
            fallback=fallback,
            diagnostic=diagnostic,
        )

    def run_solver_only(self, x: Problem, n: int) -> list[Attempt]:
        return [self.solver_only_attempt(x, r) for r in range(n)]

    def fallback_attempt(self, x: Problem, set_index: int, rollout_index: int) -> Attempt:
        """Solver-only attempt standing in for an unusable stone set.

        Uses the same prompt and seed as the plain solver-only rollout, so
        a fallback batch scores identically to the solver-only baseline.
        """
        attempt = self.solver_only_attempt(
            x, rollout_index, fallback=True, method=self.cfg.strategy
        )
        return Attempt(
            target_id=attempt.target_id,
            context=(),
            final_solution=attempt.final_solution,
            reward=attempt.reward,
            transcript_refs=attempt.transcript_refs,
            method=attempt.method,
            rollout_index=rollout_index,
            set_index=set_index,
            fallback=True,
            diagnostic=attempt.diagnostic,
        )

    def fallback_solver_only(self, x: Problem, set_index: int, n: int) -> list[Attempt]:
        return [self.fallback_attempt(x, set_index, r) for r in range(n)]

    # -- stone generation ----------------------------------------------------

    def _generate_one(
        self, x: Problem, set_index: int, position: int, prompt: str, base_seed: int
    ) -> StoneRecord:
        """One stone with parse retries. Retries re-sample the same prompt
        under fresh seeds; budget exhaustion yields parse_status=invalid."""
        budget = self.cfg.parse_retry_budget
        key = None
        visible = ""
        cot = ""
        statement: str | None = None
        for attempt in range(budget + 1):
            seed = base_seed * (budget + 1) + attempt
            key, visible, cot = self._complete(self.cfg.generator, prompt, seed=seed)
            try:
                statement = prompts.extract_stone(visible)
                break
            except prompts.PromptError:
                statement = None
        sid = stone_id_for(x.id, self.cfg.strategy, set_index, position)
        if statement is None:
            stone = Problem(id=sid, statement="", source="generated")
            status = "invalid"
        else:
            stone = Problem(id=sid, statement=statement, source="generated")
            status = "ok"
        return StoneRecord(
            stone=stone,
            parent_id=x.id,
            strategy=self.cfg.strategy,
            position=position,
            set_index=set_index,
            prompt=prompt,
            raw_completion=visible,
            cot=cot,
            parse_status=status,
            transcript_key=key,
        )

    def _skipped_stone(self, x: Problem, set_index: int, position: int) -> StoneRecord:
        """Placeholder for a position never generated because an earlier
        stone in the chain failed to parse."""
        sid = stone_id_for(x.id, self.cfg.strategy, set_index, position)
        return StoneRecord(
            stone=Problem(id=sid, statement="", source="generated"),
            parent_id=x.id,
            strategy=self.cfg.strategy,
            position=position,
            set_index=set_index,
            prompt="",
            raw_completion="",
            cot="",
            parse_status="invalid",
            transcript_key=None,
        )

    def generate_set(self, x: Problem, set_index: int) -> list[StoneRecord]:
        cfg = self.cfg
        k = cfg.num_stones
        records: list[StoneRecord] = []
        if cfg.strategy == "single":
            prompt = prompts.render("stone_gen", {"problem": x.statement})
            records.append(self._generate_one(x, set_index, 1, prompt, base_seed=set_index))
        elif cfg.strategy == "rand":
            prompt = prompts.render("rand_gen", {})
            base = _rand_base_seed(x.id, set_index)
            records.append(self._generate_one(x, set_index, 1, prompt, base_seed=base))
        elif cfg.strategy == "sequential":
            priors: list[str] = []
            for position in range(1, k + 1):
                if position == 1:
                    prompt = prompts.render("stone_gen", {"problem": x.statement})
                else:
                    prompt = prompts.render(
                        "sequential_stone_gen",
                        {"problem": x.statement, "prior_stones": list(priors)},
                    )
                base = set_index * k + (position - 1)
                record = self._generate_one(x, set_index, position, prompt, base_seed=base)
                records.append(record)
                if record.parse_status != "ok":
                    for skipped in range(position + 1, k + 1):
                        records.append(self._skipped_stone(x, set_index, skipped))
                    break
                priors.append(record.stone.statement)
        else:  # recursive
            parent = x.statement
            for position in range(1, k + 1):
                prompt = prompts.render("stone_gen", {"problem": parent})
                base = set_index * k + (position - 1)
                record = self._generate_one(x, set_index, position, prompt, base_seed=base)
                records.append(record)
                if record.parse_status != "ok":
                    for skipped in range(position + 1, k + 1):
                        records.append(self._skipped_stone(x, set_index, skipped))
                    break
                parent = record.stone.statement
        return records

    def generate_stones(self, x: Problem) -> list[list[StoneRecord]]:
        return [self.generate_set(x, s) for s in range(self.cfg.num_sets)]

    # -- stone-conditioned rollouts -------------------------------------------

    def _solve_stone(
        self, stone: Problem, seed: int, refs: list[str]
    ) -> StoneSolution:
        prompt = prompts.render("stone_solve", {"question": stone.statement})
        key, visible, _cot = self._complete(self.cfg.solver, prompt, seed=seed)
        refs.append(key)
        return StoneSolution(stone_id=stone.id, text=visible)

    def _solve_with_examples(
        self,
        question: str,
        examples: Sequence[tuple[str, str]],
        seed: int,
        refs: list[str],
    ) -> str:
        prompt = prompts.render("final_solve", {"question": question, "examples": list(examples)})
        key, visible, _cot = self._complete(self.cfg.solver, prompt, seed=seed)
        refs.append(key)
        return visible

    def arq_attempt(self, x: Problem, stones: Sequence[StoneRecord], rollout_index: int) -> Attempt:
        """One joint rollout: fresh stone solutions, then the conditioned
        final attempt. Recursive sets are solved in reverse order."""
        if x.truth is None:
            raise ValueError(f"problem {x.id!r} has no ground truth to score against")
        if not stones:
            raise ValueError("run_arq requires a non-empty stone set")
        if any(s.parse_status != "ok" for s in stones):
            raise ValueError("run_arq requires a fully parsed stone set; use fallback instead")
        cfg = self.cfg
        k = len(stones)
        refs: list[str] = []

        def stone_seed(position: int) -> int:
            if cfg.share_stone_solutions:
                return position - 1
            return rollout_index * k + (position - 1)

        if cfg.strategy == "recursive":
            solutions: dict[int, StoneSolution] = {}
            last = stones[-1]
            solutions[k] = self._solve_stone(last.stone, stone_seed(k), refs)
            for position in range(k - 1, 0, -1):
                successor = stones[position]  # position is 1-based; list is 0-based
                current = stones[position - 1]
                text = self._solve_with_examples(
                    current.stone.statement,
                    [(successor.stone.statement, solutions[position + 1].text)],
                    seed=stone_seed(position),
                    refs=refs,
                )
                solutions[position] = StoneSolution(stone_id=current.stone.id, text=text)
            context = (ContextPair(stones[0].stone, solutions[1]),)
        else:
            pairs: list[ContextPair] = []
            for record in stones:
                solution = self._solve_stone(record.stone, stone_seed(record.position), refs)
                pairs.append(ContextPair(record.stone, solution))
            context = tuple(pairs)

        final = self._solve_with_examples(
            x.statement,
            [(pair.stone.statement, pair.solution.text) for pair in context],
            seed=rollout_index,
            refs=refs,
        )
        reward, diagnostic = verify.judge(final, x.truth)
        return Attempt(
            target_id=x.id,
            context=context,
            final_solution=final,
            reward=reward,
            transcript_refs=refs,
            method=cfg.strategy,
            rollout_index=rollout_index,
            set_index=stones[0].set_index,
            fallback=False,
            diagnostic=diagnostic,
        )

    def run_arq(self, x: Problem, stones: Sequence[StoneRecord], n: int) -> list[Attempt]:
        return [self.arq_attempt(x, stones, r) for r in range(n)]

    def run_set(self, x: Problem, stones: Sequence[StoneRecord], n: int) -> list[Attempt]:
        """Rollouts for one stone set, degrading the whole set to tagged
        solver-only attempts when any stone failed to parse."""
        if any(s.parse_status != "ok" for s in stones) or not stones:
            set_index = stones[0].set_index if stones else 0
            return self.fallback_solver_only(x, set_index, n)
        return self.run_arq(x, stones, n)


def attempt_record(a: Attempt) -> dict:
    return {
        "target_id": a.target_id,
        "method": a.method,
        "set": a.set_index,
        "rollout": a.rollout_index,
        "reward": a.reward,
        "fallback": a.fallback,
        "final_solution": a.final_solution,
        "diagnostic": a.diagnostic,
        "transcript_refs": list(a.transcript_refs),
        "context": [
            {
                "stone_id": pair.stone.id,
                "statement": pair.stone.statement,
                "solution": pair.solution.text,
            }
            for pair in a.context
        ],
    }


def stone_record_dict(record: StoneRecord) -> dict:
    return {
        "stone_id": record.stone.id,
        "parent_id": record.parent_id,
        "strategy": record.strategy,
        "position": record.position,
        "set": record.set_index,
        "statement": record.stone.statement,
        "prompt": record.prompt,
        "raw_completion": record.raw_completion,
        "cot": record.cot,
        "parse_status": record.parse_status,
        "transcript_key": record.transcript_key,
    }


def stone_record_from_dict(data: dict) -> StoneRecord:
    return StoneRecord(
        stone=Problem(id=data["stone_id"], statement=data["statement"], source="generated"),
        parent_id=data["parent_id"],
        strategy=data["strategy"],
        position=data["position"],
        set_index=data["set"],
        prompt=data["prompt"],
        raw_completion=data["raw_completion"],
        cot=data["cot"],
        parse_status=data["parse_status"],
        transcript_key=data["transcript_key"],
    )


__all__ = [
    "STRATEGIES",
    "Invoker",
    "Problem",
    "StoneRecord",
    "StoneSolution",
    "ContextPair",
    "Attempt",
    "StrategyConfig",
    "Pipeline",
    "role_record",
    "strategy_record",
    "load_benchmark",
    "stone_id_for",
    "attempt_record",
    "stone_record_dict",
    "stone_record_from_dict",
]
