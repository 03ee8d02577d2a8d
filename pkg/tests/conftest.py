"""Shared fixtures: tiny benchmarks, scripted backends, and quick configs."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from arq.backend import ChatRequest, MockBackend, RoleSpec, SamplingParams, request_record
from arq.pipeline import Problem, StoneRecord, StrategyConfig, stone_id_for
from arq.store import cache_key
from arq.verify import GroundTruth

SNAPSHOT_DIR = Path(__file__).parent / "snapshots"


def make_problem(pid: str = "p1", statement: str = "What is 2+2?", answer: str = "4") -> Problem:
    return Problem(id=pid, statement=statement, truth=GroundTruth.parse(answer))


def make_stone(
    parent: str = "q1",
    statement: str = "Compute 1+1.",
    set_index: int = 0,
    strategy: str = "single",
    position: int = 1,
    parse_status: str = "ok",
    prompt: str = "",
    cot: str = "",
) -> StoneRecord:
    sid = stone_id_for(parent, strategy, set_index, position)
    return StoneRecord(
        stone=Problem(
            id=sid,
            statement=statement if parse_status == "ok" else "",
            source="generated",
        ),
        parent_id=parent,
        strategy=strategy,
        position=position,
        set_index=set_index,
        prompt=prompt,
        raw_completion="",
        cot=cot,
        parse_status=parse_status,
        transcript_key=None,
    )


def boxed(answer: str, prefix: str = "The answer is") -> str:
    return f"{prefix} \\boxed{{{answer}}}."


def yaml_stone(text: str, key: str = "problem", preamble: str = "Here is one.") -> str:
    indented = "\n".join(f"  {line}" for line in text.splitlines())
    return f"{preamble}\n```yaml\n{key}: |\n{indented}\n```"


def make_roles(
    backend: str = "mock", gen_model: str = "gen-m", solver_model: str = "solver-m"
) -> tuple[RoleSpec, RoleSpec]:
    return (
        RoleSpec(backend=backend, model=gen_model),
        RoleSpec(backend=backend, model=solver_model),
    )


def make_strategy(**overrides) -> StrategyConfig:
    generator, solver = make_roles()
    defaults = dict(
        generator=generator,
        solver=solver,
        strategy="single",
        num_stones=1,
        num_sets=2,
        rollouts_per_set=4,
        parse_retry_budget=1,
    )
    defaults.update(overrides)
    return StrategyConfig(**defaults)


class DirectInvoker:
    """Invoker without caching; computes real cache keys and keeps a
    transcript of every call for shape assertions."""

    def __init__(self, backends: "dict[str, MockBackend] | MockBackend") -> None:
        if isinstance(backends, MockBackend):
            backends = {"mock": backends}
        self.backends = backends
        self.calls: list[tuple[str, ChatRequest]] = []

    def __call__(self, backend_name: str, req: ChatRequest):
        self.calls.append((backend_name, req))
        resp = self.backends[backend_name].complete(req)
        return cache_key(request_record(backend_name, req)), resp


@pytest.fixture
def benchmark_path(tmp_path: Path) -> Path:
    path = tmp_path / "bench.jsonl"
    rows = [
        {"id": "q1", "problem": "What is 2+2?", "answer": "4"},
        {"id": "q2", "problem": "What is 3*3?", "answer": "9"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path


def config_dict(tmp_path: Path, dataset: Path, **strategy_overrides) -> dict:
    strategy = {"strategy": "single", "num_sets": 4, "rollouts_per_set": 4}
    strategy.update(strategy_overrides)
    return {
        "dataset": str(dataset),
        "run_root": str(tmp_path / "root"),
        "workers": 2,
        "backends": {"sim": {"max_concurrency": 8}},
        "roles": {
            "generator": {"backend": "sim", "model": "gen-model"},
            "solver": {"backend": "sim", "model": "solver-model"},
            "target_solver": {"backend": "sim", "model": "target-model"},
        },
        "strategy": strategy,
    }


def write_config(tmp_path: Path, dataset: Path, **strategy_overrides) -> Path:
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps(config_dict(tmp_path, dataset, **strategy_overrides), indent=2),
        encoding="utf-8",
    )
    return path


def solver_request(prompt: str, model: str = "solver-m", seed: int = 0) -> ChatRequest:
    from arq.backend import ChatMessage

    return ChatRequest(
        model=model,
        messages=(ChatMessage("user", prompt),),
        params=SamplingParams(seed_index=seed),
    )
