"""Persistence layer: completion cache, run log semantics, and report output."""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest

from arq.backend import (
    BackendConfig,
    ChatResponse,
    MockBackend,
    request_record,
)
from arq.store import (
    CacheCorruption,
    CachedInvoker,
    CompletionCache,
    ConcurrentRun,
    IncompleteRun,
    RefusedMismatch,
    RunStore,
    StoreError,
    cache_key,
    canonical_json,
    cell_id,
    emit_report,
    write_csv,
)

from conftest import solver_request

MANIFEST = {"config": {"strategy": {"name": "single", "num_rollouts": 4}}, "dataset": "d.jsonl"}


def open_store(tmp_path: Path, manifest: dict = MANIFEST, run_id: str = "r1") -> RunStore:
    return RunStore.open(tmp_path, run_id, manifest)


# -- canonical encoding ---------------------------------------------------------------

def test_canonical_json_is_order_insensitive_and_compact():
    a = canonical_json({"b": 1, "a": [2, {"z": 3, "y": 4}]})
    b = canonical_json({"a": [2, {"y": 4, "z": 3}], "b": 1})
    assert a == b
    assert " " not in a
    assert canonical_json({"s": "héllo"}) == '{"s":"héllo"}'


def test_cache_key_tracks_record_content():
    rec = request_record("api", solver_request("p", seed=0))
    same = dict(reversed(list(rec.items())))
    other = request_record("api", solver_request("p", seed=1))
    assert cache_key(rec) == cache_key(same)
    assert cache_key(rec) != cache_key(other)
    assert len(cache_key(rec)) == 64


# -- completion cache -----------------------------------------------------------------

def entry_for(seed: int = 0) -> tuple[str, dict]:
    rec = request_record("api", solver_request("prompt", seed=seed))
    return cache_key(rec), rec


def test_cache_invokes_producer_once_per_key(tmp_path):
    cache = CompletionCache(tmp_path)
    key, rec = entry_for()
    calls = []

    def produce():
        calls.append(1)
        return ChatResponse(content="made", backend_id="api")

    first = cache.get_or_invoke(key, rec, produce)
    second = cache.get_or_invoke(key, rec, produce)
    assert first == second
    assert first.content == "made"
    assert calls == [1]
    assert cache.contains(key)


def test_cache_survives_reopen(tmp_path):
    key, rec = entry_for()
    CompletionCache(tmp_path).get_or_invoke(
        key, rec, lambda: ChatResponse(content="persisted", backend_id="api")
    )
    reopened = CompletionCache(tmp_path)
    hit = reopened.get_or_invoke(key, rec, lambda: pytest.fail("producer must not run"))
    assert hit.content == "persisted"


def test_cache_rejects_conflicting_request_for_same_key(tmp_path):
    cache = CompletionCache(tmp_path)
    key, rec = entry_for()
    cache.get_or_invoke(key, rec, lambda: ChatResponse(content="x", backend_id="api"))
    _, other = entry_for(seed=1)
    with pytest.raises(CacheCorruption):
        cache.get_or_invoke(key, other, lambda: ChatResponse(content="y", backend_id="api"))


def test_cache_rejects_unreadable_entry(tmp_path):
    cache = CompletionCache(tmp_path)
    key, rec = entry_for()
    (tmp_path / f"{key}.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(CacheCorruption):
        cache.get_or_invoke(key, rec, lambda: ChatResponse(content="x", backend_id="api"))


def test_producer_failure_is_not_cached(tmp_path):
    cache = CompletionCache(tmp_path)
    key, rec = entry_for()

    def boom():
        raise RuntimeError("producer failed")

    with pytest.raises(RuntimeError):
        cache.get_or_invoke(key, rec, boom)
    assert not cache.contains(key)
    ok = cache.get_or_invoke(key, rec, lambda: ChatResponse(content="ok", backend_id="api"))
    assert ok.content == "ok"


def test_single_flight_under_contention(tmp_path):
    cache = CompletionCache(tmp_path)
    key, rec = entry_for()
    started = threading.Barrier(8)
    produced = []

    def produce():
        produced.append(1)
        return ChatResponse(content="shared", backend_id="api")

    def worker():
        started.wait()
        return cache.get_or_invoke(key, rec, produce)

    with ThreadPoolExecutor(8) as pool:
        results = [f.result() for f in [pool.submit(worker) for _ in range(8)]]
    assert len(produced) == 1
    assert all(r.content == "shared" for r in results)


def test_single_flight_propagates_producer_error_to_waiters(tmp_path):
    cache = CompletionCache(tmp_path)
    key, rec = entry_for()
    gate = threading.Event()

    def produce():
        gate.wait(timeout=5)
        raise RuntimeError("shared failure")

    with ThreadPoolExecutor(4) as pool:
        futures = [pool.submit(cache.get_or_invoke, key, rec, produce) for _ in range(4)]
        gate.set()
        errors = [f.exception() for f in futures]
    assert all(isinstance(e, RuntimeError) for e in errors)
    assert not cache.contains(key)


def test_cached_invoker_routes_and_caches(tmp_path):
    backend = MockBackend(default="answer", config=BackendConfig(backend_id="mock-b"))
    invoker = CachedInvoker(CompletionCache(tmp_path), {"local": backend})
    req = solver_request("question", seed=0)
    key, resp = invoker("local", req)
    assert key == cache_key(request_record("mock-b", req))
    assert resp.content == "answer"
    again_key, again = invoker("local", req)
    assert (again_key, again.content) == (key, "answer")
    assert backend.stats.invocations == 1
    with pytest.raises(StoreError):
        invoker("missing", req)


# -- run store -------------------------------------------------------------------------

def test_open_creates_layout_and_manifest(tmp_path):
    with open_store(tmp_path) as store:
        assert store.run_dir == tmp_path / "runs" / "r1"
        assert store.datasets_dir.is_dir()
        assert store.reports_dir.is_dir()
        stored = json.loads(store.manifest_path.read_text(encoding="utf-8"))
        assert stored == MANIFEST


def test_reopen_accepts_identical_manifest(tmp_path):
    open_store(tmp_path).close()
    with open_store(tmp_path, json.loads(json.dumps(MANIFEST))) as store:
        assert store.manifest == MANIFEST


def test_reopen_refuses_changed_manifest_with_dotted_path(tmp_path):
    open_store(tmp_path).close()
    changed = json.loads(json.dumps(MANIFEST))
    changed["config"]["strategy"]["num_rollouts"] = 8
    with pytest.raises(RefusedMismatch) as err:
        open_store(tmp_path, changed)
    assert any("config.strategy.num_rollouts" in d for d in err.value.diffs)


def test_reopen_reports_missing_keys_in_both_directions(tmp_path):
    open_store(tmp_path).close()
    smaller = json.loads(json.dumps(MANIFEST))
    del smaller["dataset"]
    smaller["extra"] = True
    with pytest.raises(RefusedMismatch) as err:
        open_store(tmp_path, smaller)
    diffs = "\n".join(err.value.diffs)
    assert "dataset: missing from current config" in diffs
    assert "extra: missing from manifest" in diffs


def test_second_open_of_live_run_is_refused(tmp_path):
    with open_store(tmp_path):
        with pytest.raises(ConcurrentRun):
            open_store(tmp_path)
    # released on close
    open_store(tmp_path).close()


def test_record_and_completed_round_trip_with_later_lines_winning(tmp_path):
    with open_store(tmp_path) as store:
        store.record(["solve", "q1", 0], {"attempt": {"reward": 0}})
        store.record(["gen", "q1", 1], {"stones": []})
        store.record(["solve", "q1", 0], {"attempt": {"reward": 1}})
        done = store.completed()
    assert done[cell_id(["solve", "q1", 0])] == {"attempt": {"reward": 1}}
    assert done[cell_id(["gen", "q1", 1])] == {"stones": []}
    assert len(done) == 2


def test_torn_final_line_is_ignored(tmp_path):
    store = open_store(tmp_path)
    store.record(["solve", "q1", 0], {"attempt": {"reward": 1}})
    store.close()
    with open(store.cells_path, "a", encoding="utf-8") as fh:
        fh.write('{"cell": ["solve", "q1", 1], "payl')
    reopened = open_store(tmp_path)
    done = reopened.completed()
    reopened.close()
    assert list(done) == [cell_id(["solve", "q1", 0])]


def test_reopen_truncates_torn_tail_before_appending(tmp_path):
    store = open_store(tmp_path)
    store.record(["solve", "q1", 0], {"attempt": {"reward": 1}})
    store.close()
    with open(store.cells_path, "a", encoding="utf-8") as fh:
        fh.write('{"cell": ["solve", "q1", 1], "payl')
    reopened = open_store(tmp_path)
    reopened.record(["solve", "q1", 2], {"attempt": {"reward": 0}})
    done = reopened.completed()
    reopened.close()
    assert sorted(done) == sorted(
        [cell_id(["solve", "q1", 0]), cell_id(["solve", "q1", 2])]
    )


def test_reopen_terminates_unterminated_valid_tail(tmp_path):
    store = open_store(tmp_path)
    store.record(["solve", "q1", 0], {"attempt": {"reward": 1}})
    store.close()
    text = store.cells_path.read_text(encoding="utf-8")
    store.cells_path.write_text(text.rstrip("\n"), encoding="utf-8")
    reopened = open_store(tmp_path)
    reopened.record(["solve", "q1", 1], {"attempt": {"reward": 0}})
    done = reopened.completed()
    reopened.close()
    assert sorted(done) == sorted(
        [cell_id(["solve", "q1", 0]), cell_id(["solve", "q1", 1])]
    )


def test_corrupt_interior_line_is_an_error(tmp_path):
    store = open_store(tmp_path)
    store.record(["solve", "q1", 0], {"attempt": {"reward": 1}})
    store.close()
    lines = store.cells_path.read_text(encoding="utf-8")
    store.cells_path.write_text("garbage\n" + lines, encoding="utf-8")
    reopened = open_store(tmp_path)
    with pytest.raises(StoreError):
        reopened.completed()
    reopened.close()


def test_record_after_close_raises(tmp_path):
    store = open_store(tmp_path)
    store.close()
    with pytest.raises(StoreError):
        store.record(["solve", "q1", 0], {})


def test_pending_filters_completed_cells(tmp_path):
    with open_store(tmp_path) as store:
        plan = [["solve", "q1", 0], ["solve", "q1", 1], ["gen", "q1", 0]]
        store.record(["solve", "q1", 1], {"attempt": {"reward": 0}})
        assert store.pending(plan) == [["solve", "q1", 0], ["gen", "q1", 0]]


# -- reports ---------------------------------------------------------------------------

def attempt_payload(method: str, target: str, reward: int, fallback: bool = False) -> dict:
    return {
        "attempt": {
            "target_id": target,
            "method": method,
            "reward": reward,
            "fallback": fallback,
        }
    }


def score_payload(pid: str) -> dict:
    rows = [
        {
            "stone_id": f"{pid}.single.s00.p1",
            "position": 1,
            "selection_mean": "1/2",
            "report_mean": "3/4",
            "full_mean": "5/8",
            "fallback": False,
            "chosen": True,
        },
        {
            "stone_id": f"{pid}.single.s01.p1",
            "position": 2,
            "selection_mean": "1/4",
            "report_mean": "1/4",
            "full_mean": "1/4",
            "fallback": False,
            "chosen": False,
        },
    ]
    return {"scores": rows, "selection": {"target_id": pid}}


def seed_run(store: RunStore) -> list[list]:
    cells: list[list] = []

    def put(cell: list, payload: dict) -> None:
        cells.append(cell)
        store.record(cell, payload)

    for r in range(2):
        put(["solve", "q1", r], attempt_payload("solver_only", "q1", r % 2))
        put(["arq", "q1", 0, r], attempt_payload("single", "q1", 1))
        put(["tsolve", "q1", r], attempt_payload("target_solver_only", "q1", 0))
        put(["tarq", "q1", 0, r], attempt_payload("target_single", "q1", 1, fallback=r == 1))
    put(["score", "q1"], score_payload("q1"))
    put(
        ["transfer", "q1"],
        {
            "stone_id": "q1.single.s00.p1",
            "transfer_mean": "1",
            "target_solver_only": "0",
            "target_self_selected": "1/2",
        },
    )
    return cells


def test_emit_report_requires_all_planned_cells(tmp_path):
    with open_store(tmp_path) as store:
        planned = seed_run(store) + [["score", "q2"]]
        with pytest.raises(IncompleteRun) as err:
            emit_report(store, planned, render_figures=False)
        assert err.value.missing == [cell_id(["score", "q2"])]


def test_emit_report_writes_expected_tables(tmp_path):
    with open_store(tmp_path) as store:
        planned = seed_run(store)
        written = emit_report(store, planned, render_figures=False)
    names = {p.name for p in written}
    assert names == {"scores.csv", "per_problem.csv", "summary.csv", "transfer.csv", "stones.txt"}
    by_name = {p.name: p for p in written}

    scores = by_name["scores.csv"].read_text(encoding="utf-8").splitlines()
    assert scores[0] == "problem_id,stone_id,position,selection_mean,report_mean,full_mean,chosen"
    assert scores[1] == "q1,q1.single.s00.p1,1,0.500000,0.750000,0.625000,true"
    assert scores[2] == "q1,q1.single.s01.p1,2,0.250000,0.250000,0.250000,false"

    summary = by_name["summary.csv"].read_text(encoding="utf-8").splitlines()
    assert summary[0] == "method,dataset,mean,rollouts,fallback_fraction"
    rows = {line.split(",")[0]: line.split(",") for line in summary[1:]}
    assert set(rows) == {"solver_only", "single", "target_solver_only", "target_single"}
    assert rows["single"][2] == "1.000000"
    assert rows["solver_only"][2] == "0.500000"
    assert rows["target_single"][4] == "0.500000"  # one of two rollouts fell back
    assert all(r[1] == "d.jsonl" for r in rows.values())

    per_problem = by_name["per_problem.csv"].read_text(encoding="utf-8").splitlines()
    assert "single,q1,1.000000,2,0.000000" in per_problem

    transfer = by_name["transfer.csv"].read_text(encoding="utf-8").splitlines()
    assert transfer[1] == "q1,q1.single.s00.p1,1.000000,0.000000,0.500000"

    stones = by_name["stones.txt"].read_text(encoding="utf-8")
    assert "problem q1" in stones
    assert "  1  0.625000  *" in stones.replace("       ", " ")


def test_emit_report_is_insertion_order_invariant(tmp_path):
    def render(run_id: str, shuffle: bool) -> dict[str, bytes]:
        with open_store(tmp_path, run_id=run_id) as store:
            cells = seed_run(store)
            if shuffle:
                # re-record everything in reverse; later lines win with equal payloads
                done = store.completed()
                for cell in reversed(cells):
                    store.record(cell, done[cell_id(cell)])
            written = emit_report(store, cells, render_figures=False)
            return {p.name: p.read_bytes() for p in written}

    assert render("a", shuffle=False) == render("b", shuffle=True)


def test_emit_report_renders_figure_files(tmp_path):
    with open_store(tmp_path) as store:
        planned = seed_run(store)
        written = emit_report(store, planned, render_figures=True)
    figures = [p for p in written if p.suffix == ".png"]
    assert figures
    for fig in figures:
        assert fig.parent.name == "figures"
        assert fig.stat().st_size > 0
        assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_write_csv_uses_unix_line_endings(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ("a", "b"), [(1, "x"), (2, "y")])
    assert path.read_bytes() == b"a,b\n1,x\n2,y\n"
