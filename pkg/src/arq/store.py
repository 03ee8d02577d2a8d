"""Run persistence: content-addressed completion cache, append-only run log,
resume planning, and report emission.

Layout under a run root:
    cache/<sha256>.json          one completion per file, immutable
    runs/<run_id>/manifest.json  config snapshot + digests, written once
    runs/<run_id>/cells.jsonl    append-only log, one completed cell per line
    runs/<run_id>/datasets/      exported training data
    runs/<run_id>/reports/       CSV, plain-text tables, figures

A cell is the unit of resumption: a JSON array like ["solve", problem_id,
rollout] or ["arq", problem_id, set, rollout]. Its payload line is appended
only after the cell's work is fully persisted, so an interrupted run re-runs
at most the in-flight cells, and the completion cache makes that re-run
cheap. Payload means are serialized as exact fraction strings ("7/10").
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import os
import threading
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .backend import Backend, ChatRequest, ChatResponse, request_record, response_from_record, response_record


class StoreError(Exception):
    """Base class for persistence failures."""


class CacheCorruption(StoreError):
    """A cache entry's stored request does not match the requested key."""


class RefusedMismatch(StoreError):
    """Resume refused: current config differs from the run manifest."""

    def __init__(self, diffs: Sequence[str]) -> None:
        super().__init__("config does not match run manifest: " + "; ".join(diffs))
        self.diffs = list(diffs)


class IncompleteRun(StoreError):
    """Report requested but planned cells are missing."""

    def __init__(self, missing: Sequence[str]) -> None:
        preview = ", ".join(missing[:5])
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        super().__init__(f"{len(missing)} cells missing: {preview}{more}")
        self.missing = list(missing)


class ConcurrentRun(StoreError):
    """The run directory is already locked by another process."""


def canonical_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def cache_key(record: Mapping) -> str:
    return hashlib.sha256(canonical_json(record).encode("utf-8")).hexdigest()


class _Flight:
    def __init__(self) -> None:
        self.event = threading.Event()
        self.result: ChatResponse | None = None
        self.error: BaseException | None = None


class CompletionCache:
    """Disk cache keyed by request digest, single-flight per key.

    Entries are immutable: an existing entry is never overwritten, and a
    stored request that differs from the incoming one for the same digest
    aborts with CacheCorruption.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._inflight: dict[str, _Flight] = {}

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def _load(self, key: str, record: Mapping) -> ChatResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            stored_request = entry["request"]
            response = entry["response"]
        except (ValueError, KeyError) as exc:
            raise CacheCorruption(f"unreadable cache entry {key}: {exc}") from exc
        if stored_request != record:
            raise CacheCorruption(f"cache entry {key} stores a different request")
        return response_from_record(response)

    def _write(self, key: str, record: Mapping, resp: ChatResponse) -> None:
        path = self._path(key)
        if path.exists():
            return
        tmp = path.with_name(f".{key}.tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(
            json.dumps(
                {"key": key, "request": dict(record), "response": response_record(resp)},
                ensure_ascii=False,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        os.replace(tmp, path)

    def contains(self, key: str) -> bool:
        return self._path(key).exists()

    def get_or_invoke(
        self, key: str, record: Mapping, producer: Callable[[], ChatResponse]
    ) -> ChatResponse:
        """Return the cached response, invoking producer at most once per key
        across concurrent callers. Producer failures are surfaced to every
        waiter and nothing is cached."""
        cached = self._load(key, record)
        if cached is not None:
            return cached
        with self._lock:
            flight = self._inflight.get(key)
            owner = flight is None
            if owner:
                flight = _Flight()
                self._inflight[key] = flight
        assert flight is not None
        if not owner:
            flight.event.wait()
            if flight.error is not None:
                raise flight.error
            assert flight.result is not None
            return flight.result
        try:
            cached = self._load(key, record)
            if cached is None:
                cached = producer()
                self._write(key, record, cached)
            flight.result = cached
            return cached
        except BaseException as exc:
            flight.error = exc
            raise
        finally:
            flight.event.set()
            with self._lock:
                del self._inflight[key]


class CachedInvoker:
    """Routes completions through named backends and the shared cache.

    Calling with (backend_name, request) returns (cache_key, response); the
    key doubles as the transcript reference persisted with attempts.
    """

    def __init__(self, cache: CompletionCache, backends: Mapping[str, Backend]) -> None:
        self._cache = cache
        self._backends = dict(backends)

    def __call__(self, backend_name: str, req: ChatRequest) -> tuple[str, ChatResponse]:
        try:
            backend = self._backends[backend_name]
        except KeyError:
            raise StoreError(f"no backend named {backend_name!r} is configured") from None
        record = request_record(backend.backend_id, req)
        key = cache_key(record)
        resp = self._cache.get_or_invoke(key, record, lambda: backend.complete(req))
        return key, resp


def cell_id(cell: Sequence) -> str:
    return canonical_json(list(cell))


def _diff_trees(a: object, b: object, path: str, out: list[str]) -> None:
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            sub = f"{path}.{k}" if path else str(k)
            if k not in a:
                out.append(f"{sub}: missing from manifest")
            elif k not in b:
                out.append(f"{sub}: missing from current config")
            else:
                _diff_trees(a[k], b[k], sub, out)
    elif a != b:
        out.append(f"{path}: {a!r} != {b!r}")


class RunStore:
    """One run directory: manifest, append-only cell log, advisory lock."""

    def __init__(self, root: str | Path, run_id: str) -> None:
        self.root = Path(root)
        self.run_id = run_id
        self.run_dir = self.root / "runs" / run_id
        self.manifest_path = self.run_dir / "manifest.json"
        self.cells_path = self.run_dir / "cells.jsonl"
        self.datasets_dir = self.run_dir / "datasets"
        self.reports_dir = self.run_dir / "reports"
        self._write_lock = threading.Lock()
        self._lock_file = None
        self._log = None
        self.manifest: dict = {}

    @staticmethod
    def open(root: str | Path, run_id: str, manifest: Mapping) -> "RunStore":
        """Create the run directory on first use; on later use verify the
        given manifest matches the stored one, else RefusedMismatch."""
        store = RunStore(root, run_id)
        store.run_dir.mkdir(parents=True, exist_ok=True)
        store._acquire_lock()
        try:
            if store.manifest_path.exists():
                stored = json.loads(store.manifest_path.read_text(encoding="utf-8"))
                diffs: list[str] = []
                _diff_trees(stored, dict(manifest), "", diffs)
                if diffs:
                    raise RefusedMismatch(diffs)
                store.manifest = stored
            else:
                store.manifest = dict(manifest)
                tmp = store.manifest_path.with_suffix(".tmp")
                tmp.write_text(
                    json.dumps(store.manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8",
                )
                os.replace(tmp, store.manifest_path)
            store.datasets_dir.mkdir(exist_ok=True)
            store.reports_dir.mkdir(exist_ok=True)
            store._repair_tail()
            store._log = open(store.cells_path, "a", encoding="utf-8")
            return store
        except BaseException:
            store.close()
            raise

    def _repair_tail(self) -> None:
        """Make the log safe to append to after a crash mid-append. A torn
        unparseable final line is truncated away; a parseable final line
        that merely lost its newline gets one, so the next append cannot
        fuse with it. Interior damage is left for completed() to report."""
        if not self.cells_path.exists():
            return
        data = self.cells_path.read_bytes()
        body, sep, tail = data.rpartition(b"\n")
        if not tail.strip():
            return
        try:
            json.loads(tail.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            with open(self.cells_path, "r+b") as fh:
                fh.truncate(len(body) + len(sep))
        else:
            with open(self.cells_path, "ab") as fh:
                fh.write(b"\n")

    def _acquire_lock(self) -> None:
        self._lock_file = open(self.run_dir / ".lock", "a")
        try:
            fcntl.flock(self._lock_file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self._lock_file.close()
            self._lock_file = None
            raise ConcurrentRun(f"run {self.run_id!r} is locked by another process") from None

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None
        if self._lock_file is not None:
            fcntl.flock(self._lock_file.fileno(), fcntl.LOCK_UN)
            self._lock_file.close()
            self._lock_file = None

    def __enter__(self) -> "RunStore":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def record(self, cell: Sequence, payload: Mapping) -> None:
        """Append a completed cell. Call only after the cell's side effects
        (cache writes) are durable; the append is what marks it done."""
        if self._log is None:
            raise StoreError("run store is closed")
        line = canonical_json({"cell": list(cell), "payload": payload})
        with self._write_lock:
            self._log.write(line + "\n")
            self._log.flush()

    def completed(self) -> dict[str, dict]:
        """All completed cells, keyed by cell id; later lines win. A torn
        final line (crash mid-append) is ignored."""
        out: dict[str, dict] = {}
        if not self.cells_path.exists():
            return out
        with open(self.cells_path, encoding="utf-8") as fh:
            lines = fh.readlines()
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except ValueError:
                if i == len(lines) - 1:
                    continue
                raise StoreError(f"corrupt cell log line {i + 1} in {self.cells_path}")
            out[cell_id(entry["cell"])] = entry["payload"]
        return out

    def pending(self, planned: Iterable[Sequence]) -> list[list]:
        done = self.completed()
        return [list(c) for c in planned if cell_id(c) not in done]


def _fraction(value: object) -> Fraction:
    if isinstance(value, str):
        return Fraction(value)
    if isinstance(value, int):
        return Fraction(value)
    raise StoreError(f"expected an exact fraction string, got {value!r}")


def _fmt(value: object) -> str:
    return f"{float(_fraction(value)):.6f}"


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def emit_report(
    store: RunStore, planned: Sequence[Sequence], render_figures: bool = True
) -> list[Path]:
    """Write scores.csv, per_problem.csv, summary.csv, stones.txt, and
    figure files from the run log. Raises IncompleteRun when any planned
    cell has no payload. Output is a pure function of the log contents
    (rows are sorted, no timestamps), so a resumed run reports byte-
    identically to an uninterrupted one."""
    done = store.completed()
    missing = [cell_id(c) for c in planned if cell_id(c) not in done]
    if missing:
        raise IncompleteRun(missing)

    dataset = store.manifest.get("dataset", "")
    if isinstance(dataset, dict):
        dataset = dataset.get("path", "")
    score_rows: list[tuple] = []
    stone_lines: list[str] = []
    # method -> problem -> [reward fractions per rollout], fallback flags
    attempts: dict[str, dict[str, list[int]]] = {}
    fallbacks: dict[str, dict[str, list[bool]]] = {}

    def _note_attempt(method: str, pid: str, reward: int, fallback: bool) -> None:
        attempts.setdefault(method, {}).setdefault(pid, []).append(reward)
        fallbacks.setdefault(method, {}).setdefault(pid, []).append(fallback)

    for key in sorted(done):
        cell = json.loads(key)
        payload = done[key]
        if cell[0] in ("solve", "arq", "tsolve", "tarq"):
            a = payload["attempt"]
            _note_attempt(a["method"], a["target_id"], int(a["reward"]), bool(a.get("fallback")))

    for key in sorted(done):
        cell = json.loads(key)
        payload = done[key]
        if cell[0] != "score":
            continue
        pid = cell[1]
        stone_lines.append(f"problem {pid}")
        stone_lines.append("  position  full_mean  chosen")
        for row in payload["scores"]:
            score_rows.append(
                (
                    pid,
                    row["stone_id"],
                    row["position"],
                    _fmt(row["selection_mean"]),
                    _fmt(row["report_mean"]),
                    _fmt(row["full_mean"]),
                    str(bool(row["chosen"])).lower(),
                )
            )
            mark = "*" if row["chosen"] else ""
            stone_lines.append(f"  {row['position']:>8}  {_fmt(row['full_mean'])}  {mark}")
        stone_lines.append("")

    per_problem_rows: list[tuple] = []
    summary_rows: list[tuple] = []
    for method in sorted(attempts):
        total_rewards: list[int] = []
        total_fallback: list[bool] = []
        problem_means: list[Fraction] = []
        for pid in sorted(attempts[method]):
            rewards = attempts[method][pid]
            flags = fallbacks[method][pid]
            mean = Fraction(sum(rewards), len(rewards))
            frac_fb = Fraction(sum(flags), len(flags))
            problem_means.append(mean)
            total_rewards.extend(rewards)
            total_fallback.extend(flags)
            per_problem_rows.append(
                (method, pid, f"{float(mean):.6f}", len(rewards), f"{float(frac_fb):.6f}")
            )
        dataset_mean = sum(problem_means, Fraction(0)) / len(problem_means)
        fb_frac = Fraction(sum(total_fallback), len(total_fallback))
        summary_rows.append(
            (
                method,
                dataset,
                f"{float(dataset_mean):.6f}",
                len(total_rewards),
                f"{float(fb_frac):.6f}",
            )
        )

    transfer_rows: list[tuple] = []
    for key in sorted(done):
        cell = json.loads(key)
        if cell[0] != "transfer":
            continue
        payload = done[key]
        transfer_rows.append(
            (
                cell[1],
                payload["stone_id"],
                _fmt(payload["transfer_mean"]),
                _fmt(payload["target_solver_only"]),
                _fmt(payload["target_self_selected"]),
            )
        )

    out = store.reports_dir
    written: list[Path] = []
    scores_csv = out / "scores.csv"
    write_csv(
        scores_csv,
        ("problem_id", "stone_id", "position", "selection_mean", "report_mean", "full_mean", "chosen"),
        score_rows,
    )
    written.append(scores_csv)
    per_problem_csv = out / "per_problem.csv"
    write_csv(
        per_problem_csv,
        ("method", "problem_id", "mean", "rollouts", "fallback_fraction"),
        per_problem_rows,
    )
    written.append(per_problem_csv)
    summary_csv = out / "summary.csv"
    write_csv(
        summary_csv, ("method", "dataset", "mean", "rollouts", "fallback_fraction"), summary_rows
    )
    written.append(summary_csv)
    if transfer_rows:
        transfer_csv = out / "transfer.csv"
        write_csv(
            transfer_csv,
            ("problem_id", "stone_id", "transfer_mean", "target_solver_only", "target_self_selected"),
            transfer_rows,
        )
        written.append(transfer_csv)
    stones_txt = out / "stones.txt"
    stones_txt.write_text(
        "\n".join(stone_lines) + ("\n" if stone_lines else ""), encoding="utf-8"
    )
    written.append(stones_txt)

    if render_figures:
        from . import figures

        written.extend(
            figures.render_report_figures(
                out / "figures",
                score_rows=score_rows,
                per_problem_rows=per_problem_rows,
                summary_rows=summary_rows,
            )
        )
    return written


__all__ = [
    "StoreError",
    "CacheCorruption",
    "RefusedMismatch",
    "IncompleteRun",
    "ConcurrentRun",
    "canonical_json",
    "cache_key",
    "cell_id",
    "CompletionCache",
    "CachedInvoker",
    "RunStore",
    "write_csv",
    "emit_report",
]
