"""Training-set construction from scored stone pools.

SFT keeps each pool's best stone as a (prompt, CoT + stone) example. DPO
ranks a pool by score, pairs rank-symmetric extremes ((1, size), (2,
size-1), (3, size-2)), and keeps pairs whose score gap clears a threshold.
Gaps and length statistics use exact arithmetic; lengths are whitespace
token counts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .pipeline import Problem, StoneRecord
from .scoring import StoneScore

logger = logging.getLogger(__name__)

DEFAULT_GAP_THRESHOLD = 0.25
MAX_PAIRS_PER_POOL = 3
LENGTH_UNIT = "whitespace tokens"

# Static manifest exported next to every dataset so downstream trainers
# share one source of truth for the fine-tuning setup.
TRAINING_HYPERPARAMETERS = {
    "sft": {
        "max_length": 16384,
        "batch_size": 16,
        "lr": 1e-5,
        "adam_betas": [0.9, 0.95],
        "grad_clip": 1.0,
        "weight_decay": 0.0001,
        "warmup_ratio": 0.05,
        "schedule": "cosine",
        "epoch": 5,
    },
    "dpo": {
        "max_length": 14336,
        "batch_size": 16,
        "lr": 1e-6,
        "adam_betas": [0.9, 0.95],
        "grad_clip": 1.0,
        "weight_decay": 0.01,
        "schedule": "constant",
        "epoch": 1,
        "dpo_beta": 0.1,
        "lora": {"r": 256, "alpha": 32},
    },
}


class CurationError(Exception):
    """Base class for curation failures."""


class EmptyDataset(CurationError):
    """Statistics requested for a dataset with no records."""


@dataclass(frozen=True)
class PoolEntry:
    record: StoneRecord
    score: StoneScore

    @property
    def completion(self) -> str:
        """Generator CoT followed by the stone, the trained target text."""
        if self.record.cot:
            return f"{self.record.cot}\n\n{self.record.stone.statement}"
        return self.record.stone.statement


@dataclass(frozen=True)
class ScoredPool:
    target: Problem
    entries: tuple[PoolEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        for entry in self.entries:
            if entry.record.parent_id != self.target.id:
                raise ValueError(
                    f"pool for {self.target.id!r} contains a stone of {entry.record.parent_id!r}"
                )

    def valid_entries(self) -> list[PoolEntry]:
        return [e for e in self.entries if e.record.parse_status == "ok"]


@dataclass(frozen=True)
class SftExample:
    target_id: str
    prompt: str
    cot: str
    stone: str
    score: Fraction
    stone_position: int

    @property
    def completion(self) -> str:
        if self.cot:
            return f"{self.cot}\n\n{self.stone}"
        return self.stone


@dataclass(frozen=True)
class DpoPair:
    target_id: str
    prompt: str
    chosen_cot: str
    chosen_stone: str
    rejected_cot: str
    rejected_stone: str
    gap: Fraction

    @property
    def chosen(self) -> str:
        return f"{self.chosen_cot}\n\n{self.chosen_stone}" if self.chosen_cot else self.chosen_stone

    @property
    def rejected(self) -> str:
        return (
            f"{self.rejected_cot}\n\n{self.rejected_stone}"
            if self.rejected_cot
            else self.rejected_stone
        )


@dataclass(frozen=True)
class DatasetStats:
    size: int
    mean_prompt_length: Fraction
    mean_cot_length: Fraction
    mean_stone_length: Fraction
    unit: str = LENGTH_UNIT


def _tokens(text: str) -> int:
    return len(text.split())


def ranked(pool: ScoredPool) -> list[PoolEntry]:
    """Valid entries sorted by full_mean descending, position ascending."""
    return sorted(
        pool.valid_entries(), key=lambda e: (-e.score.full_mean, e.score.position)
    )


def build_sft(pools: Sequence[ScoredPool]) -> list[SftExample]:
    """Best stone per pool; pools with no valid stone are skipped with a
    logged warning."""
    examples: list[SftExample] = []
    for pool in pools:
        order = ranked(pool)
        if not order:
            logger.warning("pool for target %s has no valid stones; skipped", pool.target.id)
            continue
        best = order[0]
        examples.append(
            SftExample(
                target_id=pool.target.id,
                prompt=best.record.prompt,
                cot=best.record.cot,
                stone=best.record.stone.statement,
                score=best.score.full_mean,
                stone_position=best.score.position,
            )
        )
    return examples


def build_dpo(
    pools: Sequence[ScoredPool], gap_threshold: float = DEFAULT_GAP_THRESHOLD
) -> list[DpoPair]:
    """Rank-symmetric pairing with a minimum score gap.

    Sorted best to worst, candidate pairs are (rank i, rank size+1-i) for
    i in 1..min(3, size//2); a pair survives iff its gap meets the
    threshold. No stone can appear in two pairs by construction.
    """
    threshold = Fraction(str(gap_threshold))
    pairs: list[DpoPair] = []
    for pool in pools:
        order = ranked(pool)
        size = len(order)
        for i in range(min(MAX_PAIRS_PER_POOL, size // 2)):
            top = order[i]
            bottom = order[size - 1 - i]
            gap = top.score.full_mean - bottom.score.full_mean
            if gap < threshold:
                continue
            pairs.append(
                DpoPair(
                    target_id=pool.target.id,
                    prompt=top.record.prompt,
                    chosen_cot=top.record.cot,
                    chosen_stone=top.record.stone.statement,
                    rejected_cot=bottom.record.cot,
                    rejected_stone=bottom.record.stone.statement,
                    gap=gap,
                )
            )
    return pairs


def compute_stats(dataset: Sequence[SftExample] | Sequence[DpoPair]) -> DatasetStats:
    """Exact mean whitespace-token lengths. DPO lengths average over both
    the chosen and rejected sides of every pair."""
    if not dataset:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    prompt_total = 0
    cot_total = 0
    stone_total = 0
    sides = 0
    for item in dataset:
        if isinstance(item, SftExample):
            prompt_total += _tokens(item.prompt)
            cot_total += _tokens(item.cot)
            stone_total += _tokens(item.stone)
            sides += 1
        elif isinstance(item, DpoPair):
            prompt_total += 2 * _tokens(item.prompt)
            cot_total += _tokens(item.chosen_cot) + _tokens(item.rejected_cot)
            stone_total += _tokens(item.chosen_stone) + _tokens(item.rejected_stone)
            sides += 2
        else:
            raise CurationError(f"unsupported dataset record: {type(item).__name__}")
    return DatasetStats(
        size=len(dataset),
        mean_prompt_length=Fraction(prompt_total, sides),
        mean_cot_length=Fraction(cot_total, sides),
        mean_stone_length=Fraction(stone_total, sides),
    )


def _sft_record(example: SftExample) -> dict:
    return {
        "prompt": example.prompt,
        "completion": example.completion,
        "score": float(example.score),
        "target_id": example.target_id,
        "stone_position": example.stone_position,
    }


def _dpo_record(pair: DpoPair) -> dict:
    return {
        "prompt": pair.prompt,
        "chosen": pair.chosen,
        "rejected": pair.rejected,
        "gap": float(pair.gap),
        "target_id": pair.target_id,
    }


def export_jsonl(dataset: Sequence[SftExample] | Sequence[DpoPair], path: str | Path) -> Path:
    """One JSON record per line, UTF-8, newline-terminated."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for item in dataset:
                if isinstance(item, SftExample):
                    record = _sft_record(item)
                elif isinstance(item, DpoPair):
                    record = _dpo_record(item)
                else:
                    raise CurationError(f"unsupported dataset record: {type(item).__name__}")
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise CurationError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def write_stats(stats: DatasetStats, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "size": stats.size,
        "mean_prompt_length": float(stats.mean_prompt_length),
        "mean_cot_length": float(stats.mean_cot_length),
        "mean_stone_length": float(stats.mean_stone_length),
        "unit": stats.unit,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def write_hyperparameters(path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(TRAINING_HYPERPARAMETERS, indent=2) + "\n", encoding="utf-8")
    return path


__all__ = [
    "DEFAULT_GAP_THRESHOLD",
    "MAX_PAIRS_PER_POOL",
    "LENGTH_UNIT",
    "TRAINING_HYPERPARAMETERS",
    "CurationError",
    "EmptyDataset",
    "PoolEntry",
    "ScoredPool",
    "SftExample",
    "DpoPair",
    "DatasetStats",
    "ranked",
    "build_sft",
    "build_dpo",
    "compute_stats",
    "export_jsonl",
    "write_stats",
    "write_hyperparameters",
]
