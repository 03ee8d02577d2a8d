"""Stone scoring and selection.

A stone's score is the mean binary reward over n joint rollouts. To avoid
selection bias, the first floor(n/2) rollouts (by rollout index) pick the
best stone and the remaining rollouts report its score. All means are
fractions.Fraction, so equality assertions in tests are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .pipeline import Attempt, Pipeline, Problem, StoneRecord


class ScoringError(Exception):
    """Base class for scoring failures."""


class EmptyCandidates(ScoringError):
    """select_best called with no stone scores."""


class MissingReferenceSelection(ScoringError):
    """Transfer evaluation lacks a reference selection for a problem."""


def split_half(n: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Disjoint, exhaustive index halves: selection gets the first floor(n/2)
    rollouts, the report half gets the rest (the larger half when n is odd)."""
    cut = n // 2
    return tuple(range(cut)), tuple(range(cut, n))


@dataclass(frozen=True)
class RolloutRecord:
    stone_id: str
    rollout_index: int
    reward: int

    def __post_init__(self) -> None:
        if self.rollout_index < 0:
            raise ValueError("rollout_index is 0-based and non-negative")
        if self.reward not in (0, 1):
            raise ValueError("reward must be 0 or 1")


@dataclass(frozen=True)
class StoneScore:
    stone_id: str
    position: int
    rewards: tuple[int, ...]
    selection_indices: tuple[int, ...]
    report_indices: tuple[int, ...]
    selection_mean: Fraction
    report_mean: Fraction
    full_mean: Fraction
    fallback: bool = False

    def __post_init__(self) -> None:
        if set(self.selection_indices) & set(self.report_indices):
            raise ValueError("selection and report halves must be disjoint")
        if set(self.selection_indices) | set(self.report_indices) != set(range(len(self.rewards))):
            raise ValueError("halves must cover every rollout exactly once")

    @classmethod
    def from_rewards(
        cls, stone_id: str, position: int, rewards: Sequence[int], fallback: bool = False
    ) -> "StoneScore":
        rewards = tuple(int(r) for r in rewards)
        n = len(rewards)
        if n < 2:
            raise ValueError("scoring needs at least 2 rollouts to split")
        selection, report = split_half(n)
        return cls(
            stone_id=stone_id,
            position=position,
            rewards=rewards,
            selection_indices=selection,
            report_indices=report,
            selection_mean=Fraction(sum(rewards[i] for i in selection), len(selection)),
            report_mean=Fraction(sum(rewards[i] for i in report), len(report)),
            full_mean=Fraction(sum(rewards), n),
            fallback=fallback,
        )

    def rollouts(self) -> list[RolloutRecord]:
        return [
            RolloutRecord(self.stone_id, i, reward) for i, reward in enumerate(self.rewards)
        ]


@dataclass(frozen=True)
class SelectionReport:
    target_id: str
    candidates: tuple[StoneScore, ...]
    chosen_stone_id: str
    reported_score: Fraction
    baseline_solver_only: Fraction | None = None

    @property
    def chosen(self) -> StoneScore:
        for score in self.candidates:
            if score.stone_id == self.chosen_stone_id:
                return score
        raise ScoringError(f"chosen stone {self.chosen_stone_id!r} not among candidates")


def rewards_by_rollout(attempts: Sequence[Attempt]) -> list[int]:
    """Order attempt rewards by rollout index, requiring indices 0..n-1."""
    indices = sorted(a.rollout_index for a in attempts)
    if indices != list(range(len(attempts))):
        raise ScoringError(f"rollout indices not contiguous from 0: {indices}")
    ordered = sorted(attempts, key=lambda a: a.rollout_index)
    return [a.reward for a in ordered]


def set_id_for(stones: Sequence[StoneRecord]) -> str:
    """Scoring identity of a stone set: the stone itself for size-1 sets,
    the set prefix otherwise."""
    first = stones[0]
    if len(stones) == 1:
        return first.stone.id
    return f"{first.parent_id}.{first.strategy}.s{first.set_index:02d}"


def score_set(
    pipe: Pipeline, x: Problem, stones: Sequence[StoneRecord], n: int
) -> tuple[StoneScore, list[Attempt]]:
    """Run n rollouts of one stone set (falling back when unusable) and
    score them. Position is the 1-based set index within the pool."""
    if n < 2:
        raise ValueError("scoring needs at least 2 rollouts")
    attempts = pipe.run_set(x, stones, n)
    rewards = rewards_by_rollout(attempts)
    fallback = any(a.fallback for a in attempts)
    score = StoneScore.from_rewards(
        set_id_for(stones), stones[0].set_index + 1, rewards, fallback=fallback
    )
    return score, attempts


def score_stone(
    pipe: Pipeline, x: Problem, stone: StoneRecord, n: int
) -> tuple[StoneScore, list[Attempt]]:
    return score_set(pipe, x, [stone], n)


def select_best(
    target_id: str,
    scores: Sequence[StoneScore],
    baseline_solver_only: Fraction | None = None,
) -> SelectionReport:
    """Argmax over selection means, ties broken by lowest position. The
    reported score always comes from the disjoint report half."""
    if not scores:
        raise EmptyCandidates(f"no stone scores for problem {target_id!r}")
    chosen = scores[0]
    for score in scores[1:]:
        if score.selection_mean > chosen.selection_mean or (
            score.selection_mean == chosen.selection_mean and score.position < chosen.position
        ):
            chosen = score
    return SelectionReport(
        target_id=target_id,
        candidates=tuple(scores),
        chosen_stone_id=chosen.stone_id,
        reported_score=chosen.report_mean,
        baseline_solver_only=baseline_solver_only,
    )


@dataclass(frozen=True)
class TransferResult:
    target_id: str
    stone_id: str
    transfer_mean: Fraction
    target_solver_only: Fraction
    target_self_selected: Fraction


def evaluate_transfer(
    reference: Mapping[str, Sequence[StoneRecord]],
    pipe: Pipeline,
    problems: Sequence[Problem],
    n: int,
) -> list[TransferResult]:
    """Evaluate reference-chosen stones under a new solver.

    For each problem: n fresh rollouts of the reference stone set under
    pipe's solver, the solver's own solver-only mean, and its self-selected
    score (a full generate/score/select pass under pipe).
    """
    results: list[TransferResult] = []
    for x in problems:
        if x.id not in reference:
            raise MissingReferenceSelection(f"no reference selection for problem {x.id!r}")
        stones = list(reference[x.id])
        transfer_attempts = pipe.run_set(x, stones, n)
        transfer_mean = Fraction(sum(a.reward for a in transfer_attempts), len(transfer_attempts))
        solver_attempts = pipe.run_solver_only(x, n)
        solver_mean = Fraction(sum(a.reward for a in solver_attempts), len(solver_attempts))
        own_sets = pipe.generate_stones(x)
        own_scores = [score_set(pipe, x, stone_set, n)[0] for stone_set in own_sets]
        own_report = select_best(x.id, own_scores, baseline_solver_only=solver_mean)
        results.append(
            TransferResult(
                target_id=x.id,
                stone_id=set_id_for(stones),
                transfer_mean=transfer_mean,
                target_solver_only=solver_mean,
                target_self_selected=own_report.reported_score,
            )
        )
    return results


def aggregate_dataset(per_problem: Mapping[str, Fraction]) -> Fraction:
    """Unweighted mean over problems of per-problem mean reward."""
    if not per_problem:
        raise ScoringError("aggregate_dataset requires at least one problem")
    return sum(per_problem.values(), Fraction(0)) / len(per_problem)


def score_row(problem_id: str, score: StoneScore, chosen: bool) -> dict:
    """Plain-dict form of one score table row; means stay exact strings."""
    return {
        "problem_id": problem_id,
        "stone_id": score.stone_id,
        "position": score.position,
        "selection_mean": str(score.selection_mean),
        "report_mean": str(score.report_mean),
        "full_mean": str(score.full_mean),
        "fallback": score.fallback,
        "chosen": chosen,
        "rewards": list(score.rewards),
    }


__all__ = [
    "ScoringError",
    "EmptyCandidates",
    "MissingReferenceSelection",
    "split_half",
    "RolloutRecord",
    "StoneScore",
    "SelectionReport",
    "rewards_by_rollout",
    "set_id_for",
    "score_set",
    "score_stone",
    "select_best",
    "TransferResult",
    "evaluate_transfer",
    "aggregate_dataset",
    "score_row",
]
