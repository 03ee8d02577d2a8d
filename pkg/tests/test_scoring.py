"""Monte Carlo scoring, split-half selection, and transfer evaluation.

The selection tests check against brute-force oracles built inline: argmax
with explicit tie-break for selection, and direct index arithmetic for the
split halves.
"""

from __future__ import annotations

import random
from fractions import Fraction

import pytest

from arq import scoring
from arq.backend import MockBackend
from arq.pipeline import Pipeline
from arq.scoring import StoneScore, select_best, split_half

from conftest import DirectInvoker, boxed, make_problem, make_stone, make_strategy


def reward_scripted_backend(schedule):
    """Solver mock: final attempts follow the 0/1 schedule by seed index;
    stone solutions are filler text."""

    def respond(req):
        prompt = req.user_prompt
        if "Study the following example problems" in prompt:
            return boxed("4") if schedule[req.params.seed_index] else boxed("5")
        return boxed("99")

    return MockBackend(default=respond)


def scored_pipeline(schedule, **strategy_overrides):
    invoker = DirectInvoker(reward_scripted_backend(schedule))
    cfg = make_strategy(rollouts_per_set=len(schedule), **strategy_overrides)
    return Pipeline(invoker, cfg), invoker


# -- split halves ----------------------------------------------------------------

@pytest.mark.parametrize("n", range(2, 51))
def test_split_half_oracle(n):
    selection, report = split_half(n)
    assert selection == tuple(range(n // 2))
    assert report == tuple(range(n // 2, n))
    assert set(selection) & set(report) == set()
    assert set(selection) | set(report) == set(range(n))


def test_from_rewards_requires_two_rollouts():
    with pytest.raises(ValueError):
        StoneScore.from_rewards("s", 1, [1])


def test_from_rewards_exact_means():
    score = StoneScore.from_rewards("s", 1, [1, 1, 0, 0, 1])
    assert score.selection_mean == Fraction(1)  # indices 0, 1
    assert score.report_mean == Fraction(1, 3)  # indices 2, 3, 4
    assert score.full_mean == Fraction(3, 5)
    assert isinstance(score.full_mean, Fraction)


# -- mean-reward estimator exactness ----------------------------------------------

def test_mc_score_all_correct():
    pipe, _ = scored_pipeline([1] * 6)
    score, attempts = scoring.score_stone(pipe, make_problem("q1"), make_stone(), 6)
    assert score.full_mean == Fraction(1)
    assert [a.reward for a in attempts] == [1] * 6


def test_mc_score_all_wrong():
    pipe, _ = scored_pipeline([0] * 6)
    score, _ = scoring.score_stone(pipe, make_problem("q1"), make_stone(), 6)
    assert score.full_mean == Fraction(0)


def test_mc_score_alternating_is_exactly_half():
    pipe, _ = scored_pipeline([1, 0] * 4)
    score, _ = scoring.score_stone(pipe, make_problem("q1"), make_stone(), 8)
    assert score.full_mean == Fraction(1, 2)
    assert score.full_mean != 0.4999999  # exact, not float-approximate


def test_stone_solutions_resampled_per_rollout():
    pipe, invoker = scored_pipeline([1] * 4)
    scoring.score_stone(pipe, make_problem("q1"), make_stone(), 4)
    stone_seeds = [
        req.params.seed_index
        for _, req in invoker.calls
        if "Compute 1+1." in req.user_prompt and "Study the following" not in req.user_prompt
    ]
    assert sorted(stone_seeds) == [0, 1, 2, 3]


def test_shared_stone_solutions_reuse_one_seed():
    pipe, invoker = scored_pipeline([1] * 4, share_stone_solutions=True)
    scoring.score_stone(pipe, make_problem("q1"), make_stone(), 4)
    stone_seeds = {
        req.params.seed_index
        for _, req in invoker.calls
        if "Compute 1+1." in req.user_prompt and "Study the following" not in req.user_prompt
    }
    assert stone_seeds == {0}


def test_score_set_position_is_one_based_set_index():
    pipe, _ = scored_pipeline([1, 0])
    score, _ = scoring.score_set(pipe, make_problem("q1"), [make_stone(set_index=3)], 2)
    assert score.position == 4


# -- split-half anti-bias -----------------------------------------------------------

def test_planted_lucky_stone_reports_its_true_low_mean():
    """A stone that aced only the selection half must still be chosen (its
    selection mean is top) yet report the honest low score."""
    lucky = StoneScore.from_rewards("lucky", 1, [1, 1, 0, 0])
    steady = StoneScore.from_rewards("steady", 2, [1, 0, 1, 0])
    report = select_best("q1", [lucky, steady])
    assert report.chosen_stone_id == "lucky"
    assert report.reported_score == Fraction(0)
    assert report.reported_score == lucky.report_mean
    assert report.reported_score != lucky.selection_mean


def test_randomized_pools_always_report_from_report_half():
    rng = random.Random(20240816)
    for _ in range(200):
        n = rng.choice([2, 4, 6, 8, 10])
        pool = [
            StoneScore.from_rewards(f"s{j}", j + 1, [rng.randint(0, 1) for _ in range(n)])
            for j in range(rng.randint(1, 8))
        ]
        for score in pool:
            assert set(score.selection_indices) & set(score.report_indices) == set()
            assert set(score.selection_indices) | set(score.report_indices) == set(range(n))
        report = select_best("q1", pool)
        chosen = report.chosen
        assert report.reported_score == chosen.report_mean
        report_half_mean = Fraction(
            sum(chosen.rewards[i] for i in chosen.report_indices), len(chosen.report_indices)
        )
        assert report.reported_score == report_half_mean


# -- selection oracle ---------------------------------------------------------------

def brute_force_best(pool):
    return min(pool, key=lambda s: (-s.selection_mean, s.position))


def test_select_best_matches_bruteforce_oracle():
    rng = random.Random(7)
    for _ in range(300):
        n = rng.choice([2, 4, 6])
        pool = [
            StoneScore.from_rewards(f"s{j}", j + 1, [rng.randint(0, 1) for _ in range(n)])
            for j in range(rng.randint(1, 10))
        ]
        report = select_best("q1", pool)
        assert report.chosen_stone_id == brute_force_best(pool).stone_id


def test_tie_breaks_to_lowest_position():
    a = StoneScore.from_rewards("a", 5, [1, 0])
    b = StoneScore.from_rewards("b", 2, [1, 0])
    c = StoneScore.from_rewards("c", 9, [1, 0])
    report = select_best("q1", [a, b, c])
    assert report.chosen_stone_id == "b"


def test_select_best_empty_raises():
    with pytest.raises(scoring.EmptyCandidates):
        select_best("q1", [])


def test_selection_keeps_baseline():
    score = StoneScore.from_rewards("s", 1, [1, 1])
    report = select_best("q1", [score], baseline_solver_only=Fraction(1, 4))
    assert report.baseline_solver_only == Fraction(1, 4)


# -- plumbing --------------------------------------------------------------------------

def test_rewards_by_rollout_requires_contiguous_indices():
    pipe, _ = scored_pipeline([1, 0])
    _, attempts = scoring.score_stone(pipe, make_problem("q1"), make_stone(), 2)
    with pytest.raises(scoring.ScoringError):
        scoring.rewards_by_rollout(attempts[:1] + attempts[:1])


def test_set_id_for_single_vs_multi():
    single = [make_stone(set_index=2)]
    assert scoring.set_id_for(single) == single[0].stone.id
    multi = [
        make_stone(set_index=2, position=1, strategy="sequential"),
        make_stone(set_index=2, position=2, strategy="sequential"),
    ]
    assert scoring.set_id_for(multi) == "q1.sequential.s02"


def test_score_row_exact_mean_strings():
    score = StoneScore.from_rewards("s", 3, [1, 0, 0])
    row = scoring.score_row("q1", score, chosen=True)
    assert row["selection_mean"] == "1"
    assert row["report_mean"] == "0"
    assert row["full_mean"] == "1/3"
    assert row["rewards"] == [1, 0, 0]
    assert row["chosen"] is True


def test_aggregate_dataset_unweighted():
    means = {"a": Fraction(1, 2), "b": Fraction(1, 4), "c": Fraction(3, 4)}
    assert scoring.aggregate_dataset(means) == Fraction(1, 2)
    with pytest.raises(scoring.ScoringError):
        scoring.aggregate_dataset({})


# -- transfer ---------------------------------------------------------------------------

def test_evaluate_transfer_end_to_end():
    from arq.stages import build_simulation
    from arq.prompts import DEFAULT_DELIMITERS

    problems = [make_problem("q1", "What is 2+2?", "4")]
    sim = build_simulation(problems, DEFAULT_DELIMITERS, backend_id="mock")
    cfg = make_strategy(num_sets=2, rollouts_per_set=4)
    pipe = Pipeline(DirectInvoker(sim), cfg)
    reference = {"q1": [make_stone(statement="Compute the remainder when 3^4 is divided by 10.")]}
    results = scoring.evaluate_transfer(reference, pipe, problems, n=4)
    assert len(results) == 1
    result = results[0]
    assert result.target_id == "q1"
    assert result.stone_id == reference["q1"][0].stone.id
    for value in (result.transfer_mean, result.target_solver_only, result.target_self_selected):
        assert isinstance(value, Fraction)
        assert 0 <= value <= 1


def test_evaluate_transfer_requires_reference():
    problems = [make_problem("q1")]
    pipe = Pipeline(DirectInvoker(MockBackend(default=boxed("4"))), make_strategy())
    with pytest.raises(scoring.MissingReferenceSelection):
        scoring.evaluate_transfer({}, pipe, problems, n=2)
