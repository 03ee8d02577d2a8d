"""Answer extraction and equivalence judging for AIME-style problems.

Final answers are integers or reduced fractions. All arithmetic is exact
(Python ints); no floats appear anywhere in this module so that equality
checks are decidable.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from math import gcd

logger = logging.getLogger(__name__)


class VerifyError(Exception):
    """Base class for answer-verification failures."""


class NoBoxedAnswer(VerifyError):
    """The solution text contains no balanced \\boxed{...} span."""


class Unparseable(VerifyError):
    """The raw answer text is outside the integer/fraction grammar."""


_INT_RE = re.compile(r"^([+-]?)(\d+)$")
_SLASH_FRAC_RE = re.compile(r"^([+-]?\d+)/([+-]?\d+)$")
_LATEX_FRAC_RE = re.compile(r"^([+-]?)\\frac\{([+-]?\d+)\}\{([+-]?\d+)\}$")
_TEXT_WRAP_RE = re.compile(r"^\\text\{(.*)\}$", re.DOTALL)


@dataclass(frozen=True)
class Answer:
    """A canonical answer: numerator/denominator in lowest terms, denominator positive."""

    numerator: int
    denominator: int = 1

    def __post_init__(self) -> None:
        if self.denominator <= 0:
            raise ValueError("denominator must be positive")
        if gcd(abs(self.numerator), self.denominator) != 1 and self.numerator != 0:
            raise ValueError("answer not in lowest terms")
        if self.numerator == 0 and self.denominator != 1:
            raise ValueError("zero must be represented as 0/1")

    @property
    def kind(self) -> str:
        return "integer" if self.denominator == 1 else "rational"

    @classmethod
    def from_parts(cls, numerator: int, denominator: int) -> "Answer":
        if denominator == 0:
            raise Unparseable("zero denominator")
        if denominator < 0:
            numerator, denominator = -numerator, -denominator
        if numerator == 0:
            return cls(0, 1)
        g = gcd(abs(numerator), denominator)
        return cls(numerator // g, denominator // g)


def render_answer(answer: Answer) -> str:
    """Canonical text form: "42" for integers, "-1/2" for rationals."""
    if answer.denominator == 1:
        return str(answer.numerator)
    return f"{answer.numerator}/{answer.denominator}"


def extract_boxed(solution: str) -> str:
    """Return the contents of the last balanced \\boxed{...} span in the text.

    Raises NoBoxedAnswer if no balanced span exists.
    """
    marker = "\\boxed{"
    spans: list[str] = []
    start = solution.find(marker)
    while start != -1:
        depth = 1
        i = start + len(marker)
        while i < len(solution) and depth > 0:
            ch = solution[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
            i += 1
        if depth == 0:
            spans.append(solution[start + len(marker) : i - 1])
        start = solution.find(marker, start + 1)
    if not spans:
        raise NoBoxedAnswer("no balanced \\boxed{...} span found")
    return spans[-1]


def normalize(raw: str) -> Answer:
    """Parse raw answer text into a canonical Answer.

    Strips whitespace, commas, surrounding dollar signs and \\text wrappers,
    then parses an optional sign plus integer, a/b, or \\frac{a}{b}. The
    result is reduced by gcd with the sign carried on the numerator.
    """
    s = raw.strip()
    s = s.strip("$").strip()
    while True:
        m = _TEXT_WRAP_RE.match(s)
        if m is None:
            break
        s = m.group(1).strip()
    s = s.replace(",", "")
    s = "".join(s.split())
    if not s:
        raise Unparseable(f"empty answer text: {raw!r}")

    m = _INT_RE.match(s)
    if m:
        sign = -1 if m.group(1) == "-" else 1
        return Answer.from_parts(sign * int(m.group(2)), 1)

    m = _SLASH_FRAC_RE.match(s)
    if m:
        return Answer.from_parts(int(m.group(1)), int(m.group(2)))

    m = _LATEX_FRAC_RE.match(s)
    if m:
        sign = -1 if m.group(1) == "-" else 1
        return Answer.from_parts(sign * int(m.group(2)), int(m.group(3)))

    raise Unparseable(f"not an integer or fraction: {raw!r}")


def equivalent(a: Answer, b: Answer) -> bool:
    """Exact equality by cross multiplication."""
    return a.numerator * b.denominator == b.numerator * a.denominator


@dataclass(frozen=True)
class GroundTruth:
    """A benchmark answer, normalized at load time."""

    canonical: Answer
    raw: str

    @classmethod
    def parse(cls, raw: str) -> "GroundTruth":
        return cls(canonical=normalize(raw), raw=raw)


def judge(solution: str, truth: GroundTruth) -> tuple[int, str | None]:
    """Score a solution against ground truth.

    Returns (reward, diagnostic). Reward is 1 iff a boxed answer extracts,
    parses, and matches; extraction or parse failures score 0 with a
    diagnostic string instead of raising.
    """
    try:
        raw = extract_boxed(solution)
    except NoBoxedAnswer as exc:
        return 0, f"NoBoxedAnswer: {exc}"
    try:
        answer = normalize(raw)
    except Unparseable as exc:
        return 0, f"Unparseable: {exc}"
    if equivalent(answer, truth.canonical):
        return 1, None
    return 0, None


def reward(solution: str, truth: GroundTruth) -> int:
    """Binary reward; never raises. Failures are logged and score 0."""
    value, diagnostic = judge(solution, truth)
    if diagnostic is not None:
        logger.debug("reward=0 (%s)", diagnostic)
    return value
