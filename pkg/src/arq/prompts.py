"""Prompt template rendering, stone extraction, and thinking-span removal.

Templates live as plain-text assets under arq/templates with {placeholder}
syntax (str.format semantics, so literal braces are doubled). Everything
here is a pure function; callers may invoke concurrently.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

import yaml

TEMPLATE_IDS = ("stone_gen", "rand_gen", "sequential_stone_gen", "stone_solve", "final_solve")

# Layout for one worked example inside the final-solve prompt; blocks are
# repeated in order with one blank line between pairs.
_EXAMPLE_BLOCK = "Example:\n\n{stone}\n\nSolution to Example:\n\n{solution}"

# Marker shown at the slot the generator is asked to fill.
PLACEHOLDER_MARKER = "<Placeholder>"

_YAML_FENCE_RE = re.compile(r"```yaml[ \t]*\n(.*?)\n?[ \t]*```", re.DOTALL)


class PromptError(Exception):
    """Base class for template and extraction failures."""


class MissingBinding(PromptError):
    """A template placeholder was left unfilled."""


class EmptyStoneList(PromptError):
    """A template requiring a non-empty list of stones received none."""


class NoYamlBlock(PromptError):
    """Generator output contains no ```yaml fenced block."""


class MissingKey(PromptError):
    """The fenced block has no problem/subproblem key."""


class EmptyProblem(PromptError):
    """The problem key is present but its value is blank."""


class UnclosedThinkingWarning(UserWarning):
    """An open thinking marker had no matching close marker."""


@dataclass(frozen=True)
class ThinkingDelimiters:
    open_marker: str = "<think>"
    close_marker: str = "</think>"

    def __post_init__(self) -> None:
        if not self.open_marker or not self.close_marker:
            raise ValueError("thinking markers must be non-empty")
        if self.open_marker == self.close_marker:
            raise ValueError("open and close markers must differ")


DEFAULT_DELIMITERS = ThinkingDelimiters()


@lru_cache(maxsize=None)
def template_body(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise PromptError(f"unknown template id: {template_id!r}")
    return resources.files("arq.templates").joinpath(f"{template_id}.txt").read_text(encoding="utf-8")


def template_digest(template_id: str) -> str:
    return hashlib.sha256(template_body(template_id).encode("utf-8")).hexdigest()


def all_template_digests() -> dict[str, str]:
    return {tid: template_digest(tid) for tid in TEMPLATE_IDS}


def _format(body: str, bindings: Mapping[str, str]) -> str:
    try:
        return body.format_map(dict(bindings))
    except KeyError as exc:
        raise MissingBinding(f"unfilled placeholder: {exc.args[0]!r}") from None


def render(template_id: str, bindings: Mapping[str, object]) -> str:
    """Render a template with the given bindings.

    stone_gen takes {problem}; rand_gen takes nothing; stone_solve takes
    {question}; final_solve takes {question} and examples, a non-empty
    ordered list of (stone, solution) pairs; sequential_stone_gen takes
    {problem} and prior_stones, a non-empty ordered list of earlier stones.
    """
    body = template_body(template_id)
    if template_id == "final_solve":
        examples = bindings.get("examples")
        if examples is None:
            raise MissingBinding("unfilled placeholder: 'examples'")
        examples = list(examples)  # type: ignore[arg-type]
        if not examples:
            raise EmptyStoneList("final_solve requires at least one (stone, solution) pair")
        blocks = [_EXAMPLE_BLOCK.format(stone=s, solution=y) for s, y in examples]
        filled = {"examples": "\n\n".join(blocks), "question": _require(bindings, "question")}
        return _format(body, filled)
    if template_id == "sequential_stone_gen":
        priors = bindings.get("prior_stones")
        if priors is None:
            raise MissingBinding("unfilled placeholder: 'prior_stones'")
        priors = list(priors)  # type: ignore[arg-type]
        if not priors:
            raise EmptyStoneList("sequential_stone_gen requires at least one prior stone")
        parts = [f"Subproblem {i}:\n{stone}" for i, stone in enumerate(priors, start=1)]
        parts.append(f"Subproblem {len(priors) + 1}:\n{PLACEHOLDER_MARKER}")
        filled = {"subproblems": "\n\n".join(parts), "problem": _require(bindings, "problem")}
        return _format(body, filled)
    return _format(body, {k: str(v) for k, v in bindings.items()})


def _require(bindings: Mapping[str, object], name: str) -> str:
    if name not in bindings:
        raise MissingBinding(f"unfilled placeholder: {name!r}")
    return str(bindings[name])


def extract_stone(completion: str) -> str:
    """Pull the generated problem out of the last ```yaml fenced block.

    The block must parse as a mapping with a "problem" key (or "subproblem"
    for the sequential template). Literal-block indentation is removed by
    the YAML parser; surrounding whitespace is trimmed.
    """
    blocks = _YAML_FENCE_RE.findall(completion)
    if not blocks:
        raise NoYamlBlock("no ```yaml fenced block in completion")
    try:
        doc = yaml.safe_load(blocks[-1])
    except yaml.YAMLError:
        doc = None
    if not isinstance(doc, dict):
        raise MissingKey("fenced block is not a mapping with a problem key")
    for key in ("problem", "subproblem"):
        if key in doc:
            value = doc[key]
            text = "" if value is None else str(value).strip()
            if not text:
                raise EmptyProblem(f"{key} key present but blank")
            return text
    raise MissingKey("fenced block has no problem or subproblem key")


def split_thinking(
    completion: str, delims: ThinkingDelimiters = DEFAULT_DELIMITERS
) -> tuple[str, str]:
    """Separate thinking spans from the rest of a completion.

    Returns (thinking, remainder). Every well-formed open...close span is
    removed; an open marker with no close removes through end of text and
    emits an UnclosedThinkingWarning. The remainder is whitespace-trimmed.
    """
    removed: list[str] = []
    kept: list[str] = []
    pos = 0
    unclosed = False
    while True:
        start = completion.find(delims.open_marker, pos)
        if start == -1:
            kept.append(completion[pos:])
            break
        kept.append(completion[pos:start])
        body_start = start + len(delims.open_marker)
        end = completion.find(delims.close_marker, body_start)
        if end == -1:
            removed.append(completion[body_start:])
            unclosed = True
            break
        removed.append(completion[body_start:end])
        pos = end + len(delims.close_marker)
    if unclosed:
        warnings.warn("thinking span never closed; dropped through end of text", UnclosedThinkingWarning)
    return "\n".join(removed), "".join(kept).strip()


def strip_thinking(completion: str, delims: ThinkingDelimiters = DEFAULT_DELIMITERS) -> str:
    """Remove thinking spans, returning the trimmed remainder. Idempotent."""
    _, remainder = split_thinking(completion, delims)
    return remainder


def embed_stone(problem: str, key: str = "problem") -> str:
    """Wrap a problem in the output-format fence the generator is asked to emit."""
    indented = "\n".join(f"  {line}" for line in problem.splitlines())
    return f"```yaml\n{key}: |\n{indented}\n```"


__all__ = [
    "TEMPLATE_IDS",
    "PLACEHOLDER_MARKER",
    "PromptError",
    "MissingBinding",
    "EmptyStoneList",
    "NoYamlBlock",
    "MissingKey",
    "EmptyProblem",
    "UnclosedThinkingWarning",
    "ThinkingDelimiters",
    "DEFAULT_DELIMITERS",
    "template_body",
    "template_digest",
    "all_template_digests",
    "render",
    "extract_stone",
    "split_thinking",
    "strip_thinking",
    "embed_stone",
]
