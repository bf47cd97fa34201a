"""Shared domain types: problems, trajectories, answer sets, and answer matching."""

import json
import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, Optional

ANSWER_MARKER = "The answer is:"
DEFAULT_STEP_SEPARATOR = "\n"

SOURCES = ("gsm8k", "math", "other")

_CURRENCY_CHARS = "$€£¥₩"
_STRIP_CHARS = _CURRENCY_CHARS + " \t\r\n"


def _format_decimal(value: Decimal) -> str:
    """Canonical plain-decimal rendering: no exponent, no trailing zeros."""
    if value == 0:
        return "0"
    value = value.normalize()
    if value == value.to_integral_value():
        value = value.quantize(Decimal(1))
    return format(value, "f")


def normalize_answer(raw: str) -> str:
    """Canonicalize an answer string for matching.

    Strips surrounding whitespace/currency symbols and trailing periods,
    removes thousands separators, and renders numeric answers in a canonical
    decimal form. Idempotent; empty input yields the empty string.
    """
    text = raw.strip().strip(_STRIP_CHARS)
    while text.endswith("."):
        text = text[:-1].rstrip().rstrip(_STRIP_CHARS)
    candidate = text.replace(",", "")
    try:
        value = Decimal(candidate)
    except (InvalidOperation, ValueError):
        return text
    if not value.is_finite():
        return text
    return _format_decimal(value)


def extract_final_answer(completion: str) -> Optional[str]:
    """Parse the final answer after the last "The answer is:" marker.

    Returns the canonicalized text of the remainder of the marker line, or
    None when the marker never occurs (treated as an incorrect answer
    downstream).
    """
    idx = completion.rfind(ANSWER_MARKER)
    if idx < 0:
        return None
    tail = completion[idx + len(ANSWER_MARKER):]
    lines = tail.splitlines()
    line = lines[0] if lines else ""
    return normalize_answer(line)


def answers_equal(a: str, b: str) -> bool:
    """Equality on canonical answers: string match, or numeric match within
    1e-6 relative tolerance. No symbolic equivalence ("1/2" != "0.5")."""
    if a == b:
        return True
    try:
        fa = float(a)
        fb = float(b)
    except (ValueError, TypeError):
        return False
    if math.isnan(fa) or math.isnan(fb):
        return False
    return math.isclose(fa, fb, rel_tol=1e-6, abs_tol=0.0)


@dataclass(frozen=True)
class Problem:
    id: str
    question: str
    gold_answer: str
    source: str = "other"

    def __post_init__(self):
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}, expected one of {SOURCES}")


@dataclass(frozen=True)
class Step:
    index: int
    text: str


@dataclass
class Trajectory:
    """An ordered solution trace for one problem.

    ``step_labels`` carries optional per-step binary correctness labels from
    the source corpus (Math-Shepherd style); it is used only for mixed/pure
    stratification during dataset composition.
    """

    problem_id: str
    steps: list
    final_answer: Optional[str] = None
    correctness: Optional[bool] = None
    step_labels: Optional[list] = None
    separator: str = DEFAULT_STEP_SEPARATOR

    def __post_init__(self):
        if not self.steps:
            raise ValueError("trajectory must contain at least one step")
        for i, step in enumerate(self.steps):
            if step.index != i:
                raise ValueError("step indices must be contiguous from 0")

    def __len__(self) -> int:
        return len(self.steps)

    def prefix(self, i: int) -> str:
        """Concatenation of steps 0..i (inclusive). Empty step texts are
        skipped so they do not introduce stray separators."""
        return self.separator.join(s.text for s in self.steps[: i + 1] if s.text)

    def prefix_before(self, i: int) -> str:
        """Concatenation of steps 0..i-1; empty for i == 0."""
        return self.separator.join(s.text for s in self.steps[:i] if s.text)

    def full_text(self) -> str:
        return self.prefix(len(self.steps) - 1)


@dataclass
class AnswerSet:
    """One gold answer plus M hard-negative alternatives."""

    gold: str
    negatives: list = field(default_factory=list)

    def __post_init__(self):
        for neg in self.negatives:
            if answers_equal(neg, self.gold):
                raise ValueError(f"negative {neg!r} equals gold answer")
        for i, a in enumerate(self.negatives):
            for b in self.negatives[i + 1:]:
                if answers_equal(a, b):
                    raise ValueError(f"duplicate negatives {a!r} / {b!r}")

    @property
    def m(self) -> int:
        return len(self.negatives)


@dataclass(frozen=True)
class PromptTemplate:
    """A question-to-prompt renderer. Rendering is a pure function of the
    question text, so repeated renders are identical."""

    id: int
    template: str

    def render(self, question: str) -> str:
        return self.template.format(q=question)


# ---------------------------------------------------------------------------
# JSONL I/O


def read_jsonl(path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fin:
        for line in fin:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path, records: Iterable[dict]) -> int:
    count = 0
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fout:
        for rec in records:
            fout.write(json.dumps(rec, ensure_ascii=False) + "\n")
            count += 1
    return count


def problem_from_dict(obj: dict) -> Problem:
    return Problem(
        id=str(obj["id"]),
        question=obj["question"],
        gold_answer=obj["gold_answer"],
        source=obj.get("source", "other"),
    )


def trajectory_from_dict(obj: dict, separator: str = DEFAULT_STEP_SEPARATOR) -> Trajectory:
    steps = [Step(index=i, text=t) for i, t in enumerate(obj["steps"])]
    return Trajectory(
        problem_id=str(obj["problem_id"]),
        steps=steps,
        final_answer=obj.get("final_answer"),
        correctness=obj.get("correctness"),
        step_labels=obj.get("step_labels"),
        separator=separator,
    )


def load_problems(path) -> list:
    problems = [problem_from_dict(obj) for obj in read_jsonl(path)]
    seen = set()
    for p in problems:
        if p.id in seen:
            raise ValueError(f"duplicate problem id {p.id!r}")
        seen.add(p.id)
    return problems


def load_trajectories(path, separator: str = DEFAULT_STEP_SEPARATOR) -> list:
    return [trajectory_from_dict(obj, separator) for obj in read_jsonl(path)]
