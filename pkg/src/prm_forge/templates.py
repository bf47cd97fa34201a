"""Prompt templates: question diversification and hard-negative generation."""

from .core import PromptTemplate

# Four phrasings of the same solve-step-by-step instruction. Averaging step
# rewards over these reduces prompt-specific variance.
_DIVERSIFIED = [
    (
        "You are a careful math solver. Follow the steps methodically. Keep each step concise.\n"
        "At the end, output exactly one line in the format:\n"
        "The answer is: <final answer>\n\n"
        "Problem:\n{q}\n"
        "Solution: Let's think step by step.\n"
    ),
    (
        "Solve the problem with numbered steps. Be precise. Finally print exactly:\n"
        "The answer is: <final answer>\n"
        "If numeric, use plain digits only (no punctuation).\n\n"
        "Problem:\n{q}\n"
        "Solution (step-by-step):\n"
    ),
    (
        "Work through the solution briefly, then verify and conclude. Conclude with exactly:\n"
        "The answer is: <final answer>\n\n"
        "Problem:\n{q}\n"
        "Solution: Let's proceed carefully.\n"
    ),
    (
        "You are solving a math problem. Compute step by step. End with exactly:\n"
        "The answer is: <final answer>\n\n"
        "Problem:\n{q}\n"
        "Solution: Let's think step by step.\n"
    ),
]

_NEGATIVE_INSTRUCTION = (
    "(Gold answer: {gold})\n\n"
    "Generate several plausible but incorrect answers to the given question. "
    "Identify any wrong step and take that step's wrong computed result or the "
    "mistaken number used in it as a hard-negative example. Try to include all "
    "earlier steps' wrong intermediate outputs if possible. If all steps seem "
    "correct, return a plausible wrong number (+-1, +-2, or +-10%).\n\n"
    "Output exactly one short line after 'The answer is:' no units or words.\n\n"
    "The answer is: "
)


def default_templates(k: int = 4) -> list:
    """Return the first ``k`` diversified prompt templates (k <= 4; beyond
    that the four phrasings cycle)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [
        PromptTemplate(id=i, template=_DIVERSIFIED[i % len(_DIVERSIFIED)])
        for i in range(k)
    ]


def negative_generation_prompt(question: str, gold_answer: str) -> str:
    """Prompt asking the model for plausible wrong final answers. Ends with
    the answer marker so the completion is the bare answer text."""
    base = _DIVERSIFIED[0].format(q=question)
    return base + "\n" + _NEGATIVE_INSTRUCTION.format(gold=gold_answer)
