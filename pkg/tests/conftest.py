import pytest

from prm_forge.core import Problem, Step, Trajectory
from prm_forge.scorer import SyntheticBackend


def make_problem(pid="p1", question="What is 6 times 7?", gold="42", source="gsm8k"):
    return Problem(id=pid, question=question, gold_answer=gold, source=source)


def make_trajectory(pid="p1", texts=("6 times 7", "is 42"), **kwargs):
    steps = [Step(index=i, text=t) for i, t in enumerate(texts)]
    return Trajectory(problem_id=pid, steps=steps, **kwargs)


def policy_backend(gold="42", p_correct=0.3, seed=0, tokens_per_rollout=10):
    """Synthetic policy answering correctly with probability ``p_correct``."""
    filler = " ".join(["step"] * max(0, tokens_per_rollout - 4))
    right = f"{filler}\nThe answer is: {gold}".strip()
    wrong = f"{filler}\nThe answer is: {int(gold) + 1}".strip()
    table = [
        {"prompt_pattern": "", "completion": right, "weight": p_correct},
        {"prompt_pattern": "", "completion": wrong, "weight": 1.0 - p_correct},
    ]
    return SyntheticBackend(seed=seed, sample_table=table)


def build_cpmi_backend(problem, trajectory, config, answers, rng):
    """Synthetic backend with an explicit logprob for every (context, answer)
    pair a contrastive labeling run will query. Returns the backend plus the
    raw value table for independent brute-force evaluation."""
    templates = config.templates[: config.k]
    all_answers = [answers.gold] + list(answers.negatives)
    contexts = set()
    for template in templates:
        base = template.render(problem.question)
        contexts.add(base)
        for i in range(len(trajectory)):
            contexts.add(base + trajectory.prefix(i))
            contexts.add(base + trajectory.prefix_before(i))
    entries, values = [], {}
    for ctx in sorted(contexts):
        for answer in all_answers:
            value = rng.uniform(-5.0, 0.0)
            values[(ctx, answer)] = value
            entries.append({"context_pattern": ctx, "answer": answer,
                            "logprob_per_token": value})
    return SyntheticBackend(score_table=entries), values


def brute_force_cpmi(problem, trajectory, config, answers, values):
    """Direct evaluation of the contrastive reward definition from the raw
    value table, independent of the labeling code path."""
    templates = config.templates[: config.k]
    rewards = []
    for i in range(len(trajectory)):
        per_template = []
        for template in templates:
            base = template.render(problem.question)
            with_ctx = base + trajectory.prefix(i)
            if config.baseline_mode == "question_only":
                without_ctx = base
            else:
                without_ctx = base + trajectory.prefix_before(i)
            gold_term = values[(with_ctx, answers.gold)] - values[(without_ctx, answers.gold)]
            neg_terms = [values[(with_ctx, n)] - values[(without_ctx, n)]
                         for n in answers.negatives]
            per_template.append(gold_term - sum(neg_terms) / len(neg_terms))
        rewards.append(sum(per_template) / len(per_template))
    return rewards


@pytest.fixture
def problem():
    return make_problem()


@pytest.fixture
def trajectory():
    return make_trajectory()
