"""Step-reward estimators.

Contrastive PMI rewards (with template averaging and hard negatives), Monte
Carlo rollout rewards, prover-advantage rewards, merge variants, and the
symmetric-KL diagnostic that backs the contrastive estimator.
"""

import logging
import math
import random
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Optional

import numpy as np

from .core import AnswerSet, Problem, Trajectory, answers_equal, normalize_answer
from .scorer import (
    CostLedger,
    DecodingParams,
    LengthNormalizedLogProb,
    sample_completions,
    score_answer,
)
from .templates import default_templates, negative_generation_prompt

log = logging.getLogger(__name__)

METHODS = ("mc", "pav", "cpmi", "cpmi_merge", "rand_merge", "gold_only", "neg_only")


class CannotFillError(RuntimeError):
    """Not enough distinct wrong answers could be produced."""


class NonNumericGoldError(ValueError):
    """Heuristic perturbation needs a numeric gold answer."""


@dataclass
class CPMIConfig:
    m: int = 4                      # number of hard negatives
    k: int = 4                      # number of prompt templates averaged
    baseline_mode: str = "question_only"   # or "previous_prefix"
    templates: Optional[list] = None
    variant: str = "cpmi"           # "cpmi" | "gold_only" | "neg_only"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.m < 1 and self.variant != "gold_only":
            raise ValueError("m must be >= 1 outside gold_only mode")
        if self.baseline_mode not in ("question_only", "previous_prefix"):
            raise ValueError(f"unknown baseline_mode {self.baseline_mode!r}")
        if self.variant not in ("cpmi", "gold_only", "neg_only"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.templates is None:
            self.templates = default_templates(self.k)


@dataclass
class MCConfig:
    t: int = 8
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("t must be >= 1")


@dataclass
class PAVConfig:
    alpha: float = 1.0
    prover_backend: object = None
    prover_t: int = 4
    policy_backend: object = None
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self):
        if self.prover_t < 1:
            raise ValueError("prover_t must be >= 1")


@dataclass
class StepReward:
    step_index: int
    raw: float
    method: str
    per_template: Optional[list] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.per_template:
            mean = sum(self.per_template) / len(self.per_template)
            if not math.isclose(mean, self.raw, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError("raw must equal the mean of per_template values")


@dataclass
class DiscreteDistribution:
    support: list
    probs: list

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if len(self.support) != len(p):
            raise ValueError("support/probs length mismatch")
        if (p < 0).any():
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must sum to 1")


def _lnlp_value(x) -> float:
    return x.value if isinstance(x, LengthNormalizedLogProb) else float(x)


def cpmi_step_reward(gold_with, gold_without, neg_with, neg_without) -> float:
    """Contrastive step reward from length-normalized log-likelihoods.

    [gold_with - gold_without] minus the mean of [neg_with - neg_without]
    over the hard negatives. With no negatives, only the gold bracket
    remains (gold-only ablation).
    """
    if len(neg_with) != len(neg_without):
        raise ValueError("negative with/without lists must have equal length")
    gold_term = _lnlp_value(gold_with) - _lnlp_value(gold_without)
    if not neg_with:
        return gold_term
    neg_terms = [_lnlp_value(w) - _lnlp_value(wo) for w, wo in zip(neg_with, neg_without)]
    return gold_term - sum(neg_terms) / len(neg_terms)


def cpmi_reward_averaged(per_template) -> float:
    """Arithmetic mean of per-template rewards."""
    if not per_template:
        raise ValueError("per_template must be non-empty")
    return sum(per_template) / len(per_template)


def label_trajectory_cpmi(problem: Problem, trajectory: Trajectory, answers: AnswerSet,
                          config: CPMIConfig, backend,
                          ledger: Optional[CostLedger] = None) -> list:
    """Contrastive reward for every step of a trajectory.

    For each step i and template k, the with-context appends the prefix up to
    and including step i to the rendered question; the without-context is the
    rendered question alone (question_only) or the prefix up to i-1
    (previous_prefix). All comparisons are scoring-only: no tokens are
    generated.
    """
    if config.variant != "gold_only" and answers.m < 1:
        raise ValueError("at least one negative is required outside gold_only mode")
    templates = config.templates[: config.k]
    method = config.variant if config.variant != "cpmi" else "cpmi"
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
            if config.variant == "gold_only":
                gw = score_answer(backend, with_ctx, answers.gold, ledger).value
                gwo = score_answer(backend, without_ctx, answers.gold, ledger).value
                per_template.append(gw - gwo)
                continue
            neg_terms = []
            for neg in answers.negatives:
                nw = score_answer(backend, with_ctx, neg, ledger).value
                nwo = score_answer(backend, without_ctx, neg, ledger).value
                neg_terms.append(nw - nwo)
            neg_mean = sum(neg_terms) / len(neg_terms)
            if config.variant == "neg_only":
                per_template.append(-neg_mean)
            else:
                gw = score_answer(backend, with_ctx, answers.gold, ledger).value
                gwo = score_answer(backend, without_ctx, answers.gold, ledger).value
                per_template.append((gw - gwo) - neg_mean)
        rewards.append(StepReward(
            step_index=i,
            raw=cpmi_reward_averaged(per_template),
            per_template=per_template,
            method=method,
        ))
    return rewards


def heuristic_perturb(gold: str) -> list:
    """Deterministic wrong-answer candidates for a numeric gold answer, in
    fixed order: +-1, +-2, +-10%, sign flip. Duplicates of the gold answer or
    of earlier candidates are dropped."""
    try:
        g = Decimal(normalize_answer(gold))
    except (InvalidOperation, ValueError) as exc:
        raise NonNumericGoldError(f"gold answer {gold!r} is not numeric") from exc
    raw_candidates = [
        g + 1, g - 1, g + 2, g - 2,
        g * Decimal("1.1"), g * Decimal("0.9"), -g,
    ]
    out = []
    for cand in raw_candidates:
        canon = normalize_answer(str(cand))
        if answers_equal(canon, gold):
            continue
        if any(answers_equal(canon, seen) for seen in out):
            continue
        out.append(canon)
    return out


def generate_hard_negatives(problem: Problem, backend, m: int,
                            decoding: Optional[DecodingParams] = None,
                            ledger: Optional[CostLedger] = None,
                            oversample: int = 2) -> AnswerSet:
    """Sample plausible wrong answers from the model, then top up from
    heuristic perturbations of the gold answer until ``m`` distinct
    negatives exist."""
    if m < 1:
        raise ValueError("m must be >= 1")
    decoding = decoding or DecodingParams(max_tokens=16)
    gold = normalize_answer(problem.gold_answer)
    prompt = negative_generation_prompt(problem.question, gold)
    negatives = []

    def consider(candidate: Optional[str]):
        if not candidate:
            return
        if answers_equal(candidate, gold):
            return
        if any(answers_equal(candidate, seen) for seen in negatives):
            return
        negatives.append(candidate)

    for rollout in sample_completions(backend, prompt, oversample * m, decoding, ledger):
        if rollout.extracted_answer is not None:
            consider(rollout.extracted_answer)
        else:
            # prompt ends with the answer marker, so the completion itself
            # may be the bare answer
            lines = rollout.completion.splitlines()
            consider(normalize_answer(lines[0]) if lines else None)
        if len(negatives) >= m:
            break

    if len(negatives) < m:
        try:
            for cand in heuristic_perturb(gold):
                consider(cand)
                if len(negatives) >= m:
                    break
        except NonNumericGoldError:
            pass
    if len(negatives) < m:
        raise CannotFillError(
            f"problem {problem.id}: only {len(negatives)}/{m} negatives available")
    return AnswerSet(gold=gold, negatives=negatives[:m])


def mc_step_reward(problem: Problem, trajectory: Trajectory, step_index: int,
                   config: MCConfig, backend, ledger: Optional[CostLedger] = None,
                   template=None) -> StepReward:
    """Fraction of sampled continuations of the step prefix that reach the
    gold answer."""
    if step_index >= len(trajectory):
        raise IndexError("step_index out of range")
    template = template or default_templates(1)[0]
    prompt = template.render(problem.question) + trajectory.prefix(step_index)
    gold = normalize_answer(problem.gold_answer)
    rollouts = sample_completions(backend, prompt, config.t, config.decoding, ledger)
    hits = sum(
        1 for r in rollouts
        if r.extracted_answer is not None and answers_equal(r.extracted_answer, gold)
    )
    return StepReward(step_index=step_index, raw=hits / config.t, method="mc")


def label_trajectory_mc(problem: Problem, trajectory: Trajectory, config: MCConfig,
                        backend, ledger: Optional[CostLedger] = None,
                        template=None) -> list:
    return [
        mc_step_reward(problem, trajectory, i, config, backend, ledger, template)
        for i in range(len(trajectory))
    ]


def pav_step_reward(mc_theta_i: float, mc_mu_i: float, mc_mu_prev: float,
                    alpha: float = 1.0) -> float:
    """Policy MC reward plus the prover's advantage over the previous step."""
    return mc_theta_i + alpha * (mc_mu_i - mc_mu_prev)


def _mc_fraction(prompt: str, gold: str, t: int, decoding: DecodingParams,
                 backend, ledger) -> float:
    rollouts = sample_completions(backend, prompt, t, decoding, ledger)
    hits = sum(
        1 for r in rollouts
        if r.extracted_answer is not None and answers_equal(r.extracted_answer, gold)
    )
    return hits / t


def label_trajectory_pav(problem: Problem, trajectory: Trajectory, config: PAVConfig,
                         mc_config: MCConfig, ledger: Optional[CostLedger] = None,
                         template=None) -> list:
    """Prover-advantage reward per step. The previous-step prover term at
    step 0 is the prover's reward on the bare question prompt."""
    template = template or default_templates(1)[0]
    base = template.render(problem.question)
    gold = normalize_answer(problem.gold_answer)
    policy = config.policy_backend
    prover = config.prover_backend
    mu_prev = _mc_fraction(base, gold, config.prover_t, config.decoding, prover, ledger)
    rewards = []
    for i in range(len(trajectory)):
        prompt = base + trajectory.prefix(i)
        theta_i = _mc_fraction(prompt, gold, mc_config.t, mc_config.decoding, policy, ledger)
        mu_i = _mc_fraction(prompt, gold, config.prover_t, config.decoding, prover, ledger)
        raw = pav_step_reward(theta_i, mu_i, mu_prev, config.alpha)
        rewards.append(StepReward(step_index=i, raw=raw, method="pav"))
        mu_prev = mu_i
    return rewards


def merge_rewards(mc: list, cpmi: list, merge_index: int) -> list:
    """Splice: steps before ``merge_index`` take the MC reward, the rest take
    the contrastive reward. Index 0 is pure contrastive; an index past the end
    is pure MC."""
    if len(mc) != len(cpmi):
        raise ValueError("reward lists must have equal length")
    if merge_index < 0:
        raise ValueError("merge_index must be >= 0")
    return [mc[i] if i < merge_index else cpmi[i] for i in range(len(mc))]


def rand_merge(mc_first: StepReward, n_steps: int, seed: int) -> list:
    """Control labeling: MC reward at step 0, uniform [0,1] noise afterwards.
    Callers derive the seed from (run seed, problem id) for reproducibility."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = random.Random(seed)
    rewards = [mc_first]
    for i in range(1, n_steps):
        rewards.append(StepReward(step_index=i, raw=rng.uniform(0.0, 1.0),
                                  method="rand_merge"))
    return rewards


def jeffreys_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Symmetric KL divergence KL(P||Q) + KL(Q||P), in nats."""
    if p.support != q.support:
        raise ValueError("distributions must share the same support")
    pa = np.asarray(p.probs, dtype=float)
    qa = np.asarray(q.probs, dtype=float)
    mask = (pa > 0) | (qa > 0)
    if ((pa[mask] == 0) != (qa[mask] == 0)).any():
        raise ValueError("P and Q must be mutually absolutely continuous")
    both = (pa > 0) & (qa > 0)
    log_ratio = np.log(pa[both] / qa[both])
    kl_pq = float(np.sum(pa[both] * log_ratio))
    kl_qp = float(np.sum(qa[both] * -log_ratio))
    return kl_pq + kl_qp


def cpmi_jeffreys_check(p: DiscreteDistribution, q: DiscreteDistribution,
                        n_samples: int, seed: int = 0) -> dict:
    """Sample-based estimate of the symmetric KL via the contrastive
    log-ratio form: mean log(P/Q) under P minus mean log(P/Q) under Q.
    Returns the estimate, the exact value, and their absolute gap."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    exact = jeffreys_divergence(p, q)
    rng = np.random.default_rng(seed)
    pa = np.asarray(p.probs, dtype=float)
    qa = np.asarray(q.probs, dtype=float)
    both = (pa > 0) & (qa > 0)
    log_ratio = np.zeros_like(pa)
    log_ratio[both] = np.log(pa[both] / qa[both])
    idx_p = rng.choice(len(pa), size=n_samples, p=pa)
    idx_q = rng.choice(len(qa), size=n_samples, p=qa)
    estimate = float(log_ratio[idx_p].mean() - log_ratio[idx_q].mean())
    return {"estimate": estimate, "exact": exact, "abs_error": abs(estimate - exact)}
