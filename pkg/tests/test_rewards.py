import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prm_forge.core import AnswerSet
from prm_forge.rewards import (
    CannotFillError,
    CPMIConfig,
    DiscreteDistribution,
    MCConfig,
    NonNumericGoldError,
    PAVConfig,
    StepReward,
    cpmi_jeffreys_check,
    cpmi_reward_averaged,
    cpmi_step_reward,
    generate_hard_negatives,
    heuristic_perturb,
    jeffreys_divergence,
    label_trajectory_cpmi,
    label_trajectory_mc,
    label_trajectory_pav,
    mc_step_reward,
    merge_rewards,
    pav_step_reward,
    rand_merge,
)
from prm_forge.scorer import CostLedger, SyntheticBackend

from conftest import (
    brute_force_cpmi,
    build_cpmi_backend,
    make_problem,
    make_trajectory,
    policy_backend,
)

finite = st.floats(min_value=-20, max_value=20, allow_nan=False)


class TestCpmiStepReward:
    def test_direct_arithmetic(self):
        assert cpmi_step_reward(-1.0, -2.0, [-3.0], [-2.5]) == pytest.approx(1.5)

    def test_uninformative_step(self):
        assert cpmi_step_reward(-1.0, -1.0, [-2.0, -3.0], [-2.0, -3.0]) == 0.0

    def test_m2_averaging(self):
        reward = cpmi_step_reward(-1.0, -2.0, [-2.0, -1.0], [-2.0, -2.0])
        assert reward == pytest.approx(0.5)

    def test_gold_only_when_no_negatives(self):
        assert cpmi_step_reward(-1.0, -2.0, [], []) == pytest.approx(1.0)

    def test_mismatched_lists(self):
        with pytest.raises(ValueError):
            cpmi_step_reward(-1.0, -2.0, [-3.0], [])

    @given(finite, finite, st.lists(st.tuples(finite, finite), min_size=1, max_size=6),
           finite)
    def test_shift_invariance(self, gw, gwo, negs, c):
        nw = [x for x, _ in negs]
        nwo = [x for _, x in negs]
        base = cpmi_step_reward(gw, gwo, nw, nwo)
        shifted_gold = cpmi_step_reward(gw + c, gwo + c, nw, nwo)
        assert shifted_gold == pytest.approx(base, abs=1e-9)
        shifted_neg = cpmi_step_reward(
            gw, gwo, [nw[0] + c] + nw[1:], [nwo[0] + c] + nwo[1:])
        assert shifted_neg == pytest.approx(base, abs=1e-9)

    @given(finite, finite, st.lists(st.tuples(finite, finite), min_size=1, max_size=6))
    def test_slopes(self, gw, gwo, negs):
        nw = [x for x, _ in negs]
        nwo = [x for _, x in negs]
        m = len(negs)
        base = cpmi_step_reward(gw, gwo, nw, nwo)
        assert cpmi_step_reward(gw + 1, gwo, nw, nwo) == pytest.approx(base + 1, abs=1e-9)
        bumped = cpmi_step_reward(gw, gwo, [nw[0] + 1] + nw[1:], nwo)
        assert bumped == pytest.approx(base - 1 / m, abs=1e-9)


class TestTemplateAveraging:
    def test_mean(self):
        assert cpmi_reward_averaged([1.5, 0.5, 1.0, 1.0]) == pytest.approx(1.0)

    def test_single_identity(self):
        assert cpmi_reward_averaged([0.37]) == 0.37

    @given(st.lists(finite, min_size=1, max_size=8))
    def test_permutation_invariant(self, values):
        shuffled = list(values)
        random.Random(0).shuffle(shuffled)
        assert cpmi_reward_averaged(shuffled) == pytest.approx(
            cpmi_reward_averaged(values))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cpmi_reward_averaged([])


class TestLabelTrajectoryCpmi:
    def test_single_step_composition(self):
        problem = make_problem()
        traj = make_trajectory(texts=("only step",))
        config = CPMIConfig(m=1, k=1)
        answers = AnswerSet(gold="42", negatives=["41"])
        base = config.templates[0].render(problem.question)
        backend = SyntheticBackend(score_table=[
            {"context_pattern": base + "only step", "answer": "42", "logprob_per_token": -1.0},
            {"context_pattern": base, "answer": "42", "logprob_per_token": -2.0},
            {"context_pattern": base + "only step", "answer": "41", "logprob_per_token": -3.0},
            {"context_pattern": base, "answer": "41", "logprob_per_token": -2.5},
        ])
        rewards = label_trajectory_cpmi(problem, traj, answers, config, backend)
        assert len(rewards) == 1
        assert rewards[0].raw == pytest.approx(1.5)
        assert rewards[0].method == "cpmi"

    def test_empty_step_previous_prefix_zero(self):
        problem = make_problem()
        traj = make_trajectory(texts=("a", "", "c"))
        config = CPMIConfig(m=1, k=1, baseline_mode="previous_prefix")
        answers = AnswerSet(gold="42", negatives=["41"])
        rewards = label_trajectory_cpmi(problem, traj, answers, config,
                                        SyntheticBackend(seed=5))
        assert rewards[1].raw == pytest.approx(0.0)

    def test_matches_brute_force(self):
        rng = random.Random(11)
        problem = make_problem()
        traj = make_trajectory(texts=("s0", "s1", "s2"))
        answers = AnswerSet(gold="42", negatives=["41", "44"])
        for mode in ("question_only", "previous_prefix"):
            config = CPMIConfig(m=2, k=4, baseline_mode=mode)
            backend, values = build_cpmi_backend(problem, traj, config, answers, rng)
            rewards = label_trajectory_cpmi(problem, traj, answers, config, backend)
            expected = brute_force_cpmi(problem, traj, config, answers, values)
            for reward, target in zip(rewards, expected):
                assert reward.raw == pytest.approx(target, abs=1e-12)

    def test_identical_templates_collapse_to_single(self):
        # all templates rendering the same context must reproduce the K=1 value
        problem = make_problem()
        traj = make_trajectory(texts=("s0",))
        answers = AnswerSet(gold="42", negatives=["41"])
        same = CPMIConfig(m=1, k=4)
        same.templates = [same.templates[0]] * 4
        single = CPMIConfig(m=1, k=1)
        backend = SyntheticBackend(seed=3)
        multi = label_trajectory_cpmi(problem, traj, answers, same, backend)
        one = label_trajectory_cpmi(problem, traj, answers, single, backend)
        assert multi[0].raw == pytest.approx(one[0].raw, abs=1e-12)

    def test_gold_plus_neg_decomposition(self):
        problem = make_problem()
        traj = make_trajectory(texts=("s0", "s1"))
        answers = AnswerSet(gold="42", negatives=["41", "44"])
        backend = SyntheticBackend(seed=9)
        full = label_trajectory_cpmi(problem, traj, answers, CPMIConfig(m=2, k=2), backend)
        gold = label_trajectory_cpmi(problem, traj, answers,
                                     CPMIConfig(m=2, k=2, variant="gold_only"), backend)
        neg = label_trajectory_cpmi(problem, traj, answers,
                                    CPMIConfig(m=2, k=2, variant="neg_only"), backend)
        for f, g, n in zip(full, gold, neg):
            assert g.raw + n.raw == pytest.approx(f.raw, abs=1e-12)

    def test_ledger_scores_only(self):
        problem = make_problem()
        traj = make_trajectory(texts=("s0", "s1"))
        answers = AnswerSet(gold="42", negatives=["41"])
        ledger = CostLedger()
        label_trajectory_cpmi(problem, traj, answers, CPMIConfig(m=1, k=2),
                              SyntheticBackend(), ledger)
        assert ledger.generated_tokens == 0
        assert ledger.scored_tokens > 0
        # 2 steps * 2 templates * 2 answers * (with+without)
        assert ledger.api_calls == 16


class TestHeuristicPerturb:
    def test_positive_integer(self):
        assert heuristic_perturb("42") == ["43", "41", "44", "40", "46.2", "37.8", "-42"]

    def test_zero_degenerate(self):
        assert heuristic_perturb("0") == ["1", "-1", "2", "-2"]

    def test_negative(self):
        assert heuristic_perturb("-5") == ["-4", "-6", "-3", "-7", "-5.5", "-4.5", "5"]

    def test_non_numeric_rejected(self):
        with pytest.raises(NonNumericGoldError):
            heuristic_perturb("a triangle")


class TestGenerateHardNegatives:
    def test_model_always_gold_falls_back_to_heuristics(self):
        backend = policy_backend(gold="42", p_correct=1.0)
        problem = make_problem(gold="42")
        answers = generate_hard_negatives(problem, backend, m=4)
        assert answers.negatives == ["43", "41", "44", "40"]

    def test_dedup_of_model_answers(self):
        table = [
            {"prompt_pattern": "", "completion": "The answer is: 41", "weight": 1.0},
        ]
        backend = SyntheticBackend(sample_table=table)
        problem = make_problem(gold="42")
        answers = generate_hard_negatives(problem, backend, m=2)
        assert answers.negatives[0] == "41"
        assert len(answers.negatives) == 2
        assert len(set(answers.negatives)) == 2

    def test_cannot_fill_non_numeric(self):
        backend = policy_backend(gold="42", p_correct=1.0)
        problem = make_problem(gold="a triangle")
        # model keeps emitting "42" which is a usable wrong answer for a
        # non-numeric gold; force uselessness by making it emit the gold
        table = [{"prompt_pattern": "", "completion": "The answer is: a triangle",
                  "weight": 1.0}]
        backend = SyntheticBackend(sample_table=table)
        with pytest.raises(CannotFillError):
            generate_hard_negatives(problem, backend, m=2)

    def test_bare_completion_without_marker(self):
        # generation prompt ends with the marker, so a bare numeric completion
        # is a valid candidate
        table = [{"prompt_pattern": "", "completion": "37", "weight": 1.0}]
        backend = SyntheticBackend(sample_table=table)
        answers = generate_hard_negatives(make_problem(gold="42"), backend, m=1)
        assert answers.negatives == ["37"]


class TestMcReward:
    def test_fraction_lattice(self):
        backend = policy_backend(p_correct=0.5, seed=1)
        problem = make_problem()
        traj = make_trajectory()
        config = MCConfig(t=8)
        reward = mc_step_reward(problem, traj, 0, config, backend)
        assert reward.raw in [i / 8 for i in range(9)]

    def test_all_correct(self):
        backend = policy_backend(p_correct=1.0)
        reward = mc_step_reward(make_problem(), make_trajectory(), 0, MCConfig(t=8), backend)
        assert reward.raw == 1.0

    def test_none_correct(self):
        backend = policy_backend(p_correct=0.0)
        reward = mc_step_reward(make_problem(), make_trajectory(), 0, MCConfig(t=8), backend)
        assert reward.raw == 0.0

    def test_binomial_convergence(self):
        # 3 sigma of a binomial mean with p=0.3, T=1000 is about 0.0435
        backend = policy_backend(p_correct=0.3, seed=123)
        reward = mc_step_reward(make_problem(), make_trajectory(), 0,
                                MCConfig(t=1000), backend)
        assert abs(reward.raw - 0.3) < 0.05

    def test_out_of_range_step(self):
        with pytest.raises(IndexError):
            mc_step_reward(make_problem(), make_trajectory(), 5, MCConfig(t=1),
                           policy_backend())

    def test_ledger_generates_tokens(self):
        ledger = CostLedger()
        label_trajectory_mc(make_problem(), make_trajectory(), MCConfig(t=8),
                            policy_backend(), ledger)
        assert ledger.generated_tokens > 0


class TestPavReward:
    def test_arithmetic(self):
        assert pav_step_reward(0.5, 0.6, 0.4, 1.0) == pytest.approx(0.7)

    def test_alpha_half(self):
        assert pav_step_reward(0.2, 0.3, 0.7, 0.5) == pytest.approx(0.0)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_alpha_zero_reduces_to_mc(self, r, x, y):
        assert pav_step_reward(r, x, y, 0.0) == r

    def test_label_trajectory(self):
        policy = policy_backend(p_correct=1.0)
        prover = policy_backend(p_correct=1.0, seed=2)
        config = PAVConfig(alpha=1.0, prover_backend=prover, prover_t=4,
                           policy_backend=policy)
        rewards = label_trajectory_pav(make_problem(), make_trajectory(),
                                       config, MCConfig(t=4))
        # everything is certain, so advantage terms vanish and MC term is 1
        assert [r.raw for r in rewards] == [1.0, 1.0]
        assert all(r.method == "pav" for r in rewards)


class TestMergeRewards:
    def _mk(self, values, method="mc"):
        return [StepReward(step_index=i, raw=v, method=method)
                for i, v in enumerate(values)]

    def test_splice_rule(self):
        mc = self._mk([0.6, 0.4, 0.2])
        cpmi = self._mk([1.5, -0.3, 0.8], method="cpmi")
        merged = merge_rewards(mc, cpmi, 1)
        assert [r.raw for r in merged] == [0.6, -0.3, 0.8]

    def test_index_zero_is_pure_cpmi(self):
        mc = self._mk([0.6, 0.4])
        cpmi = self._mk([1.5, -0.3], method="cpmi")
        assert merge_rewards(mc, cpmi, 0) == cpmi

    def test_saturation_is_pure_mc(self):
        mc = self._mk([0.6, 0.4, 0.2])
        cpmi = self._mk([1.5, -0.3, 0.8], method="cpmi")
        assert merge_rewards(mc, cpmi, 5) == mc

    @given(st.lists(finite, min_size=1, max_size=8), st.integers(0, 10))
    def test_merge_with_self_is_identity(self, values, k):
        x = self._mk(values)
        assert merge_rewards(x, x, k) == x

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            merge_rewards(self._mk([1.0]), self._mk([1.0, 2.0], "cpmi"), 1)


class TestRandMerge:
    def _first(self):
        return StepReward(step_index=0, raw=0.625, method="mc")

    def test_single_step(self):
        assert rand_merge(self._first(), 1, seed=0) == [self._first()]

    def test_deterministic(self):
        a = rand_merge(self._first(), 5, seed=7)
        b = rand_merge(self._first(), 5, seed=7)
        assert a == b

    def test_different_seeds_differ(self):
        a = rand_merge(self._first(), 5, seed=7)
        b = rand_merge(self._first(), 5, seed=8)
        assert a != b

    def test_uniform_mean(self):
        # 3 sigma of the mean of 10,000 U(0,1) draws is about 0.0087
        rewards = rand_merge(self._first(), 10001, seed=0)
        mean = np.mean([r.raw for r in rewards[1:]])
        assert abs(mean - 0.5) < 0.015

    def test_range(self):
        for r in rand_merge(self._first(), 100, seed=3)[1:]:
            assert 0.0 <= r.raw <= 1.0
            assert r.method == "rand_merge"


def _dist(probs):
    return DiscreteDistribution(support=list(range(len(probs))), probs=list(probs))


class TestJeffreys:
    def test_identical_distributions(self):
        p = _dist([0.3, 0.7])
        assert jeffreys_divergence(p, _dist([0.3, 0.7])) == pytest.approx(0.0)

    def test_two_term_summation(self):
        # direct oracle: 0.9 ln 1.8 + 0.1 ln 0.2 + 0.5 ln(0.5/0.9) + 0.5 ln 5
        expected = (0.9 * math.log(1.8) + 0.1 * math.log(0.2)
                    + 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(5.0))
        value = jeffreys_divergence(_dist([0.9, 0.1]), _dist([0.5, 0.5]))
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.8789, abs=1e-3)

    @given(st.lists(st.floats(0.01, 1), min_size=2, max_size=6),
           st.lists(st.floats(0.01, 1), min_size=2, max_size=6))
    def test_symmetry(self, wp, wq):
        n = min(len(wp), len(wq))
        p = _dist([w / sum(wp[:n]) for w in wp[:n]])
        q = _dist([w / sum(wq[:n]) for w in wq[:n]])
        assert jeffreys_divergence(p, q) == pytest.approx(jeffreys_divergence(q, p))

    def test_support_mismatch(self):
        p = DiscreteDistribution(["a", "b"], [0.5, 0.5])
        q = DiscreteDistribution(["a", "c"], [0.5, 0.5])
        with pytest.raises(ValueError):
            jeffreys_divergence(p, q)

    def test_absolute_continuity(self):
        with pytest.raises(ValueError):
            jeffreys_divergence(_dist([1.0, 0.0]), _dist([0.5, 0.5]))


class TestJeffreysSampledCheck:
    def test_identical_is_exactly_zero(self):
        p = _dist([0.4, 0.6])
        result = cpmi_jeffreys_check(p, _dist([0.4, 0.6]), n_samples=100, seed=0)
        assert result["estimate"] == 0.0
        assert result["abs_error"] == 0.0

    def test_convergence_at_1e5(self):
        result = cpmi_jeffreys_check(_dist([0.9, 0.1]), _dist([0.5, 0.5]),
                                     n_samples=10 ** 5, seed=0)
        assert result["abs_error"] <= 0.05

    def test_error_decays_with_samples(self):
        p, q = _dist([0.9, 0.1]), _dist([0.5, 0.5])
        small = np.mean([cpmi_jeffreys_check(p, q, 10 ** 4, seed=s)["abs_error"]
                         for s in range(20)])
        large = np.mean([cpmi_jeffreys_check(p, q, 10 ** 6, seed=s)["abs_error"]
                         for s in range(20)])
        assert large <= small
