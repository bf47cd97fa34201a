"""End-to-end dataset construction.

Ingests problems and trajectories, attaches answer sets, runs the chosen
labeler over a bounded worker pool (results assembled in input order, so
output is independent of parallelism), normalizes raw rewards to soft
labels, enforces composition constraints, and persists labeled records plus
a run manifest.
"""

import json
import logging
import math
import random
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import AnswerSet, normalize_answer, write_jsonl
from .rewards import (
    CPMIConfig,
    MCConfig,
    PAVConfig,
    generate_hard_negatives,
    label_trajectory_cpmi,
    label_trajectory_mc,
    label_trajectory_pav,
    merge_rewards,
    rand_merge,
    mc_step_reward,
)
from .scorer import CostLedger, derive_seed, merge_ledgers

log = logging.getLogger(__name__)

LABEL_METHODS = ("mc", "pav", "cpmi", "cpmi_merge", "rand_merge", "gold_only", "neg_only")


class CompositionError(ValueError):
    """Pool cannot satisfy the requested composition; carries per-stratum counts."""

    def __init__(self, message: str, stratum_counts: Optional[dict] = None):
        super().__init__(message)
        self.stratum_counts = stratum_counts or {}


@dataclass
class NormalizationConfig:
    scope: str = "global"     # or "per_trajectory"
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.scope not in ("global", "per_trajectory"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class CompositionSpec:
    total: int
    source_ratio: tuple = (1, 1)       # gsm8k : math
    mixed_to_pure: tuple = (7, 3)

    def __post_init__(self):
        if self.total < 1:
            raise ValueError("total must be >= 1")


def normalize_rewards(raw, config: Optional[NormalizationConfig] = None) -> list:
    """Robust z-score plus logistic squashing: (r - median) / (MAD + eps)
    through a sigmoid. Strictly order-preserving; identical inputs all map
    to 0.5."""
    config = config or NormalizationConfig()
    r = np.asarray(list(raw), dtype=float)
    if r.size == 0:
        raise ValueError("raw reward list must be non-empty")
    med = np.median(r)
    mad = np.median(np.abs(r - med))
    z = (r - med) / (mad + config.epsilon)
    # keep labels strictly inside (0, 1) even when MAD collapses and z blows up
    z = np.clip(z, -30.0, 30.0)
    soft = 1.0 / (1.0 + np.exp(-z))
    return [float(s) for s in soft]


def bce_loss(predictions, targets) -> float:
    """Mean binary cross-entropy of probabilistic predictions against soft
    targets."""
    p = np.asarray(list(predictions), dtype=float)
    t = np.asarray(list(targets), dtype=float)
    if p.shape != t.shape:
        raise ValueError("predictions and targets must have equal length")
    if ((p <= 0) | (p >= 1)).any():
        raise ValueError("predictions must lie strictly inside (0, 1)")
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p)))


# ---------------------------------------------------------------------------
# Composition sampling


def largest_remainder(total: int, weights) -> list:
    """Apportion ``total`` across weights; deterministic, sums exactly.
    Remainders are awarded by largest fractional part, ties to lower index."""
    weights = [float(w) for w in weights]
    denom = sum(weights)
    if denom <= 0:
        raise ValueError("weights must have positive sum")
    quotas = [total * w / denom for w in weights]
    base = [math.floor(q) for q in quotas]
    leftover = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def trajectory_mixedness(trajectory) -> Optional[str]:
    """"mixed" when binary step labels contain both values, "pure" when a
    single label type (or only a trajectory-level correctness flag) exists,
    None when the trajectory carries neither and is excluded from
    stratification."""
    if trajectory.step_labels:
        labels = set(bool(x) for x in trajectory.step_labels)
        return "mixed" if len(labels) == 2 else "pure"
    if trajectory.correctness is not None:
        return "pure"
    return None


def sample_composition(pool, spec: CompositionSpec, seed: int = 0) -> list:
    """Stratified sampling without replacement over (source, mixedness).

    ``pool`` is a list of (problem, trajectory) pairs. Stratum targets honor
    the source ratio and the mixed:pure ratio simultaneously (within the
    rounding granularity of one record). Selection order within a stratum is
    seeded and deterministic; the returned subset preserves pool order.
    """
    strata = {("gsm8k", "mixed"): [], ("gsm8k", "pure"): [],
              ("math", "mixed"): [], ("math", "pure"): []}
    for idx, (problem, trajectory) in enumerate(pool):
        mixedness = trajectory_mixedness(trajectory)
        key = (problem.source, mixedness)
        if key in strata:
            strata[key].append(idx)

    src_counts = largest_remainder(spec.total, spec.source_ratio)
    mix_counts = largest_remainder(spec.total, spec.mixed_to_pure)
    mixed_frac = spec.mixed_to_pure[0] / sum(spec.mixed_to_pure)
    # 2x2 table with fixed marginals: pick the gsm8k-mixed cell nearest to
    # proportional, then the remaining cells are determined
    lo = max(0, src_counts[0] - mix_counts[1])
    hi = min(src_counts[0], mix_counts[0])
    gsm_mixed = min(max(math.floor(src_counts[0] * mixed_frac + 0.5), lo), hi)
    targets = {
        ("gsm8k", "mixed"): gsm_mixed,
        ("gsm8k", "pure"): src_counts[0] - gsm_mixed,
        ("math", "mixed"): mix_counts[0] - gsm_mixed,
        ("math", "pure"): mix_counts[1] - (src_counts[0] - gsm_mixed),
    }

    counts = {f"{s}/{m}": {"available": len(strata[(s, m)]), "requested": targets[(s, m)]}
              for (s, m) in strata}
    short = [k for (k, v) in counts.items() if v["available"] < v["requested"]]
    if short:
        raise CompositionError(f"stratum underflow in {short}", counts)

    rng = random.Random(seed)
    chosen = []
    for key in sorted(strata):
        members = strata[key]
        take = targets[key]
        if take == len(members):
            chosen.extend(members)
        else:
            chosen.extend(rng.sample(members, take))
    return [pool[i] for i in sorted(chosen)]


# ---------------------------------------------------------------------------
# Dataset construction


@dataclass
class BuildResult:
    records: list
    ledger: CostLedger
    manifest: dict
    skipped: int = 0


def _label_one(method, problem, trajectory, answers, backend, seed,
               cpmi_config, mc_config, pav_config, merge_index):
    """Label a single trajectory; returns (step_rewards, negatives_used, ledger)."""
    ledger = CostLedger()
    negatives_used = []
    if method in ("cpmi", "gold_only", "neg_only", "cpmi_merge"):
        if answers is None:
            m = 1 if cpmi_config.variant == "gold_only" else cpmi_config.m
            answers = generate_hard_negatives(problem, backend, m, ledger=ledger)
        negatives_used = list(answers.negatives)

    if method == "mc":
        rewards = label_trajectory_mc(problem, trajectory, mc_config, backend, ledger)
    elif method == "pav":
        rewards = label_trajectory_pav(problem, trajectory, pav_config, mc_config, ledger)
    elif method in ("cpmi", "gold_only", "neg_only"):
        config = cpmi_config
        if method != "cpmi" and config.variant != method:
            config = CPMIConfig(m=config.m, k=config.k, baseline_mode=config.baseline_mode,
                                templates=config.templates, variant=method)
        rewards = label_trajectory_cpmi(problem, trajectory, answers, config, backend, ledger)
    elif method == "cpmi_merge":
        cpmi = label_trajectory_cpmi(problem, trajectory, answers, cpmi_config,
                                     backend, ledger)
        if merge_index > 0:
            mc = label_trajectory_mc(problem, trajectory, mc_config, backend, ledger)
        else:
            mc = cpmi
        rewards = merge_rewards(mc, cpmi, merge_index)
    elif method == "rand_merge":
        first = mc_step_reward(problem, trajectory, 0, mc_config, backend, ledger)
        rewards = rand_merge(first, len(trajectory), derive_seed(seed, problem.id))
    else:
        raise ValueError(f"unknown labeling method {method!r}")
    return rewards, negatives_used, ledger


def build_dataset(problems, trajectories, method: str, backend, *,
                  composition: Optional[CompositionSpec] = None,
                  seed: int = 0,
                  parallelism: int = 1,
                  cpmi_config: Optional[CPMIConfig] = None,
                  mc_config: Optional[MCConfig] = None,
                  pav_config: Optional[PAVConfig] = None,
                  norm_config: Optional[NormalizationConfig] = None,
                  negatives: Optional[dict] = None,
                  merge_index: int = 1,
                  run_id: Optional[str] = None) -> BuildResult:
    """Label trajectories with the chosen method and produce soft-labeled
    step records plus a merged cost ledger.

    ``negatives`` maps problem_id to an AnswerSet of pre-supplied hard
    negatives; when absent they are generated through the backend. Per-item
    backend failures are logged and skipped; the run continues.
    """
    if method not in LABEL_METHODS:
        raise ValueError(f"unknown labeling method {method!r}")
    cpmi_config = cpmi_config or CPMIConfig()
    mc_config = mc_config or MCConfig()
    norm_config = norm_config or NormalizationConfig()
    run_id = run_id or uuid.uuid4().hex[:12]
    start = time.monotonic()

    by_id = {p.id: p for p in problems}
    pool = []
    for trajectory in trajectories:
        problem = by_id.get(trajectory.problem_id)
        if problem is None or not problem.gold_answer:
            raise ValueError(
                f"trajectory references unknown or goldless problem {trajectory.problem_id!r}")
        pool.append((problem, trajectory))

    stratum_counts = {}
    if composition is not None:
        selected = sample_composition(pool, composition, seed)
        for problem, trajectory in selected:
            key = f"{problem.source}/{trajectory_mixedness(trajectory)}"
            stratum_counts[key] = stratum_counts.get(key, 0) + 1
    else:
        selected = pool

    def task(item):
        problem, trajectory = item
        answers = None
        if negatives and problem.id in negatives:
            answers = negatives[problem.id]
        try:
            return _label_one(method, problem, trajectory, answers, backend, seed,
                              cpmi_config, mc_config, pav_config, merge_index)
        except Exception:
            log.exception("labeling failed for problem %s; skipping", problem.id)
            return None

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool_exec:
            outcomes = list(pool_exec.map(task, selected))
    else:
        outcomes = [task(item) for item in selected]

    ledger = merge_ledgers(out[2] for out in outcomes if out is not None)
    skipped = sum(1 for out in outcomes if out is None)

    # assemble raw records in input order, then normalize
    raw_records = []
    chunk_sizes = []    # records per trajectory, for per_trajectory scope
    for (problem, trajectory), outcome in zip(selected, outcomes):
        if outcome is None:
            continue
        rewards, negatives_used, _ = outcome
        chunk_sizes.append(len(rewards))
        for step, reward in zip(trajectory.steps, rewards):
            raw_records.append({
                "problem_id": problem.id,
                "step_index": step.index,
                "step_text": step.text,
                "raw_reward": reward.raw,
                "method": method,
                "negatives_used": negatives_used,
                "template_count": len(reward.per_template) if reward.per_template else 1,
            })

    if raw_records:
        if norm_config.scope == "global":
            soft = normalize_rewards([r["raw_reward"] for r in raw_records], norm_config)
            for rec, s in zip(raw_records, soft):
                rec["soft_label"] = s
        else:
            offset = 0
            for size in chunk_sizes:
                chunk = raw_records[offset:offset + size]
                soft = normalize_rewards([r["raw_reward"] for r in chunk], norm_config)
                for rec, s in zip(chunk, soft):
                    rec["soft_label"] = s
                offset += size

    records = [{
        "problem_id": r["problem_id"],
        "step_index": r["step_index"],
        "step_text": r["step_text"],
        "raw_reward": r["raw_reward"],
        "soft_label": r["soft_label"],
        "method": r["method"],
        "negatives_used": r["negatives_used"],
        "template_count": r["template_count"],
        "run_id": run_id,
    } for r in raw_records]

    manifest = {
        "run_id": run_id,
        "method": method,
        "seed": seed,
        "parallelism": parallelism,
        "merge_index": merge_index,
        "normalization": {"scope": norm_config.scope, "epsilon": norm_config.epsilon},
        "ledger": ledger.report(),
        "wall_clock_seconds": time.monotonic() - start,
        "counts": {
            "trajectories_selected": len(selected),
            "trajectories_skipped": skipped,
            "records": len(records),
            "per_stratum": stratum_counts,
        },
    }
    return BuildResult(records=records, ledger=ledger, manifest=manifest, skipped=skipped)


def write_build_result(result: BuildResult, records_path, manifest_path=None) -> None:
    write_jsonl(records_path, result.records)
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8") as fout:
            json.dump(result.manifest, fout, indent=2, sort_keys=True)
            fout.write("\n")
