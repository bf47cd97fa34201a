"""Metrics and inference-time selection.

First-error detection accuracy/F1 with threshold sweeps, ROC-AUC,
1-Wasserstein separation of score distributions, best-of-N reranking, and
cost-normalized relative efficiency.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .core import read_jsonl


@dataclass
class EvalRecord:
    """Step scores paired with the gold first-error index (None for a fully
    correct trajectory)."""

    problem_id: str
    step_scores: list
    gold_first_error: Optional[int] = None

    def __post_init__(self):
        if not self.step_scores:
            raise ValueError("step_scores must be non-empty")
        if self.gold_first_error is not None and not (
                0 <= self.gold_first_error < len(self.step_scores)):
            raise ValueError("gold_first_error out of range")


@dataclass
class BoNCandidate:
    candidate_id: str
    step_scores: list
    extracted_answer: Optional[str] = None

    def __post_init__(self):
        if not self.step_scores:
            raise ValueError("step_scores must be non-empty")


@dataclass
class EfficiencyInput:
    quality: float
    cost: float
    baseline_quality: float
    baseline_cost: float

    def __post_init__(self):
        for name in ("quality", "cost", "baseline_quality", "baseline_cost"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def step_labels_from_first_error(length: int, gold_first_error: Optional[int]) -> list:
    """Steps before the first error are correct, the rest incorrect; all
    correct when no error exists."""
    if gold_first_error is None:
        return [True] * length
    if not 0 <= gold_first_error < length:
        raise ValueError("gold_first_error out of range")
    return [i < gold_first_error for i in range(length)]


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted as 1/2 (rank / Mann-Whitney form)."""
    scores = np.asarray(list(scores), dtype=float)
    labels = np.asarray([bool(x) for x in labels])
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    ranks = rankdata(scores)
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return float(auc)


def predict_first_error(step_scores, threshold: float) -> Optional[int]:
    """Smallest index whose score falls below the threshold; None if all
    steps pass."""
    for i, score in enumerate(step_scores):
        if score < threshold:
            return i
    return None


def f1_score(err_acc: float, corr_acc: float) -> float:
    """Harmonic mean of error-case and correct-case accuracy (same scale in,
    same scale out)."""
    if err_acc + corr_acc == 0:
        return 0.0
    return 2 * err_acc * corr_acc / (err_acc + corr_acc)


def processbench_f1(err_hits: int, err_total: int, corr_hits: int, corr_total: int) -> dict:
    """Error accuracy (exact first-error index match on erroneous
    trajectories), correct accuracy (predicting no error on correct
    trajectories), and their harmonic-mean F1, all in percent."""
    if err_total <= 0 or corr_total <= 0:
        raise ValueError("both splits must be non-empty")
    err_acc = 100.0 * err_hits / err_total
    corr_acc = 100.0 * corr_hits / corr_total
    return {"err_acc": err_acc, "corr_acc": corr_acc, "f1": f1_score(err_acc, corr_acc)}


def _split_hits(records, threshold: float):
    err_hits = err_total = corr_hits = corr_total = 0
    for rec in records:
        predicted = predict_first_error(rec.step_scores, threshold)
        if rec.gold_first_error is None:
            corr_total += 1
            if predicted is None:
                corr_hits += 1
        else:
            err_total += 1
            if predicted == rec.gold_first_error:
                err_hits += 1
    return err_hits, err_total, corr_hits, corr_total


def default_threshold_grid() -> list:
    return [round(i * 0.01, 2) for i in range(101)]


def sweep_threshold(records, grid=None) -> dict:
    """Pick the threshold maximizing first-error F1 over the grid; ties go to
    the lower threshold."""
    grid = list(grid) if grid is not None else default_threshold_grid()
    if not grid:
        raise ValueError("grid must be non-empty")
    best = None
    for threshold in grid:
        err_hits, err_total, corr_hits, corr_total = _split_hits(records, threshold)
        if err_total == 0 or corr_total == 0:
            raise ValueError("records must contain both erroneous and correct trajectories")
        f1 = processbench_f1(err_hits, err_total, corr_hits, corr_total)["f1"]
        if best is None or f1 > best["best_f1"]:
            best = {"best_threshold": threshold, "best_f1": f1}
    return best


def wasserstein1(samples_a, samples_b) -> float:
    """1-Wasserstein distance between empirical distributions, via the
    integral of |CDF_a - CDF_b|."""
    a = np.sort(np.asarray(list(samples_a), dtype=float))
    b = np.sort(np.asarray(list(samples_b), dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample sets must be non-empty")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    all_values = np.sort(np.concatenate([a, b]))
    deltas = np.diff(all_values)
    cdf_a = np.searchsorted(a, all_values[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, all_values[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


_AGGREGATIONS = {
    "mean": lambda xs: sum(xs) / len(xs),
    "min": min,
    "last": lambda xs: xs[-1],
}


def best_of_n(candidates, aggregation: str = "mean") -> str:
    """Return the candidate_id with the highest aggregated step score; ties
    break to the lowest candidate_id."""
    if not candidates:
        raise ValueError("candidate list must be non-empty")
    if aggregation not in _AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    agg = _AGGREGATIONS[aggregation]
    best_id, best_value = None, None
    for cand in candidates:
        value = agg(cand.step_scores)
        if best_value is None or value > best_value or (
                value == best_value and str(cand.candidate_id) < str(best_id)):
            best_id, best_value = cand.candidate_id, value
    return best_id


def relative_efficiency(inp: EfficiencyInput) -> float:
    """Quality-per-cost of a method normalized by a baseline."""
    return (inp.quality / inp.cost) / (inp.baseline_quality / inp.baseline_cost)


# ---------------------------------------------------------------------------
# File-level evaluation


def load_eval_records(predictions_path, gold_path) -> list:
    """Join a predictions JSONL ({problem_id, step_scores}) with a gold JSONL
    ({problem_id, gold_first_error | null})."""
    gold = {}
    for obj in read_jsonl(gold_path):
        gold[str(obj["problem_id"])] = obj.get("gold_first_error")
    records = []
    for obj in read_jsonl(predictions_path):
        pid = str(obj["problem_id"])
        if pid not in gold:
            raise ValueError(f"no gold entry for problem {pid!r}")
        records.append(EvalRecord(
            problem_id=pid,
            step_scores=[float(s) for s in obj["step_scores"]],
            gold_first_error=gold[pid],
        ))
    return records


def validate_predictions(path) -> list:
    """Schema check for a predictions JSONL file; returns a list of warning
    strings (empty when clean)."""
    warnings = []
    known_keys = {"problem_id", "step_scores"}
    for lineno, obj in enumerate(read_jsonl(path), start=1):
        if "problem_id" not in obj:
            warnings.append(f"line {lineno}: missing problem_id")
        if "step_scores" not in obj:
            warnings.append(f"line {lineno}: missing step_scores")
            continue
        scores = obj["step_scores"]
        if not isinstance(scores, list) or not scores:
            warnings.append(f"line {lineno}: step_scores must be a non-empty list")
            continue
        for s in scores:
            if not isinstance(s, (int, float)) or not (0.0 <= float(s) <= 1.0):
                warnings.append(f"line {lineno}: step score {s!r} outside [0, 1]")
                break
        extra = set(obj) - known_keys
        if extra:
            warnings.append(f"line {lineno}: unexpected keys {sorted(extra)}")
    return warnings


def evaluate_records(records, grid=None) -> dict:
    """Full metric report over joined eval records: step-level ROC-AUC and
    Wasserstein separation in probability space, plus the best-F1 threshold
    sweep."""
    scores, labels = [], []
    for rec in records:
        step_labels = step_labels_from_first_error(len(rec.step_scores),
                                                   rec.gold_first_error)
        scores.extend(rec.step_scores)
        labels.extend(step_labels)
    correct_scores = [s for s, l in zip(scores, labels) if l]
    incorrect_scores = [s for s, l in zip(scores, labels) if not l]
    sweep = sweep_threshold(records, grid)
    err_hits, err_total, corr_hits, corr_total = _split_hits(records, sweep["best_threshold"])
    acc = processbench_f1(err_hits, err_total, corr_hits, corr_total)
    return {
        "roc_auc": roc_auc(scores, labels),
        "err_acc": acc["err_acc"],
        "corr_acc": acc["corr_acc"],
        "f1": acc["f1"],
        "best_threshold": sweep["best_threshold"],
        "wasserstein1": wasserstein1(correct_scores, incorrect_scores),
        "counts": {
            "trajectories": len(records),
            "error_cases": err_total,
            "correct_cases": corr_total,
            "steps": len(scores),
        },
    }
