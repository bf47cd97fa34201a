"""Command-line entry point.

Subcommands mirror the pipeline stages: negatives, label, normalize, eval,
bon, releff, stats. Config precedence is CLI flag > config file (TOML) >
built-in default; every labeling run writes a manifest with the fully
resolved configuration.

Exit codes: 0 success, 1 partial (some items skipped), 2 invalid input or
configuration.
"""

import argparse
import json
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import evaluate, pipeline
from .core import load_problems, load_trajectories, normalize_answer, read_jsonl, write_jsonl
from .pipeline import CompositionSpec, NormalizationConfig, normalize_rewards
from .rewards import CannotFillError, CPMIConfig, MCConfig, PAVConfig, generate_hard_negatives
from .scorer import CostLedger, DecodingParams, HTTPBackend, SyntheticBackend
from .core import AnswerSet

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_INVALID = 2


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fin:
        return tomllib.load(fin)


def _setting(args_value, config_section: dict, key: str, default):
    """CLI flag > config file > default."""
    if args_value is not None:
        return args_value
    if key in config_section:
        return config_section[key]
    return default


def build_backend(args, config: dict, seed: int):
    section = config.get("scorer", {})
    kind = _setting(getattr(args, "backend", None), section, "kind", "synthetic")
    if kind == "synthetic":
        spec = _setting(getattr(args, "backend_spec", None), section, "spec", None)
        if spec:
            return SyntheticBackend.from_spec_file(spec, seed=seed)
        return SyntheticBackend(seed=seed)
    if kind in ("http", "http_openai_compatible"):
        endpoint = _setting(getattr(args, "endpoint", None), section, "endpoint", None)
        model = _setting(getattr(args, "model", None), section, "model", None)
        if not endpoint or not model:
            raise ValueError("http backend requires --endpoint and --model")
        return HTTPBackend(endpoint=endpoint, model=model)
    raise ValueError(f"unknown backend kind {kind!r}")


def _add_backend_flags(parser):
    parser.add_argument("--backend", choices=["synthetic", "http"], default=None)
    parser.add_argument("--backend-spec", default=None,
                        help="synthetic backend table file (JSONL)")
    parser.add_argument("--endpoint", default=None)
    parser.add_argument("--model", default=None)
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None)


def cmd_negatives(args) -> int:
    config = load_config(args.config)
    seed = _setting(args.seed, config.get("scorer", {}), "seed", 0)
    m = _setting(args.m, config.get("cpmi", {}), "m", 4)
    backend = build_backend(args, config, seed)
    problems = load_problems(args.problems)
    ledger = CostLedger()
    records = []
    failures = 0
    for problem in problems:
        try:
            answers = generate_hard_negatives(problem, backend, m, ledger=ledger)
            records.append({
                "problem_id": problem.id,
                "gold": answers.gold,
                "negatives": answers.negatives,
            })
        except CannotFillError as exc:
            log.warning("%s", exc)
            failures += 1
            records.append({
                "problem_id": problem.id,
                "gold": normalize_answer(problem.gold_answer),
                "negatives": [],
                "error": "cannot_fill",
            })
    write_jsonl(args.out, records)
    print(json.dumps({"problems": len(problems), "cannot_fill": failures,
                      "ledger": ledger.report()}))
    return EXIT_PARTIAL if failures else EXIT_OK


def _load_negatives_file(path) -> dict:
    negatives = {}
    for obj in read_jsonl(path):
        if obj.get("error"):
            continue
        negatives[str(obj["problem_id"])] = AnswerSet(
            gold=obj["gold"], negatives=list(obj["negatives"]))
    return negatives


def cmd_label(args) -> int:
    config = load_config(args.config)
    scorer_cfg = config.get("scorer", {})
    cpmi_cfg = config.get("cpmi", {})
    mc_cfg = config.get("mc", {})
    pav_cfg = config.get("pav", {})
    norm_cfg = config.get("normalize", {})
    comp_cfg = config.get("composition", {})

    seed = _setting(args.seed, scorer_cfg, "seed", 0)
    backend = build_backend(args, config, seed)
    method = args.method.replace("-", "_")

    cpmi_config = CPMIConfig(
        m=_setting(args.m, cpmi_cfg, "m", 4),
        k=_setting(args.k, cpmi_cfg, "k", 4),
        baseline_mode=_setting(args.baseline_mode, cpmi_cfg, "baseline_mode",
                               "question_only"),
        variant=method if method in ("gold_only", "neg_only") else "cpmi",
    )
    mc_config = MCConfig(t=_setting(args.t, mc_cfg, "t", 8))
    pav_config = PAVConfig(
        alpha=_setting(args.alpha, pav_cfg, "alpha", 1.0),
        prover_t=_setting(None, pav_cfg, "prover_t", 4),
        prover_backend=backend,
        policy_backend=backend,
    )
    norm_config = NormalizationConfig(
        scope=_setting(args.scope, norm_cfg, "scope", "global"),
        epsilon=_setting(None, norm_cfg, "epsilon", 1e-6),
    )
    composition = None
    total = _setting(args.total, comp_cfg, "total", None)
    if total is not None:
        composition = CompositionSpec(
            total=int(total),
            source_ratio=tuple(comp_cfg.get("source_ratio", (1, 1))),
            mixed_to_pure=tuple(comp_cfg.get("mixed_to_pure", (7, 3))),
        )

    problems = load_problems(args.problems)
    trajectories = load_trajectories(args.trajectories)
    negatives = _load_negatives_file(args.negatives) if args.negatives else None

    result = pipeline.build_dataset(
        problems, trajectories, method, backend,
        composition=composition,
        seed=seed,
        parallelism=args.parallelism,
        cpmi_config=cpmi_config,
        mc_config=mc_config,
        pav_config=pav_config,
        norm_config=norm_config,
        negatives=negatives,
        merge_index=args.merge_index,
        run_id=args.run_id,
    )
    result.manifest["config_file"] = args.config
    pipeline.write_build_result(result, args.out, args.manifest)
    print(json.dumps({"records": len(result.records), "skipped": result.skipped,
                      "ledger": result.ledger.report()}))
    return EXIT_PARTIAL if result.skipped else EXIT_OK


def cmd_normalize(args) -> int:
    config = load_config(args.config) if args.config else {}
    norm_cfg = config.get("normalize", {})
    norm_config = NormalizationConfig(
        scope=_setting(args.scope, norm_cfg, "scope", "global"),
        epsilon=_setting(args.epsilon, norm_cfg, "epsilon", 1e-6),
    )
    records = list(read_jsonl(args.input))
    if not records:
        raise ValueError("input file contains no records")
    raw = [float(rec["raw_reward"]) for rec in records]
    if norm_config.scope == "global":
        soft = normalize_rewards(raw, norm_config)
    else:
        soft = []
        start = 0
        for end in range(1, len(records) + 1):
            boundary = end == len(records) or records[end]["step_index"] == 0
            if boundary:
                soft.extend(normalize_rewards(raw[start:end], norm_config))
                start = end
    for rec, s in zip(records, soft):
        rec["soft_label"] = s
    write_jsonl(args.out, records)
    print(json.dumps({"records": len(records), "scope": norm_config.scope}))
    return EXIT_OK


def cmd_eval(args) -> int:
    records = evaluate.load_eval_records(args.predictions, args.gold)
    report = evaluate.evaluate_records(records)
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fout:
            fout.write(payload + "\n")
    print(payload)
    return EXIT_OK


def _load_candidates(path) -> dict:
    grouped = {}
    for obj in read_jsonl(path):
        cand = evaluate.BoNCandidate(
            candidate_id=str(obj["candidate_id"]),
            step_scores=[float(s) for s in obj["step_scores"]],
            extracted_answer=obj.get("extracted_answer"),
        )
        grouped.setdefault(str(obj["problem_id"]), []).append(cand)
    return grouped


def cmd_bon(args) -> int:
    grouped = _load_candidates(args.candidates)
    if not grouped:
        raise ValueError("candidate file contains no records")
    gold = {}
    if args.problems:
        gold = {p.id: normalize_answer(p.gold_answer) for p in load_problems(args.problems)}
    selections = {}
    hits = scored = 0
    for pid, candidates in sorted(grouped.items()):
        if args.n is not None:
            candidates = candidates[: args.n]
        chosen_id = evaluate.best_of_n(candidates, aggregation=args.aggregation)
        selections[pid] = chosen_id
        if pid in gold:
            chosen = next(c for c in candidates if c.candidate_id == chosen_id)
            scored += 1
            if chosen.extracted_answer is not None and \
                    normalize_answer(chosen.extracted_answer) == gold[pid]:
                hits += 1
    report = {"selections": selections}
    if scored:
        report["bon"] = {"n": args.n, "accuracy": hits / scored}
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_releff(args) -> int:
    value = evaluate.relative_efficiency(evaluate.EfficiencyInput(
        quality=args.qm, cost=args.cm,
        baseline_quality=args.qb, baseline_cost=args.cb,
    ))
    print(json.dumps({"releff": value}))
    return EXIT_OK


def cmd_stats(args) -> int:
    records = list(read_jsonl(args.input))
    if not records:
        raise ValueError("labeled file contains no records")
    source_of = {}
    if args.problems:
        source_of = {p.id: p.source for p in load_problems(args.problems)}

    trajectories = []
    current = None
    for rec in records:
        if rec["step_index"] == 0 or current is None or \
                rec["problem_id"] != current["problem_id"]:
            current = {"problem_id": rec["problem_id"], "labels": []}
            trajectories.append(current)
        current["labels"].append(float(rec["soft_label"]) >= 0.5)

    mixed = sum(1 for t in trajectories if len(set(t["labels"])) == 2)
    pure = len(trajectories) - mixed
    source_counts = {}
    for t in trajectories:
        source = source_of.get(t["problem_id"], "unknown")
        source_counts[source] = source_counts.get(source, 0) + 1
    report = {
        "records": len(records),
        "trajectories": len(trajectories),
        "mixed": mixed,
        "pure": pure,
        "source_counts": source_counts,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prm-forge",
                                     description="Step-level reward labeling and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("negatives", help="generate hard-negative answer sets")
    p.add_argument("--problems", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=None)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_negatives)

    p = sub.add_parser("label", help="label trajectories and build a dataset")
    p.add_argument("--problems", required=True)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--method", required=True,
                   choices=["mc", "pav", "cpmi", "cpmi-merge", "rand-merge",
                            "gold-only", "neg-only"])
    p.add_argument("--negatives", default=None, help="pre-supplied negatives JSONL")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--baseline-mode", choices=["question_only", "previous_prefix"],
                   default=None)
    p.add_argument("--merge-index", type=int, default=1)
    p.add_argument("--scope", choices=["global", "per_trajectory"], default=None)
    p.add_argument("--total", type=int, default=None, help="composition total")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--run-id", default=None)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("normalize", help="attach soft labels to raw rewards")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scope", choices=["global", "per_trajectory"], default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("eval", help="metric report from predictions + gold")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bon", help="best-of-N candidate selection")
    p.add_argument("--candidates", required=True)
    p.add_argument("--problems", default=None, help="gold answers for accuracy")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--aggregation", choices=["mean", "min", "last"], default="mean")
    p.set_defaults(func=cmd_bon)

    p = sub.add_parser("releff", help="relative efficiency of method vs baseline")
    p.add_argument("--qm", type=float, required=True)
    p.add_argument("--cm", type=float, required=True)
    p.add_argument("--qb", type=float, required=True)
    p.add_argument("--cb", type=float, required=True)
    p.set_defaults(func=cmd_releff)

    p = sub.add_parser("stats", help="composition summary of a labeled dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--problems", default=None)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError,
            pipeline.CompositionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
