"""Training and scoring on the labeled-dataset JSONL interchange format.

Input records carry {problem_id, step_index, step_text, soft_label}; records
are grouped into trajectories on step_index == 0 boundaries. Predictions are
exported as {problem_id, step_scores} lines, the format the companion
evaluation CLI consumes.
"""

import json
import logging
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .model import PAD_ID, StepRewardModel, TrainerConfig, encode_trajectory

log = logging.getLogger(__name__)


@dataclass
class TrajectoryBatchItem:
    problem_id: str
    token_ids: list
    marker_positions: list
    targets: list  # empty when scoring


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fin:
        for line in fin:
            line = line.strip()
            if line:
                yield json.loads(line)


def load_labeled(path, config: TrainerConfig) -> list:
    """Group labeled step records into per-trajectory training items."""
    groups = []
    current = None
    for lineno, rec in enumerate(read_jsonl(path), start=1):
        try:
            pid = str(rec["problem_id"])
            step_index = int(rec["step_index"])
            text = rec["step_text"]
            label = float(rec["soft_label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: malformed record ({exc})") from exc
        if not 0.0 < label < 1.0:
            raise ValueError(f"line {lineno}: soft_label {label} outside (0, 1)")
        if step_index == 0 or current is None or current["problem_id"] != pid:
            current = {"problem_id": pid, "texts": [], "labels": []}
            groups.append(current)
        current["texts"].append(text)
        current["labels"].append(label)
    if not groups:
        raise ValueError("labeled file contains no records")
    items = []
    for g in groups:
        ids, markers = encode_trajectory(g["texts"], config)
        items.append(TrajectoryBatchItem(g["problem_id"], ids, markers, g["labels"]))
    return items


def _collate(items, device="cpu"):
    width = max(len(item.token_ids) for item in items)
    batch = torch.full((len(items), width), PAD_ID, dtype=torch.long, device=device)
    for row, item in enumerate(items):
        batch[row, : len(item.token_ids)] = torch.tensor(item.token_ids,
                                                         dtype=torch.long)
    return batch


def train_prm(data_path, config: TrainerConfig, checkpoint_path=None) -> dict:
    """Fit the reward model with BCE against soft labels at marker positions.

    Returns the checkpoint payload (also written to checkpoint_path when
    given): weights, config, and a manifest with the per-epoch loss curve.
    """
    torch.manual_seed(config.seed)
    items = load_labeled(data_path, config)
    model = StepRewardModel(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    bce = nn.BCELoss()
    generator = torch.Generator().manual_seed(config.seed)

    losses = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(items), generator=generator).tolist()
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [items[i] for i in order[start: start + config.batch_size]]
            batch = _collate(chunk)
            scores = model(batch)
            preds, targets = [], []
            for row, item in enumerate(chunk):
                preds.append(scores[row, item.marker_positions])
                targets.append(torch.tensor(item.targets, dtype=scores.dtype))
            loss = bce(torch.cat(preds), torch.cat(targets))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        losses.append(epoch_loss / n_batches)
        log.info("epoch %d: bce %.6f", epoch + 1, losses[-1])

    payload = {
        "state_dict": model.state_dict(),
        "config": asdict(config),
        "manifest": {
            "epoch_losses": losses,
            "final_loss": losses[-1],
            "trajectories": len(items),
            "steps": sum(len(i.targets) for i in items),
            "head_activation": config.activation,
        },
    }
    if checkpoint_path is not None:
        torch.save(payload, checkpoint_path)
    return payload


def load_checkpoint(path) -> tuple:
    payload = torch.load(path, weights_only=False)
    config = TrainerConfig(**payload["config"])
    model = StepRewardModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config, payload["manifest"]


def score_steps(model: StepRewardModel, config: TrainerConfig,
                input_path, output_path) -> dict:
    """Score a trajectories JSONL ({problem_id, steps:[...]}) and write one
    {problem_id, step_scores} line per input trajectory. Per-item failures
    are reported, not fatal."""
    model.eval()
    written = 0
    failures = []
    with torch.no_grad(), open(output_path, "w", encoding="utf-8",
                               newline="\n") as fout:
        for lineno, rec in enumerate(read_jsonl(input_path), start=1):
            try:
                pid = str(rec["problem_id"])
                ids, markers = encode_trajectory(rec["steps"], config)
                batch = _collate([TrajectoryBatchItem(pid, ids, markers, [])])
                scores = model(batch)[0, markers]
            except (KeyError, TypeError, ValueError) as exc:
                failures.append(f"line {lineno}: {exc}")
                log.warning("line %d: %s", lineno, exc)
                continue
            fout.write(json.dumps({
                "problem_id": pid,
                "step_scores": [float(s) for s in scores],
            }, ensure_ascii=False) + "\n")
            written += 1
    return {"written": written, "failures": failures}
