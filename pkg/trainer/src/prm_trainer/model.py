"""Tokenization and the reward model.

The tokenizer is a fixed hash bucketing of whitespace tokens — no learned
vocabulary, so any text maps to ids deterministically across runs and
machines. A dedicated marker token is appended after every reasoning step;
the scalar head is read at the marker positions only.
"""

import hashlib
from dataclasses import dataclass, field

import torch
from torch import nn

PAD_ID = 0
MARKER_ID = 1
_RESERVED = 2


@dataclass
class TrainerConfig:
    vocab_size: int = 4096
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    dim_feedforward: int = 128
    max_len: int = 512
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    activation: str = "tanh"          # head non-linearity
    marker_token: int = MARKER_ID

    def __post_init__(self):
        if self.vocab_size <= _RESERVED:
            raise ValueError("vocab_size must exceed the reserved ids")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.activation not in _HEAD_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


_HEAD_ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU, "gelu": nn.GELU}


def encode_text(text: str, vocab_size: int) -> list:
    """Hash each whitespace token into a fixed bucket id (stable across
    processes, unlike builtin hash)."""
    ids = []
    for token in text.split():
        digest = hashlib.sha1(token.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "big") % (vocab_size - _RESERVED)
        ids.append(_RESERVED + bucket)
    return ids


def encode_trajectory(step_texts, config: TrainerConfig):
    """Token ids for a whole trajectory with a marker after each step.

    Returns (ids, marker_positions); the sequence is truncated to max_len but
    never in a way that drops a marker silently — steps whose marker would
    fall outside the window raise.
    """
    ids, markers = [], []
    for text in step_texts:
        ids.extend(encode_text(text, config.vocab_size))
        ids.append(config.marker_token)
        markers.append(len(ids) - 1)
    if len(ids) > config.max_len:
        raise ValueError(
            f"trajectory of {len(ids)} tokens exceeds max_len={config.max_len}")
    return ids, markers


class StepRewardModel(nn.Module):
    """Small transformer encoder with a two-affine-layer scalar head.

    The head squashes through a sigmoid so every position's output lies in
    (0, 1); callers read it at the step marker positions.
    """

    def __init__(self, config: TrainerConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model,
                                  padding_idx=PAD_ID)
        self.pos = nn.Embedding(config.max_len, config.d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=config.d_model, nhead=config.n_heads,
            dim_feedforward=config.dim_feedforward,
            batch_first=True, dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.n_layers)
        self.head = nn.Sequential(
            nn.Linear(config.d_model, config.d_model),
            _HEAD_ACTIVATIONS[config.activation](),
            nn.Linear(config.d_model, 1),
        )

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(batch, seq) int ids -> (batch, seq) per-position scores in (0,1)."""
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        x = self.embed(token_ids) + self.pos(positions)[None, :, :]
        padding_mask = token_ids == PAD_ID
        x = self.encoder(x, src_key_padding_mask=padding_mask)
        logits = self.head(x).squeeze(-1)
        return torch.sigmoid(logits)

    def step_scores(self, token_ids: torch.Tensor, marker_positions) -> torch.Tensor:
        """Scores gathered at the marker positions of a single sequence."""
        scores = self.forward(token_ids)
        return scores[0, marker_positions]
