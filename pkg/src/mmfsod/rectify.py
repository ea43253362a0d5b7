"""Rich-text semantic rectification (training-time only).

A small transformer ``f_theta`` predicts a category's token sequence in both
directions from the refined text tokens, cross-attending to a composite
feature ``p`` built from the category prototype and the query map.  The loss
is half the summed negative log-likelihood of the ground-truth tokens over
the forward targets (positions 2..M) and backward targets (1..M-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .aggregation import MultiHeadAttention, as_tensor, causal_mask
from .corpus import TokenSequence

DIRECTIONS = ("forward", "backward")


def composite_feature(prototype, query_encoded) -> torch.Tensor:
    """Average the category prototype into every query position."""
    s, q = as_tensor(prototype), as_tensor(query_encoded)
    if s.ndim != 1 or q.ndim != 2 or s.shape[0] != q.shape[1]:
        raise ValueError(
            f"prototype {tuple(s.shape)} and query map {tuple(q.shape)} disagree on d")
    return (q + s) / 2


@dataclass
class SequencePrediction:
    """Logits for the M-1 predictable positions of one direction."""

    logits: torch.Tensor
    direction: str

    def targets(self, seq: TokenSequence) -> list[int]:
        ids = list(seq.ids)
        return ids[1:] if self.direction == "forward" else ids[:-1]


class RectifierLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.ReLU(), nn.Linear(ffn_mult * d, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, memory, mask):
        x = self.norm1(x + self.self_attn(x, x, x, mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory))
        return self.norm3(x + self.ffn(x))


class RectifierModel(nn.Module):
    def __init__(self, d: int, vocab_size: int, layers: int = 2, heads: int = 4):
        super().__init__()
        self.d, self.vocab_size = d, vocab_size
        self.layers = nn.ModuleList(RectifierLayer(d, heads) for _ in range(layers))
        self.direction_embedding = nn.Parameter(torch.randn(2, d) * 0.02)
        self.out_proj = nn.Linear(d, vocab_size)

    def forward(self, tokens, memory, direction: str):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        x = tokens + self.direction_embedding[DIRECTIONS.index(direction)]
        mask = causal_mask(tokens.shape[0], direction)
        for layer in self.layers:
            x = layer(x, memory, mask)
        return self.out_proj(x)


def predict_sequence(model: RectifierModel, refined_tokens, p, direction: str) -> SequencePrediction:
    """Teacher-forced next-token logits in one reading direction.

    The forward row for target j comes from position j-1, which attends only
    to positions < j; the backward row for target j comes from position j+1.
    """
    tokens = as_tensor(refined_tokens)
    p = as_tensor(p)
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ValueError("need at least two tokens (BOS, EOS) to predict anything")
    if tokens.shape[1] != model.d or p.shape[-1] != model.d:
        raise ValueError("token / composite feature width does not match the rectifier")
    hidden_logits = model(tokens, p, direction)
    logits = hidden_logits[:-1] if direction == "forward" else hidden_logits[1:]
    return SequencePrediction(logits, direction)


class SequenceNLL(torch.autograd.Function):
    """Summed cross-entropy of integer targets under row-wise softmax."""

    @staticmethod
    def forward(ctx, logits, targets):
        lse = torch.logsumexp(logits, dim=1)
        picked = logits.gather(1, targets[:, None]).squeeze(1)
        ctx.save_for_backward(logits, targets, lse)
        return (lse - picked).sum()

    @staticmethod
    def backward(ctx, grad_out):
        logits, targets, lse = ctx.saved_tensors
        grad = torch.exp(logits - lse[:, None])
        grad[torch.arange(len(targets)), targets] -= 1.0
        return grad * grad_out, None


def sequence_nll(logits, targets) -> torch.Tensor:
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ValueError(
            f"{logits.shape[0]} prediction rows for {targets.shape[0]} targets")
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError("target id outside the vocabulary")
    return SequenceNLL.apply(logits, targets)


def rectification_loss(forward: Sequence[SequencePrediction],
                       backward: Sequence[SequencePrediction],
                       ground_truth: Sequence[TokenSequence],
                       normalize: bool = False) -> torch.Tensor:
    """Half the summed bidirectional token NLL over all categories.

    With ``normalize`` the sum is divided by the number of targets per
    direction.
    """
    if not (len(forward) == len(backward) == len(ground_truth)):
        raise ValueError("one forward and one backward prediction per category required")
    if not ground_truth:
        raise ValueError("no categories to rectify")
    total_f, total_b, n_targets = 0.0, 0.0, 0
    for fwd, bwd, seq in zip(forward, backward, ground_truth):
        if fwd.direction != "forward" or bwd.direction != "backward":
            raise ValueError("prediction directions are swapped")
        if fwd.logits.shape[0] != len(seq) - 1 or bwd.logits.shape[0] != len(seq) - 1:
            raise ValueError(
                f"sequence of length {len(seq)} needs {len(seq) - 1} predictions per direction")
        total_f = total_f + sequence_nll(fwd.logits, fwd.targets(seq))
        total_b = total_b + sequence_nll(bwd.logits, bwd.targets(seq))
        n_targets += len(seq) - 1
    loss = 0.5 * (total_f + total_b)
    return loss / n_targets if normalize else loss
