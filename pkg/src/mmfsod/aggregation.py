"""Multi-modal prototype aggregation.

Query features ``Q`` (HW x d) are matched against fused support prototypes
``S`` ((C+1) x d, background last) and mapped onto class-agnostic task
prototypes ``T``::

    A  = softmax(Q S^T / sqrt(d))
    Q1 = (A sigmoid(S)) * Q
    Q2 = A T
    out = Q1 + Q2

``aggregate`` runs through :class:`AggregateFunction`, whose backward pass is
written out by hand rather than left to autograd.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backends import QueryFeatureMap, sinusoidal_table


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, QueryFeatureMap):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_shapes(Q: torch.Tensor, S: torch.Tensor) -> None:
    if Q.ndim != 2 or S.ndim != 2:
        raise ValueError("Q and S must be matrices")
    if Q.shape[1] != S.shape[1]:
        raise ValueError(f"feature widths differ: Q has d={Q.shape[1]}, S has d={S.shape[1]}")
    if S.shape[0] < 2:
        raise ValueError("S needs at least one category row plus the background row")


def feature_matching_coefficients(Q, S) -> torch.Tensor:
    """Row-stochastic matching matrix A of shape (HW, C+1)."""
    Q, S = as_tensor(Q), as_tensor(S)
    _check_shapes(Q, S)
    return torch.softmax(Q @ S.T / math.sqrt(Q.shape[1]), dim=-1)


def foreground_filter(A, S, Q) -> torch.Tensor:
    A, S, Q = as_tensor(A), as_tensor(S), as_tensor(Q)
    _check_shapes(Q, S)
    if A.shape != (Q.shape[0], S.shape[0]):
        raise ValueError(f"A has shape {tuple(A.shape)}, expected {(Q.shape[0], S.shape[0])}")
    return (A @ torch.sigmoid(S)) * Q


def task_encoding(A, T) -> torch.Tensor:
    A, T = as_tensor(A), as_tensor(T)
    if T.shape[0] < A.shape[1]:
        raise ValueError(f"T has {T.shape[0]} rows, need at least {A.shape[1]}")
    return A @ T[: A.shape[1]]


def task_encoding_backward(A, T, grad_out):
    """Gradients of ``task_encoding`` w.r.t. A and the used rows of T."""
    T = T[: A.shape[1]]
    return grad_out @ T.T, A.T @ grad_out


def aggregate_forward(Q, S, T):
    A = feature_matching_coefficients(Q, S)
    return foreground_filter(A, S, Q) + task_encoding(A, T)


def aggregate_backward(Q, S, T, grad_out):
    """Hand-derived gradients of ``aggregate`` w.r.t. (Q, S, T[:C+1])."""
    d = Q.shape[1]
    T = T[: S.shape[0]]
    A = torch.softmax(Q @ S.T / math.sqrt(d), dim=-1)
    G = torch.sigmoid(S)
    P = A @ G
    grad_P = grad_out * Q
    grad_Q = grad_out * P
    grad_A = grad_P @ G.T + grad_out @ T.T
    grad_S = (A.T @ grad_P) * G * (1.0 - G)
    grad_T = A.T @ grad_out
    # softmax Jacobian-vector product, row by row
    grad_Z = A * (grad_A - (grad_A * A).sum(dim=1, keepdim=True))
    grad_Q = grad_Q + grad_Z @ S / math.sqrt(d)
    grad_S = grad_S + grad_Z.T @ Q / math.sqrt(d)
    return grad_Q, grad_S, grad_T


class AggregateFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, Q, S, T):
        ctx.save_for_backward(Q, S, T)
        return aggregate_forward(Q, S, T)

    @staticmethod
    def backward(ctx, grad_out):
        Q, S, T = ctx.saved_tensors
        grad_Q, grad_S, grad_T_used = aggregate_backward(Q, S, T, grad_out)
        grad_T = None
        if ctx.needs_input_grad[2]:
            grad_T = torch.zeros_like(T)
            grad_T[: S.shape[0]] = grad_T_used
        return grad_Q, grad_S, grad_T


def aggregate(Q, S, T) -> torch.Tensor:
    """Foreground-filtered query plus task encoding, shape (HW, d)."""
    Q, S, T = as_tensor(Q), as_tensor(S), as_tensor(T)
    _check_shapes(Q, S)
    if T.shape[0] < S.shape[0] or T.shape[1] != S.shape[1]:
        raise ValueError(f"T of shape {tuple(T.shape)} cannot serve {S.shape[0]} prototypes")
    return AggregateFunction.apply(Q, S, T)


def init_task_prototypes(rows: int, d: int, dtype=torch.float64) -> torch.Tensor:
    if d % 2:
        raise ValueError("task prototypes need an even feature width")
    return torch.as_tensor(sinusoidal_table(rows, d), dtype=dtype)


def fuse_prototypes(vision, language, background_text=None) -> torch.Tensor:
    """Average vision and language prototypes per category.

    ``vision`` has C+1 rows (background last), ``language`` has C.  The
    background row is averaged with ``background_text`` (zeros if omitted).
    """
    vision, language = as_tensor(vision), as_tensor(language)
    if vision.ndim != 2 or language.ndim != 2:
        raise ValueError("prototypes must be matrices")
    if vision.shape[0] != language.shape[0] + 1 or vision.shape[1] != language.shape[1]:
        raise ValueError(
            f"vision {tuple(vision.shape)} must have exactly one more row than "
            f"language {tuple(language.shape)} and the same width")
    if background_text is None:
        background_text = vision.new_zeros(vision.shape[1])
    text_rows = torch.cat([language, as_tensor(background_text).reshape(1, -1)], dim=0)
    return torch.stack([vision, text_rows]).mean(dim=0)


# ---------------------------------------------------------------------------
# attention layers


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over (..., L, d) inputs with an output projection."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"{heads} heads do not divide d={d}")
        self.d, self.heads = d, heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, query, key, value, mask=None):
        """``mask[i, j]`` True lets query row i attend to key row j.

        Every query row must be allowed at least one key.
        """
        if query.shape[-1] != self.d or key.shape[-1] != self.d:
            raise ValueError(f"input width does not match attention width {self.d}")
        batch = query.shape[:-2]
        lq, lk = query.shape[-2], key.shape[-2]
        hd = self.d // self.heads
        q = self.q_proj(query).reshape(*batch, lq, self.heads, hd).transpose(-3, -2)
        k = self.k_proj(key).reshape(*batch, lk, self.heads, hd).transpose(-3, -2)
        v = self.v_proj(value).reshape(*batch, lk, self.heads, hd).transpose(-3, -2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(-3, -2).reshape(*batch, lq, self.d)
        return self.out_proj(out)


class SharedAttentionLayer(nn.Module):
    """Self-attention + residual + layer norm, applied to every modality."""

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(d, heads)
        self.norm = nn.LayerNorm(d)

    @property
    def d(self) -> int:
        return self.attn.d

    @property
    def heads(self) -> int:
        return self.attn.heads

    def forward(self, seq, mask=None):
        """``seq`` is (L, d) or batched (..., L, d)."""
        if seq.ndim < 2 or seq.shape[-2] < 1:
            raise ValueError("shared_encode expects a non-empty (L, d) matrix")
        if seq.shape[-1] != self.d:
            raise ValueError(f"sequence width {seq.shape[-1]} does not match layer d={self.d}")
        return self.norm(seq + self.attn(seq, seq, seq, mask))


def shared_encode(layer: SharedAttentionLayer, seq, mask=None) -> torch.Tensor:
    return layer(as_tensor(seq, dtype=next(layer.parameters()).dtype), mask)


def causal_mask(length: int, direction: str) -> torch.Tensor:
    """``forward``: row i sees columns <= i; ``backward``: columns >= i."""
    i = torch.arange(length)[:, None]
    j = torch.arange(length)[None, :]
    if direction == "forward":
        return j <= i
    if direction == "backward":
        return j >= i
    raise ValueError(f"unknown direction {direction!r}")
