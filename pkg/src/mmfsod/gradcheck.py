"""Finite-difference checks of the hand-written backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .aggregation import aggregate, aggregate_forward, task_encoding, task_encoding_backward
from .corpus import TokenSequence
from .rectify import SequencePrediction, rectification_loss

EPS = 1e-4
TOLERANCE = 1e-4
# Entries whose gradient is tiny are compared against this floor instead of
# their own magnitude, so round-off on near-zero entries does not dominate.
REL_FLOOR = 1e-3


class GradcheckError(ValueError):
    pass


def central_difference(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                       eps: float = EPS) -> list[torch.Tensor]:
    """Numerical gradient of the scalar ``fn(*inputs)`` w.r.t. every input."""
    grads = []
    for idx, x in enumerate(inputs):
        g = torch.zeros_like(x)
        flat, gflat = x.reshape(-1), g.reshape(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            up = fn(*inputs).item()
            flat[j] = orig - eps
            down = fn(*inputs).item()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor],
                   floor: float = REL_FLOOR) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
        worst = max(worst, float(((a - n).abs() / scale).max()))
    return worst


def _instance_task_encoding(rng):
    hw, c1, d = 6, 4, 8
    A = torch.softmax(torch.as_tensor(rng.normal(size=(hw, c1))), dim=1)
    T = torch.as_tensor(rng.normal(size=(c1, d)))
    R = torch.as_tensor(rng.normal(size=(hw, d)))
    gA, gT = task_encoding_backward(A, T, R)
    num = central_difference(lambda a, t: (task_encoding(a, t) * R).sum(), [A.clone(), T.clone()])
    return relative_error([gA, gT], num)


def _instance_aggregate(rng):
    hw, c1, d = 6, 4, 8
    Q, S, T = (torch.as_tensor(rng.normal(size=s)) for s in ((hw, d), (c1, d), (c1, d)))
    R = torch.as_tensor(rng.normal(size=(hw, d)))
    leaves = [x.clone().requires_grad_(True) for x in (Q, S, T)]
    (aggregate(*leaves) * R).sum().backward()
    analytic = [x.grad for x in leaves]
    num = central_difference(lambda q, s, t: (aggregate_forward(q, s, t) * R).sum(), [Q, S, T])
    return relative_error(analytic, num)


def _instance_rectification(rng):
    vocab, n_cat = 7, 2
    seqs, fwd, bwd = [], [], []
    for _ in range(n_cat):
        m = int(rng.integers(2, 6))
        seqs.append(TokenSequence((0, *rng.integers(2, vocab, m - 2).tolist(), 1)))
        fwd.append(torch.as_tensor(rng.normal(size=(m - 1, vocab))))
        bwd.append(torch.as_tensor(rng.normal(size=(m - 1, vocab))))

    def loss(*logits):
        half = len(logits) // 2
        return rectification_loss([SequencePrediction(x, "forward") for x in logits[:half]],
                                  [SequencePrediction(x, "backward") for x in logits[half:]],
                                  seqs)

    inputs = [*fwd, *bwd]
    leaves = [x.clone().requires_grad_(True) for x in inputs]
    loss(*leaves).backward()
    num = central_difference(loss, inputs)
    return relative_error([x.grad for x in leaves], num)


SELECTORS = {
    "task_encoding": _instance_task_encoding,
    "aggregate": _instance_aggregate,
    "rectification_loss": _instance_rectification,
}


def gradcheck(selector: str, seed: int = 0, instances: int = 20,
              tolerance: float = TOLERANCE) -> dict:
    """Max relative error between analytic and numerical gradients over
    ``instances`` random double-precision problems."""
    if selector not in SELECTORS:
        raise GradcheckError(f"unknown gradcheck target {selector!r}; "
                             f"choose from {', '.join(SELECTORS)}")
    rng = np.random.default_rng(seed)
    errors = [SELECTORS[selector](rng) for _ in range(instances)]
    worst = max(errors)
    return {"selector": selector, "seed": seed, "instances": instances, "eps": EPS,
            "max_rel_error": worst, "tolerance": tolerance, "passed": worst <= tolerance}
