"""Ordinal regression for age prediction.

An integer age ``y`` out of ``num_ranks`` possible months is represented by
``num_ranks - 1`` binary thresholds, where threshold ``k`` answers "is y
greater than k?". The network emits one logit per threshold; the loss is the
mean binary cross-entropy over thresholds, and the predicted age is the sum
of the threshold probabilities.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def encode_rank(y: int, num_ranks: int) -> np.ndarray:
    """Binary threshold vector for rank ``y``: element k is 1 iff y > k."""
    if num_ranks < 2:
        raise ValueError("num_ranks must be at least 2")
    if not 0 <= y < num_ranks:
        raise ValueError(f"rank {y} outside [0, {num_ranks})")
    return (int(y) > np.arange(num_ranks - 1)).astype(np.float64)


def ordinal_loss(logits: torch.Tensor, y) -> torch.Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and the rank encoding.

    Computed with the log-sum-exp form of BCE; probabilities are never
    materialized. ``logits`` may be (num_ranks - 1,) with integer ``y`` or a
    batch (B, num_ranks - 1) with ``y`` of shape (B,); batches reduce to the
    mean over all thresholds of all examples.
    """
    if logits.dim() not in (1, 2):
        raise ValueError(f"expected logits of rank 1 or 2, got shape {tuple(logits.shape)}")
    num_ranks = logits.shape[-1] + 1
    y_t = torch.as_tensor(y, dtype=torch.long, device=logits.device)
    if torch.any(y_t < 0) or torch.any(y_t >= num_ranks):
        raise ValueError(f"rank outside [0, {num_ranks})")
    thresholds = torch.arange(num_ranks - 1, device=logits.device)
    targets = (y_t.reshape(-1, 1) > thresholds[None, :]).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits.reshape(-1, num_ranks - 1), targets)


def decode_age(probabilities) -> float:
    """Predicted age: the sum of the per-threshold probabilities."""
    p = (
        probabilities.detach().cpu().numpy()
        if isinstance(probabilities, torch.Tensor)
        else np.asarray(probabilities, dtype=np.float64)
    )
    p = p.reshape(-1)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(p.sum())


def decode_age_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Ages for a batch of threshold logits, shape (B, num_ranks - 1) -> (B,)."""
    return torch.sigmoid(logits).sum(dim=-1)
