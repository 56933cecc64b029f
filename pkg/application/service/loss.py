"""
Label-smoothed sequence loss over non-pad target positions
"""

from typing import Literal

import numpy as np

from service.errors import UsageError
from service.tasks import PAD_ID
from service.tensor import Tensor, cross_entropy

Reduction = Literal["token", "sentence"]


def label_smoothed_loss(
    logits: Tensor,
    targets: np.ndarray,
    epsilon: float,
    pad_id: int = PAD_ID,
    reduction: Reduction = "token",
) -> Tensor:
    """
    Cross entropy against (1-eps) on gold and eps/(V-1) elsewhere

    Args:
        logits: Tensor shaped [batch, len, V]
        targets: Gold ids shaped [batch, len]
        epsilon: Smoothing mass in [0, 1)
        pad_id: Positions holding this id are excluded
        reduction: "token" averages over every non-pad token of the batch;
            "sentence" sums each sentence's own token mean (one loss per example)

    Returns:
        Scalar loss tensor
    """
    if not 0.0 <= epsilon < 1.0:
        raise UsageError(f"label smoothing must be in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    real = (targets != pad_id).astype(np.float64)

    if reduction == "token":
        count = real.sum()
        if count == 0:
            raise UsageError("every target position is padding")
        weights = real / count
    elif reduction == "sentence":
        per_sentence = real.sum(axis=1, keepdims=True)
        weights = np.divide(real, per_sentence, out=np.zeros_like(real), where=per_sentence > 0)
    else:
        raise UsageError(f"unknown reduction {reduction!r}")

    return cross_entropy(logits, targets, weights.astype(logits.dtype), smoothing=epsilon)
