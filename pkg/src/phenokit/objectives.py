"""Classification, regression and contrastive losses and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, l2_normalize_rows, linear, log_softmax_rows


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 100.0
    lambda3: float = 1.0
    tau: float = 1.0
    normalize_embeddings: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "tau"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


# Weights quoted alongside the combined objective, and the optimum of the
# (lambda2, lambda3) sensitivity sweep with lambda1 fixed at 1.
DEFAULT_WEIGHTS = LossWeights(0.1, 100.0, 1.0)
SWEEP_OPTIMUM_WEIGHTS = LossWeights(1.0, 1000.0, 10.0)
WEIGHT_PRESETS = {"default": DEFAULT_WEIGHTS, "sweep_optimum": SWEEP_OPTIMUM_WEIGHTS}


def _one_hot(labels, n: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range [0, {n})")
    out = np.zeros((labels.size, n), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def loss_cls(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    b, n = logits.shape
    if len(labels) != b:
        raise ValueError("one label per row required")
    target = Tensor._wrap(_one_hot(labels, n, logits.dtype))
    return -(log_softmax_rows(logits) * target).sum() / float(b)


def loss_mse(z_hat: Tensor, z) -> Tensor:
    """Mean squared residual over every scalar in the batch."""
    z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=z_hat.dtype))
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z_hat.shape} vs {z.shape}")
    r = z - z_hat
    return (r * r).mean()


def loss_con(z_hat: Tensor, z, tau: float = 1.0, normalize: bool = False) -> Tensor:
    """Contrastive loss pairing each prediction with its own target row.

    Row i scores ``z_hat_i . z_j / tau`` for every j in the batch (j == i
    included) and the loss is the mean negative log-probability of j == i.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=z_hat.dtype))
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z_hat.shape} vs {z.shape}")
    b = z_hat.shape[0]
    if b < 1:
        raise ValueError("empty batch")
    if normalize:
        z_hat, z = l2_normalize_rows(z_hat), l2_normalize_rows(z)
    scores = linear(z_hat, z) * (1.0 / tau)
    eye = Tensor._wrap(np.eye(b, dtype=z_hat.dtype))
    return -(log_softmax_rows(scores) * eye).sum() / float(b)


def loss_total(cls, mse, con, weights: LossWeights = DEFAULT_WEIGHTS):
    """Weighted sum; works on Tensors and on plain floats."""
    return cls * weights.lambda1 + mse * weights.lambda2 + con * weights.lambda3
