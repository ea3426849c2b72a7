"""Masked decoupled contrastive loss and the combined training objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Module
from .tensor import Tensor, as_tensor, l2_normalize, masked_logsumexp, parameter


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    parallel: float = 1.0
    cascaded: float = 1.0
    quantity: float = 0.25

    def __post_init__(self):
        if min(self.parallel, self.cascaded, self.quantity) < 0:
            raise ValueError("loss weights must be nonnegative")


class Temperature(Module):
    """Trainable temperature stored as a log, clamped to ``[1e-3, 10]``."""

    def __init__(self, init: float = 0.07, lo: float = 1e-3, hi: float = 10.0):
        self.log_tau = parameter(np.array(math.log(init)))
        self._bounds = (math.log(lo), math.log(hi))

    def __call__(self) -> Tensor:
        return self.log_tau.clip(*self._bounds).exp()

    @property
    def value(self) -> float:
        return float(np.exp(np.clip(self.log_tau.data, *self._bounds)))


def cosine_matrix(A: Tensor, I: Tensor) -> Tensor:
    """All pairwise cosines between rows of ``A`` and rows of ``I``."""
    return l2_normalize(as_tensor(A), axis=1) @ l2_normalize(as_tensor(I), axis=1).T


def check_relatedness(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=bool)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise MaskError(f"relatedness matrix must be square, got {M.shape}")
    if not np.all(np.diag(M)):
        raise MaskError("matched pairs must be related (M_ii = 1)")
    for axis, label in ((1, "row"), (0, "column")):
        if not np.all(M.any(axis=axis)) or not np.all((~M).any(axis=axis)):
            raise MaskError(f"every {label} of M needs at least one related and one unrelated entry")
    return M


def masked_contrastive(A: Tensor, I: Tensor, M: np.ndarray, tau) -> Tensor:
    """Symmetric masked decoupled contrastive loss.

    Each direction averages ``-log(sum_pos exp(cos/tau) / sum_neg exp(cos/tau))``
    over its queries, where positives are the related entries of ``M``.
    The result is a log-ratio and can be negative.
    """
    M = check_relatedness(M)
    logits = cosine_matrix(A, I) / tau
    a_to_i = masked_logsumexp(logits, M, axis=1) - masked_logsumexp(logits, ~M, axis=1)
    i_to_a = masked_logsumexp(logits, M, axis=0) - masked_logsumexp(logits, ~M, axis=0)
    return (a_to_i.mean() + i_to_a.mean()) * -0.5


def loss_cascaded_plus(cascaded, quantity, w: LossWeights = LossWeights()):
    return w.cascaded * cascaded + w.quantity * quantity


def loss_hybrid(parallel, cascaded, w: LossWeights = LossWeights()):
    return w.parallel * parallel + w.cascaded * cascaded


def loss_hybrid_plus(parallel, cascaded, quantity, w: LossWeights = LossWeights()):
    return w.parallel * parallel + w.cascaded * cascaded + w.quantity * quantity
