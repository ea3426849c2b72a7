"""Continuous integrate-and-fire segmentation.

Frame weights ``alpha`` are accumulated left to right; each time the running
total crosses a multiple of the threshold ``beta`` a segment is emitted. On
the cumulative axis frame ``t`` occupies ``[S_{t-1}, S_t]`` and segment ``k``
occupies ``[(k-1) beta, k beta]``, so the weight of frame ``t`` inside
segment ``k`` is the length of the overlap of the two intervals. This is the
same split-and-carry rule as the usual sequential loop, including several
fires inside one heavy frame, but it vectorises and differentiates cleanly
once the firing pattern is held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoders import FrameBatch
from .nn import Linear, Module
from .tensor import Tensor, conv1d, dropout, parameter, relu, sigmoid


class DegenerateInputError(ValueError):
    pass


class ConsistencyError(RuntimeError):
    pass


@dataclass
class SegmentBatch:
    segments: Tensor                     # [B, L_max, d]
    counts: np.ndarray                   # [B]
    firing_frames: list = field(default_factory=list)
    weights: Optional[Tensor] = None     # [B, L_max, T]

    @property
    def mask(self) -> np.ndarray:
        L = self.segments.shape[1]
        return np.arange(L)[None, :] < self.counts[:, None]


class AlphaPredictor(Module):
    """conv1d(k=3) -> dropout -> ReLU -> affine -> sigmoid, one weight per frame."""

    def __init__(self, d: int, rng: np.random.Generator, width: int = 3, p_drop: float = 0.5):
        scale = np.sqrt(1.0 / (width * d))
        self.kernel = parameter(rng.normal(0.0, scale, size=(width, d, d)))
        self.bias = parameter(np.zeros(d))
        self.head = Linear(d, 1, rng)
        self.p_drop = p_drop

    def __call__(self, frames: Tensor, mask: np.ndarray, rng=None) -> Tensor:
        return compute_alpha(frames, mask, self.kernel, self.bias, self.head,
                             p_drop=self.p_drop, training=self.training, rng=rng)


def compute_alpha(frames: Tensor, mask: np.ndarray, kernel: Tensor, bias: Tensor,
                  head: Linear, p_drop: float = 0.5, training: bool = False, rng=None) -> Tensor:
    """Per-frame weights in (0, 1); padded frames are exactly 0."""
    h = conv1d(frames, kernel, bias)
    h = relu(dropout(h, p_drop, training, rng))
    logits = head(h).reshape(frames.shape[0], frames.shape[1])
    return sigmoid(logits) * mask


def scale_alpha(alpha: Tensor, target: np.ndarray) -> Tensor:
    """Rescale each row so that it sums to its target length."""
    totals = alpha.sum(axis=1, keepdims=True)
    if np.any(totals.data <= 0):
        raise DegenerateInputError("cannot rescale weights that sum to zero")
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    return alpha / totals * target


def quantity_loss(alpha: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of ``|sum_t alpha_t - L|``."""
    target = np.asarray(target, dtype=np.float64)
    return (alpha.sum(axis=1) - target).abs().mean()


def cif_target_length(lengths, ratio: float = 0.05) -> np.ndarray:
    """``max(1, round(ratio * length))`` with round-half-to-even."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    lengths = np.asarray(lengths, dtype=np.float64)
    return np.maximum(1, np.round(ratio * lengths)).astype(np.int64)


def firing_pattern(alpha_row: np.ndarray, beta: float = 1.0, tail: float = 0.5,
                   expected: Optional[int] = None) -> tuple[int, list[int]]:
    """Number of segments and the frame of each fire for one utterance.

    ``alpha_row`` holds the valid frames only. Fires happen at the first
    frame whose cumulative weight reaches ``k * beta``; leftover weight
    above ``tail`` becomes a final segment credited to the last frame.
    With ``expected`` the count is corrected by at most one.
    """
    cum = np.cumsum(alpha_row)
    total = cum[-1] if len(cum) else 0.0
    n_fire = int(np.floor(total / beta))
    while n_fire > 0 and n_fire * beta > total:
        n_fire -= 1
    while (n_fire + 1) * beta <= total:
        n_fire += 1
    fires = np.searchsorted(cum, beta * np.arange(1, n_fire + 1), side="left").tolist()
    residual = total - n_fire * beta
    count = n_fire
    tail_emitted = residual > tail
    if tail_emitted:
        count += 1
        fires.append(len(alpha_row) - 1)
    if expected is not None:
        gap = count - expected
        if abs(gap) > 1 or (gap == -1 and tail_emitted):
            raise ConsistencyError(
                f"integrate-and-fire produced {count} segments, expected {expected}"
            )
        if gap == -1:
            count += 1
            fires.append(len(alpha_row) - 1)
        elif gap == 1:
            count -= 1
            fires.pop()
    return count, fires


def _cif_weights(alpha: Tensor, counts: np.ndarray, beta: float) -> Tensor:
    """Overlap of frame intervals with segment intervals, ``[B, L_max, T]``."""
    a = alpha.data
    B, T = a.shape
    L = max(1, int(counts.max()) if len(counts) else 1)
    upper_cum = np.cumsum(a, axis=1)                                 # S_t
    lower_cum = np.concatenate([np.zeros((B, 1)), upper_cum[:, :-1]], axis=1)  # S_{t-1}
    k = np.arange(1, L + 1, dtype=np.float64)[None, :, None]
    seg_hi = k * beta
    seg_lo = (k - 1) * beta
    S_hi = upper_cum[:, None, :]
    S_lo = lower_cum[:, None, :]
    hi_from_frame = S_hi < seg_hi
    lo_from_frame = S_lo > seg_lo
    hi = np.where(hi_from_frame, S_hi, seg_hi)
    lo = np.where(lo_from_frame, S_lo, seg_lo)
    overlap = hi - lo
    rows = np.arange(L)[None, :, None] < counts[:, None, None]
    active = (overlap > 0) & rows
    w = np.where(active, overlap, 0.0)
    d_hi = (active & hi_from_frame).astype(np.float64)
    d_lo = (active & lo_from_frame).astype(np.float64)

    def backward(g):
        dS = (g * d_hi).sum(axis=1)
        dS_prev = -(g * d_lo).sum(axis=1)
        dS[:, :-1] += dS_prev[:, 1:]
        return (np.cumsum(dS[:, ::-1], axis=1)[:, ::-1],)

    return Tensor._make(w, (alpha,), backward)


def integrate_and_fire(frames, alpha: Tensor, lengths: Optional[np.ndarray] = None,
                       beta: float = 1.0, tail: float = 0.5,
                       expected: Optional[Sequence[int]] = None) -> SegmentBatch:
    """Aggregate frames into segments.

    ``frames`` is a :class:`FrameBatch` or a ``[B, T, d]`` tensor. Gradients
    reach both ``frames`` and ``alpha``; the firing pattern is a constant of
    the forward pass.
    """
    if isinstance(frames, FrameBatch):
        lengths = frames.lengths if lengths is None else lengths
        frames = frames.features
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    B, T = alpha.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
    # weight on padded frames must not leak into the partial sums
    alpha = alpha * (np.arange(T)[None, :] < lengths[:, None])
    counts = np.zeros(B, dtype=np.int64)
    fires = []
    for b in range(B):
        exp_b = None if expected is None else int(expected[b])
        counts[b], f = firing_pattern(alpha.data[b, : lengths[b]], beta, tail, exp_b)
        fires.append(f)
    # segment rows past n_fire reach beyond S_T, so a residual row collects
    # exactly the leftover weight and a truncated batch simply has fewer rows
    weights = _cif_weights(alpha, counts, beta)
    segments = weights @ frames
    return SegmentBatch(segments, counts, fires, weights)


def reference_integrate_and_fire(frames: np.ndarray, alpha: np.ndarray, beta: float = 1.0,
                                 tail: float = 0.5, expected: Optional[int] = None):
    """Sequential scalar loop; the oracle for :func:`integrate_and_fire`.

    Operates on one unpadded utterance and returns ``(segments, fires)``.
    """
    d = frames.shape[1]
    segments, fires = [], []
    acc = 0.0
    state = np.zeros(d)
    for t in range(len(alpha)):
        remaining = float(alpha[t])
        while acc + remaining >= beta:
            used = beta - acc
            segments.append(state + used * frames[t])
            fires.append(t)
            remaining -= used
            acc = 0.0
            state = np.zeros(d)
        acc += remaining
        state = state + remaining * frames[t]
    if acc > tail:
        segments.append(state)
        fires.append(len(alpha) - 1)
    if expected is not None:
        if len(segments) == expected - 1:
            segments.append(state)
            fires.append(len(alpha) - 1)
        elif len(segments) == expected + 1:
            segments.pop()
            fires.pop()
    return np.array(segments).reshape(-1, d), fires
