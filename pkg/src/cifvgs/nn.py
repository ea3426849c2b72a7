"""Parameter containers and the small layer library built on :mod:`tensor`."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import ParameterError, ShapeError, Tensor, concat, parameter


class StatisticsError(ValueError):
    """Batch statistics cannot be formed from the given batch."""


class Module:
    """Owns named parameters and child modules, found through attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every tensor attribute, trainable or frozen, plus named buffers."""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for _, t in self.named_tensors():
            t.requires_grad = False
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_tensors())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, array in state.items():
            if name not in own:
                continue
            target = own[name]
            if target.data.shape != array.shape:
                raise ShapeError(f"{name}: expected {target.data.shape}, got {array.shape}")
            target.data[...] = array


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        scale = 1.0 / math.sqrt(d_in)
        self.weight = parameter(rng.normal(0.0, scale, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.shift = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + self.eps).sqrt() * self.gain + self.shift


class StatNorm(Module):
    """Batch normalisation whose output statistics are pinned to targets.

    Training batches are standardised with their own mean and variance and
    then mapped onto ``target_mean``/``target_std``; the running estimates
    (momentum 0.1) replace the batch statistics in evaluation mode. There
    is no learnable affine part.
    """

    def __init__(self, target_mean: np.ndarray, target_std: np.ndarray,
                 momentum: float = 0.1, eps: float = 1e-5):
        target_std = np.asarray(target_std, dtype=np.float64)
        if np.any(target_std <= 0):
            raise ParameterError("target_std must be strictly positive")
        d = target_std.shape[0]
        self.target_mean = Tensor(target_mean)
        self.target_std = Tensor(target_std)
        self.running_mean = Tensor(np.zeros(d))
        self.running_var = Tensor(np.ones(d))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return normalize_to_stats(
            x,
            self.running_mean.data,
            self.running_var.data,
            self.target_mean.data,
            self.target_std.data,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


def normalize_to_stats(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    target_mean: np.ndarray,
    target_std: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """``(x - mu) / sqrt(var + eps) * target_std + target_mean`` over rows of ``x``.

    In training mode ``mu``/``var`` come from the batch (population
    variance) and the running arrays are updated in place; otherwise the
    running arrays are used as-is.
    """
    if np.any(np.asarray(target_std) <= 0):
        raise ParameterError("target_std must be strictly positive")
    if x.ndim != 2:
        raise ShapeError(f"normalize_to_stats expects [N, d], got {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise StatisticsError("batch statistics need at least two rows")
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data[0]
        running_var *= 1.0 - momentum
        running_var += momentum * var.data[0]
        normed = centered / (var + eps).sqrt()
    else:
        normed = (x - running_mean) * (1.0 / np.sqrt(running_var + eps))
    return normed * target_std + target_mean


def sinusoidal_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


def pad_rows(rows: list[Tensor], length: int, fill: Optional[Tensor] = None) -> Tensor:
    """Stack ``[n_i, d]`` tensors into ``[len(rows), length, d]``, padding the tail."""
    d = rows[0].shape[-1]
    padded = []
    for r in rows:
        missing = length - r.shape[0]
        if missing > 0:
            tail = Tensor(np.zeros((missing, d))) if fill is None else fill.broadcast_to((missing, d))
            r = concat([r, tail], axis=0)
        padded.append(r.reshape(1, length, d))
    return concat(padded, axis=0)
