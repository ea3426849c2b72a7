"""Adam with bias correction and a linear warm-up schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "opt/step": np.array(float(self.step)),
            "opt/lr": np.array(self.lr),
            "opt/beta1": np.array(self.beta1),
            "opt/beta2": np.array(self.beta2),
            "opt/eps": np.array(self.eps),
        }
        for name in self.m:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls(
            lr=float(arrays["opt/lr"]),
            beta1=float(arrays["opt/beta1"]),
            beta2=float(arrays["opt/beta2"]),
            eps=float(arrays["opt/eps"]),
            step=int(arrays["opt/step"]),
        )
        for key, value in arrays.items():
            if key.startswith("opt/m/"):
                state.m[key[6:]] = value.copy()
            elif key.startswith("opt/v/"):
                state.v[key[6:]] = value.copy()
        return state


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """Apply one Adam update to every parameter that holds a gradient.

    Raises :class:`NonFiniteGradientError` before touching any parameter
    if a gradient contains NaN or inf.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_fraction: float = 0.05) -> float:
    """Learning rate for 1-based ``step``: linear ramp then constant."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    return base_lr * min(1.0, step / warmup)
