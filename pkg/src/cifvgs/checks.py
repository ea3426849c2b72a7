"""Finite-difference checks of the differentiable building blocks."""

from __future__ import annotations

import numpy as np

from .cif import compute_alpha, integrate_and_fire
from .encoders import EncoderLayer
from .losses import masked_contrastive
from .nn import Linear, normalize_to_stats
from .quantizer import Codebook, vector_quantize
from .tensor import conv1d, grad_check, parameter

TOLERANCE = 1e-4


def _probe(rng, shape):
    # fixed random readout so every output coordinate reaches the scalar
    return rng.normal(size=shape)


def check_conv1d(rng) -> float:
    x = parameter(rng.normal(size=(2, 6, 3)))
    k = parameter(rng.normal(size=(3, 3, 4)))
    b = parameter(rng.normal(size=4))
    R = _probe(rng, (2, 6, 4))
    return grad_check(lambda: (conv1d(x, k, b) * R).sum(), [x, k, b])


def check_transformer_layer(rng) -> float:
    layer = EncoderLayer(8, 2, 16, rng)
    x = parameter(rng.normal(size=(2, 5, 8)))
    valid = np.arange(5)[None, :] < np.array([5, 3])[:, None]
    R = _probe(rng, (2, 5, 8)) * valid[..., None]
    return grad_check(lambda: (layer(x, valid) * R).sum(), [x] + layer.parameters())


def check_compute_alpha(rng) -> float:
    frames = parameter(rng.normal(size=(2, 7, 4)))
    mask = np.arange(7)[None, :] < np.array([7, 5])[:, None]
    kernel = parameter(rng.normal(0, 0.5, size=(3, 4, 4)))
    bias = parameter(rng.normal(size=4))
    head = Linear(4, 1, rng)
    R = _probe(rng, (2, 7))

    def f():
        return (compute_alpha(frames, mask, kernel, bias, head) * R).sum()

    return grad_check(f, [frames, kernel, bias] + head.parameters())


def check_integrate_and_fire(rng) -> float:
    # partial sums stay well away from whole numbers and from the tail threshold
    alpha = parameter(np.array([[0.3, 0.45, 0.6, 0.2, 0.55, 0.35, 0.4, 0.25],
                                [0.7, 0.5, 0.6, 0.45, 0.3, 0.0, 0.0, 0.0]]))
    frames = parameter(rng.normal(size=(2, 8, 3)))
    lengths = np.array([8, 5])
    R = _probe(rng, (2, 3, 3))

    def f():
        seg = integrate_and_fire(frames, alpha, lengths)
        return (seg.segments * R[:, : seg.segments.shape[1]]).sum()

    return grad_check(f, [frames, alpha])


def check_vector_quantize(rng) -> float:
    cb = Codebook(
        embeddings=rng.normal(size=(6, 4)),
        token_strings=[f"t{i}" for i in range(6)],
        is_stop_word=np.zeros(6, dtype=bool),
        is_word_initial=np.ones(6, dtype=bool),
        end_id=5,
    )
    z = parameter(rng.normal(size=(5, 4)))
    R = _probe(rng, (5, 4))

    def f():
        _, _, probs = vector_quantize(z, cb, temperature=0.5)
        return ((probs @ cb.embeddings) * R).sum()

    return grad_check(f, [z])


def check_normalize_to_stats(rng) -> float:
    x = parameter(rng.normal(size=(6, 4)))
    target_mean, target_std = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
    R = _probe(rng, (6, 4))

    def f():
        out = normalize_to_stats(x, np.zeros(4), np.ones(4), target_mean, target_std, training=True)
        return (out * R).sum()

    return grad_check(f, [x])


def check_masked_contrastive(rng) -> float:
    A = parameter(rng.normal(size=(4, 5)))
    I = parameter(rng.normal(size=(4, 5)))
    tau = parameter(np.array(0.5))
    M = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=bool)
    return grad_check(lambda: masked_contrastive(A, I, M, tau), [A, I, tau])


SUITE = {
    "conv1d": check_conv1d,
    "transformer_layer": check_transformer_layer,
    "compute_alpha": check_compute_alpha,
    "integrate_and_fire": check_integrate_and_fire,
    "vector_quantize_soft": check_vector_quantize,
    "normalize_to_stats": check_normalize_to_stats,
    "masked_contrastive": check_masked_contrastive,
}


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per check; each check draws from its own stream."""
    return {
        name: fn(np.random.default_rng([seed, i])) for i, (name, fn) in enumerate(SUITE.items())
    }
