"""Codebook lookups: straight-through vector quantisation and nearest tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ParameterError, Tensor, l2_normalize, softmax, straight_through


@dataclass
class Codebook:
    """Frozen token inventory taken from the text encoder's embedding table."""

    embeddings: np.ndarray
    token_strings: list
    is_stop_word: np.ndarray
    is_word_initial: np.ndarray
    end_id: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.is_stop_word = np.asarray(self.is_stop_word, dtype=bool)
        self.is_word_initial = np.asarray(self.is_word_initial, dtype=bool)
        V = self.embeddings.shape[0]
        if len(set(self.token_strings)) != len(self.token_strings):
            raise ValueError("token strings must be unique")
        if not (len(self.token_strings) == len(self.is_stop_word) == len(self.is_word_initial) == V):
            raise ValueError("codebook fields disagree on the vocabulary size")
        self.mean = self.embeddings.mean(axis=0)
        self.std = self.embeddings.std(axis=0)
        if np.any(self.std <= 0):
            raise ValueError("codebook embeddings have a constant dimension")
        norms = np.linalg.norm(self.embeddings, axis=1, keepdims=True)
        self.unit = self.embeddings / norms
        self._index = {tok: i for i, tok in enumerate(self.token_strings)}

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def id_of(self, token: str) -> int:
        return self._index[token]


def vector_quantize(z: Tensor, cb: Codebook, temperature: float = 0.1):
    """Snap ``z`` (``[..., d_e]``) onto codebook rows by cosine similarity.

    Returns ``(q, ids, probs)``. ``q`` equals the embedding of the arg-max
    token in the forward pass, while its adjoint is passed on as if
    ``q = probs @ E`` with ``probs = softmax(cos / temperature)``.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    cos = l2_normalize(z, axis=-1) @ cb.unit.T
    ids = np.argmax(cos.data, axis=-1)
    probs = softmax(cos * (1.0 / temperature), axis=-1)
    soft = probs @ cb.embeddings
    q = straight_through(cb.embeddings[ids], soft)
    return q, ids, probs


def nearest_topk(z, cb: Codebook, k: int) -> list:
    """``k`` tokens by descending cosine to ``z``; ties go to the lower id."""
    if not 1 <= k <= cb.size:
        raise ValueError(f"k must lie in [1, {cb.size}], got {k}")
    vec = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    cos = cb.unit @ (vec / np.linalg.norm(vec))
    order = np.lexsort((np.arange(cb.size), -cos))[:k]
    return [(cb.token_strings[i], float(cos[i])) for i in order]


def topk_ids(z: np.ndarray, cb: Codebook, k: int) -> np.ndarray:
    """Row-wise ``nearest_topk`` ids for ``z`` of shape ``[N, d_e]``."""
    z = np.asarray(z, dtype=np.float64)
    cos = (z / np.linalg.norm(z, axis=1, keepdims=True)) @ cb.unit.T
    ids = np.arange(cb.size)
    out = np.empty((len(z), k), dtype=np.int64)
    for n, row in enumerate(cos):
        out[n] = np.lexsort((ids, -row))[:k]
    return out


def token_strings(ids: Sequence[int], cb: Codebook) -> list:
    return [cb.token_strings[i] for i in ids]
