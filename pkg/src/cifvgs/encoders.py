"""Image, text and speech encoders.

The image and text encoders form the toy contrastive image/text pair that
is trained once and then frozen. The speech side is a frozen stack of
convolutional "hidden layers" mixed by a learnable softmax weighting,
followed by a trainable transformer that prepends learnable CLS vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .nn import LayerNorm, Linear, Module, sinusoidal_table
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    conv1d,
    dropout,
    parameter,
    relu,
    softmax,
)


class ConfigurationError(ValueError):
    pass


class DataError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


@dataclass
class FrameBatch:
    """Padded frame features ``[B, T_max, d]`` plus the valid length of each row."""

    features: Union[np.ndarray, Tensor]
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        T = self.features.shape[1]
        if np.any(self.lengths > T) or np.any(self.lengths < 0):
            raise ShapeError(f"valid lengths {self.lengths} outside [0, {T}]")

    @classmethod
    def from_sequences(cls, seqs: Sequence[np.ndarray]) -> "FrameBatch":
        if not seqs or any(len(s) == 0 for s in seqs):
            raise DataError("every sequence needs at least one frame")
        T = max(len(s) for s in seqs)
        d = seqs[0].shape[1]
        out = np.zeros((len(seqs), T, d))
        for i, s in enumerate(seqs):
            out[i, : len(s)] = s
        return cls(out, np.array([len(s) for s in seqs]))

    @property
    def mask(self) -> np.ndarray:
        T = self.features.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]

    @property
    def batch_size(self) -> int:
        return self.features.shape[0]


# -- transformer ----------------------------------------------------------------


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ConfigurationError(f"d_model {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng, bias=False)  # a key bias cancels in the softmax
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        B, T, d = x.shape
        h, dh = self.n_heads, d // self.n_heads

        def split(t):
            return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        # exp(-1e9 - max) underflows to exactly 0, so padded keys carry no weight
        scores = scores + np.where(valid, 0.0, -1e9)[:, None, None, :]
        ctx = softmax(scores, axis=-1) @ v
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(B, T, d))


class EncoderLayer(Module):
    """Post-norm transformer block: attention and a ReLU feed-forward."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator, p_drop: float = 0.0):
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, d_ff, rng)
        self.ff2 = Linear(d_ff, d, rng)
        self.norm2 = LayerNorm(d)
        self.p_drop = p_drop

    def __call__(self, x: Tensor, valid: np.ndarray, rng=None) -> Tensor:
        a = dropout(self.attn(x, valid), self.p_drop, self.training, rng)
        x = self.norm1(x + a)
        f = dropout(self.ff2(relu(self.ff1(x))), self.p_drop, self.training, rng)
        return self.norm2(x + f)


class TransformerEncoder(Module):
    def __init__(self, d: int, n_layers: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, max_len: int = 512, p_drop: float = 0.0):
        self.d = d
        self.max_len = max_len
        self.layers = [EncoderLayer(d, n_heads, d_ff, rng, p_drop) for _ in range(n_layers)]
        self._positions = sinusoidal_table(max_len, d)

    def positions(self, start: int, length: int) -> np.ndarray:
        if start + length > self.max_len:
            raise ConfigurationError(
                f"sequence needs {start + length} positions, table holds {self.max_len}"
            )
        return self._positions[start : start + length]

    def __call__(self, x: Tensor, valid: np.ndarray, rng=None) -> Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"expected width {self.d}, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer(x, valid, rng)
        return x


# -- speech side ------------------------------------------------------------------


class SpeechFeatureExtractor(Module):
    """Frozen conv1d+ReLU stack whose hidden states are mixed by ``softmax(w)``."""

    def __init__(self, d_in: int, d_model: int, n_hidden: int, rng: np.random.Generator, width: int = 3):
        self.kernels = []
        self.biases = []
        d = d_in
        for _ in range(n_hidden):
            scale = math.sqrt(2.0 / (width * d))
            self.kernels.append(Tensor(rng.normal(0.0, scale, size=(width, d, d_model))))
            self.biases.append(Tensor(rng.normal(0.0, 0.1, size=d_model)))
            d = d_model
        self.layer_logits = parameter(np.zeros(n_hidden))

    @property
    def n_hidden(self) -> int:
        return len(self.kernels)

    def named_tensors(self, prefix: str = ""):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            yield f"{prefix}conv.{i}.kernel", k
            yield f"{prefix}conv.{i}.bias", b
        yield f"{prefix}layer_logits", self.layer_logits

    def named_parameters(self, prefix: str = ""):
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def hidden_states(self, raw: FrameBatch) -> list[Tensor]:
        mask = raw.mask[..., None]
        x = Tensor(np.asarray(raw.features) * mask)
        states = []
        for k, b in zip(self.kernels, self.biases):
            # re-mask so padding never leaks into valid frames at the next layer
            x = relu(conv1d(x, k, b)) * mask
            states.append(x)
        return states

    def __call__(self, raw: FrameBatch) -> FrameBatch:
        if np.any(raw.lengths == 0):
            raise DataError("empty speech sequence")
        states = self.hidden_states(raw)
        weights = softmax(self.layer_logits, axis=0)
        mixed = states[0] * weights[0]
        for i in range(1, len(states)):
            mixed = mixed + states[i] * weights[i]
        return FrameBatch(mixed, raw.lengths)


class ClsBank(Module):
    def __init__(self, n_cls: int, d: int, rng: np.random.Generator):
        self.vectors = parameter(rng.normal(0.0, 1.0, size=(n_cls, d)))

    def __len__(self) -> int:
        return self.vectors.shape[0]


def encode_with_cls(fb: FrameBatch, cls: Optional[ClsBank], encoder: TransformerEncoder,
                    rng=None) -> tuple[Optional[Tensor], Tensor]:
    """Prepend the CLS vectors, run the masked transformer, split the output.

    Frames receive sinusoidal positions offset by the number of CLS rows;
    the CLS rows themselves carry no positional term, so a zero-layer
    encoder returns them untouched.
    """
    feats = fb.features if isinstance(fb.features, Tensor) else Tensor(fb.features)
    B, T, d = feats.shape
    n_cls = 0 if cls is None else len(cls)
    frames = feats * fb.mask[..., None] + encoder.positions(n_cls, T)
    if n_cls == 0:
        out = encoder(frames, fb.mask, rng)
        return None, out
    head = cls.vectors.reshape(1, n_cls, d).broadcast_to((B, n_cls, d))
    seq = concat([head, frames], axis=1)
    valid = np.concatenate([np.ones((B, n_cls), dtype=bool), fb.mask], axis=1)
    out = encoder(seq, valid, rng)
    return out[:, :n_cls], out[:, n_cls:]


# -- toy image/text pair -----------------------------------------------------------


class TextEncoder(Module):
    """Token table + positions -> transformer -> value at the last valid token."""

    def __init__(self, vocab_size: int, d: int, n_layers: int, n_heads: int,
                 rng: np.random.Generator, max_len: int = 64):
        self.token_embedding = parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)))
        self.encoder = TransformerEncoder(d, n_layers, n_heads, 4 * d, rng, max_len=max_len)
        self.proj = Linear(d, d, rng)

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    def encode_text(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        T = ids.shape[1]
        valid = np.arange(T)[None, :] < lengths[:, None]
        used = ids[valid]
        if used.size and (used.min() < 0 or used.max() >= self.vocab_size):
            raise VocabularyError(f"token id outside [0, {self.vocab_size})")
        safe = np.where(valid, ids, 0)
        return self.encode_token_embeddings(self.token_embedding[safe], lengths)

    def encode_token_embeddings(self, embs: Tensor, lengths: np.ndarray) -> Tensor:
        lengths = np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1):
            raise ShapeError("text sequences need at least one token")
        B, L, d = embs.shape
        valid = np.arange(L)[None, :] < lengths[:, None]
        x = embs + self.encoder.positions(0, L)
        h = self.encoder(x, valid)
        pooled = h[np.arange(B), lengths - 1]
        return self.proj(pooled)


class ImageEncoder(Module):
    def __init__(self, d_img: int, d_e: int, rng: np.random.Generator, hidden: int = 64):
        self.d_img = d_img
        self.fc1 = Linear(d_img, hidden, rng)
        self.fc2 = Linear(hidden, d_e, rng)

    def __call__(self, img) -> Tensor:
        img = img if isinstance(img, Tensor) else Tensor(img)
        if img.ndim != 2 or img.shape[1] != self.d_img:
            raise ShapeError(f"expected images [B, {self.d_img}], got {img.shape}")
        return self.fc2(relu(self.fc1(img)))
