"""Model assembly, toy contrastive pretraining and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .cif import AlphaPredictor, cif_target_length, integrate_and_fire, quantity_loss, scale_alpha
from .datagen import ConceptVocab, load_manifest, load_vocab, relatedness, stable_seed
from .encoders import (
    ClsBank,
    ConfigurationError,
    FrameBatch,
    ImageEncoder,
    SpeechFeatureExtractor,
    TextEncoder,
    TransformerEncoder,
    encode_with_cls,
)
from .evaluate import (
    KeywordReport,
    aggregate,
    construct_words,
    keyword_metrics_bpe,
    keyword_metrics_word,
    retrieval_recall,
)
from .losses import (
    LossWeights,
    Temperature,
    loss_cascaded_plus,
    loss_hybrid,
    loss_hybrid_plus,
    masked_contrastive,
)
from .nn import Linear, Module, StatNorm
from .optim import AdamState, adam_step, warmup_lr
from .quantizer import Codebook, topk_ids, vector_quantize
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("parallel", "cascaded", "cascaded_plus", "hybrid", "hybrid_plus")


class TrainingError(RuntimeError):
    pass


class PretrainError(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------------


@dataclass
class VariantConfig:
    variant: str = "hybrid_plus"
    K: int = 8
    lambda_p: float = 1.0
    lambda_c: float = 1.0
    lambda_q: float = 0.25
    cif_ratio: float = 0.05
    scaling_steps: int = 300
    cif_beta: float = 1.0
    cif_tail: float = 0.5
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.05
    seed: int = 0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_hidden: int = 4
    alpha_dropout: float = 0.5
    vq_temperature: float = 0.1
    eval_every: int = 100
    data_dir: str = ""
    clip_checkpoint: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant '{self.variant}'")
        if self.uses_cls_cascade and self.K < 1:
            raise ConfigurationError("CLS-based cascaded variants need K >= 1")
        if self.steps < 1 or self.batch_size < 2:
            raise ConfigurationError("steps must be >= 1 and batch_size >= 2")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.lambda_c, self.lambda_q)

    @property
    def has_parallel(self) -> bool:
        return self.variant in ("parallel", "hybrid", "hybrid_plus")

    @property
    def uses_cls_cascade(self) -> bool:
        return self.variant in ("cascaded", "hybrid")

    @property
    def uses_cif(self) -> bool:
        return self.variant in ("cascaded_plus", "hybrid_plus")

    @property
    def has_cascade(self) -> bool:
        return self.uses_cls_cascade or self.uses_cif

    @property
    def n_cls(self) -> int:
        return int(self.has_parallel) + (self.K if self.uses_cls_cascade else 0)


# Full-scale reference sizes; not defaults at desk scale.
PRESETS = {
    "full_base": {"d_model": 768, "scaling_steps": 5000},
    "full_large": {"d_model": 1024, "scaling_steps": 5000},
}


def parse_config(text: str, cls=VariantConfig, base: Optional[dict] = None):
    """Parse ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = dict(base or {})
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if value not in PRESETS:
                raise ConfigurationError(f"config line {lineno}: unknown preset '{value}'")
            values.update(PRESETS[value])
            continue
        if key not in fields:
            raise ConfigurationError(f"config line {lineno}: unknown key '{key}'")
        values[key] = _coerce(fields[key], value, lineno)
    return cls(**values)


def _coerce(f: dataclasses.Field, value: str, lineno: int):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigurationError(f"config line {lineno}: bad value '{value}' for {f.name}") from None
    return value


def format_config(cfg) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# -- data ----------------------------------------------------------------------------


@dataclass
class Utterance:
    scene: int
    frames: np.ndarray
    tokens: list
    alignment: list
    concepts: tuple


@dataclass
class Split:
    scenes: list
    utterances: list = field(default_factory=list)

    def __post_init__(self):
        if not self.utterances:
            for i, s in enumerate(self.scenes):
                for c in s.captions:
                    self.utterances.append(Utterance(i, c.frames, c.tokens, c.alignment, tuple(s.concepts)))
        self.images = (
            np.stack([s.image_feature for s in self.scenes]) if self.scenes else np.zeros((0, 0))
        )

    @classmethod
    def from_manifest(cls, path) -> "Split":
        return cls(load_manifest(path))


def load_splits(data_dir, names: Sequence[str] = ("train", "dev", "test")) -> dict[str, Split]:
    return {n: Split.from_manifest(Path(data_dir) / f"{n}.manifest") for n in names}


def sample_batch(split: Split, size: int, rng: np.random.Generator):
    """Random caption/image pairs whose relatedness matrix is usable by the loss."""
    for _ in range(100):
        idx = rng.choice(len(split.utterances), size=size, replace=False)
        utts = [split.utterances[i] for i in idx]
        M = relatedness([u.concepts for u in utts])
        if (~M).any(axis=1).all():
            return utts, M
    raise TrainingError("could not draw a batch with unrelated pairs")


# -- toy image/text model --------------------------------------------------------------


@dataclass
class ClipConfig:
    d_e: int = 32
    n_layers: int = 2
    n_heads: int = 4
    image_hidden: int = 64
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    warmup_fraction: float = 0.05
    eval_every: int = 250
    target_r1: float = 0.8
    token_drop: float = 0.3
    seed: int = 0


class ToyClip(Module):
    def __init__(self, vocab_size: int, d_img: int, cfg: ClipConfig):
        rng = np.random.default_rng(stable_seed("clip", cfg.seed))
        self.image_encoder = ImageEncoder(d_img, cfg.d_e, rng, hidden=cfg.image_hidden)
        self.text_encoder = TextEncoder(vocab_size, cfg.d_e, cfg.n_layers, cfg.n_heads, rng)
        self.temperature = Temperature()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"img/{k}": v for k, v in self.image_encoder.state_dict().items()}
        out.update({f"txt/{k}": v for k, v in self.text_encoder.state_dict().items()})
        out["txt/temperature"] = self.temperature.log_tau.data.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.image_encoder.load_state_dict(_strip(arrays, "img/"))
        text = _strip(arrays, "txt/")
        self.temperature.log_tau.data[...] = text.pop("temperature")
        self.text_encoder.load_state_dict(text)


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def make_codebook(clip: ToyClip, vocab: ConceptVocab) -> Codebook:
    return Codebook(
        embeddings=clip.text_encoder.token_embedding.data.copy(),
        token_strings=list(vocab.tokens),
        is_stop_word=vocab.is_stop,
        is_word_initial=vocab.is_word_initial,
        end_id=vocab.end_id,
    )


def _pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, np.array([len(s) for s in seqs])


def _drop_tokens(tokens: list, p: float, rng: np.random.Generator) -> list:
    body = tokens[:-1]
    keep = rng.random(len(body)) >= p
    if not keep.any():
        keep[rng.integers(len(body))] = True
    return [t for t, k in zip(body, keep) if k] + tokens[-1:]


def text_to_image_r1(clip: ToyClip, split: Split, chunk: int = 256) -> float:
    with no_grad():
        img = clip.image_encoder(split.images).data
        txt = []
        for i in range(0, len(split.utterances), chunk):
            ids, lens = _pad_ids([u.tokens for u in split.utterances[i : i + chunk]])
            txt.append(clip.text_encoder.encode_text(ids, lens).data)
    truth = [u.scene for u in split.utterances]
    return retrieval_recall(np.concatenate(txt), img, truth, ks=(1,))["speech_to_image"][1]


def pretrain_toy_clip(vocab: ConceptVocab, train: Split, dev: Split, cfg: ClipConfig = ClipConfig(),
                      progress=None) -> tuple[ToyClip, list]:
    """Contrastively train the image and text encoders, then freeze them.

    Captions are randomly thinned (``token_drop``) so that short token
    sequences, such as a handful of quantised segments, still land near
    their image. Training stops early once dev text->image R@1 reaches
    ``target_r1``. Returns the frozen model and ``(step, loss, dev_r1)``
    evaluation history.
    """
    clip = ToyClip(vocab.size, vocab.d_img, cfg)
    clip.train()
    params = dict(clip.named_parameters())
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(stable_seed("clip-batches", cfg.seed))
    history = []
    r1 = 0.0
    for step in range(1, cfg.steps + 1):
        state.lr = warmup_lr(cfg.lr, step, cfg.steps, cfg.warmup_fraction)
        utts, M = sample_batch(train, cfg.batch_size, rng)
        seqs = [_drop_tokens(u.tokens, cfg.token_drop, rng) for u in utts]
        ids, lens = _pad_ids(seqs)
        txt = clip.text_encoder.encode_text(ids, lens)
        img = clip.image_encoder(train.images[[u.scene for u in utts]])
        loss = masked_contrastive(txt, img, M, clip.temperature())
        clip.zero_grad()
        loss.backward()
        adam_step(state, params)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            r1 = text_to_image_r1(clip, dev)
            history.append((step, loss.item(), r1))
            if progress:
                progress(step, loss.item(), r1)
            if r1 >= cfg.target_r1:
                break
    chance = 1.0 / max(1, len(dev.scenes))
    if r1 < 2 * chance:
        raise PretrainError(f"toy CLIP dev R@1 {r1:.4f} below twice chance ({2 * chance:.4f})")
    clip.eval().freeze()
    return clip, history


def load_clip(path, vocab: ConceptVocab, cfg: ClipConfig = ClipConfig()) -> ToyClip:
    arrays = ckpt.load_checkpoint(path)
    d_e = arrays["txt/token_embedding"].shape[1]
    clip = ToyClip(vocab.size, vocab.d_img, dataclasses.replace(cfg, d_e=d_e))
    clip.load_arrays(arrays)
    return clip.eval().freeze()


# -- speech model ---------------------------------------------------------------------


def _speech_batch(utts: Sequence[Utterance]) -> FrameBatch:
    return FrameBatch.from_sequences([u.frames for u in utts])


class SpeechModel(Module):
    """Trainable speech branch for one of the five variants."""

    def __init__(self, cfg: VariantConfig, clip: ToyClip, codebook: Codebook, d_a: int):
        self._cfg = cfg
        self._clip = clip
        self._codebook = codebook
        d_e = codebook.embeddings.shape[1]

        def rng(part):
            return np.random.default_rng(stable_seed("speech", cfg.seed, part))

        self.extractor = SpeechFeatureExtractor(d_a, cfg.d_model, cfg.n_hidden, rng("extractor"))
        self.cls = ClsBank(cfg.n_cls, cfg.d_model, rng("cls")) if cfg.n_cls else None
        self.encoder = TransformerEncoder(cfg.d_model, cfg.n_layers, cfg.n_heads, 4 * cfg.d_model,
                                          rng("encoder"))
        if cfg.has_parallel:
            self.parallel_proj = Linear(cfg.d_model, d_e, rng("parallel_proj"))
            self.parallel_tau = Temperature()
        if cfg.has_cascade:
            self.cascaded_proj = Linear(cfg.d_model, d_e, rng("cascaded_proj"))
            self.stat_norm = StatNorm(codebook.mean, codebook.std)
            self.cascaded_tau = Temperature()
        if cfg.uses_cif:
            self.alpha = AlphaPredictor(cfg.d_model, rng("alpha"), p_drop=cfg.alpha_dropout)

    @property
    def config(self) -> VariantConfig:
        return self._cfg

    @property
    def codebook(self) -> Codebook:
        return self._codebook

    def _encode(self, raw: FrameBatch, rng=None):
        feats = self.extractor(raw)
        return encode_with_cls(feats, self.cls, self.encoder, rng)

    def _quantize(self, z_flat: Tensor):
        normed = self.stat_norm(z_flat)
        q, ids, _ = vector_quantize(normed, self._codebook, self._cfg.vq_temperature)
        return normed, q, ids

    def _text_from_tokens(self, q_flat: Tensor, counts: np.ndarray) -> Tensor:
        """Quantised rows (flattened, utterance-major) -> text-encoder embeddings."""
        cb = self._codebook
        n = q_flat.shape[0]
        eos = Tensor(cb.embeddings[cb.end_id][None, :])
        table = concat([q_flat, eos, Tensor(np.zeros((1, q_flat.shape[1])))], axis=0)
        L = int(counts.max()) + 1
        index = np.full((len(counts), L), n + 1)
        offset = 0
        for b, c in enumerate(counts):
            index[b, :c] = np.arange(offset, offset + c)
            index[b, c] = n
            offset += c
        return self._clip.text_encoder.encode_token_embeddings(table[index], counts + 1)

    def forward(self, utts: Sequence[Utterance], images: np.ndarray, M: np.ndarray, step: int,
                rng: Optional[np.random.Generator] = None):
        """Loss terms for one batch; ``images[i]`` is the image paired with ``utts[i]``."""
        cfg = self._cfg
        raw = _speech_batch(utts)
        with no_grad():
            img = self._clip.image_encoder(images)
        cls_out, frames_out = self._encode(raw, rng)
        losses: dict[str, Tensor] = {}
        diag: dict = {}
        zero = Tensor(0.0)
        if cfg.has_parallel:
            audio = self.parallel_proj(cls_out[:, 0])
            losses["parallel"] = masked_contrastive(audio, img, M, self.parallel_tau())
        if cfg.uses_cls_cascade:
            start = int(cfg.has_parallel)
            z = self.cascaded_proj(cls_out[:, start:])
            B, K, d_e = z.shape
            _, q, ids = self._quantize(z.reshape(B * K, d_e))
            counts = np.full(B, K)
            text = self._text_from_tokens(q, counts)
            losses["cascaded"] = masked_contrastive(text, img, M, self.cascaded_tau())
            diag["token_ids"] = ids.reshape(B, K)
        if cfg.uses_cif:
            alpha = self.alpha(frames_out, raw.mask, rng)
            target = cif_target_length(raw.lengths, cfg.cif_ratio)
            losses["quantity"] = quantity_loss(alpha, target)
            scaled = self.training and step < cfg.scaling_steps
            used = scale_alpha(alpha, target) if scaled else alpha
            seg = integrate_and_fire(frames_out, used, raw.lengths, cfg.cif_beta, cfg.cif_tail,
                                     expected=target if scaled else None)
            z = self.cascaded_proj(seg.segments)
            flat = z[seg.mask]
            if flat.shape[0] >= 2:
                _, q, ids = self._quantize(flat)
                text = self._text_from_tokens(q, seg.counts)
                losses["cascaded"] = masked_contrastive(text, img, M, self.cascaded_tau())
            else:
                losses["cascaded"] = zero
                ids = np.zeros(0, dtype=np.int64)
            diag.update(counts=seg.counts, target=target, firing_frames=seg.firing_frames,
                        token_ids=ids, scaled=scaled)
        w = cfg.weights
        if cfg.variant == "parallel":
            total = w.parallel * losses["parallel"]
        elif cfg.variant == "cascaded":
            total = w.cascaded * losses["cascaded"]
        elif cfg.variant == "cascaded_plus":
            total = loss_cascaded_plus(losses["cascaded"], losses["quantity"], w)
        elif cfg.variant == "hybrid":
            total = loss_hybrid(losses["parallel"], losses["cascaded"], w)
        else:
            total = loss_hybrid_plus(losses["parallel"], losses["cascaded"], losses["quantity"], w)
        losses["total"] = total
        return losses, diag

    # -- inference ------------------------------------------------------------

    def embed(self, utts: Sequence[Utterance], topk: int = 5) -> dict:
        """Evaluation-mode outputs for a list of utterances (no graph)."""
        was_training = self.training
        self.eval()
        out = {"parallel": None, "positions": [], "firing_frames": [], "alpha": []}
        with no_grad():
            raw = _speech_batch(utts)
            cls_out, frames_out = self._encode(raw)
            cfg = self._cfg
            if cfg.has_parallel:
                out["parallel"] = self.parallel_proj(cls_out[:, 0]).data
            if cfg.uses_cls_cascade:
                start = int(cfg.has_parallel)
                z = self.cascaded_proj(cls_out[:, start:])
                B, K, d_e = z.shape
                normed = self.stat_norm(z.reshape(B * K, d_e)).data
                ranked = topk_ids(normed, self._codebook, topk).reshape(B, K, topk)
                out["positions"] = [r.tolist() for r in ranked]
            if cfg.uses_cif:
                alpha = self.alpha(frames_out, raw.mask)
                seg = integrate_and_fire(frames_out, alpha, raw.lengths, cfg.cif_beta, cfg.cif_tail)
                z = self.cascaded_proj(seg.segments)
                flat = z.data[seg.mask]
                ranked = (
                    topk_ids(self.stat_norm(Tensor(flat)).data, self._codebook, topk)
                    if len(flat) else np.zeros((0, topk), dtype=np.int64)
                )
                offset = 0
                for c in seg.counts:
                    out["positions"].append(ranked[offset : offset + c].tolist())
                    offset += c
                out["firing_frames"] = seg.firing_frames
                out["alpha"] = [alpha.data[b, : raw.lengths[b]] for b in range(len(utts))]
        self.train(was_training)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"spc/{k}": v for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_state_dict(_strip(arrays, "spc/"))


def embed_split(model: SpeechModel, split: Split, topk: int = 5, chunk: int = 64) -> dict:
    order = sorted(range(len(split.utterances)), key=lambda i: len(split.utterances[i].frames))
    parallel = [None] * len(order)
    positions = [None] * len(order)
    fires = [None] * len(order)
    alphas = [None] * len(order)
    for s in range(0, len(order), chunk):
        idx = order[s : s + chunk]
        out = model.embed([split.utterances[i] for i in idx], topk)
        for j, i in enumerate(idx):
            if out["parallel"] is not None:
                parallel[i] = out["parallel"][j]
            if out["positions"]:
                positions[i] = out["positions"][j]
            if out["firing_frames"]:
                fires[i] = out["firing_frames"][j]
                alphas[i] = out["alpha"][j]
    return {
        "parallel": np.stack(parallel) if parallel[0] is not None else None,
        "positions": positions,
        "firing_frames": fires,
        "alpha": alphas,
    }


# -- evaluation helpers ----------------------------------------------------------------


def keyword_report(positions: Sequence, split: Split, codebook: Codebook,
                   ks: Sequence[int] = (1, 2, 3, 4, 5)) -> KeywordReport:
    report = KeywordReport()
    for k in ks:
        for with_stop in (False, True):
            rows = (
                keyword_metrics_bpe(pos or [], u.tokens[:-1], k, codebook.is_stop_word,
                                    stop_filter=not with_stop)
                for pos, u in zip(positions, split.utterances)
            )
            total, skipped = aggregate(rows)
            report.rows[(k, with_stop)] = total
            report.excluded[(k, with_stop)] = skipped
    return report


def word_report(positions: Sequence, split: Split, codebook: Codebook, vocab: ConceptVocab,
                ks: Sequence[int] = (1, 2, 3, 4, 5), run_cap: int = 4) -> KeywordReport:
    forms = vocab.word_strings()
    stop_words = {forms[vocab.tokens[i]] for i in vocab.stop_ids}
    refs = [_caption_words(u.tokens[:-1], vocab) for u in split.utterances]
    report = KeywordReport()
    for k in ks:
        preds = [
            construct_words(pos or [], codebook.token_strings, codebook.is_word_initial, forms, k, run_cap)
            for pos in positions
        ]
        for with_stop in (False, True):
            total, skipped = aggregate(
                keyword_metrics_word(p, r, stop_words, stop_filter=not with_stop)
                for p, r in zip(preds, refs)
            )
            report.rows[(k, with_stop)] = total
            report.excluded[(k, with_stop)] = skipped
    return report


def _caption_words(tokens: Sequence[int], vocab: ConceptVocab) -> list[str]:
    words, current = [], ""
    for t in tokens:
        s = vocab.tokens[t]
        if s.startswith("▁"):
            if current:
                words.append(current)
            current = s[1:]
        else:
            current += s
    if current:
        words.append(current)
    return words


def random_positions(split: Split, counts: Sequence[int], vocab_size: int, k: int,
                     seed: int) -> list:
    """Uniformly random distinct tokens, ``counts[i]`` positions for utterance ``i``."""
    rng = np.random.default_rng(stable_seed("random-baseline", seed))
    return [
        [rng.choice(vocab_size, size=k, replace=False).tolist() for _ in range(int(c))]
        for c in counts
    ]


def segment_table(model: SpeechModel, utt: Utterance, vocab: ConceptVocab) -> tuple[str, list]:
    """Per-frame alignment table for one utterance and the rows behind it.

    Columns: frame, alpha, cumulative alpha, fire flag, top-1 token of the
    segment closed at that frame, and the ground-truth token of the frame.
    """
    out = model.embed([utt], topk=1)
    alpha = out["alpha"][0]
    fires = out["firing_frames"][0]
    tokens = [vocab.tokens[p[0]] for p in out["positions"][0]]
    truth = np.empty(len(utt.frames), dtype=object)
    for tok, start, end in utt.alignment:
        truth[start:end] = vocab.tokens[tok]
    fired: dict[int, str] = {}
    for f, tok in zip(fires, tokens):
        # a frame can close several segments
        fired[f] = fired[f] + "+" + tok if f in fired else tok
    rows, cum = [], 0.0
    lines = [f"{'frame':>5} {'alpha':>8} {'cum':>8} {'fire':>4}  {'token':<8} truth"]
    for t, a in enumerate(alpha):
        cum += float(a)
        tok = fired.get(t, "")
        rows.append({"frame": t, "alpha": float(a), "cum": cum, "fire": t in fired, "token": tok,
                     "truth": truth[t]})
        lines.append(f"{t:>5} {a:8.4f} {cum:8.4f} {'*' if t in fired else '':>4}  {tok:<8} {truth[t]}")
    return "\n".join(lines) + "\n", rows


def speech_image_retrieval(model: SpeechModel, split: Split, ks=(1, 5, 10), emb=None) -> dict:
    emb = emb or embed_split(model, split)
    if emb["parallel"] is None:
        raise ConfigurationError(f"variant '{model.config.variant}' has no parallel branch")
    with no_grad():
        img = model._clip.image_encoder(split.images).data
    truth = [u.scene for u in split.utterances]
    return retrieval_recall(emb["parallel"], img, truth, ks)


def dev_metric(model: SpeechModel, split: Split) -> float:
    """Selection score: S->I R@1 if a parallel branch exists, else top-5 BPE F1 w/o stop words."""
    if model.config.has_parallel:
        return speech_image_retrieval(model, split, ks=(1,))["speech_to_image"][1]
    emb = embed_split(model, split)
    return keyword_report(emb["positions"], split, model.codebook, ks=(5,)).get(5, False).f1


# -- training ----------------------------------------------------------------------------


LOG_COLUMNS = ("step", "total", "parallel", "cascaded", "quantity", "lr", "dev_metric")


@dataclass
class TrainResult:
    model: SpeechModel
    log_rows: list
    best_metric: float
    best_step: int


def build_model(cfg: VariantConfig, clip: ToyClip, vocab: ConceptVocab, codebook: Optional[Codebook] = None) -> SpeechModel:
    codebook = codebook or make_codebook(clip, vocab)
    return SpeechModel(cfg, clip, codebook, vocab.d_a)


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: VariantConfig, clip: ToyClip, vocab: ConceptVocab, train_split: Split,
          dev_split: Split, out_dir: Optional[str | os.PathLike] = None, progress=None) -> TrainResult:
    """Train one variant; writes checkpoints and ``metrics.csv`` when ``out_dir`` is given.

    The returned model carries the parameters of the best dev evaluation.
    """
    model = build_model(cfg, clip, vocab)
    model.train()
    params = dict(model.named_parameters())
    state = AdamState(lr=cfg.lr)
    batch_rng = np.random.default_rng(stable_seed("batches", cfg.seed))
    drop_rng = np.random.default_rng(stable_seed("dropout", cfg.seed))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(format_config(cfg), encoding="utf-8")
    rows = [",".join(LOG_COLUMNS)]
    best, best_step, best_state = -math.inf, 0, None
    for step in range(cfg.steps):
        state.lr = warmup_lr(cfg.lr, step + 1, cfg.steps, cfg.warmup_fraction)
        utts, M = sample_batch(train_split, cfg.batch_size, batch_rng)
        images = train_split.images[[u.scene for u in utts]]
        losses, _ = model.forward(utts, images, M, step, drop_rng)
        total = losses["total"]
        if not np.isfinite(total.item()):
            raise TrainingError(f"non-finite loss at step {step}; last good checkpoint kept")
        model.zero_grad()
        total.backward()
        adam_step(state, params)
        metric = math.nan
        last = step == cfg.steps - 1
        if (step + 1) % cfg.eval_every == 0 or last:
            metric = dev_metric(model, dev_split)
            if metric > best:
                best, best_step, best_state = metric, step, model.state_dict()
            if out is not None:
                _save_run(out / "last.ckpt", model, clip, state)
            if progress:
                progress(step, losses, metric)
        parts = [str(step)] + [
            _fmt(losses[k].item()) if k in losses else "nan"
            for k in ("total", "parallel", "cascaded", "quantity")
        ] + [_fmt(state.lr), _fmt(metric)]
        rows.append(",".join(parts))
    model.load_state_dict(best_state)
    model.eval()
    if out is not None:
        _save_run(out / "model.ckpt", model, clip, state)
        (out / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return TrainResult(model, rows, best, best_step)


def _save_run(path: Path, model: SpeechModel, clip: ToyClip, state: AdamState) -> None:
    arrays = model.state_arrays()
    arrays.update(clip.state_arrays())
    arrays.update(state.to_arrays())
    ckpt.save_checkpoint(path, arrays)


def load_run(run_dir, vocab: Optional[ConceptVocab] = None):
    """Rebuild ``(model, cfg, vocab)`` from a training output directory."""
    run = Path(run_dir)
    cfg = parse_config((run / "config.cfg").read_text("utf-8"))
    vocab = vocab or load_vocab(cfg.data_dir)
    arrays = ckpt.load_checkpoint(run / "model.ckpt")
    d_e = arrays["txt/token_embedding"].shape[1]
    clip = ToyClip(vocab.size, vocab.d_img, ClipConfig(d_e=d_e))
    clip.load_arrays(arrays)
    clip.eval().freeze()
    model = build_model(cfg, clip, vocab)
    model.load_arrays(arrays)
    model.eval()
    return model, cfg, vocab
