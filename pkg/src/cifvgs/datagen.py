"""Synthetic image / caption / pseudo-speech corpus with exact alignments.

A scene is a small set of concept words. Its image feature is the sum of
the concepts' base vectors plus noise; each caption lists the concepts in
random order as subword tokens, with stop words as filler between words;
each spoken token is a few noisy copies of that token's acoustic template.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

WORD_MARK = "▁"
END_TOKEN = "<end>"
MANIFEST_HEADER = "CIFG-MANIFEST v1"

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class ManifestError(ValueError):
    pass


class CorpusSizeError(ValueError):
    pass


def load_stop_words() -> list[str]:
    text = resources.files("cifvgs").joinpath("data/stopwords.txt").read_text("utf-8")
    return [w.strip() for w in text.splitlines() if w.strip()]


def stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ConceptVocab:
    seed: int
    words: list                 # concept word strings
    decompositions: list        # per word: tuple of token ids
    tokens: list                # token strings, content first, then stop tokens, then end
    stop_ids: list
    end_id: int
    templates: np.ndarray       # [V, d_a] acoustic template per token
    concept_vectors: np.ndarray # [N, d_img]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def d_a(self) -> int:
        return self.templates.shape[1]

    @property
    def d_img(self) -> int:
        return self.concept_vectors.shape[1]

    @property
    def is_stop(self) -> np.ndarray:
        flags = np.zeros(self.size, dtype=bool)
        flags[self.stop_ids] = True
        return flags

    @property
    def is_word_initial(self) -> np.ndarray:
        return np.array([t.startswith(WORD_MARK) for t in self.tokens])

    def word_strings(self) -> dict[str, str]:
        """Marked surface form -> plain word, for concepts and stop words."""
        out = {WORD_MARK + w: w for w in self.words}
        for i in self.stop_ids:
            out[self.tokens[i]] = self.tokens[i][len(WORD_MARK):]
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "words": self.words,
                "decompositions": [list(d) for d in self.decompositions],
                "tokens": self.tokens,
                "stop_ids": self.stop_ids,
                "end_id": self.end_id,
                "templates": self.templates.tolist(),
                "concept_vectors": self.concept_vectors.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ConceptVocab":
        raw = json.loads(text)
        return cls(
            seed=raw["seed"],
            words=raw["words"],
            decompositions=[tuple(d) for d in raw["decompositions"]],
            tokens=raw["tokens"],
            stop_ids=raw["stop_ids"],
            end_id=raw["end_id"],
            templates=np.array(raw["templates"], dtype=np.float64),
            concept_vectors=np.array(raw["concept_vectors"], dtype=np.float64),
        )


def build_vocab(seed: int, n_words: int = 60, n_stop: int = 8, d_a: int = 20,
                d_img: int = 24) -> ConceptVocab:
    """Deterministic concept vocabulary of 1-3 syllable pseudo-words.

    Every syllable is one token; the first syllable carries the word-start
    marker. No word's token sequence is a prefix of another's.
    """
    if n_words < 2:
        raise ValueError("need at least two concept words")
    stop_words = load_stop_words()
    if n_stop > len(stop_words):
        raise ValueError(f"only {len(stop_words)} stop words are bundled")
    rng = np.random.default_rng(stable_seed("vocab", seed))
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    chosen: list[tuple[str, ...]] = []
    while len(chosen) < n_words:
        n_syl = int(rng.choice([1, 2, 3], p=[0.3, 0.45, 0.25]))
        sylls = tuple(syllables[i] for i in rng.integers(0, len(syllables), size=n_syl))
        if any(_is_prefix(sylls, other) or _is_prefix(other, sylls) for other in chosen):
            continue
        chosen.append(sylls)
    tokens: list[str] = []
    index: dict[str, int] = {}
    decompositions = []
    for sylls in chosen:
        ids = []
        for j, s in enumerate(sylls):
            tok = (WORD_MARK + s) if j == 0 else s
            if tok not in index:
                index[tok] = len(tokens)
                tokens.append(tok)
            ids.append(index[tok])
        decompositions.append(tuple(ids))
    stop_ids = []
    for w in stop_words[:n_stop]:
        stop_ids.append(len(tokens))
        tokens.append(WORD_MARK + w)
    end_id = len(tokens)
    tokens.append(END_TOKEN)
    templates = rng.normal(0.0, 1.0, size=(len(tokens), d_a))
    concept_vectors = rng.normal(0.0, 1.0, size=(n_words, d_img))
    return ConceptVocab(
        seed=seed,
        words=["".join(s) for s in chosen],
        decompositions=decompositions,
        tokens=tokens,
        stop_ids=stop_ids,
        end_id=end_id,
        templates=templates,
        concept_vectors=concept_vectors,
    )


def _is_prefix(a: tuple, b: tuple) -> bool:
    return len(a) <= len(b) and b[: len(a)] == a


# -- records -------------------------------------------------------------------------


@dataclass
class Caption:
    tokens: list                # token ids, end token last
    frames: np.ndarray          # [T, d_a]
    alignment: list             # (token_id, start, end), end exclusive

    @property
    def spoken_tokens(self) -> list:
        return [a[0] for a in self.alignment]

    def token_end_frames(self) -> list:
        return [end - 1 for _, _, end in self.alignment]


@dataclass
class SceneRecord:
    scene_id: str
    concepts: tuple
    image_feature: np.ndarray
    captions: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and tuple(self.concepts) == tuple(other.concepts)
            and np.array_equal(self.image_feature, other.image_feature)
            and len(self.captions) == len(other.captions)
            and all(
                a.tokens == b.tokens
                and np.array_equal(a.frames, b.frames)
                and [tuple(x) for x in a.alignment] == [tuple(x) for x in b.alignment]
                for a, b in zip(self.captions, other.captions)
            )
        )


@dataclass(frozen=True)
class CorpusSpec:
    sigma_img: float = 0.1
    sigma_spk: float = 0.3
    min_concepts: int = 2
    max_concepts: int = 4
    max_captions: int = 5
    min_frames: int = 3
    max_frames: int = 8
    stop_prob: float = 0.5


def make_scene(vocab: ConceptVocab, seed: int, scene_id: str, spec: CorpusSpec = CorpusSpec()) -> SceneRecord:
    rng = np.random.default_rng(stable_seed("scene", seed, scene_id))
    n_concepts = int(rng.integers(spec.min_concepts, spec.max_concepts + 1))
    concepts = tuple(sorted(rng.choice(len(vocab.words), size=n_concepts, replace=False).tolist()))
    image = vocab.concept_vectors[list(concepts)].sum(axis=0)
    image = image + spec.sigma_img * rng.normal(size=vocab.d_img)
    captions = []
    for _ in range(int(rng.integers(1, spec.max_captions + 1))):
        order = rng.permutation(concepts).tolist()
        tokens = []
        for i, w in enumerate(order):
            if i > 0 and rng.random() < spec.stop_prob:
                tokens.append(int(vocab.stop_ids[rng.integers(len(vocab.stop_ids))]))
            tokens.extend(vocab.decompositions[w])
        frames, alignment, start = [], [], 0
        for tok in tokens:
            n = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            noise = spec.sigma_spk * rng.normal(size=(n, vocab.d_a))
            frames.append(vocab.templates[tok] + noise)
            alignment.append((tok, start, start + n))
            start += n
        captions.append(Caption(tokens + [vocab.end_id], np.concatenate(frames), alignment))
    return SceneRecord(scene_id, concepts, image, captions)


def generate_corpus(vocab: ConceptVocab, seed: int, n_scenes: int,
                    split_fractions: Sequence[float] = (0.8, 0.1, 0.1),
                    spec: CorpusSpec = CorpusSpec()) -> dict[str, list]:
    """Train/dev/test scenes; scenes sharing a concept set stay in one split."""
    if n_scenes < 10:
        raise CorpusSizeError(f"need at least 10 scenes, got {n_scenes}")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three numbers summing to 1")
    scenes = [make_scene(vocab, seed, f"s{i:06d}", spec) for i in range(n_scenes)]
    groups: dict[tuple, list] = {}
    for s in scenes:
        groups.setdefault(s.concepts, []).append(s)
    keys = list(groups)
    order = np.random.default_rng(stable_seed("split", seed)).permutation(len(keys))
    targets = np.round(np.cumsum(split_fractions) * n_scenes).astype(int)
    splits = {"train": [], "dev": [], "test": []}
    names = list(splits)
    filled = 0
    for idx in order:
        group = groups[keys[idx]]
        slot = min(int(np.searchsorted(targets, filled, side="right")), 2)
        splits[names[slot]].extend(group)
        filled += len(group)
    for name in names:
        splits[name].sort(key=lambda s: s.scene_id)
    return splits


def relatedness(concepts_a: Sequence[tuple], concepts_b: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """``M[i, j] = 1`` when items ``i`` and ``j`` depict the same concept set."""
    concepts_b = concepts_a if concepts_b is None else concepts_b
    keys_a = [tuple(sorted(c)) for c in concepts_a]
    keys_b = [tuple(sorted(c)) for c in concepts_b]
    return np.array([[a == b for b in keys_b] for a in keys_a], dtype=bool)


# -- manifest -----------------------------------------------------------------------


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _vec(v) -> str:
    return "[" + ",".join(_num(x) for x in v) + "]"


def record_to_line(rec: SceneRecord) -> str:
    caps = []
    for c in rec.captions:
        frames = "[" + ",".join(_vec(f) for f in c.frames) + "]"
        align = json.dumps([[int(t), int(s), int(e)] for t, s, e in c.alignment], separators=(",", ":"))
        caps.append(
            '{"tokens":' + json.dumps([int(t) for t in c.tokens], separators=(",", ":"))
            + ',"frames":' + frames + ',"alignment":' + align + "}"
        )
    return (
        '{"scene_id":' + json.dumps(rec.scene_id)
        + ',"concepts":' + json.dumps([int(c) for c in rec.concepts], separators=(",", ":"))
        + ',"image_feature":' + _vec(rec.image_feature)
        + ',"captions":[' + ",".join(caps) + "]}"
    )


def write_manifest(path: str | os.PathLike, records: Sequence[SceneRecord]) -> None:
    buf = io.StringIO()
    buf.write(MANIFEST_HEADER + "\n")
    for rec in records:
        buf.write(record_to_line(rec) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_record(line: str, lineno: int) -> SceneRecord:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: not a valid record ({exc.msg})") from None
    try:
        image = np.array(raw["image_feature"], dtype=np.float64)
        captions = []
        for c in raw["captions"]:
            frames = np.array(c["frames"], dtype=np.float64)
            alignment = [tuple(int(v) for v in a) for a in c["alignment"]]
            captions.append(Caption([int(t) for t in c["tokens"]], frames, alignment))
        rec = SceneRecord(str(raw["scene_id"]), tuple(int(x) for x in raw["concepts"]), image, captions)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: malformed record ({exc})") from None
    problem = _validate(rec)
    if problem:
        raise ManifestError(f"line {lineno}: {problem}")
    return rec


def _validate(rec: SceneRecord) -> Optional[str]:
    if rec.image_feature.ndim != 1:
        return "image_feature must be a vector"
    if not rec.captions:
        return "scene has no captions"
    for c in rec.captions:
        if c.frames.ndim != 2 or len(c.frames) == 0:
            return "caption frames must be a nonempty matrix"
        pos = 0
        for tok, start, end in c.alignment:
            if start != pos or end <= start:
                return "alignment spans do not partition the frames"
            pos = end
        if pos != len(c.frames):
            return "alignment does not cover every frame"
        if c.spoken_tokens != c.tokens[:-1]:
            return "alignment tokens differ from the caption tokens"
    return None


def iter_manifest(path: str | os.PathLike) -> Iterator[SceneRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise ManifestError(f"line 1: expected header '{MANIFEST_HEADER}', got '{header[:40]}'")
        for lineno, line in enumerate(fh, start=2):
            if not line.endswith("\n"):
                raise ManifestError(f"line {lineno}: truncated record")
            if line.strip():
                yield _parse_record(line, lineno)


def load_manifest(path: str | os.PathLike) -> list[SceneRecord]:
    return list(iter_manifest(path))


def write_corpus(out_dir: str | os.PathLike, vocab: ConceptVocab, splits: dict[str, list]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    for name, records in splits.items():
        write_manifest(out / f"{name}.manifest", records)


def load_vocab(data_dir: str | os.PathLike) -> ConceptVocab:
    return ConceptVocab.from_json((Path(data_dir) / "vocab.json").read_text("utf-8"))
