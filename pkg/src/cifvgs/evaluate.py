"""Keyword extraction, retrieval and boundary metrics."""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np


@dataclass
class PRF:
    matched: int
    predicted: int
    reference: int

    @property
    def recall(self) -> float:
        return self.matched / self.reference if self.reference else 0.0

    @property
    def precision(self) -> float:
        return self.matched / self.predicted if self.predicted else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.matched + other.matched, self.predicted + other.predicted,
                   self.reference + other.reference)


@dataclass
class KeywordReport:
    """Micro-averaged scores per top-K, with and without stop words."""

    rows: dict = field(default_factory=dict)      # (k, with_stop) -> PRF
    excluded: dict = field(default_factory=dict)  # (k, with_stop) -> utterances skipped

    def get(self, k: int, with_stop: bool) -> PRF:
        return self.rows[(k, with_stop)]

    def records(self, model: str = "", unit: str = "bpe") -> list[dict]:
        out = []
        for (k, with_stop), r in sorted(self.rows.items()):
            out.append({
                "model": model, "unit": unit, "k": k, "stop_words": with_stop,
                "recall": r.recall, "precision": r.precision, "f1": r.f1,
                "matched": r.matched, "predicted": r.predicted, "reference": r.reference,
                "excluded": self.excluded.get((k, with_stop), 0),
            })
        return out


# -- BPE matching -----------------------------------------------------------------


def max_matching(candidates: Sequence[Sequence[int]], reference: Sequence[int]) -> int:
    """Largest one-to-one assignment of positions to reference tokens.

    A position may claim at most one reference occurrence, and only one
    appearing among its candidates. Positions are visited left to right and
    candidates in rank order; an augmenting path lets a later position take
    over a token when the earlier claimant can switch to another one.
    """
    slots: dict[int, list[int]] = {}
    for i, tok in enumerate(reference):
        slots.setdefault(tok, []).append(i)
    owner = [-1] * len(reference)

    def augment(pos: int, seen: set) -> bool:
        for tok in candidates[pos]:
            for slot in slots.get(tok, ()):
                if slot in seen:
                    continue
                seen.add(slot)
                if owner[slot] == -1 or augment(owner[slot], seen):
                    owner[slot] = pos
                    return True
        return False

    return sum(augment(pos, set()) for pos in range(len(candidates)))


def keyword_metrics_bpe(predicted: Sequence[Sequence[int]], reference: Sequence[int],
                        k: int, is_stop: Optional[np.ndarray] = None,
                        stop_filter: bool = False) -> Optional[PRF]:
    """Score one utterance; ``None`` when the filtered reference is empty.

    ``predicted`` holds a ranked candidate list per position, of which the
    first ``k`` are used. With ``stop_filter`` stop tokens are removed from
    both sides and positions left without candidates are dropped. The
    precision denominator is the number of remaining candidates, which is
    ``k`` times the number of positions when nothing is filtered.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    cands = [list(p[:k]) for p in predicted]
    ref = list(reference)
    if stop_filter:
        cands = [[t for t in p if not is_stop[t]] for p in cands]
        cands = [p for p in cands if p]
        ref = [t for t in ref if not is_stop[t]]
    if not ref:
        return None
    n_pred = sum(len(p) for p in cands)
    return PRF(max_matching(cands, ref), n_pred, len(ref))


# -- words --------------------------------------------------------------------------


def construct_words(predicted: Sequence[Sequence[int]], token_strings: Sequence[str],
                    is_word_initial: np.ndarray, word_forms: Mapping[str, str],
                    k: int, run_cap: int = 4) -> list[str]:
    """Assemble words from neighbouring positions.

    Positions are grouped into runs that start wherever the top-1 token is
    word-initial. For runs of at most ``run_cap`` positions every choice of
    one top-``k`` token per position is spelled out; spellings that are
    vocabulary words are collected once per run. Longer runs use top-1 only.
    """
    runs: list[list] = []
    for p in predicted:
        if not runs or is_word_initial[p[0]]:
            runs.append([])
        runs[-1].append(p)
    words: list[str] = []
    for run in runs:
        if len(run) <= run_cap:
            choices = [p[:k] for p in run]
        else:
            choices = [p[:1] for p in run]
        found = []
        for combo in itertools.product(*choices):
            spelled = "".join(token_strings[t] for t in combo)
            word = word_forms.get(spelled)
            if word is not None and word not in found:
                found.append(word)
        words.extend(found)
    return words


def keyword_metrics_word(predicted: Sequence[str], reference: Sequence[str],
                         stop_words: Iterable[str] = (), stop_filter: bool = False) -> Optional[PRF]:
    stop = set(stop_words)
    pred = [w for w in predicted if not (stop_filter and w in stop)]
    ref = [w for w in reference if not (stop_filter and w in stop)]
    if not ref:
        return None
    matched = sum((Counter(pred) & Counter(ref)).values())
    return PRF(matched, len(pred), len(ref))


def aggregate(rows: Iterable[Optional[PRF]]) -> tuple[PRF, int]:
    total, skipped = PRF(0, 0, 0), 0
    for r in rows:
        if r is None:
            skipped += 1
        else:
            total = total + r
    return total, skipped


# -- retrieval ----------------------------------------------------------------------


def _rank(scores: np.ndarray) -> np.ndarray:
    # stable descending order so equal scores keep index order
    return np.argsort(-scores, axis=1, kind="stable")


def retrieval_recall(audio_emb: np.ndarray, image_emb: np.ndarray, truth: Sequence[int],
                     ks: Sequence[int] = (1, 5, 10)) -> dict:
    """Speech->image and image->speech recall@K.

    ``truth[a]`` is the image index of caption ``a``. An image query hits
    if any of its captions is within the top K. Images that own no caption
    are not used as queries.
    """
    audio_emb = np.asarray(audio_emb, dtype=np.float64)
    image_emb = np.asarray(image_emb, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if len(audio_emb) == 0 or len(image_emb) == 0:
        raise ValueError("retrieval needs nonempty audio and image sets")
    a = audio_emb / np.linalg.norm(audio_emb, axis=1, keepdims=True)
    v = image_emb / np.linalg.norm(image_emb, axis=1, keepdims=True)
    sim = a @ v.T
    s2i_rank = _rank(sim)
    pos_s2i = np.argmax(s2i_rank == truth[:, None], axis=1)
    queries = np.unique(truth)
    i2s_rank = _rank(sim.T[queries])
    owns = truth[i2s_rank] == queries[:, None]
    pos_i2s = np.argmax(owns, axis=1)
    report = {"speech_to_image": {}, "image_to_speech": {}}
    for k in ks:
        report["speech_to_image"][k] = float(np.mean(pos_s2i < k))
        report["image_to_speech"][k] = float(np.mean(pos_i2s < k))
    return report


# -- boundaries ---------------------------------------------------------------------


def boundary_score(fires: Sequence[int], true_ends: Sequence[int], tolerance: int = 2) -> PRF:
    """One-to-one matching of fire frames to token end frames within ``tolerance``."""
    p, t = sorted(fires), sorted(true_ends)
    i = j = matched = 0
    while i < len(p) and j < len(t):
        if abs(p[i] - t[j]) <= tolerance:
            matched += 1
            i += 1
            j += 1
        elif p[i] < t[j]:
            i += 1
        else:
            j += 1
    return PRF(matched, len(p), len(t))


# -- report rendering ----------------------------------------------------------------


def format_keyword_table(reports: Mapping[str, KeywordReport], ks: Sequence[int], unit: str = "BPE") -> str:
    lines = [
        f"{unit} extraction (percent)",
        f"{'model':<16}{'K':>3}  {'w/o stop words':^24}  {'w/ stop words':^24}",
        f"{'':<16}{'':>3}  {'R':>7} {'P':>7} {'F1':>8}  {'R':>7} {'P':>7} {'F1':>8}",
    ]
    for name, rep in reports.items():
        for k in ks:
            a, b = rep.get(k, False), rep.get(k, True)
            lines.append(
                f"{name:<16}{k:>3}  {100 * a.recall:7.2f} {100 * a.precision:7.2f} {100 * a.f1:8.2f}"
                f"  {100 * b.recall:7.2f} {100 * b.precision:7.2f} {100 * b.f1:8.2f}"
            )
    return "\n".join(lines) + "\n"


def format_retrieval_table(reports: Mapping[str, dict], ks: Sequence[int] = (1, 5, 10)) -> str:
    head = " ".join(f"R@{k:<4}" for k in ks)
    lines = [
        "Image-speech retrieval (percent)",
        f"{'model':<16}  {'Speech -> Image':^{7 * len(ks)}}  {'Image -> Speech':^{7 * len(ks)}}",
        f"{'':<16}  {head}  {head}",
    ]
    for name, rep in reports.items():
        s2i = " ".join(f"{100 * rep['speech_to_image'][k]:6.1f}" for k in ks)
        i2s = " ".join(f"{100 * rep['image_to_speech'][k]:6.1f}" for k in ks)
        lines.append(f"{name:<16}  {s2i}  {i2s}")
    return "\n".join(lines) + "\n"


def json_lines(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
