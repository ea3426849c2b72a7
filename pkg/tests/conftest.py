from dataclasses import dataclass

import pytest

from cifvgs import checkpoint as ckpt
from cifvgs.datagen import ConceptVocab, build_vocab, generate_corpus, write_corpus
from cifvgs.pipeline import ClipConfig, Split, ToyClip, load_splits, pretrain_toy_clip


@dataclass
class Tiny:
    data_dir: object
    clip_path: object
    vocab: ConceptVocab
    splits: dict
    clip: ToyClip


@pytest.fixture(scope="session")
def tiny(tmp_path_factory) -> Tiny:
    """A 150-scene corpus and a briefly trained toy CLIP shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("tiny")
    vocab = build_vocab(42)
    write_corpus(root / "data", vocab, generate_corpus(vocab, 42, 150))
    splits = load_splits(root / "data")
    clip, _ = pretrain_toy_clip(vocab, splits["train"], splits["dev"],
                                ClipConfig(steps=300, batch_size=32, eval_every=100))
    ckpt.save_checkpoint(root / "clip.ckpt", clip.state_arrays())
    return Tiny(root / "data", root / "clip.ckpt", vocab, splits, clip)


_ACCEPTANCE: dict = {}


@pytest.fixture
def accept():
    """Record the outcome of one acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
