import json

import numpy as np
import pytest

from cifvgs import checkpoint as ckpt
from cifvgs.cli import main

SMALL = "steps=4\nbatch_size=8\neval_every=2\nd_model=32\nn_layers=1\nn_heads=2\nn_hidden=2\nscaling_steps=2\n"


@pytest.fixture(scope="module")
def run_dir(tiny, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.cfg").write_text(SMALL, encoding="utf-8")
    code = main(["train", "--variant", "hybrid_plus", "--config", str(root / "c.cfg"), "--seed", "7",
                 "--data", str(tiny.data_dir), "--clip", str(tiny.clip_path), "--out", str(root / "run")])
    assert code == 0
    return root / "run"


class TestTrainCommand:
    def test_outputs_present(self, run_dir):
        for name in ("model.ckpt", "metrics.csv", "config.cfg", "last.ckpt"):
            assert (run_dir / name).is_file()
        arrays = ckpt.load_checkpoint(run_dir / "model.ckpt")
        prefixes = {k.split("/", 1)[0] for k in arrays}
        assert prefixes == {"spc", "img", "txt", "opt"}

    def test_unknown_config_key_writes_nothing(self, tiny, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("bogus=3\n", encoding="utf-8")
        code = main(["train", "--config", str(tmp_path / "bad.cfg"), "--seed", "1", "--data", str(tiny.data_dir),
                     "--clip", str(tiny.clip_path), "--out", str(tmp_path / "out")])
        assert code == 1
        assert not (tmp_path / "out").exists()
        err = capsys.readouterr().err.strip()
        assert "unknown key" in err and len(err.splitlines()) == 1

    def test_seed_is_mandatory(self, tiny, tmp_path):
        assert main(["train", "--data", str(tiny.data_dir), "--clip", str(tiny.clip_path),
                     "--out", str(tmp_path / "o")]) == 1
        assert not (tmp_path / "o").exists()

    def test_missing_clip(self, tiny, tmp_path):
        assert main(["train", "--seed", "1", "--data", str(tiny.data_dir), "--clip", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 1
        assert not (tmp_path / "o").exists()

    def test_incompatible_clip_is_runtime_failure(self, tiny, tmp_path):
        ckpt.save_checkpoint(tmp_path / "odd.ckpt", {"txt/token_embedding": np.zeros((3, 4))})
        (tmp_path / "c.cfg").write_text(SMALL, encoding="utf-8")
        assert main(["train", "--seed", "1", "--config", str(tmp_path / "c.cfg"), "--data", str(tiny.data_dir),
                     "--clip", str(tmp_path / "odd.ckpt"), "--out", str(tmp_path / "o")]) == 2


class TestEvalCommands:
    def test_keywords_topk(self, run_dir, tmp_path):
        assert main(["eval-keywords", "--ckpt", str(run_dir), "--split", "test", "--topk", "1,5",
                     "--out", str(tmp_path)]) == 0
        recs = [json.loads(l) for l in (tmp_path / "keywords_bpe_test.txt").with_suffix(".jsonl").read_text().splitlines()]
        assert sorted({r["k"] for r in recs}) == [1, 5]
        assert len(recs) == 4
        table = (tmp_path / "keywords_bpe_test.txt").read_text()
        assert "hybrid_plus" in table

    def test_keywords_reproducible(self, run_dir, tmp_path):
        for d in ("a", "b"):
            assert main(["eval-keywords", "--ckpt", str(run_dir), "--unit", "word", "--out", str(tmp_path / d)]) == 0
        name = "keywords_word_test.jsonl"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_retrieval(self, run_dir, tmp_path):
        assert main(["eval-retrieval", "--ckpt", str(run_dir), "--split", "dev", "--out", str(tmp_path)]) == 0
        recs = [json.loads(l) for l in (tmp_path / "retrieval_dev.jsonl").read_text().splitlines()]
        assert len(recs) == 6 and all(0 <= r["recall"] <= 1 for r in recs)

    def test_inspect_segments(self, run_dir, tmp_path):
        assert main(["inspect-segments", "--ckpt", str(run_dir), "--utterances", "0,2", "--out", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["segments_test_00000.txt", "segments_test_00002.txt"]

    def test_inspect_segments_plot(self, run_dir, tmp_path):
        pytest.importorskip("matplotlib")
        assert main(["inspect-segments", "--ckpt", str(run_dir), "--utterances", "1", "--plot",
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "segments_test_00001.png").stat().st_size > 0

    def test_index_out_of_range(self, run_dir, tmp_path):
        assert main(["inspect-segments", "--ckpt", str(run_dir), "--utterances", "99999",
                     "--out", str(tmp_path / "o")]) == 1
        assert not (tmp_path / "o").exists()

    def test_bad_topk(self, run_dir, tmp_path):
        assert main(["eval-keywords", "--ckpt", str(run_dir), "--topk", "0,x", "--out", str(tmp_path / "o")]) == 1

    def test_missing_run(self, tmp_path):
        assert main(["eval-retrieval", "--ckpt", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1

    def test_inputs_untouched(self, run_dir, tmp_path):
        before = {p.name: p.read_bytes() for p in run_dir.iterdir()}
        main(["eval-retrieval", "--ckpt", str(run_dir), "--out", str(tmp_path)])
        assert {p.name: p.read_bytes() for p in run_dir.iterdir()} == before


class TestOtherCommands:
    def test_generate_data(self, tmp_path):
        assert main(["generate-data", "--seed", "42", "--n-scenes", "20", "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["dev.manifest", "test.manifest", "train.manifest", "vocab.json"]

    def test_generate_data_too_small(self, tmp_path):
        assert main(["generate-data", "--seed", "1", "--n-scenes", "3", "--out", str(tmp_path / "o")]) == 1
        assert not (tmp_path / "o").exists()

    def test_grad_check(self, tmp_path):
        assert main(["grad-check", "--seed", "0", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "grad_check.txt").read_text().splitlines()
        assert len(lines) == 7 and all(l.endswith("ok") for l in lines)

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1
