import dataclasses

import numpy as np
import pytest

from cifvgs.cif import cif_target_length
from cifvgs.encoders import ConfigurationError
from cifvgs.losses import LossWeights
from cifvgs.pipeline import (
    LOG_COLUMNS,
    PRESETS,
    SpeechModel,
    TrainingError,
    VariantConfig,
    build_model,
    dev_metric,
    embed_split,
    format_config,
    load_run,
    parse_config,
    random_positions,
    sample_batch,
    segment_table,
    train,
)
from cifvgs.tensor import Tensor


def _short(variant, **kw):
    base = dict(variant=variant, steps=6, batch_size=8, eval_every=3, d_model=32, n_layers=1,
                n_heads=2, n_hidden=2, scaling_steps=3)
    base.update(kw)
    return VariantConfig(**base)


def _batch(tiny, size=6, seed=0):
    split = tiny.splits["train"]
    utts, M = sample_batch(split, size, np.random.default_rng(seed))
    return utts, split.images[[u.scene for u in utts]], M


class TestConfig:
    def test_defaults_follow_reference_settings(self):
        cfg = VariantConfig()
        assert (cfg.K, cfg.cif_ratio, cfg.scaling_steps) == (8, 0.05, 300)
        assert cfg.weights == LossWeights(1.0, 1.0, 0.25)

    def test_parse_and_format_round_trip(self):
        cfg = parse_config("variant = cascaded  # comment\nK=3\nlr=0.01\n\n")
        assert (cfg.variant, cfg.K, cfg.lr) == ("cascaded", 3, 0.01)
        assert parse_config(format_config(cfg)) == cfg

    def test_preset(self):
        cfg = parse_config("preset=full_large\n")
        assert cfg.d_model == PRESETS["full_large"]["d_model"] and cfg.scaling_steps == 5000

    @pytest.mark.parametrize("text, msg", [
        ("bogus=1", "unknown key"),
        ("K=two", "bad value"),
        ("just words", "key=value"),
        ("preset=huge", "unknown preset"),
        ("variant=serial", "unknown variant"),
    ])
    def test_rejects(self, text, msg):
        with pytest.raises(ConfigurationError, match=msg):
            parse_config(text)

    @pytest.mark.parametrize("variant, n_cls", [
        ("parallel", 1), ("cascaded", 8), ("cascaded_plus", 0), ("hybrid", 9), ("hybrid_plus", 1),
    ])
    def test_cls_counts(self, variant, n_cls):
        assert VariantConfig(variant=variant).n_cls == n_cls


class TestModel:
    @pytest.mark.parametrize("variant", ["parallel", "cascaded", "cascaded_plus", "hybrid", "hybrid_plus"])
    def test_loss_identity(self, tiny, variant):
        cfg = _short(variant, K=3, lambda_p=0.7, lambda_c=1.3, lambda_q=0.25)
        model = build_model(cfg, tiny.clip, tiny.vocab)
        utts, images, M = _batch(tiny)
        losses, _ = model.forward(utts, images, M, step=10, rng=np.random.default_rng(0))
        get = lambda k: losses[k].item() if k in losses else 0.0
        expected = {
            "parallel": 0.7 * get("parallel"),
            "cascaded": 1.3 * get("cascaded"),
            "cascaded_plus": 1.3 * get("cascaded") + 0.25 * get("quantity"),
            "hybrid": 0.7 * get("parallel") + 1.3 * get("cascaded"),
            "hybrid_plus": 0.7 * get("parallel") + 1.3 * get("cascaded") + 0.25 * get("quantity"),
        }[variant]
        assert abs(losses["total"].item() - expected) < 1e-12
        if cfg.n_cls:
            assert model.cls.vectors.shape[0] == cfg.n_cls
        else:
            assert model.cls is None

    def test_scaled_phase_emits_target_length(self, tiny):
        cfg = _short("cascaded_plus", scaling_steps=5)
        model = build_model(cfg, tiny.clip, tiny.vocab).train()
        for seed in range(3):
            utts, images, M = _batch(tiny, 8, seed)
            _, diag = model.forward(utts, images, M, step=2, rng=np.random.default_rng(seed))
            assert diag["scaled"]
            np.testing.assert_array_equal(diag["counts"], cif_target_length([len(u.frames) for u in utts]))
            _, diag = model.forward(utts, images, M, step=5, rng=np.random.default_rng(seed))
            assert not diag["scaled"]

    def test_codebook_is_text_table(self, tiny):
        model = build_model(_short("cascaded"), tiny.clip, tiny.vocab)
        np.testing.assert_array_equal(model.codebook.embeddings, tiny.clip.text_encoder.token_embedding.data)

    def test_clip_stays_frozen(self, tiny):
        model = build_model(_short("hybrid_plus"), tiny.clip, tiny.vocab)
        names = [n for n, _ in model.named_parameters()]
        assert names and not any(n.startswith(("_clip", "img", "txt")) for n in names)
        before = tiny.clip.text_encoder.token_embedding.data.copy()
        utts, images, M = _batch(tiny)
        losses, _ = model.forward(utts, images, M, 0, np.random.default_rng(0))
        losses["total"].backward()
        np.testing.assert_array_equal(tiny.clip.text_encoder.token_embedding.data, before)
        assert tiny.clip.text_encoder.token_embedding.grad is None

    def test_shared_components_start_identical(self, tiny):
        a = build_model(_short("parallel"), tiny.clip, tiny.vocab).state_dict()
        b = build_model(_short("hybrid_plus"), tiny.clip, tiny.vocab).state_dict()
        shared = [k for k in a if k in b]
        assert any(k.startswith("encoder") for k in shared)
        for k in shared:
            np.testing.assert_array_equal(a[k], b[k])

    def test_embed_outputs(self, tiny):
        model = build_model(_short("hybrid_plus"), tiny.clip, tiny.vocab)
        split = tiny.splits["dev"]
        emb = embed_split(model, split, topk=5)
        assert emb["parallel"].shape[0] == len(split.utterances)
        assert len(emb["positions"]) == len(split.utterances)
        for pos, fires in zip(emb["positions"], emb["firing_frames"]):
            assert len(pos) == len(fires)
            assert all(len(p) == 5 and len(set(p)) == 5 for p in pos)

    def test_segment_table(self, tiny):
        model = build_model(_short("cascaded_plus"), tiny.clip, tiny.vocab)
        text, rows = segment_table(model, tiny.splits["dev"].utterances[0], tiny.vocab)
        assert len(rows) == len(tiny.splits["dev"].utterances[0].frames)
        assert text.splitlines()[0].split()[:4] == ["frame", "alpha", "cum", "fire"]

    def test_random_positions(self, tiny):
        split = tiny.splits["dev"]
        counts = [2] * len(split.utterances)
        a = random_positions(split, counts, tiny.vocab.size, 5, seed=0)
        assert a == random_positions(split, counts, tiny.vocab.size, 5, seed=0)
        assert all(len(p) == 2 and all(len(set(c)) == 5 for c in p) for p in a)


class TestBatches:
    def test_every_row_has_a_negative(self, tiny):
        rng = np.random.default_rng(0)
        for _ in range(20):
            _, M = sample_batch(tiny.splits["train"], 16, rng)
            assert (~M).any(axis=1).all() and np.all(np.diag(M))


class TestTraining:
    def test_metrics_log_is_byte_identical(self, tiny, tmp_path):
        cfg = _short("hybrid_plus", seed=3)
        for name in ("a", "b"):
            train(cfg, tiny.clip, tiny.vocab, tiny.splits["train"], tiny.splits["dev"], tmp_path / name)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
        lines = a.decode().splitlines()
        assert lines[0] == ",".join(LOG_COLUMNS) and len(lines) == cfg.steps + 1

    def test_logged_components_satisfy_loss_identity(self, tiny, tmp_path):
        cfg = _short("hybrid_plus", lambda_q=0.25)
        res = train(cfg, tiny.clip, tiny.vocab, tiny.splits["train"], tiny.splits["dev"])
        for row in res.log_rows[1:]:
            _, total, par, cas, qua, *_ = (float(x) for x in row.split(","))
            assert abs(total - (par + cas + 0.25 * qua)) < 1e-12

    def test_checkpoint_round_trip(self, tiny, tmp_path):
        cfg = _short("hybrid_plus", data_dir=str(tiny.data_dir))
        res = train(cfg, tiny.clip, tiny.vocab, tiny.splits["train"], tiny.splits["dev"], tmp_path)
        model, cfg2, _ = load_run(tmp_path, tiny.vocab)
        assert cfg2 == cfg
        for k, v in res.model.state_dict().items():
            np.testing.assert_array_equal(model.state_dict()[k], v)
        assert dev_metric(model, tiny.splits["dev"]) == dev_metric(res.model, tiny.splits["dev"])
        assert dev_metric(model, tiny.splits["dev"]) == res.best_metric

    def test_parallel_branch_isolated_in_hybrid_plus(self, tiny):
        # with the cascaded weights at zero the parallel path trains exactly as on its own
        par = train(_short("parallel"), tiny.clip, tiny.vocab, tiny.splits["train"], tiny.splits["dev"])
        hyb = train(_short("hybrid_plus", lambda_c=0.0, lambda_q=0.0), tiny.clip, tiny.vocab,
                    tiny.splits["train"], tiny.splits["dev"])
        utts = tiny.splits["dev"].utterances[:10]
        np.testing.assert_allclose(par.model.embed(utts)["parallel"], hyb.model.embed(utts)["parallel"],
                                   atol=1e-12)

    def test_non_finite_loss_aborts_keeping_last_checkpoint(self, tiny, tmp_path, monkeypatch):
        real = SpeechModel.forward

        def poisoned(self, utts, images, M, step, rng=None):
            losses, diag = real(self, utts, images, M, step, rng)
            if step == 4:
                losses["total"] = Tensor(np.nan)
            return losses, diag

        monkeypatch.setattr(SpeechModel, "forward", poisoned)
        with pytest.raises(TrainingError, match="step 4"):
            train(_short("parallel"), tiny.clip, tiny.vocab, tiny.splits["train"], tiny.splits["dev"], tmp_path)
        assert (tmp_path / "last.ckpt").is_file()
        assert not (tmp_path / "model.ckpt").exists()

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            dataclasses.replace(VariantConfig(), variant="cascaded", K=0)
