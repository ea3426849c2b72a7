import struct

import numpy as np
import pytest

from cifvgs.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from cifvgs.nn import LayerNorm, Linear, Module, StatisticsError, StatNorm, normalize_to_stats
from cifvgs.optim import AdamState, NonFiniteGradientError, adam_step, warmup_lr
from cifvgs.tensor import ParameterError, Tensor, parameter

torch = pytest.importorskip("torch")


class _Pair(Module):
    def __init__(self, rng):
        self.a = Linear(3, 2, rng)
        self.blocks = [Linear(2, 2, rng), LayerNorm(2)]
        self.frozen = Tensor(np.ones(2))
        self._hidden = Linear(2, 2, rng)


class TestModule:
    def test_parameter_discovery(self):
        m = _Pair(np.random.default_rng(0))
        names = [n for n, _ in m.named_parameters()]
        assert names == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias",
                         "blocks.1.gain", "blocks.1.shift"]
        assert "frozen" in dict(m.named_tensors())

    def test_state_round_trip(self):
        m1, m2 = _Pair(np.random.default_rng(0)), _Pair(np.random.default_rng(1))
        m2.load_state_dict(m1.state_dict())
        for (n1, t1), (n2, t2) in zip(m1.named_tensors(), m2.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_strict_load_reports_mismatch(self):
        m = _Pair(np.random.default_rng(0))
        state = m.state_dict()
        state.pop("a.bias")
        with pytest.raises(KeyError):
            m.load_state_dict(state)

    def test_freeze(self):
        m = _Pair(np.random.default_rng(0)).freeze()
        assert m.parameters() == []


class TestLayerNorm:
    def test_matches_torch(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4, 5))
        ln = LayerNorm(5)
        ln.gain.data[:] = rng.normal(size=5)
        ln.shift.data[:] = rng.normal(size=5)
        ref = torch.nn.functional.layer_norm(torch.tensor(x), (5,), torch.tensor(ln.gain.data),
                                             torch.tensor(ln.shift.data), eps=1e-5)
        np.testing.assert_allclose(ln(Tensor(x)).data, ref.numpy(), atol=1e-12)


class TestNormalizeToStats:
    def test_hits_target_statistics(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 5.0, size=(400, 4))
        target_mean, target_std = np.array([1.0, -2.0, 0.0, 0.5]), np.array([0.5, 2.0, 1.0, 3.0])
        out = normalize_to_stats(Tensor(x), np.zeros(4), np.ones(4), target_mean, target_std, True).data
        np.testing.assert_allclose(out.mean(axis=0), target_mean, atol=1e-12)
        # eps keeps the spread marginally under target
        np.testing.assert_allclose(out.std(axis=0), target_std, rtol=1e-5)

    def test_running_statistics_update(self):
        x = np.array([[0.0, 2.0], [2.0, 6.0]])
        rm, rv = np.zeros(2), np.ones(2)
        normalize_to_stats(Tensor(x), rm, rv, np.zeros(2), np.ones(2), True, momentum=0.1)
        np.testing.assert_allclose(rm, [0.1, 0.4])
        np.testing.assert_allclose(rv, [0.9 + 0.1 * 1.0, 0.9 + 0.1 * 4.0])

    def test_eval_uses_running_statistics(self):
        rm, rv = np.array([1.0]), np.array([4.0])
        out = normalize_to_stats(Tensor([[3.0]]), rm, rv, np.array([10.0]), np.array([2.0]), False, eps=0.0)
        assert out.item() == pytest.approx(12.0)

    def test_needs_two_rows(self):
        with pytest.raises(StatisticsError):
            normalize_to_stats(Tensor(np.ones((1, 3))), np.zeros(3), np.ones(3), np.zeros(3), np.ones(3), True)

    def test_rejects_nonpositive_target_std(self):
        with pytest.raises(ParameterError):
            StatNorm(np.zeros(2), np.array([1.0, 0.0]))


class TestAdam:
    def test_matches_torch_adam(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=(3, 2))
        w = parameter(w0.copy())
        state = AdamState(lr=0.01)
        tw = torch.tensor(w0.copy(), requires_grad=True)
        opt = torch.optim.Adam([tw], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
        for step in range(5):
            x = rng.normal(size=(4, 3))
            w.grad = None
            ((Tensor(x) @ w).tanh().sum()).backward()
            adam_step(state, {"w": w})
            opt.zero_grad()
            torch.tanh(torch.tensor(x) @ tw).sum().backward()
            opt.step()
        np.testing.assert_allclose(w.data, tw.detach().numpy(), atol=1e-12)

    def test_non_finite_gradient_leaves_parameters(self):
        a, b = parameter(np.ones(2)), parameter(np.ones(2))
        a.grad, b.grad = np.ones(2), np.array([np.nan, 0.0])
        state = AdamState()
        with pytest.raises(NonFiniteGradientError) as info:
            adam_step(state, {"a": a, "b": b})
        assert info.value.name == "b"
        np.testing.assert_array_equal(a.data, [1.0, 1.0])
        assert state.step == 0

    def test_state_round_trip(self):
        p = parameter(np.ones(3))
        p.grad = np.array([0.1, -0.2, 0.3])
        state = AdamState(lr=0.5)
        adam_step(state, {"p": p})
        back = AdamState.from_arrays(state.to_arrays())
        assert back.step == 1 and back.lr == 0.5
        np.testing.assert_array_equal(back.m["p"], state.m["p"])
        np.testing.assert_array_equal(back.v["p"], state.v["p"])

    def test_warmup_schedule(self):
        # 5% of 1000 steps = 50 warm-up steps
        assert warmup_lr(1.0, 1, 1000) == pytest.approx(1 / 50)
        assert warmup_lr(1.0, 25, 1000) == pytest.approx(0.5)
        assert warmup_lr(1.0, 50, 1000) == 1.0
        assert warmup_lr(1.0, 999, 1000) == 1.0


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "spc/w": rng.normal(size=(3, 4)),
            "txt/ünï": rng.normal(size=(2,)),
            "opt/step": np.array(7.0),
            "img/empty": np.zeros((0, 3)),
        }
        save_checkpoint(tmp_path / "a.ckpt", arrays)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_byte_layout(self, tmp_path):
        save_checkpoint(tmp_path / "b.ckpt", {"ab": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "b.ckpt").read_bytes()
        expected = (MAGIC + struct.pack("<Q", 2) + b"ab" + struct.pack("<QQQ", 2, 1, 2)
                    + struct.pack("<2d", 1.0, 2.0))
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"XXXX1")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "d.ckpt", {"w": np.ones(4)})
        raw = (tmp_path / "d.ckpt").read_bytes()
        (tmp_path / "d.ckpt").write_bytes(raw[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "d.ckpt")
