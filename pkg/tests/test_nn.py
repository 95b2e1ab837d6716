import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetsim import nn
from streetsim.nn.autodiff import NumericalError, ShapeMismatch


class TestTensorBasics:
    def test_backward_needs_scalar(self):
        t = nn.Tensor(np.ones((2, 3)), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            t.backward()

    def test_detach_cuts_tape(self):
        t = nn.Tensor(np.ones((2, 2)), requires_grad=True)
        y = nn.tsum(nn.mul(t.detach(), t.detach()))
        y.backward()
        assert t.grad is None

    def test_no_grad_records_nothing(self):
        t = nn.Tensor(np.ones(3), requires_grad=True)
        with nn.no_grad():
            y = nn.mul(t, t)
        assert y._parents == ()
        assert not y.requires_grad

    def test_grad_accumulates_across_uses(self):
        t = nn.Tensor(np.array([2.0]), requires_grad=True)
        y = nn.tsum(nn.add(nn.mul(t, t), t))
        y.backward()
        # d/dt (t^2 + t) = 2t + 1
        assert t.grad[0] == pytest.approx(5.0)

    def test_finite_check_trips(self):
        a = nn.Tensor(np.array([1e300]))
        b = nn.Tensor(np.array([1e300]))
        with np.errstate(over="ignore"), pytest.raises(NumericalError):
            nn.mul(a, b)

    def test_finite_check_switch(self):
        prev = nn.set_check_finite(False)
        try:
            with np.errstate(over="ignore"):
                out = nn.mul(nn.Tensor(np.array([1e300])), nn.Tensor(np.array([1e300])))
            assert np.isinf(out.data[0])
        finally:
            nn.set_check_finite(prev)

    def test_dtype_follows_input(self):
        a = nn.Tensor(np.ones(3, np.float32))
        assert nn.mul(a, a).dtype == np.float32
        b = nn.Tensor(np.ones(3, np.float64))
        assert nn.mul(b, b).dtype == np.float64


class TestConv2d:
    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.random((2, 5, 5, 3))
        k = np.zeros((1, 1, 3, 3))
        for c in range(3):
            k[0, 0, c, c] = 1.0
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(k), nn.Tensor(np.zeros(3)), stride=1)
        np.testing.assert_allclose(out.data, x)

    def test_zero_kernel_zero_output(self):
        rng = np.random.default_rng(1)
        x = rng.random((1, 8, 8, 2))
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(np.zeros((3, 3, 2, 4))), nn.Tensor(np.zeros(4)), stride=1)
        assert np.all(out.data == 0.0)

    def test_valid_spatial_sizes(self):
        x = nn.Tensor(np.zeros((1, 84, 84, 3), np.float32))
        h1 = nn.conv2d(x, nn.Tensor(np.zeros((8, 8, 3, 16), np.float32)), nn.Tensor(np.zeros(16, np.float32)), stride=4)
        assert h1.shape == (1, 20, 20, 16)
        h2 = nn.conv2d(h1, nn.Tensor(np.zeros((4, 4, 16, 32), np.float32)), nn.Tensor(np.zeros(32, np.float32)), stride=2)
        assert h2.shape == (1, 9, 9, 32)

    def test_matches_direct_convolution(self):
        # brute-force cross-correlation as the oracle
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 7, 6, 3))
        w = rng.standard_normal((3, 2, 3, 4))
        b = rng.standard_normal(4)
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(b), stride=2).data
        for bi in range(2):
            for oi in range(out.shape[1]):
                for oj in range(out.shape[2]):
                    patch = x[bi, oi * 2 : oi * 2 + 3, oj * 2 : oj * 2 + 2, :]
                    want = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2])) + b
                    np.testing.assert_allclose(out[bi, oi, oj], want, rtol=1e-10)

    def test_shape_errors(self):
        x = nn.Tensor(np.zeros((1, 4, 4, 3)))
        with pytest.raises(ShapeMismatch):
            nn.conv2d(x, nn.Tensor(np.zeros((3, 3, 2, 4))), nn.Tensor(np.zeros(4)), stride=1)
        with pytest.raises(ShapeMismatch):
            nn.conv2d(x, nn.Tensor(np.zeros((5, 5, 3, 4))), nn.Tensor(np.zeros(4)), stride=1)
        with pytest.raises(ShapeMismatch):
            nn.conv2d(x, nn.Tensor(np.zeros((2, 2, 3, 4))), nn.Tensor(np.zeros(3)), stride=1)


class TestLinear:
    def test_identity(self):
        x = np.arange(12.0).reshape(3, 4)
        out = nn.linear(nn.Tensor(x), nn.Tensor(np.eye(4)), nn.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.5, -2.0, 0.25])
        out = nn.linear(nn.Tensor(np.zeros((4, 5))), nn.Tensor(np.zeros((5, 3))), nn.Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_shape_error(self):
        with pytest.raises(ShapeMismatch):
            nn.linear(nn.Tensor(np.zeros((2, 3))), nn.Tensor(np.zeros((4, 5))), nn.Tensor(np.zeros(5)))


class TestLstmStep:
    def test_zero_params_zero_state(self):
        B, D, U = 2, 3, 4
        h = nn.Tensor(np.zeros((B, U)))
        c = nn.Tensor(np.zeros((B, U)))
        x = nn.Tensor(np.ones((B, D)))
        h2, c2 = nn.lstm_step(x, h, c, nn.Tensor(np.zeros((D, 4 * U))), nn.Tensor(np.zeros((U, 4 * U))), nn.Tensor(np.zeros(4 * U)))
        # all gates at 0.5, candidate tanh(0)=0 -> cell stays 0, output 0
        assert np.all(h2.data == 0.0)
        assert np.all(c2.data == 0.0)

    def test_saturated_forget_gate_preserves_cell(self):
        B, D, U = 1, 2, 3
        b = np.zeros(4 * U)
        b[U : 2 * U] = 30.0    # forget ~1
        b[:U] = -30.0          # input ~0
        b[3 * U :] = -30.0     # output ~0, keeps h from feeding back
        wx = nn.Tensor(np.zeros((D, 4 * U)))
        wh = nn.Tensor(np.zeros((U, 4 * U)))
        bt = nn.Tensor(b)
        c0 = np.array([[0.7, -0.3, 1.1]])
        h = nn.Tensor(np.zeros((B, U)))
        c = nn.Tensor(c0.copy())
        x = nn.Tensor(np.ones((B, D)))
        with nn.no_grad():
            for _ in range(100):
                h, c = nn.lstm_step(x, h, c, wx, wh, bt)
        np.testing.assert_allclose(c.data, c0, atol=1e-6)

    def test_state_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            nn.lstm_step(
                nn.Tensor(np.zeros((1, 2))),
                nn.Tensor(np.zeros((1, 3))),
                nn.Tensor(np.zeros((1, 4))),
                nn.Tensor(np.zeros((2, 12))),
                nn.Tensor(np.zeros((3, 12))),
                nn.Tensor(np.zeros(12)),
            )

    def test_matches_unfused_composition(self):
        rng = np.random.default_rng(3)
        B, D, U = 4, 6, 5
        x, h0, c0 = rng.standard_normal((B, D)), rng.standard_normal((B, U)), rng.standard_normal((B, U))
        wx, wh = rng.standard_normal((D, 4 * U)), rng.standard_normal((U, 4 * U))
        b = rng.standard_normal(4 * U)
        h1, c1 = nn.lstm_step(nn.Tensor(x), nn.Tensor(h0), nn.Tensor(c0), nn.Tensor(wx), nn.Tensor(wh), nn.Tensor(b))
        gates = x @ wx + h0 @ wh + b

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        i, f = sig(gates[:, :U]), sig(gates[:, U : 2 * U])
        g, o = np.tanh(gates[:, 2 * U : 3 * U]), sig(gates[:, 3 * U :])
        c_want = f * c0 + i * g
        np.testing.assert_allclose(c1.data, c_want, rtol=1e-12)
        np.testing.assert_allclose(h1.data, o * np.tanh(c_want), rtol=1e-12)


class TestDropout:
    def test_p_zero_identity(self):
        x = nn.Tensor(np.ones((3, 3)))
        assert nn.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_eval_identity(self):
        x = nn.Tensor(np.ones((3, 3)))
        assert nn.dropout(x, 0.9, False, np.random.default_rng(0)) is x

    def test_empirical_drop_rate(self):
        rng = np.random.default_rng(7)
        x = nn.Tensor(np.ones(100_000))
        out = nn.dropout(x, 0.5, True, rng)
        rate = float(np.mean(out.data == 0.0))
        assert abs(rate - 0.5) < 0.01

    def test_survivors_rescaled(self):
        rng = np.random.default_rng(8)
        out = nn.dropout(nn.Tensor(np.ones(10_000)), 0.25, True, rng)
        kept = out.data[out.data != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)

    def test_invalid_p(self):
        with pytest.raises(ShapeMismatch):
            nn.dropout(nn.Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


class TestSoftmaxLosses:
    def test_uniform_logits_loss_ln_k(self):
        for k in (2, 5, 16):
            loss = nn.softmax_xent(nn.Tensor(np.zeros((1, k))), [0])
            assert float(loss.data[0]) == pytest.approx(math.log(k), rel=1e-12)

    def test_confident_correct_drives_loss_to_zero(self):
        z = np.zeros((1, 4))
        z[0, 2] = 50.0
        loss = nn.softmax_xent(nn.Tensor(z), [2])
        assert float(loss.data[0]) < 1e-12

    def test_gradient_is_p_minus_onehot(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((3, 6))
        t = nn.Tensor(z, requires_grad=True)
        loss = nn.tsum(nn.softmax_xent(t, [1, 4, 0]))
        loss.backward()
        p = nn.softmax_np(z)
        p[np.arange(3), [1, 4, 0]] -= 1.0
        np.testing.assert_allclose(t.grad, p, rtol=1e-12)

    def test_stabilized_against_large_logits(self):
        z = np.array([[1000.0, 1000.0, 1000.0]])
        loss = nn.softmax_xent(nn.Tensor(z), [0])
        assert float(loss.data[0]) == pytest.approx(math.log(3))

    def test_entropy_uniform_is_ln_k(self):
        ent = nn.softmax_entropy(nn.Tensor(np.zeros((2, 5))))
        np.testing.assert_allclose(ent.data, math.log(5), rtol=1e-12)

    def test_entropy_peaked_near_zero(self):
        z = np.zeros((1, 5))
        z[0, 0] = 60.0
        ent = nn.softmax_entropy(nn.Tensor(z))
        assert float(ent.data[0]) < 1e-12

    def test_batch_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nn.softmax_xent(nn.Tensor(np.zeros((2, 3))), [0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_invariants(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.uniform(-50, 50, (4, 9))
        p = nn.softmax_np(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        loss = nn.softmax_xent(nn.Tensor(z), rng.integers(0, 9, 4))
        assert np.all(loss.data >= 0.0)
        ent = nn.softmax_entropy(nn.Tensor(z))
        assert np.all(ent.data >= -1e-12)
        assert np.all(ent.data <= math.log(9) + 1e-9)


class TestRmsprop:
    def _single(self, value, grad, **kw):
        ps = nn.ParamSet()
        ps.add("w", np.array([value]))
        nn.rmsprop_update(ps, {"w": np.array([grad])}, **kw)
        return ps, float(ps["w"].data[0])

    def test_zero_gradient_no_change(self):
        _, v = self._single(1.0, 0.0, lr=0.1)
        assert v == 1.0

    def test_lr_zero_identity(self):
        _, v = self._single(1.0, 5.0, lr=0.0)
        assert v == 1.0

    def test_first_step_formula(self):
        g, lr, eps = 2.0, 0.001, 0.1
        _, v = self._single(1.0, g, lr=lr, decay=0.99, epsilon=eps)
        want = 1.0 - lr * g / math.sqrt(0.01 * g * g + eps)
        assert v == pytest.approx(want, rel=1e-12)

    def test_constant_gradient_fixed_point(self):
        # ms converges to g^2, so the step size approaches lr*g/sqrt(g^2+eps)
        ps = nn.ParamSet()
        ps.add("w", np.array([0.0]))
        g, lr, eps = 3.0, 0.01, 0.1
        prev = 0.0
        for step in range(2000):
            nn.rmsprop_update(ps, {"w": np.array([g])}, lr=lr, decay=0.99, epsilon=eps)
            delta = float(ps["w"].data[0]) - prev
            prev = float(ps["w"].data[0])
        assert delta == pytest.approx(-lr * g / math.sqrt(g * g + eps), rel=1e-6)

    def test_momentum_accumulates(self):
        ps = nn.ParamSet()
        ps.add("w", np.array([0.0]))
        nn.rmsprop_update(ps, {"w": np.array([1.0])}, lr=0.1, momentum=0.9)
        first = float(ps["w"].data[0])
        nn.rmsprop_update(ps, {"w": np.array([1.0])}, lr=0.1, momentum=0.9)
        second = float(ps["w"].data[0]) - first
        assert abs(second) > abs(first)

    def test_misaligned_name(self):
        ps = nn.ParamSet()
        ps.add("w", np.zeros(2))
        with pytest.raises(nn.MisalignedGradients):
            nn.rmsprop_update(ps, {"nope": np.zeros(2)}, lr=0.1)

    def test_misaligned_shape(self):
        ps = nn.ParamSet()
        ps.add("w", np.zeros(2))
        with pytest.raises(nn.MisalignedGradients):
            nn.rmsprop_update(ps, {"w": np.zeros(3)}, lr=0.1)

    def test_only_restricts_update(self):
        ps = nn.ParamSet()
        ps.add("a", np.array([1.0]))
        ps.add("b", np.array([1.0]))
        grads = {"a": np.array([1.0]), "b": np.array([1.0])}
        nn.rmsprop_update(ps, grads, lr=0.1, only=["a"])
        assert float(ps["a"].data[0]) != 1.0
        assert float(ps["b"].data[0]) == 1.0
        assert "b/ms" not in ps.slots


class TestGradUtils:
    def test_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert nn.global_grad_norm(grads) == pytest.approx(5.0)

    def test_clip_noop_under_limit(self):
        grads = {"a": np.array([1.0])}
        assert nn.clip_grads(grads, 10.0) is grads

    def test_clip_rescales(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped = nn.clip_grads(grads, 1.0)
        assert nn.global_grad_norm(clipped) == pytest.approx(1.0)


class TestInitializers:
    def test_orthogonal_columns(self):
        q = nn.orthogonal(np.random.default_rng(0), (8, 8), np.float64)
        np.testing.assert_allclose(q.T @ q, np.eye(8), atol=1e-10)

    def test_orthogonal_rectangular(self):
        q = nn.orthogonal(np.random.default_rng(1), (10, 4), np.float64)
        np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-10)

    def test_lstm_recurrent_blocks(self):
        w = nn.lstm_recurrent(np.random.default_rng(2), 6, np.float64)
        assert w.shape == (6, 24)
        for k in range(4):
            blk = w[:, 6 * k : 6 * (k + 1)]
            np.testing.assert_allclose(blk.T @ blk, np.eye(6), atol=1e-10)

    def test_lstm_bias_forget_block(self):
        b = nn.lstm_bias(5, forget_bias=1.0)
        np.testing.assert_array_equal(b[5:10], 1.0)
        assert np.all(b[:5] == 0.0) and np.all(b[10:] == 0.0)

    def test_fanin_bound(self):
        w = nn.fanin_uniform(np.random.default_rng(3), (16, 50))
        assert np.all(np.abs(w) <= 1.0 / 4.0)

    def test_deterministic_given_seed(self):
        a = nn.orthogonal(np.random.default_rng(9), (5, 5))
        b = nn.orthogonal(np.random.default_rng(9), (5, 5))
        np.testing.assert_array_equal(a, b)


class TestParamSet:
    def test_duplicate_name(self):
        ps = nn.ParamSet()
        ps.add("w", np.zeros(2))
        with pytest.raises(nn.DuplicateParam):
            ps.add("w", np.zeros(2))

    def test_unknown_name(self):
        with pytest.raises(nn.UnknownParam):
            nn.ParamSet()["missing"]

    def test_snapshot_is_a_copy(self):
        ps = nn.ParamSet()
        ps.add("w", np.ones(2, np.float32))
        snap = ps.snapshot()
        ps["w"].data[0] = 9.0
        assert snap["w"][0] == 1.0

    def test_load_snapshot_shape_guard(self):
        ps = nn.ParamSet()
        ps.add("w", np.ones(2, np.float32))
        with pytest.raises(ValueError):
            ps.load_snapshot({"w": np.ones(3, np.float32)})

    def test_subset_prefix(self):
        ps = nn.ParamSet()
        ps.add("conv/w", np.zeros(1))
        ps.add("conv/b", np.zeros(1))
        ps.add("fc/w", np.zeros(1))
        assert ps.subset("conv/") == ["conv/w", "conv/b"]


class TestCheckpoint:
    def _make(self):
        rng = np.random.default_rng(5)
        ps = nn.ParamSet()
        ps.add("fc/w", rng.standard_normal((4, 3)).astype(np.float32))
        ps.add("fc/b", rng.standard_normal(3).astype(np.float32))
        ps.slots["fc/w/ms"] = rng.random((4, 3)).astype(np.float32)
        return ps

    def test_round_trip(self, tmp_path):
        ps = self._make()
        path = tmp_path / "ck.bin"
        nn.save_params(path, ps, meta={"global_step": 123})
        loaded, meta = nn.load_params(path)
        assert meta == {"global_step": 123}
        for name in ps.names():
            np.testing.assert_array_equal(loaded[name].data, ps[name].data)
        np.testing.assert_array_equal(loaded.slots["fc/w/ms"], ps.slots["fc/w/ms"])

    def test_round_trip_into_existing(self, tmp_path):
        ps = self._make()
        path = tmp_path / "ck.bin"
        nn.save_params(path, ps)
        other = self._make()
        other["fc/w"].data[:] = 0.0
        nn.load_params(path, other)
        np.testing.assert_array_equal(other["fc/w"].data, ps["fc/w"].data)

    def test_byte_stable(self, tmp_path):
        ps = self._make()
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        nn.save_params(a, ps, meta={"k": 1})
        nn.save_params(b, ps, meta={"k": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "ck.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(nn.CheckpointError):
            nn.load_params(path)

    def test_truncated_blob(self, tmp_path):
        ps = self._make()
        path = tmp_path / "ck.bin"
        nn.save_params(path, ps)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(nn.CheckpointError):
            nn.load_params(path)

    def test_name_mismatch(self, tmp_path):
        ps = self._make()
        path = tmp_path / "ck.bin"
        nn.save_params(path, ps)
        other = nn.ParamSet()
        other.add("different", np.zeros(2, np.float32))
        with pytest.raises(nn.CheckpointError):
            nn.load_params(path, other)


class TestDeterminism:
    def test_forward_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = nn.Tensor(rng.random((2, 6, 6, 3)).astype(np.float32))
            w = nn.Tensor(nn.fanin_uniform(rng, (3, 3, 3, 4)))
            b = nn.Tensor(np.zeros(4, np.float32))
            out = nn.relu(nn.conv2d(x, w, b, stride=1))
            return out.data.copy()

        np.testing.assert_array_equal(run(), run())
