"""Finite-difference verification for every differentiable op.

All checks run at float64 with the central-difference harness; the composed
agent architectures get the same treatment in test_agents.py.
"""

import numpy as np
import pytest

from streetsim import nn


def check(graph_fn, params, tol=1e-4):
    report = nn.grad_check(graph_fn, params, tolerance=tol)
    assert report["passed"], f"max rel error {report['max_rel_error']:.3g} over {tol}"
    return report


class TestElementwiseOps:
    def test_add_mul_sub_neg(self):
        rng = np.random.default_rng(0)
        ps = nn.ParamSet()
        a = ps.add("a", rng.standard_normal((3, 4)))
        b = ps.add("b", rng.standard_normal((3, 4)))

        def fn():
            return nn.tsum(nn.mul(nn.sub(nn.add(a, b), nn.neg(b)), a))

        check(fn, ps)

    def test_broadcast_row(self):
        rng = np.random.default_rng(1)
        ps = nn.ParamSet()
        m = ps.add("m", rng.standard_normal((4, 5)))
        row = ps.add("row", rng.standard_normal((1, 5)))

        def fn():
            return nn.tsum(nn.mul(nn.add(m, row), nn.add(m, row)))

        check(fn, ps)

    def test_tanh_sigmoid_relu(self):
        rng = np.random.default_rng(2)
        ps = nn.ParamSet()
        x = ps.add("x", rng.standard_normal((4, 4)))

        def fn():
            return nn.tsum(nn.add(nn.tanh(x), nn.add(nn.sigmoid(x), nn.relu(x))))

        check(fn, ps)

    def test_scale(self):
        ps = nn.ParamSet()
        x = ps.add("x", np.random.default_rng(3).standard_normal(6))

        def fn():
            return nn.tsum(nn.scale(nn.mul(x, x), -0.25))

        check(fn, ps)


class TestShapeOps:
    def test_concat_slice_reshape(self):
        rng = np.random.default_rng(4)
        ps = nn.ParamSet()
        a = ps.add("a", rng.standard_normal((3, 2)))
        b = ps.add("b", rng.standard_normal((3, 5)))

        def fn():
            joined = nn.concat([a, b], axis=1)
            piece = nn.slice_cols(joined, 1, 6)
            flat = nn.reshape(piece, (15,))
            return nn.tsum(nn.mul(flat, flat))

        check(fn, ps)

    def test_matmul(self):
        rng = np.random.default_rng(5)
        ps = nn.ParamSet()
        a = ps.add("a", rng.standard_normal((3, 4)))
        b = ps.add("b", rng.standard_normal((4, 2)))

        def fn():
            return nn.tsum(nn.matmul(a, b))

        check(fn, ps)


class TestLayerGradients:
    def test_linear_exact(self):
        rng = np.random.default_rng(6)
        ps = nn.ParamSet()
        x = ps.add("x", rng.standard_normal((4, 5)))
        w = ps.add("w", rng.standard_normal((5, 3)))
        b = ps.add("b", rng.standard_normal(3))

        def fn():
            return nn.tsum(nn.linear(x, w, b))

        # affine in every argument: central differences are exact to rounding
        report = check(fn, ps, tol=1e-7)
        assert report["max_rel_error"] < 1e-7

    def test_conv2d_random_6x6(self):
        rng = np.random.default_rng(7)
        ps = nn.ParamSet()
        x = ps.add("x", rng.standard_normal((2, 6, 6, 3)))
        w = ps.add("w", rng.standard_normal((3, 3, 3, 4)) * 0.4)
        b = ps.add("b", rng.standard_normal(4) * 0.2)

        def fn():
            out = nn.conv2d(x, w, b, stride=1)
            return nn.tsum(nn.mul(out, out))

        check(fn, ps)

    def test_conv2d_strided(self):
        rng = np.random.default_rng(8)
        ps = nn.ParamSet()
        x = ps.add("x", rng.standard_normal((1, 9, 9, 2)))
        w = ps.add("w", rng.standard_normal((3, 3, 2, 3)) * 0.4)
        b = ps.add("b", np.zeros(3))

        def fn():
            out = nn.relu(nn.conv2d(x, w, b, stride=2))
            return nn.tsum(nn.mul(out, out))

        check(fn, ps)

    def test_lstm_five_step_unroll(self):
        rng = np.random.default_rng(9)
        B, D, U = 2, 3, 4
        ps = nn.ParamSet()
        wx = ps.add("wx", rng.standard_normal((D, 4 * U)) * 0.3)
        wh = ps.add("wh", rng.standard_normal((U, 4 * U)) * 0.3)
        b = ps.add("b", rng.standard_normal(4 * U) * 0.2)
        xs = [rng.standard_normal((B, D)) for _ in range(5)]

        def fn():
            h = nn.Tensor(np.zeros((B, U)))
            c = nn.Tensor(np.zeros((B, U)))
            for x in xs:
                h, c = nn.lstm_step(nn.Tensor(x), h, c, wx, wh, b)
            return nn.tsum(nn.mul(h, h))

        check(fn, ps)

    def test_lstm_gradient_through_cell_path(self):
        rng = np.random.default_rng(10)
        B, D, U = 2, 3, 3
        ps = nn.ParamSet()
        wx = ps.add("wx", rng.standard_normal((D, 4 * U)) * 0.5)
        wh = ps.add("wh", rng.standard_normal((U, 4 * U)) * 0.5)
        b = ps.add("b", np.zeros(4 * U))
        x = rng.standard_normal((B, D))

        def fn():
            h = nn.Tensor(np.zeros((B, U)))
            c = nn.Tensor(np.zeros((B, U)))
            h, c = nn.lstm_step(nn.Tensor(x), h, c, wx, wh, b)
            # loss touches only the cell output
            return nn.tsum(nn.mul(c, c))

        check(fn, ps)

    def test_lstm_initial_state_gradient(self):
        rng = np.random.default_rng(11)
        B, D, U = 2, 2, 3
        ps = nn.ParamSet()
        h0 = ps.add("h0", rng.standard_normal((B, U)) * 0.3)
        c0 = ps.add("c0", rng.standard_normal((B, U)) * 0.3)
        wx = nn.Tensor(rng.standard_normal((D, 4 * U)) * 0.5)
        wh = nn.Tensor(rng.standard_normal((U, 4 * U)) * 0.5)
        b = nn.Tensor(np.zeros(4 * U))
        x = rng.standard_normal((B, D))

        def fn():
            h, c = nn.lstm_step(nn.Tensor(x), h0, c0, wx, wh, b)
            h, c = nn.lstm_step(nn.Tensor(x), h, c, wx, wh, b)
            return nn.tsum(nn.add(nn.mul(h, h), nn.mul(c, c)))

        check(fn, ps)


class TestLossGradients:
    def test_softmax_xent(self):
        rng = np.random.default_rng(12)
        ps = nn.ParamSet()
        z = ps.add("z", rng.standard_normal((4, 6)))
        targets = np.array([0, 2, 5, 1])

        def fn():
            return nn.tsum(nn.softmax_xent(z, targets))

        check(fn, ps)

    def test_softmax_entropy(self):
        rng = np.random.default_rng(13)
        ps = nn.ParamSet()
        z = ps.add("z", rng.standard_normal((3, 5)))

        def fn():
            return nn.tsum(nn.softmax_entropy(z))

        check(fn, ps)

    def test_dropout_fixed_mask(self):
        rng = np.random.default_rng(14)
        ps = nn.ParamSet()
        x = ps.add("x", rng.standard_normal((5, 6)))
        mask_vals = np.random.default_rng(99).random((5, 6))

        class Replay:
            def random(self, shape):
                return mask_vals

        def fn():
            y = nn.dropout(x, 0.4, True, Replay())
            return nn.tsum(nn.mul(y, y))

        check(fn, ps)


class TestHarness:
    def test_corrupted_gradient_detected(self):
        rng = np.random.default_rng(15)
        ps = nn.ParamSet()
        w = ps.add("w", rng.standard_normal((3, 3)))

        class Broken(nn.Tensor):
            pass

        def fn():
            out = nn.tsum(nn.mul(w, w))
            # sabotage: double the analytic gradient via an extra tape node
            bad = nn.tsum(nn.mul(w.detach(), w))
            return nn.add(out, bad)

        # d/dw of (w*w + detach(w)*w) = 2w + detach(w) = 3w, but finite
        # differences see d/dw (w*w + w*w) = 4w since detach tracks the value
        report = nn.grad_check(fn, ps)
        assert not report["passed"]
        assert report["max_rel_error"] > 1e-2

    def test_report_structure(self):
        ps = nn.ParamSet()
        x = ps.add("x", np.arange(3.0))

        def fn():
            return nn.tsum(nn.mul(x, x))

        report = nn.grad_check(fn, ps)
        assert set(report) == {"max_rel_error", "per_param", "tolerance", "passed"}
        assert "x" in report["per_param"]

    def test_sampled_elements_on_large_tensor(self):
        rng = np.random.default_rng(16)
        ps = nn.ParamSet()
        w = ps.add("w", rng.standard_normal((40, 40)) * 0.1)

        def fn():
            return nn.tsum(nn.tanh(w))

        report = nn.grad_check(fn, ps, max_elements_per_param=20)
        assert report["passed"]
