"""Autodiff core: every primitive against central differences."""

import numpy as np
import pytest

import speclab.tensor as T
from speclab.sampling import Rng

from conftest import central_diff_worst

TOL = 1e-7


def _leaf(rng, shape, scale=1.0):
    return T.Tensor(rng.normal(shape, std=scale), requires_grad=True)


class TestPrimitives:
    def test_add_mul_broadcast(self):
        """Elementwise ops unbroadcast gradients back to the leaf shape."""
        rng = Rng(1)
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (4,))

        def loss():
            return T.sum_all(T.mul(T.add(a, b), T.sub(a, b)))

        assert central_diff_worst(loss, {"a": a, "b": b}, rng) < TOL

    def test_matmul_chain(self):
        """Two stacked matmuls backpropagate through both operands."""
        rng = Rng(2)
        a = _leaf(rng, (2, 3))
        b = _leaf(rng, (3, 5))
        c = _leaf(rng, (5, 2))

        def loss():
            return T.sum_all(T.matmul(T.matmul(a, b), c))

        assert central_diff_worst(loss, {"a": a, "b": b, "c": c}, rng) < TOL

    def test_batched_matmul(self):
        """Leading batch dimensions broadcast like numpy's matmul."""
        rng = Rng(3)
        a = _leaf(rng, (4, 2, 3))
        b = _leaf(rng, (3, 5))

        def loss():
            return T.mean_all(T.matmul(a, b))

        assert central_diff_worst(loss, {"a": a, "b": b}, rng) < TOL

    def test_embedding_scatters_rows(self):
        """Gradient lands only on the looked-up rows, repeats accumulate."""
        rng = Rng(4)
        table = _leaf(rng, (6, 3))
        ids = np.array([1, 1, 4])

        def loss():
            return T.sum_all(T.embedding(table, ids))

        T.backward(loss(), [table])
        grad = table.grad
        assert grad[1].sum() == pytest.approx(6.0)
        assert grad[4].sum() == pytest.approx(3.0)
        assert grad[[0, 2, 3, 5]].sum() == 0.0

    def test_reshape_transpose_concat_narrow(self):
        """Shape plumbing is gradient-transparent."""
        rng = Rng(5)
        a = _leaf(rng, (2, 6))
        b = _leaf(rng, (2, 3))

        def loss():
            c = T.concat([T.reshape(a, (2, 3, 2)), T.reshape(b, (2, 3, 1))],
                         axis=-1)
            d = T.transpose(c, (1, 0, 2))
            return T.sum_all(T.mul(T.narrow(d, 2, 1, 2), T.narrow(d, 2, 0, 2)))

        assert central_diff_worst(loss, {"a": a, "b": b}, rng) < TOL

    def test_silu_rms_norm(self):
        rng = Rng(6)
        x = _leaf(rng, (3, 8))
        w = _leaf(rng, (8,))

        def loss():
            return T.sum_all(T.silu(T.rms_norm(x, w)))

        assert central_diff_worst(loss, {"x": x, "w": w}, rng) < TOL

    def test_masked_softmax_rows_sum_to_one(self):
        """Masked positions get exactly zero probability."""
        rng = Rng(7)
        scores = _leaf(rng, (2, 4, 4))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        out = T.masked_softmax(scores, mask)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data[:, 0, 1:] == 0.0).all()

    def test_masked_softmax_grad(self):
        rng = Rng(8)
        scores = _leaf(rng, (4, 4))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        probe = rng.normal((4, 4))

        def loss():
            return T.sum_all(T.mul(T.masked_softmax(scores, mask), probe))

        assert central_diff_worst(loss, {"s": scores}, rng, samples=8) < TOL

    def test_cross_entropy_vs_closed_form(self):
        """CE against soft targets equals -sum p log softmax(z)."""
        rng = Rng(9)
        logits = _leaf(rng, (3, 5))
        raw = np.abs(rng.normal((3, 5))) + 0.1
        targets = raw / raw.sum(-1, keepdims=True)
        got = T.cross_entropy(logits, targets).item()
        z = logits.data - logits.data.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        want = float(-(targets * logp).sum(-1).mean())
        assert got == pytest.approx(want, abs=1e-12)

        def loss():
            return T.cross_entropy(logits, targets)

        assert central_diff_worst(loss, {"z": logits}, rng, samples=8) < TOL

    def test_smooth_l1_regions(self):
        """Quadratic inside beta, linear outside, matched at the knee."""
        pred = T.Tensor(np.array([0.0, 0.5, 2.0]), requires_grad=True)
        target = np.zeros(3)
        val = T.smooth_l1(pred, target, beta=1.0).item()
        want = (0.0 + 0.5 * 0.25 + (2.0 - 0.5)) / 3.0
        assert val == pytest.approx(want, abs=1e-12)
        rng = Rng(10)

        def loss():
            return T.smooth_l1(pred, target, beta=1.0)

        assert central_diff_worst(loss, {"p": pred}, rng, samples=6) < 1e-6

    def test_softmax_temperature(self):
        rng = Rng(11)
        v = _leaf(rng, (6,))
        hot = T.softmax(v, temperature=0.25).data
        cold = T.softmax(v, temperature=4.0).data
        assert hot.max() > cold.max()
        np.testing.assert_allclose(hot.sum(), 1.0, atol=1e-12)


class TestTape:
    def test_grad_accumulates_across_backwards(self):
        """Two backward passes add into .grad until zero_grad clears it."""
        a = T.Tensor(np.ones(3), requires_grad=True)
        T.backward(T.sum_all(a), [a])
        T.backward(T.sum_all(a), [a])
        np.testing.assert_array_equal(a.grad, 2.0 * np.ones(3))
        a.zero_grad()
        assert a.grad is None

    def test_no_grad_suppresses_tape(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.sum_all(a)
        assert out._vjp is None

    def test_untouched_param_gets_zero_grad(self):
        """backward(params=...) fills in zeros for unreachable leaves."""
        a = T.Tensor(np.ones(3), requires_grad=True)
        b = T.Tensor(np.ones(2), requires_grad=True)
        T.backward(T.sum_all(a), [a, b])
        np.testing.assert_array_equal(b.grad, np.zeros(2))

    def test_nonfinite_raises(self):
        a = T.Tensor(np.array([1e308]), requires_grad=True)
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            T.mul(a, a)

    def test_scalar_loss_required(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(T.add(a, a), [a])

    def test_diamond_reuse(self):
        """A node consumed twice contributes both path gradients."""
        rng = Rng(12)
        a = _leaf(rng, (3,))

        def loss():
            h = T.silu(a)
            return T.sum_all(T.mul(h, h))

        assert central_diff_worst(loss, {"a": a}, rng, samples=3) < TOL


class TestSerialization:
    def test_roundtrip_shapes(self):
        rng = Rng(13)
        for shape in [(3,), (2, 4), (2, 3, 4), ()]:
            arr = rng.normal(shape) if shape else np.float64(1.5)
            buf = T.tensor_to_bytes(np.asarray(arr))
            back, used = T.tensor_from_bytes(buf)
            assert used == len(buf)
            np.testing.assert_array_equal(back, np.asarray(arr))

    def test_concatenated_stream(self):
        a, b = np.arange(3.0), np.arange(6.0).reshape(2, 3)
        buf = T.tensor_to_bytes(a) + T.tensor_to_bytes(b)
        got_a, off = T.tensor_from_bytes(buf)
        got_b, off = T.tensor_from_bytes(buf, off)
        assert off == len(buf)
        np.testing.assert_array_equal(got_a, a)
        np.testing.assert_array_equal(got_b, b)
