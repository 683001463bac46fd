import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsemem import numerics as nx
from sparsemem.errors import ContractError, EmptyLossError, ShapeError
from sparsemem.numerics import Parameter, Tensor


def _triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.5, -2.0], [3.0, 4.25]])
        out = nx.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_hand_case(self):
        out = nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, _triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_both_operands(self):
        a = Parameter("a", [[1.0, 2.0]])
        b = Parameter("b", [[3.0], [4.0]])
        nx.backward(nx.sum_all(nx.matmul(a, b)))
        assert a.grad.tolist() == [[3.0, 4.0]]
        assert b.grad.tolist() == [[1.0], [2.0]]


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_large_inputs_do_not_overflow(self):
        out = nx.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)

    @given(arrays(np.float64, (4, 7), elements=st.floats(-1e4, 1e4)))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one(self, x):
        out = nx.softmax_rows(Tensor(x)).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestSilu:
    def test_zero(self):
        assert nx.silu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_saturates(self):
        assert nx.silu(Tensor(np.array([40.0]))).data[0] == pytest.approx(40.0, rel=1e-12)

    def test_one(self):
        assert nx.silu(Tensor(np.array([1.0]))).data[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
        assert nx.silu(Tensor(np.array([1.0]))).data[0] == pytest.approx(0.731059, abs=1e-6)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = nx.cross_entropy_masked(Tensor(np.zeros((3, 4))), [0, 1, 2], [True] * 3)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_margin_limit(self):
        losses = []
        for margin in (1.0, 5.0, 20.0, 50.0):
            logits = np.zeros((1, 5))
            logits[0, 2] = margin
            losses.append(nx.cross_entropy_masked(Tensor(logits), [2], [True]).item())
        assert losses == sorted(losses, reverse=True)
        assert losses[-1] < 1e-15

    def test_masked_position_is_ignored(self):
        logits = np.array([[0.3, -1.2, 2.0], [5.0, 0.1, -0.4]])
        # hand log-softmax of row 0 at target 2
        expected = -(2.0 - math.log(math.exp(0.3) + math.exp(-1.2) + math.exp(2.0)))
        p = Parameter("logits", logits)
        loss = nx.cross_entropy_masked(p, [2, 0], [True, False])
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        nx.backward(loss)
        assert np.all(p.grad[1] == 0.0)

    def test_all_masked_raises(self):
        with pytest.raises(EmptyLossError):
            nx.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], [False, False])

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            nx.cross_entropy_masked(Tensor(np.zeros((1, 3))), [3], [True])


class TestBackward:
    def test_sum_gives_ones(self):
        p = Parameter("p", np.arange(6.0).reshape(2, 3))
        nx.backward(nx.sum_all(p))
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_square(self):
        p = Parameter("p", [3.0])
        nx.backward(nx.sum_all(nx.mul(p, p)))
        assert p.grad.tolist() == [6.0]

    def test_non_scalar_rejected(self):
        p = Parameter("p", [1.0, 2.0])
        with pytest.raises(ContractError):
            nx.backward(nx.mul(p, p))

    def test_accumulates_across_calls(self):
        p = Parameter("p", [2.0])
        nx.backward(nx.sum_all(p))
        nx.backward(nx.sum_all(p))
        assert p.grad.tolist() == [2.0]
        nx.zero_grads([p])
        assert p.grad.tolist() == [0.0]

    def test_frozen_parameter_gets_nothing(self):
        p = Parameter("p", [2.0], trainable=False)
        q = Parameter("q", [5.0])
        nx.backward(nx.sum_all(nx.mul(p, q)))
        assert p.grad.tolist() == [0.0]
        assert q.grad.tolist() == [2.0]

    def test_no_grad_records_nothing(self):
        p = Parameter("p", [2.0])
        with nx.no_grad():
            out = nx.mul(p, p)
        assert not out.requires_grad

    def test_linearity(self):
        rng = np.random.default_rng(0)
        w = Parameter("w", rng.standard_normal((4, 3)))
        x = Tensor(rng.standard_normal((5, 4)))

        def l1():
            return nx.sum_all(nx.silu(nx.matmul(x, w)))

        def l2():
            return nx.sum_all(nx.softmax_rows(nx.matmul(x, w)) * Tensor(rng_fixed))

        rng_fixed = rng.standard_normal((5, 3))
        nx.backward(nx.add(l1(), l2()))
        joint = w.grad.copy()
        nx.zero_grads([w])
        nx.backward(l1())
        nx.backward(l2())
        np.testing.assert_allclose(joint, w.grad, rtol=0, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((6, 5))
        a = nx.softmax_rows(nx.silu(nx.matmul(Tensor(x), Tensor(x.T)))).data
        b = nx.softmax_rows(nx.silu(nx.matmul(Tensor(x), Tensor(x.T)))).data
        assert a.tobytes() == b.tobytes()


def _op_losses(rng):
    """Small f64 graphs covering each primitive, for finite-difference checks."""
    table = Parameter("table", rng.standard_normal((6, 3)))
    w = Parameter("w", rng.standard_normal((3, 4)))
    gain = Parameter("gain", rng.standard_normal(4) + 1.0)
    bias = Parameter("bias", rng.standard_normal(4))
    idx = np.array([[0, 2], [5, 2], [1, 1]])
    bmat = Parameter("bmat", rng.standard_normal((2, 3, 4)))
    proj = rng.standard_normal((3, 4))
    targets = np.array([1, 3, 0])
    mask = nx.RowGradMask(np.array([True, False, True, True, False, True]))

    def loss():
        weights = nx.softmax_rows(nx.take_along_rows(nx.matmul(nx.gather_rows(table, [0, 3, 5]), w), idx))
        read = nx.weighted_row_sum(nx.mask_row_grads(table, mask), idx, weights)
        h = nx.layer_norm(nx.matmul(read, w), gain, bias)
        h = nx.add(h, nx.slice_last(nx.silu(h), 0, 4))
        batched = nx.matmul(bmat, nx.transpose(bmat, (0, 2, 1)))
        extra = nx.scale(nx.sum_all(nx.mul(batched, batched)), 1e-2)
        return nx.add(nx.cross_entropy_masked(nx.add(h, Tensor(proj)), targets, [True, True, False]), extra)

    return loss, [table, w, gain, bias, bmat]


class TestFiniteDiff:
    def test_quadratic(self):
        p = Parameter("p", np.array([1.0, -2.0, 0.5]))
        reports = nx.finite_diff_check(lambda: nx.sum_all(nx.mul(p, p)), [p], epsilon=1e-4, sample_size=3)
        assert reports[0].max_relative_error < 1e-7

    def test_all_primitives(self):
        loss, params = _op_losses(np.random.default_rng(0))
        for r in nx.finite_diff_check(loss, params, epsilon=1e-5, sample_size=40):
            assert r.max_relative_error < 1e-6, r

    def test_masked_rows_get_zero_gradient(self):
        loss, params = _op_losses(np.random.default_rng(0))
        table = params[0]
        nx.zero_grads(params)
        nx.backward(loss())
        # rows 1 and 4 are excluded from the routed lookup and never gathered directly
        assert np.all(table.grad[[1, 4]] == 0.0)

    def test_corrupted_backward_is_caught(self, monkeypatch):
        monkeypatch.setattr(nx, "_silu_grad", lambda x, sig: sig)
        loss, params = _op_losses(np.random.default_rng(0))
        worst = max(r.max_relative_error for r in nx.finite_diff_check(loss, params, epsilon=1e-5, sample_size=40))
        assert worst > 1e-2

    def test_rejects_bad_epsilon_and_f32(self):
        p = Parameter("p", np.array([1.0]))
        with pytest.raises(ValueError):
            nx.finite_diff_check(lambda: nx.sum_all(p), [p], epsilon=1e-1)
        q = Parameter("q", np.array([1.0], dtype=np.float32))
        with pytest.raises(ValueError):
            nx.finite_diff_check(lambda: nx.sum_all(q), [q])

    def test_report_fields(self):
        p = Parameter("p", np.array([2.0, 3.0]))
        (r,) = nx.finite_diff_check(lambda: nx.sum_all(nx.mul(p, p)), [p], epsilon=1e-4, sample_size=4)
        assert r.parameter_id == "p"
        assert r.num_entries_checked == 2
        assert r.max_relative_error >= 0


def test_rng_streams_are_reproducible_and_distinct():
    a = nx.make_rng(5, 1).standard_normal(4)
    b = nx.make_rng(5, 1).standard_normal(4)
    c = nx.make_rng(5, 2).standard_normal(4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
