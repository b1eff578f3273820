import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixedqa import diffcore as dc

from conftest import central_difference, rel_err


def grad_check(build, *shapes, seed=0, positive=False):
    """Compare backward() with central differences for ``build(*nodes) -> scalar node``."""
    rng = np.random.default_rng(seed)
    values = [rng.uniform(0.2, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    nodes = [dc.parameter(v) for v in values]
    grads = dc.backward(build(*nodes), nodes)
    for v, n in zip(values, nodes):
        f = lambda: float(build(*[dc.constant(w) for w in values]).value)
        assert rel_err(grads[n], central_difference(f, v)) < 1e-4


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(dc.constant([[1, 0], [0, 1]]), dc.constant([[3], [4]]))
        np.testing.assert_array_equal(out.value, [[3], [4]])

    def test_hand_arithmetic(self):
        out = dc.matmul(dc.constant([[1, 2]]), dc.constant([[3], [4]]))
        np.testing.assert_array_equal(out.value, [[11]])

    def test_shape_mismatch(self):
        with pytest.raises(dc.ShapeError):
            dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))

    def test_gradient(self):
        grad_check(lambda a, b: dc.total(dc.matmul(a, b)), (3, 4), (4, 2))


class TestElementwise:
    def test_values(self):
        assert dc.tanh(dc.constant(0.0)).value == 0.0
        np.testing.assert_array_equal(dc.square(dc.constant([2.0, -3.0])).value, [4.0, 9.0])

    def test_tanh_derivative_at_half(self):
        x = dc.parameter(0.5)
        g = dc.backward(dc.tanh(x), [x])[x]
        fd = (np.tanh(0.5 + 1e-5) - np.tanh(0.5 - 1e-5)) / 2e-5
        assert abs(g - fd) < 1e-9

    def test_log_domain(self):
        with pytest.raises(dc.DomainError):
            dc.log(dc.constant([1.0, 0.0]))

    def test_dispatch(self):
        a, b = dc.constant([1.0, 2.0]), dc.constant([3.0, 5.0])
        np.testing.assert_array_equal(dc.elementwise(a, "mul", b).value, [3.0, 10.0])
        np.testing.assert_array_equal(dc.elementwise(a, "sub", b).value, [-2.0, -3.0])

    def test_no_broadcasting(self):
        with pytest.raises(dc.ShapeError):
            dc.add(dc.constant(np.ones(3)), dc.constant(np.ones(2)))
        # scalar with array is allowed
        np.testing.assert_array_equal(dc.add(dc.constant(np.ones(2)), dc.constant(1.0)).value, [2, 2])

    @pytest.mark.parametrize("op", ["tanh", "exp", "square", "relu"])
    def test_unary_gradients(self, op):
        grad_check(lambda a: dc.total(dc.mul(dc.elementwise(a, op), dc.constant(np.arange(1.0, 7.0)))), (6,))

    def test_log_gradient(self):
        grad_check(lambda a: dc.total(dc.log(a)), (5,), positive=True)

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_gradients(self, op):
        grad_check(lambda a, b: dc.total(dc.square(dc.elementwise(a, op, b))), (2, 3), (2, 3))


class TestLogSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(dc.log_softmax(dc.constant([0.0, 0.0])).value, np.log([0.5, 0.5]))

    def test_masked(self):
        out = dc.log_softmax(dc.constant([1.0, 1.0, 1.0]), [True, True, False]).value
        np.testing.assert_allclose(np.exp(out), [0.5, 0.5, 0.0])
        assert out[2] == dc.NEG_INF

    def test_direct_formula(self):
        s = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(dc.log_softmax(dc.constant(s)).value,
                                   np.log(np.exp(s) / np.exp(s).sum()), atol=1e-14)

    def test_all_masked(self):
        with pytest.raises(dc.EmptySupportError):
            dc.log_softmax(dc.constant([1.0, 2.0]), [False, False])

    def test_rowwise_gradient_with_mask(self):
        mask = np.array([[True, True, False, True], [True, False, False, False]])
        weights = dc.constant(np.arange(8.0).reshape(2, 4))
        grad_check(lambda s: dc.total(dc.mul(dc.exp(dc.log_softmax(s, mask)), weights)), (2, 4))

    def test_masked_positions_get_no_gradient(self):
        s = dc.parameter([0.3, -1.0, 2.0])
        out = dc.log_softmax(s, [True, False, True])
        g = dc.backward(dc.total(dc.mul(out, dc.constant([1.0, 5.0, 2.0]))), [s])[s]
        assert g[1] == 0.0

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_normalized_and_shift_invariant(self, s, c):
        out = dc.log_softmax(dc.constant(s)).value
        assert abs(np.exp(out).sum() - 1.0) < 1e-10
        np.testing.assert_allclose(dc.log_softmax(dc.constant(s + c)).value, out, atol=1e-10)


class TestMaxPool:
    def test_columnwise(self):
        np.testing.assert_array_equal(dc.max_pool_rows(dc.constant([[1, 5], [3, 2]])).value, [3, 5])

    def test_single_row(self):
        np.testing.assert_array_equal(dc.max_pool_rows(dc.constant([[4.0, -1.0]])).value, [4, -1])

    def test_empty(self):
        with pytest.raises(dc.ShapeError):
            dc.max_pool_rows(dc.constant(np.zeros((0, 3))))

    def test_gradient_at_untied_point(self):
        grad_check(lambda h: dc.total(dc.mul(dc.max_pool_rows(h), dc.constant([1.0, -2.0, 3.0]))), (4, 3))

    def test_tie_goes_to_lowest_row(self):
        h = dc.parameter([[1.0, 0.0], [1.0, 2.0], [0.5, 2.0]])
        g = dc.backward(dc.total(dc.max_pool_rows(h)), [h])[h]
        np.testing.assert_array_equal(g, [[1, 0], [0, 1], [0, 0]])

    def test_segments(self):
        h = dc.parameter([[1.0, 9.0], [4.0, 2.0], [7.0, 3.0], [0.0, 0.0]])
        out = dc.segment_max(h, [0, 0, 1, -1], 3)
        np.testing.assert_array_equal(out.value, [[4, 9], [7, 3], [0, 0]])
        g = dc.backward(dc.total(out), [h])[h]
        np.testing.assert_array_equal(g, [[0, 1], [1, 0], [1, 1], [0, 0]])


class TestBackward:
    def test_sum(self):
        t = dc.parameter(np.arange(4.0))
        np.testing.assert_array_equal(dc.backward(dc.total(t))[t], np.ones(4))

    def test_sum_of_squares(self):
        v = np.array([1.0, -2.0, 0.5])
        t = dc.parameter(v)
        np.testing.assert_array_equal(dc.backward(dc.total(dc.square(t)))[t], 2 * v)

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            dc.backward(dc.parameter(np.ones(3)))

    def test_shared_subexpression_counted_once_per_path(self):
        x = dc.parameter(3.0)
        y = dc.mul(x, x)
        z = dc.add(y, y)      # 2 x^2
        assert dc.backward(z, [x])[x] == 12.0

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(30, 8)), rng.normal(size=(8, 4))

        def run():
            na, nb = dc.parameter(a), dc.parameter(b)
            loss = dc.total(dc.tanh(dc.matmul(dc.take_rows(na, [0, 3, 3, 29]), nb)))
            g = dc.backward(loss, [na, nb])
            return g[na].tobytes() + g[nb].tobytes()

        assert run() == run()

    def test_plumbing_ops(self):
        idx = np.array([0, 2, 2, 1])
        grad_check(lambda t: dc.total(dc.square(dc.take_rows(t, idx))), (3, 2))
        grad_check(lambda t: dc.total(dc.square(dc.take(t, [5, 0, 5]))), (2, 3))
        grad_check(lambda t: dc.total(dc.square(dc.cumsum_rows(t))), (2, 5))
        grad_check(lambda t: dc.total(dc.square(dc.sum_rows(t))), (3, 4))
        grad_check(lambda a, r: dc.total(dc.square(dc.add_row(a, r))), (3, 2), (2,))
        grad_check(lambda a, b: dc.total(dc.square(dc.concat_cols([a, b]))), (2, 2), (2, 3))
        grad_check(lambda t: dc.total(dc.square(dc.reshape(t, (6,)))), (2, 3))
        grad_check(lambda t: dc.mean(dc.square(t)), (4,))

    def test_clamp_min_blocks_gradient_below_floor(self):
        x = dc.parameter([0.5, 1e-40])
        g = dc.backward(dc.total(dc.clamp_min(x, 1e-30)), [x])[x]
        np.testing.assert_array_equal(g, [1.0, 0.0])


class TestDetach:
    def test_values_and_flag(self):
        x = dc.parameter([1.0, 2.0])
        d = dc.detach(x)
        np.testing.assert_array_equal(d.value, x.value)
        assert not d.requires_grad

    def test_blocks_gradient(self):
        x = dc.parameter([1.0, 2.0])
        loss = dc.total(dc.square(dc.detach(x)))
        assert np.all(dc.backward(loss, [x])[x] == 0)


def test_random_composites_match_finite_differences():
    """Random scalar composites of every op, 100 draws, away from max/relu ties."""
    rng = np.random.default_rng(11)
    ops = ["tanh", "exp", "square", "relu"]
    for trial in range(100):
        A = rng.normal(size=(4, 3))
        B = rng.normal(size=(3, 5))
        op = ops[trial % len(ops)]
        mask = rng.random(5) < 0.8
        mask[0] = True
        w = rng.normal(size=5)

        def build(a, b):
            h = dc.elementwise(dc.matmul(a, b), op)
            pooled = dc.max_pool_rows(h)
            lp = dc.log_softmax(dc.mul(pooled, dc.constant(w)), mask)
            return dc.add(dc.total(dc.mul(dc.exp(lp), dc.constant(w))),
                          dc.mean(dc.log(dc.add(dc.square(h), dc.constant(1.0)))))

        na, nb = dc.parameter(A), dc.parameter(B)
        g = dc.backward(build(na, nb), [na, nb])
        f = lambda: float(build(dc.constant(A), dc.constant(B)).value)
        for v, n in ((A, na), (B, nb)):
            num = central_difference(f, v)
            # skip draws that straddle a relu kink or a max-pool tie
            if op == "relu" and np.any(np.abs(A @ B) < 1e-4):
                continue
            assert rel_err(g[n], num) < 1e-4, trial
