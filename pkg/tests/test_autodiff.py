import numpy as np
import pytest

from hoirecon import autodiff as ad
from hoirecon.autodiff import Tensor


def fd_grad(fn, x, step=1e-6):
    """Central finite differences of a scalar-valued fn at x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    out = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = fn(x)
        flat[k] = orig - step
        lo = fn(x)
        flat[k] = orig
        out[k] = (hi - lo) / (2.0 * step)
    return grad


def check_grad(build, x, atol=1e-6):
    t = Tensor(x.copy())
    build(t).backward()
    numeric = fd_grad(lambda arr: float(build(Tensor(arr)).value), x.copy())
    assert np.allclose(t.grad, numeric, atol=atol)


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        check_grad(lambda t: ad.tsum((t + Tensor(b)) * t), x)

    def test_sub_div_pow(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 2.0, size=(5,))
        check_grad(lambda t: ad.tsum((t - 1.0) / t + t ** 3), x)

    def test_matmul(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        check_grad(lambda t: ad.tsum((t @ Tensor(w)) ** 2), x)

    def test_unary_functions(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.2, 1.5, size=(6,))
        check_grad(lambda t: ad.tsum(ad.tanh(t) + ad.sigmoid(t)
                                     + ad.exp(t) + ad.log(t) + ad.sqrt(t)), x)

    def test_getitem_accumulates(self):
        x = np.array([1.0, 2.0, 3.0])
        t = Tensor(x)
        (t[0] + t[0] + t[2]).backward()
        assert np.array_equal(t.grad, [2.0, 0.0, 1.0])

    def test_clip_gradient_zero_outside(self):
        x = np.array([-2.0, 0.5, 2.0])
        t = Tensor(x)
        ad.tsum(ad.clip(t, 0.0, 1.0) * 3.0).backward()
        assert np.array_equal(t.grad, [0.0, 3.0, 0.0])


class TestReductionsAndShape:
    def test_tsum_axis(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5))
        check_grad(lambda t: ad.tsum(ad.tsum(t, axis=1) ** 2), x)

    def test_tmean_value(self):
        x = np.arange(6.0).reshape(2, 3)
        assert ad.tmean(Tensor(x)).value == pytest.approx(2.5)
        assert np.allclose(ad.tmean(Tensor(x), axis=0).value, [1.5, 2.5, 3.5])

    def test_reshape_concat(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 2))
        check_grad(lambda t: ad.tsum(
            ad.concat([ad.reshape(t, (2, 4)), Tensor(np.ones((2, 4)))], axis=0) ** 2), x)

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros(3)).backward()


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = ad.softmax_rows(Tensor(rng.normal(size=(5, 7)))).value
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        check_grad(lambda t: ad.tsum(ad.softmax_rows(t) * Tensor(w)), x)

    def test_shift_invariance(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 6))
        a = ad.softmax_rows(Tensor(x)).value
        b = ad.softmax_rows(Tensor(x + 100.0)).value
        assert np.allclose(a, b, atol=1e-12)


class TestGatherSegment:
    def test_gather_rows_duplicates_accumulate(self):
        x = np.arange(6.0).reshape(3, 2)
        t = Tensor(x)
        ad.tsum(ad.gather_rows(t, np.array([0, 0, 2]))).backward()
        assert np.array_equal(t.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_segment_max_value(self):
        x = np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]])
        out = ad.segment_max(Tensor(x), np.array([0, 0, 1]), 2)
        assert np.array_equal(out.value, [[3.0, 5.0], [0.0, 9.0]])

    def test_segment_max_gradient_to_argmax(self):
        x = np.array([[1.0, 5.0], [3.0, 2.0]])
        t = Tensor(x)
        ad.tsum(ad.segment_max(t, np.array([0, 0]), 1)).backward()
        assert np.array_equal(t.grad, [[0.0, 1.0], [1.0, 0.0]])

    def test_segment_max_empty_segment_errors(self):
        with pytest.raises(ValueError):
            ad.segment_max(Tensor(np.zeros((2, 2))), np.array([0, 0]), 2)

    def test_weighted_rows_matches_manual(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 3))
        idx = np.array([[0, 1], [2, 3], [1, 1]])
        w = np.array([[0.25, 0.75], [0.5, 0.5], [1.0, 0.0]])
        out = ad.weighted_rows(Tensor(x), idx, w)
        expected = (w[:, :, np.newaxis] * x[idx]).sum(axis=1)
        assert np.allclose(out.value, expected, atol=1e-12)
        check_grad(lambda t: ad.tsum(ad.weighted_rows(t, idx, w) ** 2), x)


class TestLazyBackward:
    def test_unreached_parents_keep_none_grad(self):
        a = Tensor(np.ones(3))
        b = Tensor(np.ones(3))
        ad.tsum(a * 2.0).backward()
        assert b.grad is None
        assert np.array_equal(a.grad, [2.0, 2.0, 2.0])

    def test_shared_subexpression_sums(self):
        a = Tensor(np.array(2.0))
        y = a * a + a
        y.backward()
        assert float(a.grad) == pytest.approx(5.0)
