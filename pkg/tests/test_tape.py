import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surftex import tape as T


def complex_param(rng, shape, scale=1.0):
    return T.parameter((rng.standard_normal(shape)
                        + 1j * rng.standard_normal(shape)) * scale)


def test_scalar_operands_do_not_promote(rng):
    x = T.Tensor((rng.standard_normal(4) + 1j * rng.standard_normal(4)).astype(np.complex64))
    assert T.add(x, 1.5).dtype == np.complex64
    assert T.mul(x, 2.0).dtype == np.complex64
    assert T.div(x, 3.0).dtype == np.complex64
    assert T.sub(1.0, T.creal(x)).dtype == np.float32


def test_gradcheck_elementwise_complex(rng):
    a = complex_param(rng, (5, 3))
    b = complex_param(rng, (5, 3))
    c = T.parameter(rng.standard_normal((5, 3)) + 2.5)

    def loss():
        y = T.mul(T.add(a, b), T.conj(T.sub(a, 0.3)))
        y = T.add(y, T.div(a, c))
        return T.rsum(T.cabs2(y)) + T.rsum(T.cabs(y)) + T.rsum(T.mul(T.creal(y), T.cimag(y)))

    assert T.check_gradients(loss, [a, b, c]) < 1e-3


def test_gradcheck_phase_unit(rng):
    a = complex_param(rng, (6,))

    def loss():
        u = T.phase_unit(a)
        return T.rsum(T.creal(T.mul(u, T.Tensor(np.arange(1.0, 7.0) + 0.5j))))

    assert T.check_gradients(loss, [a]) < 1e-3


def test_phase_unit_zero_is_one():
    u = T.phase_unit(T.Tensor(np.array([0.0 + 0.0j, 3.0 + 4.0j])))
    assert u.data[0] == 1.0 + 0.0j
    assert abs(u.data[1] - (0.6 + 0.8j)) < 1e-12


def test_gradcheck_matmul_einsum_softmax(rng):
    x = complex_param(rng, (4, 3))
    w = complex_param(rng, (2, 3))
    q = complex_param(rng, (2, 4, 3))

    def loss():
        y = T.matmul_last(x, w)
        lg = T.creal(T.einsum2("bic,bjc->bij", q, T.conj(q)))
        at = T.softmax(lg, axis=-1)
        mix = T.einsum2("bij,bjc->bic", at, q)
        return T.rsum(T.cabs2(y)) + T.rsum(T.cabs2(mix))

    assert T.check_gradients(loss, [x, w, q]) < 1e-3


def test_gradcheck_bmm_transpose_reshape(rng):
    a = complex_param(rng, (2, 3, 4))
    b = complex_param(rng, (2, 4, 5))

    def loss():
        y = T.bmm(a, b)
        y = T.transpose(y, (1, 0, 2))
        return T.rsum(T.cabs2(T.reshape(y, (3, 10))))

    assert T.check_gradients(loss, [a, b]) < 1e-3


def test_gradcheck_real_pointwise(rng):
    a = T.parameter(rng.standard_normal(7) * 0.5 + 2.0)

    def loss():
        return T.rsum(T.exp(T.log(a)) + T.sqrt(a) + T.silu(a) + T.relu(a)
                      + T.absval(a) + T.rmean(T.mul(a, a)))

    assert T.check_gradients(loss, [a]) < 1e-3


def test_gather_scatter_roundtrip_and_grads(rng):
    x = complex_param(rng, (6, 2))
    idx = rng.integers(0, 6, size=(9,))
    plan = T.make_scatter_plan(idx, 6)

    def loss():
        g = T.gather_rows(x, idx, plan)
        s = T.scatter_sum(g, idx, 6)
        return T.rsum(T.cabs2(s))

    assert T.check_gradients(loss, [x]) < 1e-3
    counts = np.bincount(idx, minlength=6)
    s = T.scatter_sum(T.gather_rows(x, idx, plan), idx, 6)
    assert np.allclose(s.data, counts[:, None] * x.data)


def test_take_columns_and_slices(rng):
    x = complex_param(rng, (4, 6))

    def loss():
        t = T.take_columns(x, np.array([0, 2, 5]))
        s = T.slice_axis(x, 1, 1, 4)
        c = T.concat([T.creal(t), T.cimag(s)], axis=1)
        return T.rsum(T.mul(c, c))

    assert T.check_gradients(loss, [x]) < 1e-3
    with pytest.raises(ValueError):
        T.take_columns(x, np.array([1, 1]))


def test_backward_requires_real_scalar(rng):
    a = complex_param(rng, (3,))
    with pytest.raises(ValueError):
        T.rsum(a).backward()
    with pytest.raises(ValueError):
        T.cabs2(a).backward()


def test_no_grad_blocks_graph(rng):
    a = complex_param(rng, (3,))
    with T.no_grad():
        y = T.rsum(T.cabs2(a))
    assert not y.requires_grad and y.backward_fn is None


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 2.0))
def test_mul_div_consistency(re, im, d):
    z = T.Tensor(np.array([re + 1j * im]))
    back = T.mul(T.div(z, d), d)
    assert np.abs(back.data - z.data).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).standard_normal((3, 5)) * 5
    y = T.softmax(T.Tensor(x), axis=-1)
    assert np.allclose(y.data.sum(axis=-1), 1.0)
