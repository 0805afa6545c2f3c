import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufc import tensor as T
from ufc.tensor import Tensor


def t64(a, grad=False):
    with T.default_dtype(np.float64):
        return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


# --- forward ops ------------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3)).astype(np.float32)
    out = T.matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_relu_definition():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv_center_of_ones_is_nine():
    x = Tensor(np.ones((1, 3, 3, 1)))
    w = Tensor(np.ones((3, 3, 1, 1)))
    out = T.conv2d(x, w, stride=1, padding=1)
    assert out.shape == (1, 3, 3, 1)
    assert out.data[0, 1, 1, 0] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def _direct_conv(x, w, stride, pad):
    # naive loop oracle, NHWC / (kh, kw, cin, cout)
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, co))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                patch = xp[b, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                out[b, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
    return out


def _direct_conv_transpose(x, w, stride, pad):
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    full = np.zeros((n, (h - 1) * stride + kh, (wd - 1) * stride + kw, co))
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                full[b, i * stride : i * stride + kh, j * stride : j * stride + kw] += np.tensordot(
                    x[b, i, j], w, axes=([0], [2])
                )
    return full[:, pad : full.shape[1] - pad, pad : full.shape[2] - pad]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_loop(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    with T.default_dtype(np.float64):
        out = T.conv2d(t64(x), t64(w), stride=stride, padding=pad)
    assert np.allclose(out.data, _direct_conv(x, w, stride, pad), atol=1e-10)


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (4, 2, 1), (3, 1, 1)])
def test_conv_transpose_matches_direct_loop(k, stride, pad):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 3, 3, 2))
    w = rng.normal(size=(k, k, 2, 3))
    with T.default_dtype(np.float64):
        out = T.conv_transpose2d(t64(x), t64(w), stride=stride, padding=pad)
    assert np.allclose(out.data, _direct_conv_transpose(x, w, stride, pad), atol=1e-10)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6, 6, 2))
    w = rng.normal(size=(4, 4, 2, 3))
    with T.default_dtype(np.float64):
        y = T.conv2d(t64(x), t64(w), stride=2, padding=1).data
        u = rng.normal(size=y.shape)
        back = T.conv_transpose2d(t64(u), t64(w.transpose(0, 1, 3, 2)), stride=2, padding=1).data
    assert np.isclose((y * u).sum(), (x * back).sum())


def test_max_pool_ties_go_to_first():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    out = T.max_pool2d(x).sum()
    out.backward()
    assert x.grad[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_l2_norm_last_axis():
    out = T.l2_norm(Tensor([[3.0, 4.0], [0.0, 2.0]]))
    assert out.data.tolist() == [5.0, 2.0]


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"add: shape mismatch \(2,\) vs \(3,\)"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_implicit_broadcast_but_scalars_ok():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) * Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) * 2.0
    assert np.all(out.data == 2.0)


def test_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        Tensor([1.0, 2.0]) / Tensor([1.0, 0.0])


def test_non_finite_result_raises():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0]))
    with pytest.raises(FloatingPointError):
        T.exp(Tensor([1000.0]))


def test_zero_extent_rejected():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((0, 3)))


def test_default_dtype_is_float32():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# --- backward ---------------------------------------------------------------


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_sum_of_product_gradient_is_other_factor():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(3, 4)).astype(np.float32)
    (a * Tensor(b)).sum().backward()
    assert np.array_equal(a.grad, b)
    with T.default_dtype(np.float64):
        err = T.finite_diff_check(lambda x: (x * t64(b)).sum(), t64(a.data))
    assert err < 1e-8


def test_constant_loss_gives_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    (x.sum() * 0.0 + y.sum()).backward()
    assert np.all(x.grad == 0.0)


def test_backward_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2 * once)


def test_backward_rejects_non_scalar_and_empty_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        (x * 2.0).backward()
    with pytest.raises(RuntimeError):
        Tensor(1.0).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert y._node is None


def test_finite_diff_quadratic_exact():
    x = t64(np.random.default_rng(2).uniform(-2, 2, size=7))
    with T.default_dtype(np.float64):
        assert T.finite_diff_check(lambda v: (v * v).sum(), x) < 1e-6


def test_finite_diff_step_range():
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda v: v.sum(), t64([1.0]), h=1e-1)


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 8, 8, 3)).astype(np.float32)
    w = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    a = T.relu(T.conv2d(Tensor(x), Tensor(w), padding=1)).data
    b = T.relu(T.conv2d(Tensor(x), Tensor(w), padding=1)).data
    assert a.tobytes() == b.tobytes()


# --- property: every op's gradient matches central differences --------------


def _op_cases(rng, n, m):
    a2 = rng.uniform(-2, 2, size=(n, m))
    pos = rng.uniform(0.5, 2, size=(n, m))
    mask = rng.uniform(size=(n, m)) < 0.6
    mask[:, 0] = True
    img = rng.uniform(-2, 2, size=(1, 4, 4, 2))
    return {
        "add": (a2, lambda x: (x + t64(a2[::-1].copy())).sum()),
        "sub": (a2, lambda x: (t64(pos) - x * x).sum()),
        "mul": (a2, lambda x: (x * x * x).sum()),
        "div": (pos, lambda x: (t64(a2) / x).sum()),
        "power": (pos, lambda x: T.power(x, 1.5).sum()),
        "exp": (a2, lambda x: T.exp(x).sum()),
        "log": (pos, lambda x: T.log(x).sum()),
        "sigmoid": (a2, lambda x: (T.sigmoid(x) * t64(a2)).sum()),
        "mean": (a2, lambda x: (x * x).mean(axis=1).sum()),
        "reshape": (a2, lambda x: (x.reshape(m, n) * t64(a2.reshape(m, n))).sum()),
        "transpose": (a2, lambda x: (x.T @ t64(a2)).sum()),
        "getitem": (a2, lambda x: (x[1:, ::2] * x[1:, ::2]).sum()),
        "concat": (a2, lambda x: (T.concat([x, x * x], axis=1) * t64(np.hstack([a2, a2]))).sum()),
        "matmul": (a2, lambda x: (x @ t64(a2.T) * t64(np.ones((n, n)))).sum()),
        "l2_normalize": (pos, lambda x: (T.l2_normalize(x) * t64(a2)).sum()),
        "l2_norm": (pos, lambda x: T.l2_norm(x).sum()),
        "log_softmax": (a2, lambda x: (T.log_softmax(x) * t64(pos)).sum()),
        "softmax": (a2, lambda x: (T.softmax(x) * t64(a2)).sum()),
        "logsumexp": (a2, lambda x: T.logsumexp(x, mask).sum()),
        "conv2d": (img, lambda x: (T.conv2d(x, t64(np.full((3, 3, 2, 2), 0.3)), stride=2, padding=1) ** 2).sum()),
        "conv_t": (img, lambda x: (T.conv_transpose2d(x, t64(np.full((2, 2, 2, 1), 0.4)), stride=2) ** 2).sum()),
        "max_pool": (img + np.arange(32).reshape(img.shape) * 0.05,
                     lambda x: (T.max_pool2d(x) * T.max_pool2d(x)).sum()),
    }


OPS = list(_op_cases(np.random.default_rng(0), 2, 3))


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 4), m=st.integers(2, 4))
@pytest.mark.parametrize("op", OPS)
def test_op_gradients_match_finite_differences(op, seed, n, m):
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        x0, f = _op_cases(rng, n, m)[op]
        assert T.finite_diff_check(f, t64(x0)) < 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5), m=st.integers(1, 5))
def test_composite_gradient_property(seed, n, m):
    """At least 100 random shapes/seeds through a mixed expression."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2, 2, size=(n, m))
    w = t64(rng.uniform(-2, 2, size=(m, 3)))

    def f(x):
        h = T.sigmoid(x @ w) * T.exp(x.sum(axis=1).reshape(n, 1) * 0.1 * t64(np.ones((n, 1))) @ t64(np.ones((1, 3))))
        return T.log_softmax(h).mean()

    with T.default_dtype(np.float64):
        assert T.finite_diff_check(f, t64(x0)) < 1e-4
