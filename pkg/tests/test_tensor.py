import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stereoxf import tensor as T
from stereoxf.tensor import ShapeError, Tensor, gradcheck


def loop_conv2d(x, w, b, stride, pad):
    """Reference cross-correlation by explicit loops."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[bi, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[bi, o, i, j] = acc
    return out


# -- elementwise ------------------------------------------------------------------------------------

def test_add_definition():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_zero_annihilates_and_zero_grad():
    x = Tensor(np.arange(4.0), requires_grad=True)
    y = T.mul(x, 0.0)
    assert not y.data.any()
    T.total(y).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(4))


def test_abs_gradient_sign():
    x = Tensor([-2.0], requires_grad=True)
    T.total(T.absolute(x)).backward()
    assert x.grad[0] == -1.0


def test_div_gradient_wrt_divisor():
    a = Tensor([6.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    T.total(T.div(a, b)).backward()
    assert a.grad[0] == pytest.approx(1 / 3)
    assert b.grad[0] == pytest.approx(-6 / 9)


def test_max2_routes_gradient():
    a = Tensor([1.0, 5.0], requires_grad=True)
    b = Tensor([2.0, 4.0], requires_grad=True)
    T.total(T.max2(a, b)).backward()
    np.testing.assert_array_equal(a.grad, [0, 1])
    np.testing.assert_array_equal(b.grad, [1, 0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    assert "(2, 3)" in str(err.value) and "(4,)" in str(err.value)


def test_elementwise_dispatch_and_unknown_kind():
    assert T.elementwise("sub", Tensor([3.0]), 1.0).data[0] == 2.0
    assert T.elementwise("abs", Tensor([-3.0])).data[0] == 3.0
    with pytest.raises(ValueError):
        T.elementwise("pow", Tensor([1.0]), 2.0)


def test_broadcast_gradient_is_summed_back():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    bias = Tensor(np.ones(3), requires_grad=True)
    T.total(x * bias).backward()
    np.testing.assert_array_equal(bias.grad, [2, 2, 2])


# -- activations ---------------------------------------------------------------------------------------

def test_activation_points():
    assert T.activation("leaky_relu", Tensor([-1.0])).data[0] == pytest.approx(-0.2)
    assert T.activation("sigmoid", Tensor([0.0])).data[0] == 0.5
    x = Tensor([0.0], requires_grad=True)
    T.total(T.activation("tanh", x)).backward()
    assert x.grad[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        T.activation("gelu", x)


# -- conv2d ------------------------------------------------------------------------------------------------

def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), 1, 1)
    assert out.data[0, 0, 1, 1] == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 5, 6)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, k, k)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    want = loop_conv2d(x.astype(np.float64), w, b, stride, pad)
    assert got.shape == want.shape
    assert np.abs(got - want).max() <= 1e-5


def test_conv_output_size_formula():
    out = T.conv2d(Tensor(np.zeros((1, 2, 9, 7))), Tensor(np.zeros((3, 2, 3, 3))), None, 2, 1)
    assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_errors():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv_gradcheck(stride, pad):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)

    def f(x, w, b):
        y = T.conv2d(x, w, b, stride, pad)
        return T.mean(y * y)

    rep = gradcheck(f, [x, w, b])
    assert rep.passed, rep


# -- upsample ----------------------------------------------------------------------------------------------

def test_upsample_constant():
    out = T.upsample_bilinear2x(Tensor(np.full((1, 2, 3, 4), 0.7)))
    assert out.shape == (1, 2, 6, 8)
    np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)


def test_upsample_half_pixel_weights():
    out = T.upsample_bilinear2x(Tensor(np.array([[[[0.0, 1.0]]]])))
    np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


def test_upsample_gradcheck():
    x = np.random.default_rng(3).normal(size=(1, 1, 2, 2))
    w = np.random.default_rng(4).normal(size=(1, 1, 4, 4))
    assert gradcheck(lambda x: T.total(T.upsample_bilinear2x(x) * w), [x]).passed


# -- grid sample ------------------------------------------------------------------------------------------

def test_grid_sample_identity():
    src = np.random.default_rng(0).uniform(size=(1, 3, 4, 5)).astype(np.float32)
    ys, xs = np.mgrid[0:4, 0:5].astype(np.float32)
    out = T.grid_sample_bilinear(Tensor(src), Tensor(xs[None, None]), Tensor(ys[None, None]))
    np.testing.assert_array_equal(out.data, src)


def test_grid_sample_midpoint_and_clamp():
    src = Tensor(np.array([[[[0.0, 1.0]]]]))
    out = T.grid_sample_bilinear(src, Tensor([[[[0.5, -3.0, 9.0]]]]), Tensor([[[[0.0, 0.0, 0.0]]]]))
    np.testing.assert_allclose(out.data[0, 0, 0], [0.5, 0.0, 1.0])


def test_grid_sample_coordinate_shape_mismatch():
    with pytest.raises(ShapeError):
        T.grid_sample_bilinear(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 3))),
                               Tensor(np.zeros((1, 1, 2, 3))))


def test_grid_sample_gradients_reach_source_and_coordinates():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(1, 2, 5, 6))
    sx = rng.uniform(0.2, 4.8, size=(1, 1, 3, 4))
    sy = rng.uniform(0.2, 3.8, size=(1, 1, 3, 4))
    wgt = rng.normal(size=(1, 2, 3, 4))
    rep = gradcheck(lambda s, x, y: T.total(T.grid_sample_bilinear(s, x, y) * wgt), [src, sx, sy])
    assert rep.passed, rep
    assert all(r.n_checked > 0 for r in rep.inputs)


# -- reductions and structure -----------------------------------------------------------------------------

def test_mean_abs_masked_floor():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    out = T.mean_abs(x, np.zeros((2, 2)))
    assert out.item() == 0.0
    out.backward()
    assert not x.grad.any()


def test_channel_max_and_sum():
    x = Tensor(np.array([[[[1.0]], [[3.0]], [[2.0]]]]), requires_grad=True)
    m, arg = T.channel_max(x)
    assert m.data.ravel()[0] == 3.0 and arg.ravel()[0] == 1
    T.total(m).backward()
    np.testing.assert_array_equal(x.grad.ravel(), [0, 1, 0])
    assert T.channel_sum(x).data.ravel()[0] == 6.0


def test_concat_index_reshape_roundtrip_grad():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    c = T.concat([a, b], axis=1)
    T.total(T.reshape(c[:, 1:3], (-1,)) * 2.0).backward()
    np.testing.assert_array_equal(a.grad[0, 0], 0)
    np.testing.assert_array_equal(a.grad[0, 1], 2)
    np.testing.assert_array_equal(b.grad, 2)


def test_repeat_channels():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
    y = T.repeat_channels(x, 2)
    assert y.shape == (1, 2, 2, 2)
    T.total(y).backward()
    np.testing.assert_array_equal(x.grad, 2)


# -- tape semantics -------------------------------------------------------------------------------------

def test_leaf_grads_fully_populated_even_when_unreached():
    a = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    out = T.total(a * 2.0)
    out.backward()
    np.testing.assert_array_equal(a.grad, 2)
    assert unused.grad is None  # not part of this graph


def test_no_grad_builds_no_tape():
    a = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = a * 3.0
    assert not y.requires_grad
    assert T.grad_enabled()


def test_float32_default():
    assert Tensor([1, 2]).dtype == np.float32


# -- adam ----------------------------------------------------------------------------------------------

def test_adam_matches_closed_form_first_steps():
    p = Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)
    opt = T.Adam({"p": p}, lr=0.1)
    g = np.array([0.5, -1.0], np.float32)
    m = v = np.zeros(2)
    want = p.data.astype(np.float64).copy()
    for t in range(1, 4):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert opt.state.step_count == t
    np.testing.assert_allclose(p.data, want, rtol=1e-5)


def test_adam_moment_shapes_follow_params():
    p = Tensor(np.zeros((2, 3)), requires_grad=True)
    st_ = T.AdamState()
    T.adam_step({"p": p}, {"p": np.ones((2, 3), np.float32)}, st_)
    assert st_.first_moment["p"].shape == (2, 3)
    with pytest.raises(ShapeError):
        T.adam_step({"p": p}, {"p": np.ones(3, np.float32)}, st_)


# -- properties -------------------------------------------------------------------------------------------

small = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
               elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(small)
def test_add_then_sub_roundtrip(a):
    x = Tensor(a)
    np.testing.assert_allclose(((x + x * 0.5) - x * 0.5).data, x.data, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(small)
def test_gradient_of_sum_of_squares(a):
    x = Tensor(a, requires_grad=True)
    T.total(x * x).backward()
    np.testing.assert_allclose(x.grad, 2 * a, rtol=1e-5, atol=1e-6)
