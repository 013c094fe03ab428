import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avatarfield import autodiff as ad


def grad_of(fn, *arrays_):
    params = [ad.Parameter(f"p{i}", a.copy()) for i, a in enumerate(arrays_)]
    for p in params:
        p.grad = np.zeros_like(p.data)
    ad.backward(fn(*params))
    return [p.grad for p in params]


def test_add_broadcast_gradient_sums_over_broadcast_axes():
    ga, gb = grad_of(lambda a, b: ad.tsum(a + b), np.ones((4, 3)), np.ones(3))
    assert np.array_equal(ga, np.ones((4, 3)))
    assert np.array_equal(gb, np.full(3, 4.0))


def test_mul_div_pow_gradients_match_closed_form():
    x = np.array([0.5, 1.5, -2.0])
    y = np.array([2.0, -1.0, 4.0])
    gx, gy = grad_of(lambda a, b: ad.tsum(a * b / (b ** 2)), x, y)
    # a*b/b^2 = a/b
    assert np.allclose(gx, 1.0 / y, rtol=0, atol=1e-15)
    assert np.allclose(gy, -x / y ** 2, rtol=0, atol=1e-15)


def test_exp_log_sqrt_sin_cos_gradients():
    x = np.array([0.3, 1.1, 2.7])
    for fn, d in [(ad.exp, np.exp), (ad.log, lambda v: 1 / v), (ad.sqrt, lambda v: 0.5 / np.sqrt(v)),
                  (ad.sin, np.cos), (ad.cos, lambda v: -np.sin(v))]:
        (g,) = grad_of(lambda a: ad.tsum(fn(a)), x)
        assert np.allclose(g, d(x), rtol=1e-14, atol=0)


def test_softplus_is_stable_for_large_inputs():
    x = ad.Parameter("x", np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
    x.grad = np.zeros(5)
    y = ad.softplus(x)
    assert np.isfinite(y.data).all()
    assert y.data[-1] == 800.0
    assert abs(y.data[2] - np.log(2.0)) < 1e-15
    ad.backward(ad.tsum(y))
    from scipy.special import expit
    assert np.allclose(x.grad, expit(x.data), rtol=1e-14, atol=1e-300)


def test_relu_sigmoid_values():
    x = np.array([-2.0, 0.5, 3.0])
    assert np.array_equal(ad.relu(ad.Tensor(x)).data, [0.0, 0.5, 3.0])
    assert np.allclose(ad.sigmoid(ad.Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-15)


def test_cumsum_exclusive_forward_and_gradient():
    x = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(ad.cumsum(ad.Tensor(x), exclusive=True).data, [[0.0, 1.0, 3.0]])
    assert np.array_equal(ad.cumsum(ad.Tensor(x)).data, [[1.0, 3.0, 6.0]])
    (g,) = grad_of(lambda a: ad.tsum(ad.cumsum(a, exclusive=True) * np.array([1.0, 10.0, 100.0])), x)
    assert np.array_equal(g, [[110.0, 100.0, 0.0]])


def test_getitem_and_take_rows_accumulate_repeated_indices():
    (g,) = grad_of(lambda a: ad.tsum(ad.take_rows(a, np.array([0, 0, 2]))), np.zeros((3, 2)))
    assert np.array_equal(g, [[2, 2], [0, 0], [1, 1]])
    (g,) = grad_of(lambda a: ad.tsum(a[np.array([1, 1])]), np.zeros(3))
    assert np.array_equal(g, [0, 2, 0])
    (g,) = grad_of(lambda a: ad.tsum(a[:, 1:]), np.zeros((2, 3)))
    assert np.array_equal(g, [[0, 1, 1], [0, 1, 1]])


def test_concat_stack_transpose_reshape_route_gradients():
    w = np.arange(12.0).reshape(3, 4)
    (ga, gb) = grad_of(lambda a, b: ad.tsum(ad.reshape(ad.transpose(ad.concat([a, b], axis=0), (1, 0)), (12,))
                                            * w.T.reshape(-1)), np.zeros((1, 4)), np.zeros((2, 4)))
    assert np.array_equal(ga, w[:1])
    assert np.array_equal(gb, w[1:])
    (gs,) = grad_of(lambda a: ad.tsum(ad.stack([a, a * 2.0])), np.zeros(3))
    assert np.array_equal(gs, np.full(3, 3.0))


def test_shared_subexpression_gradient_accumulates():
    (g,) = grad_of(lambda a: ad.tsum((a * a) + (a * a)), np.array([3.0]))
    assert g[0] == 12.0


def test_backward_requires_scalar_root():
    x = ad.Parameter("x", np.ones(3))
    with pytest.raises(ad.ContractError):
        ad.backward(x * 2.0)


def test_item_requires_single_element():
    with pytest.raises(ad.ContractError):
        ad.Tensor(np.ones(2)).item()


def test_non_finite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Tensor(np.array([-1.0])))


def test_no_grad_records_nothing():
    x = ad.Parameter("x", np.ones(2))
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_linear_matches_matmul():
    rng = np.random.default_rng(0)
    layer = ad.Linear("l", 5, 3, rng)
    x = rng.normal(size=(7, 5))
    y = layer(ad.Tensor(x)).data
    assert np.allclose(y, x @ layer.weight.data + layer.bias.data, rtol=0, atol=1e-14)


def test_adam_matches_scalar_reference():
    p = ad.Parameter("w", np.array([1.0, -2.0]))
    opt = ad.Adam([p], lr=0.1)
    m = np.zeros(2)
    v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 6):
        g = np.array([0.5 * t, -1.0])
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, ref, rtol=0, atol=1e-14)


def test_adam_state_round_trip():
    p = ad.Parameter("w", np.array([1.0, 2.0]))
    opt = ad.Adam([p])
    p.grad = np.array([0.1, 0.2])
    opt.step()
    state = opt.state_tensors()
    other = ad.Adam([ad.Parameter("w", p.data.copy())])
    other.load_state_tensors(state)
    assert other.step_count == 1
    assert np.array_equal(other.m["w"], opt.m["w"])


def test_adam_rejects_duplicate_names():
    with pytest.raises(ValueError):
        ad.Adam([ad.Parameter("a", np.zeros(1)), ad.Parameter("a", np.zeros(1))])


def test_finite_diff_check_detects_wrong_gradient():
    x = ad.Parameter("x", np.array([0.7, 1.3]))

    def wrong_square(a):
        return ad.make_op(a.data ** 2, "wrong", (a,), lambda g: (g * 3.0 * a.data,))

    errs = ad.finite_diff_check(lambda: ad.tsum(wrong_square(x)), [x])
    assert errs["x"] > 0.1
    good = ad.finite_diff_check(lambda: ad.tsum(x * x), [x])
    assert good["x"] < 1e-8


finite = st.floats(-3.0, 3.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_product_rule_property(a, b):
    ga, gb = grad_of(lambda x, y: ad.tsum(x * y), a, b)
    assert np.allclose(ga, np.broadcast_to(b, a.shape), rtol=0, atol=0)
    assert np.allclose(gb, a.sum(axis=0), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-40.0, 40.0)))
def test_softplus_gradient_is_sigmoid_property(x):
    (g,) = grad_of(lambda a: ad.tsum(ad.softplus(a)), x)
    assert np.allclose(g, 1 / (1 + np.exp(-x)), rtol=1e-13, atol=1e-300)
