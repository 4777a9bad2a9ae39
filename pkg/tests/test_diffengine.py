import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from m2st import diffengine as ad
from m2st.diffengine import NonFiniteError, ParamVector, Var
from m2st.estimators import h_from_gram, j_from_h
from m2st.kernels import DeepKernel, GaussianKernel
from m2st.learners import inner_adapt

RNG = np.random.default_rng(1234)
A = RNG.normal(size=(4, 3))
Y = RNG.normal(size=(5, 3))

# scalar objectives over a flat 12-vector, one per primitive
PRIMITIVES = {
    "add": lambda x: ad.sum(ad.mul(ad.add(x, 2.0), ad.add(x, 2.0))),
    "sub": lambda x: ad.sum(ad.exp(ad.sub(0.5, x))),
    "neg": lambda x: ad.sum(ad.exp(ad.neg(x))),
    "mul": lambda x: ad.sum(ad.mul(x, ad.mul(x, x))),
    "div": lambda x: ad.sum(ad.div(1.0, ad.add(ad.mul(x, x), 1.0))),
    "exp": lambda x: ad.sum(ad.exp(x)),
    "log": lambda x: ad.sum(ad.log(ad.add(ad.mul(x, x), 1.0))),
    "sigmoid": lambda x: ad.sum(ad.sigmoid(ad.mul(3.0, x))),
    "softplus": lambda x: ad.sum(ad.softplus(ad.mul(3.0, x))),
    "sqrt": lambda x: ad.sum(ad.sqrt(ad.add(ad.mul(x, x), 0.5))),
    "matmul": lambda x: ad.sum(ad.exp(ad.matmul(ad.reshape(x, (4, 3)), A.T))),
    "transpose": lambda x: ad.sum(ad.exp(ad.matmul(ad.transpose(ad.reshape(x, (4, 3))), A))),
    "row_sum": lambda x: ad.sum(ad.exp(ad.sum(ad.reshape(x, (4, 3)), axis=1))),
    "broadcast": lambda x: ad.sum(ad.exp(ad.mul(ad.reshape(x, (4, 3)), ad.sum(ad.reshape(x, (4, 3)), axis=0)))),
    "sqdist": lambda x: ad.sum(ad.exp(ad.neg(ad.sqdist(ad.reshape(x, (4, 3)), Y)))),
    "sqdist_self": lambda x: ad.sum(ad.exp(ad.neg(ad.sqdist(ad.reshape(x, (4, 3)), ad.reshape(x, (4, 3)))))),
    "slice": lambda x: ad.sum(ad.exp(ad.getitem(ad.reshape(x, (4, 3)), (slice(0, 2), slice(1, 3))))),
    "gather": lambda x: ad.sum(ad.exp(ad.getitem(ad.reshape(x, (4, 3)), (np.arange(3), np.arange(3))))),
    "softmax": lambda x: ad.sum(ad.mul(ad.softmax(x), np.arange(12.0))),
}
COMPOSITES = {"sqrt", "div"}


def test_softplus_at_zero():
    assert ad.evaluate(lambda x: ad.sum(ad.softplus(x)), np.zeros(1)) == pytest.approx(np.log(2), abs=1e-15)


def test_sum_of_squares():
    assert ad.evaluate(lambda x: ad.sum(ad.mul(x, x)), np.array([1.0, 2.0, 3.0])) == 14.0


def test_softplus_slope_at_zero():
    np.testing.assert_allclose(ad.gradient(lambda x: ad.sum(ad.softplus(x)), np.zeros(1)), [0.5])


def test_gradient_of_squared_norm():
    np.testing.assert_allclose(ad.gradient(lambda x: ad.sum(ad.mul(x, x)), np.array([1.0, -2.0])), [2.0, -4.0])


def test_softplus_overflow_safe():
    big = ad.softplus(Var(np.array([1000.0]))).value[0]
    assert np.isfinite(big) and abs(big - 1000.0) <= 1e-12
    assert ad.softplus(Var(np.array([-1000.0]))).value[0] >= 0


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    f = PRIMITIVES[name]
    tol = 1e-4 if name in COMPOSITES else 1e-6
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(ad.finite_diff_check(f, rng.normal(size=12) * 0.7) for _ in range(100))
    assert worst <= tol


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_second_order_matches_differenced_gradient(name):
    f = PRIMITIVES[name]
    v = np.linspace(-1.0, 1.0, 12)

    def directional(theta):
        (g,) = ad.grad(f(theta), [theta], create_graph=True)
        return ad.sum(ad.mul(g, v))

    x0 = np.random.default_rng(7).normal(size=12) * 0.5
    hv = ad.gradient(directional, x0)
    step = 1e-5
    for i in range(12):
        e = np.zeros(12)
        e[i] = step
        fd = (ad.gradient(f, x0 + e) @ v - ad.gradient(f, x0 - e) @ v) / (2 * step)
        assert abs(hv[i] - fd) <= 1e-5 * max(1.0, abs(hv[i]))


def test_quadratic_is_exact():
    Q = np.array([[3.0, 1.0], [1.0, 2.0]])
    obj = lambda x: ad.sum(ad.mul(x, ad.matmul(Q, ad.reshape(x, (2, 1))).reshape(2)))
    assert ad.finite_diff_check(obj, np.array([0.3, -1.2]), 1e-5) <= 1e-8


def test_wrong_hand_gradient_is_caught():
    obj = lambda x: ad.sum(ad.exp(x))
    x = np.array([0.1, 0.7, -0.4])
    assert ad.finite_diff_check(obj, x, 1e-5, analytic=lambda v: np.exp(v) * 1.1) > 1e-2


def _j_instance(seed, m=10, width=6):
    rng = np.random.default_rng(seed)
    k = DeepKernel.init(2, rng, width=width)
    Z = np.vstack([rng.normal(size=(m, 2)), rng.normal(size=(m, 2)) + 0.4])
    return k, (lambda th: j_from_h(h_from_gram(k.gram_var(th, Z), m)))


def test_power_criterion_gradient_deep_kernel():
    k, obj = _j_instance(0)
    assert ad.finite_diff_check(obj, k.param_vector(), 1e-5) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(sorted(PRIMITIVES)), min_size=2, max_size=4, unique=True),
       st.integers(0, 2**31 - 1))
def test_backward_is_linear(names, seed):
    x = np.random.default_rng(seed).normal(size=12) * 0.5
    total = ad.gradient(lambda t: ad.tree_sum([PRIMITIVES[n](t) for n in names]), x)
    parts = sum(ad.gradient(PRIMITIVES[n], x) for n in names)
    np.testing.assert_allclose(total, parts, rtol=1e-12, atol=1e-12)


def test_nonfinite_node_is_named():
    with pytest.raises(NonFiniteError, match="log"):
        ad.evaluate(lambda x: ad.sum(ad.log(ad.sub(x, 1.0))), np.array([0.5]))


def test_evaluate_rejects_nonfinite_params():
    with pytest.raises(ValueError):
        ad.evaluate(lambda x: ad.sum(x), np.array([np.nan]))


def test_zero_lambda_zero_variance_raises():
    H = np.ones((3, 3))
    with pytest.raises(ZeroDivisionError):
        j_from_h(H, 0.0)


def test_inner_update_evaluates_without_tape():
    # plain evaluation must still apply the inner ascent step
    rng = np.random.default_rng(3)
    Z = np.vstack([rng.normal(size=(8, 2)), rng.normal(size=(8, 2)) + 0.5])
    g = GaussianKernel(0.0, 2)
    theta0 = g.param_vector().values
    with ad.no_grad():
        w = inner_adapt(g, Var(theta0), Z, 8, 0.8, 1, 1e-8, create_graph=False).value
    obj = lambda t: j_from_h(h_from_gram(g.gram_var(t, Z), 8))
    np.testing.assert_allclose(w, theta0 + 0.8 * ad.gradient(obj, theta0), rtol=1e-12)


def test_meta_gradient_through_inner_step():
    rng = np.random.default_rng(11)
    m = 10
    Z = np.vstack([rng.normal(size=(m, 2)), rng.normal(size=(m, 2)) + 0.3])
    Zq = np.vstack([rng.normal(size=(m, 2)), rng.normal(size=(m, 2)) + 0.3])
    g = GaussianKernel(0.0, 2)

    def meta(th):
        w = inner_adapt(g, th, Z, m, 0.8, 1, 1e-8, create_graph=True)
        return j_from_h(h_from_gram(g.gram_var(w, Zq), m))

    assert ad.finite_diff_check(meta, g.param_vector(), 1e-5) <= 1e-3


class TestParamVector:
    layout = [("W", (2, 3)), ("b", (3,)), ("s", (1,))]

    def test_offsets_and_segments(self):
        pv = ParamVector(np.arange(10.0), self.layout)
        assert pv.offsets()["b"] == (6, 9, (3,))
        np.testing.assert_array_equal(pv.segment("W"), np.arange(6.0).reshape(2, 3))
        parts = pv.unflatten()
        assert parts["s"].shape == (1,)

    def test_rejects_bad_layouts(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(9), self.layout)
        with pytest.raises(ValueError):
            ParamVector(np.zeros(6), [("a", (3,)), ("a", (3,))])
        with pytest.raises(ValueError):
            ParamVector(np.array([1.0, np.inf]), [("a", (2,))])

    @given(arrays(np.float64, 10, elements=st.floats(-1e6, 1e6)))
    def test_replace_roundtrip(self, values):
        pv = ParamVector(np.zeros(10), self.layout).replace(values)
        np.testing.assert_array_equal(pv.values, values)
        assert pv.layout == self.layout
