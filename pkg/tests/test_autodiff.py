import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weightleak import autodiff as ad
from weightleak.exceptions import DimensionError

from conftest import numeric_grad, rel_err, value_and_grad


def check_op(fn, *arrays, tol=1e-5):
    """Reverse-mode gradient of sum(fn(...) * w) against central differences."""
    probe = np.random.default_rng(7)
    out_shape = fn(*[ad.constant(a) for a in arrays]).shape
    w = probe.normal(size=out_shape)

    def scalar(*xs):
        return ad.reduce_sum(ad.mul(fn(*xs), w))

    _, grads = value_and_grad(scalar, *arrays)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [ad.constant(b) for b in arrays]
            args[i] = ad.constant(v)
            return scalar(*args).item()
        assert rel_err(grads[i], numeric_grad(f, a)) <= tol, f"argument {i}"


def away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


OPS = {
    "add": (ad.add, [(3, 4), (3, 4)]),
    "add-broadcast": (ad.add, [(3, 4), (4,)]),
    "sub": (ad.sub, [(2, 3), (2, 3)]),
    "mul": (ad.mul, [(2, 3), (2, 3)]),
    "mul-broadcast": (ad.mul, [(2, 3), (1, 3)]),
    "div": (ad.div, [(2, 3), (2, 3)]),
    "neg": (ad.neg, [(5,)]),
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "exp": (ad.exp, [(4,)]),
    "sigmoid": (ad.sigmoid, [(6,)]),
    "relu": (ad.relu, [(6,)]),
    "absolute": (ad.absolute, [(6,)]),
    "softmax": (ad.softmax, [(2, 5)]),
    "log_softmax": (ad.log_softmax, [(2, 5)]),
    "reshape": (lambda x: ad.reshape(x, (6, 2)), [(3, 4)]),
    "permute": (lambda x: ad.permute(x, (2, 0, 1)), [(2, 3, 4)]),
    "reduce_sum-axis": (lambda x: ad.reduce_sum(x, axis=1), [(3, 4)]),
    "index": (lambda x: ad.index(x, np.s_[1:, ::2]), [(3, 4)]),
    "affine": (lambda x, w, b: ad.affine(x, w, True, b), [(2, 3), (3, 4), (4,)]),
    "conv2d": (lambda x, k: ad.conv2d(x, k, pad=1, stride=2), [(1, 2, 5, 5), (3, 2, 3, 3)]),
    "cross_entropy_soft": (ad.cross_entropy_soft, [(2, 5), (2, 5)]),
    "total_variation": (ad.total_variation, [(1, 2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_primitive_gradients_match_finite_differences(name, rng):
    fn, shapes = OPS[name]
    arrays = [away_from_zero(rng, s) for s in shapes]
    if name == "div":
        arrays[1] = np.abs(arrays[1]) + 0.5
    if name == "total_variation":
        arrays[0] = np.cumsum(np.abs(arrays[0]) + 0.1, axis=-1) + np.arange(3)[:, None] * 10
    check_op(fn, *arrays)


@pytest.mark.parametrize("fn", [ad.log, ad.sqrt])
def test_positive_domain_gradients(fn, rng):
    check_op(fn, rng.uniform(0.5, 2.0, size=(5,)))


@pytest.mark.parametrize("fn", [ad.sum_of_squares, ad.frobenius_norm_all])
def test_list_reductions(fn, rng):
    check_op(lambda a, b: fn([a, b]), rng.normal(size=(2, 3)), rng.normal(size=(4,)))


def test_inner_product_gradient(rng):
    check_op(lambda a, b: ad.inner_product([a], [b]), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))


def test_square_gradient():
    x = ad.variable(3.0)
    assert ad.gradients(x * x, [x]).grads[0] == pytest.approx(6.0)


def test_second_order_closed_form():
    # phi(x) = (d/dw (w x)^2)^2 = 4 w^2 x^4 ; d phi / dx = 16 w^2 x^3
    w, x = ad.variable(1.5), ad.variable(2.0)
    (gw,) = ad.gradients((w * x) * (w * x), [w], retain_graph=True).grads
    phi = gw * gw
    assert phi.item() == pytest.approx(4 * 1.5**2 * 2.0**4)
    (dx,) = ad.gradients(phi, [x]).grads
    assert dx == pytest.approx(16 * 1.5**2 * 2.0**3)


def test_second_order_through_mlp(rng):
    """d/dx of ||dL/dW||^2 against differences of the first-order value."""
    w1, w2 = rng.normal(size=(6, 5)) * 0.5, rng.normal(size=(5, 3)) * 0.5
    label = rng.normal(size=(1, 3))

    def phi(x, record=True):
        ws = [ad.variable(w1), ad.variable(w2)]
        h = ad.sigmoid(ad.matmul(x, ws[0]))
        loss = ad.cross_entropy_soft(ad.matmul(h, ws[1]), ad.constant(label))
        gs = ad.gradients(loss, ws, retain_graph=record).grads
        return ad.sum_of_squares(gs)

    x0 = rng.normal(size=(1, 6))
    x = ad.variable(x0)
    (g,) = ad.gradients(phi(x), [x]).grads
    num = numeric_grad(lambda v: phi(ad.constant(v), record=False).item(), x0)
    assert rel_err(g, num) <= 1e-4


def test_unreachable_variable_gets_zeros():
    x, y = ad.variable(np.ones(3)), ad.variable(np.ones((2, 2)))
    g = ad.gradients(ad.reduce_sum(x), [x, y]).grads
    assert np.array_equal(g[1], np.zeros((2, 2)))


def test_non_scalar_root_rejected():
    x = ad.variable(np.ones(3))
    with pytest.raises(ValueError):
        ad.gradients(x * 2.0, [x])


def test_grad_result_shapes_and_flag(rng):
    x = ad.variable(rng.normal(size=(2, 3)))
    res = ad.gradients(ad.sum_of_squares([x]), [x], retain_graph=True)
    assert res.graph_retained and isinstance(res.grads[0], ad.DiffVar)
    assert res.grads[0].shape == x.shape
    res = ad.gradients(ad.sum_of_squares([x]), [x])
    assert not res.graph_retained and isinstance(res.grads[0], np.ndarray)


def test_gradients_are_linear(rng):
    a0, b0 = rng.normal(size=4), rng.normal(size=4)
    x = ad.variable(a0)
    f = ad.reduce_sum(ad.exp(x))
    g = ad.sum_of_squares([ad.mul(x, b0)])
    combo = ad.add(ad.mul(f, 2.5), ad.mul(g, -0.75))
    (gc,) = ad.gradients(combo, [x]).grads
    (gf,) = ad.gradients(f, [x]).grads
    (gg,) = ad.gradients(g, [x]).grads
    assert np.allclose(gc, 2.5 * gf - 0.75 * gg, rtol=0, atol=1e-12)


def test_values_are_immutable():
    x = ad.variable(np.ones(3))
    with pytest.raises(ValueError):
        x.value[0] = 5.0


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        ad.tensor([1.0, np.nan])
    with pytest.raises(ValueError):
        ad.tensor([np.inf])


# -- forward values ---------------------------------------------------------


def test_affine_identity():
    out = ad.affine(ad.constant([[1.0, 2.0]]), ad.constant(np.eye(2)))
    assert np.array_equal(out.value, [[1.0, 2.0]])


def test_affine_matches_triple_loop(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += x[i, k] * w[k, j]
    assert np.allclose(ad.affine(x, w).value, ref, rtol=0, atol=1e-12)


def test_affine_full_size_shape():
    x = ad.constant(np.zeros((1, 150528)))
    assert ad.affine(x, ad.constant(np.zeros((150528, 32)))).shape == (1, 32)


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(4, 2\)"):
        ad.affine(np.ones((1, 3)), np.ones((4, 2)))


def conv_loops(x, k, pad, stride):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, oh, ow))
    for b in range(B):
        for o in range(O):
            for i in range(oh):
                for j in range(ow):
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, o, i, j] += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
    return out


@pytest.mark.parametrize("pad,stride", [(1, 1), (0, 2), (2, 2)])
def test_conv2d_matches_direct_loops(rng, pad, stride):
    x, k = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    assert np.allclose(ad.conv2d(x, k, pad, stride).value, conv_loops(x, k, pad, stride), rtol=0, atol=1e-12)


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 5))
    assert np.allclose(ad.conv2d(x, np.ones((1, 1, 1, 1))).value, x, rtol=0, atol=0)


def test_conv2d_full_size_shape():
    out = ad.conv2d(np.zeros((1, 3, 224, 224)), np.zeros((12, 3, 5, 5)), pad=2, stride=2)
    assert out.shape == (1, 12, 112, 112)


def test_conv2d_too_small():
    with pytest.raises(DimensionError):
        ad.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


def test_activations():
    assert ad.sigmoid(0.0).item() == 0.5
    assert ad.relu(-3.0).item() == 0.0 and ad.relu(3.0).item() == 3.0
    x = ad.variable(0.0)
    assert ad.gradients(ad.sigmoid(x), [x]).grads[0] == pytest.approx(0.25, abs=1e-12)


def test_sigmoid_is_stable_for_large_inputs():
    v = ad.sigmoid(np.array([-800.0, 800.0])).value
    assert np.all(np.isfinite(v)) and v[0] == 0.0 and v[1] == 1.0


def test_cross_entropy_uniform_is_log_c():
    c = 7
    val = ad.cross_entropy_soft(np.zeros((1, c)), np.zeros((1, c))).item()
    assert val == pytest.approx(np.log(c), abs=1e-12)


def test_cross_entropy_confident_correct():
    logits = np.full((1, 4), -50.0)
    logits[0, 2] = 50.0
    assert ad.cross_entropy_soft(logits, logits).item() < 1e-30


def test_cross_entropy_matches_direct_formula(rng):
    z, t = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    q = np.exp(t) / np.exp(t).sum(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    ref = -(q * logp).sum() / 2
    assert ad.cross_entropy_soft(z, t).item() == pytest.approx(ref, abs=1e-12)


def test_cross_entropy_no_overflow():
    z = np.array([[1000.0, -1000.0, 0.0]])
    assert np.isfinite(ad.cross_entropy_soft(z, z).item())


def test_frobenius_norm_examples(rng):
    assert ad.frobenius_norm_all([np.eye(5)]).item() == pytest.approx(np.sqrt(5), abs=1e-12)
    assert ad.frobenius_norm_all([np.zeros((2, 2)), np.zeros(3)]).item() == 0.0
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 2, 2))
    ref = np.linalg.norm(np.concatenate([a.ravel(), b.ravel()]))
    assert ad.frobenius_norm_all([a, b]).item() == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        ad.frobenius_norm_all([])


def test_frobenius_norm_zero_has_zero_gradient():
    x = ad.variable(np.zeros(3))
    g = ad.gradients(ad.frobenius_norm_all([x]), [x]).grads[0]
    assert np.array_equal(g, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (2, 3), elements=st.floats(-1e3, 1e3)),
       st.randoms(use_true_random=False))
def test_frobenius_norm_permutation_and_reshape_invariant(a, b, rnd):
    base = ad.frobenius_norm_all([a, b]).item()
    tensors = [a.reshape(-1, 1), b.reshape(6)]
    rnd.shuffle(tensors)
    assert ad.frobenius_norm_all(tensors).item() == pytest.approx(base, rel=1e-12, abs=1e-300)


def test_total_variation_examples(rng):
    assert ad.total_variation(np.full((1, 2, 3, 3), 0.4)).item() == 0.0
    assert ad.total_variation(np.array([[[[0.0, 1.0]]]])).item() == 1.0
    assert ad.total_variation(np.ones((1, 1, 1, 1))).item() == 0.0
    img = rng.normal(size=(1, 1, 4, 4))
    ref = 0.0
    for i in range(4):
        for j in range(4):
            if i + 1 < 4:
                ref += abs(img[0, 0, i + 1, j] - img[0, 0, i, j])
            if j + 1 < 4:
                ref += abs(img[0, 0, i, j + 1] - img[0, 0, i, j])
    assert ad.total_variation(img).item() == pytest.approx(ref, abs=1e-12)


def test_absolute_subgradient_at_zero():
    x = ad.variable(np.array([0.0, 2.0, -2.0]))
    g = ad.gradients(ad.reduce_sum(ad.absolute(x)), [x]).grads[0]
    assert np.array_equal(g, [0.0, 1.0, -1.0])


def test_no_record_builds_no_graph():
    x = ad.variable(2.0)
    with ad.no_record():
        y = x * x
    assert not y.requires_grad
    assert np.array_equal(ad.gradients(ad.reduce_sum(y), [x]).grads[0], 0.0)


def test_determinism(rng):
    x0 = rng.normal(size=(2, 5))

    def run():
        x = ad.variable(x0)
        return ad.gradients(ad.cross_entropy_soft(x, x * 2.0), [x]).grads[0]

    assert np.array_equal(run(), run())
