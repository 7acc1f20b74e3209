import numpy as np
import pytest

from panomtl import functional as F
from panomtl import tensor as T
from panomtl.checks import op_suite
from panomtl.gradcheck import grad_check
from panomtl.tensor import NonFiniteError, Tensor, no_grad


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def conv_loop(x, w, b, stride, pad, wrap):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                y = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if not 0 <= y < H:
                                    continue
                                if wrap:
                                    xx %= W
                                elif not 0 <= xx < W:
                                    continue
                                acc += x[n, c, y, xx] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


@pytest.mark.parametrize("stride,pad,wrap", [(1, 1, True), (1, 1, False), (2, 1, True), (1, 0, False)])
def test_conv2d_matches_loop(stride, pad, wrap):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = F.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad, wrap=wrap).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, wrap), atol=1e-12)


def test_conv1x1_fast_path_matches_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 4, 8)), rng.standard_normal((5, 3, 1, 1)), rng.standard_normal(5)
    got = F.conv2d(t64(x), t64(w), t64(b)).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, 1, 0, False), atol=1e-12)


def test_depthwise_matches_grouped_loop():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((1, 3, 4, 6)), rng.standard_normal((3, 3, 3))
    got = F.depthwise_conv2d(t64(x), t64(w), None, padding=1, wrap=True).data
    for c in range(3):
        ref = conv_loop(x[:, c:c + 1], w[c][None, None], None, 1, 1, True)
        np.testing.assert_allclose(got[:, c:c + 1], ref, atol=1e-12)


def test_conv_wrap_sees_opposite_edge():
    x = np.zeros((1, 1, 3, 4))
    x[0, 0, 1, 3] = 1.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 0] = 1.0  # picks the left neighbour
    out = F.conv2d(t64(x), t64(w), padding=1, wrap=True).data
    assert out[0, 0, 1, 0] == 1.0
    out = F.conv2d(t64(x), t64(w), padding=1, wrap=False).data
    assert out[0, 0, 1, 0] == 0.0


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        F.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        F.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 3, 3))), stride=0)


def test_maxpool_values_and_first_max_gradient():
    x = t64(np.array([[[[1.0, 3.0, 0.0, 0.0], [3.0, 2.0, 0.0, -1.0]]]]), grad=True)
    out = F.maxpool2(x)
    np.testing.assert_array_equal(out.data, [[[[3.0, 0.0]]]])
    T.tsum(out).backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 1, 1, 0], [0, 0, 0, 0]]]])
    with pytest.raises(ValueError):
        F.maxpool2(t64(np.zeros((1, 1, 3, 4))))


def test_linear_matches_matmul():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
    np.testing.assert_allclose(F.linear(t64(x), t64(w), t64(b)).data, np.einsum("bni,oi->bno", x, w) + b)
    with pytest.raises(ValueError):
        F.linear(t64(x), t64(np.zeros((3, 5))))


def test_softmax_closed_forms():
    s = F.softmax(t64([[0.0, np.log(3.0)]]), axis=1).data
    np.testing.assert_allclose(s, [[0.25, 0.75]], atol=1e-15)
    big = F.softmax(t64([[1000.0, 1000.0, -1000.0]])).data
    np.testing.assert_allclose(big, [[0.5, 0.5, 0.0]], atol=1e-15)
    rng = np.random.default_rng(4)
    s = F.softmax(t64(rng.standard_normal((3, 4, 5))), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        F.softmax(t64(np.zeros((2, 2))), axis=2)


def test_gelu_matches_erf_formula():
    from math import erf, sqrt
    xs = np.linspace(-4, 4, 41)
    ref = [x * 0.5 * (1 + erf(x / sqrt(2))) for x in xs]
    np.testing.assert_allclose(T.gelu(t64(xs)).data, ref, atol=1e-15)


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(t64([-800.0, 0.0, 800.0])).data
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("mode,axes", [("batch", (0, 2, 3)), ("layer", (1, 2, 3)), ("instance", (2, 3))])
def test_normalize_layer_statistics(mode, axes):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 4, 2, 5)) * 3 + 1
    y = F.normalize_layer(t64(x), mode, eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=axes), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=axes), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        F.normalize_layer(t64(x), "group")


@pytest.mark.parametrize("which,mode", [(0, "batch"), (1, "layer"), (2, "instance")])
def test_switchable_norm_saturates_to_single_statistic(which, mode):
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((3, 4, 3, 5)) * 2 + 0.5)
    logits = np.full(3, -60.0)
    logits[which] = 60.0
    got = F.switchable_norm(x, t64(logits), t64(logits)).data
    np.testing.assert_allclose(got, F.normalize_layer(x, mode).data, atol=1e-10)


def test_switchable_norm_uniform_mix():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 4))
    got = F.switchable_norm(t64(x), t64(np.zeros(3)), t64(np.zeros(3)), eps=1e-5).data
    mus = [x.mean(axis=a, keepdims=True) for a in ((0, 2, 3), (1, 2, 3), (2, 3))]
    vs = [x.var(axis=a, keepdims=True) for a in ((0, 2, 3), (1, 2, 3), (2, 3))]
    ref = (x - sum(mus) / 3) / np.sqrt(sum(vs) / 3 + 1e-5)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_bilinear_resize_identity_and_constant():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 4, 8))
    np.testing.assert_allclose(F.bilinear_resize(t64(x), 4, 8).data, x, atol=1e-14)
    c = F.bilinear_resize(t64(np.full((1, 1, 3, 6), 2.5)), 6, 12, wrap_width=True).data
    np.testing.assert_allclose(c, 2.5, atol=1e-14)


def test_sample_bilinear_wrap_pixel_centres_and_wrap():
    rng = np.random.default_rng(9)
    f = rng.standard_normal((1, 2, 3, 4))
    u = t64([[0.0, 3.0, 4.0, -1.0, 3.5]])
    v = t64([[1.0, 2.0, 0.0, 1.0, 0.0]])
    s = F.sample_bilinear_wrap(t64(f), u, v).data
    np.testing.assert_allclose(s[0, :, 0], f[0, :, 1, 0])
    np.testing.assert_allclose(s[0, :, 1], f[0, :, 2, 3])
    np.testing.assert_allclose(s[0, :, 2], f[0, :, 0, 0])  # u = W wraps to 0
    np.testing.assert_allclose(s[0, :, 3], f[0, :, 1, 3])
    np.testing.assert_allclose(s[0, :, 4], 0.5 * (f[0, :, 0, 3] + f[0, :, 0, 0]))
    with pytest.raises(ValueError):
        F.sample_bilinear_wrap(t64(f), t64([[np.nan]]), t64([[0.0]]))


def test_vector_angle_special_pairs():
    a = t64(np.array([[1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]]).T[None])
    b = t64(np.array([[0, 1.0, 0], [-1.0, 0, 0], [3.0, 0, 0], [0, 0, 1.0]]).T[None])
    np.testing.assert_allclose(F.vector_angle(a, b).data[0], [np.pi / 2, np.pi, 0.0, np.pi / 2], atol=1e-15)


def test_backward_accumulates_through_shared_nodes():
    x = t64([2.0, 3.0], grad=True)
    y = x * x + x  # d/dx = 2x + 1
    T.tsum(y * 2.0).backward()
    np.testing.assert_allclose(x.grad, [10.0, 14.0])
    T.tsum(x).backward()
    np.testing.assert_allclose(x.grad, [11.0, 15.0])


def test_unbroadcast_grad_shapes():
    a = t64(np.ones((2, 3)), grad=True)
    b = t64(np.ones((1, 3)), grad=True)
    c = t64(np.ones(3), grad=True)
    T.tsum(a * b + c).backward()
    assert a.grad.shape == (2, 3) and b.grad.shape == (1, 3) and c.grad.shape == (3,)
    np.testing.assert_allclose(c.grad, 2.0)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    with pytest.raises(ValueError):
        t64(1.0).backward()


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        T.div(t64([1.0]), t64([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(t64([1000.0]))


def test_log_domain_errors():
    with pytest.raises(ValueError):
        T.log10(t64([1.0, 0.0]))
    with pytest.raises(ValueError):
        T.log(t64([-1.0]))


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf
    assert T.is_grad_enabled()


def test_elementwise_dispatch():
    x = t64([-1.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("relu", x).data, [0.0, 2.0])
    with pytest.raises(ValueError):
        T.elementwise("softplus", x)


def test_grad_check_detects_wrong_backward():
    from panomtl.checks import buggy_sigmoid
    x = t64(np.linspace(-1, 1, 6))
    assert not grad_check(buggy_sigmoid, [x]).passed
    assert grad_check(T.sigmoid, [t64(np.linspace(-1, 1, 6))]).passed


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("size", [0, 1])
def test_every_primitive_passes_gradcheck(seed, size):
    results = op_suite(seed, size=size)
    bad = [(n, r.max_rel_error) for n, r in results if not r.passed]
    assert not bad
    assert len(results) >= 40
