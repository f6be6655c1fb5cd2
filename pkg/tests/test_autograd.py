import numpy as np
import pytest

from relight import autograd as ag
from relight.autograd import Tensor
from relight.errors import GraphError, ShapeError
from util_grad import check_grads

rng = np.random.default_rng(2024)


def _rand(*shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# forward oracles


def test_conv2d_identity_kernel():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    out = ag.conv2d(x, Tensor(w), padding=1)
    assert np.array_equal(out.data, x.data)


def test_conv2d_depthwise_ones():
    x = Tensor(np.ones((1, 2, 5, 5), dtype=np.float32))
    w = Tensor(np.ones((2, 1, 3, 3), dtype=np.float32))
    out = ag.conv2d(x, w, groups=2)
    assert out.shape == (1, 2, 3, 3)
    assert np.all(out.data == 9.0)


def test_conv2d_matches_brute_force():
    def brute(x, w, b, stride, padding, groups):
        bs, c_in, h, ww = x.shape
        c_out, cg, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (ww + 2 * padding - kw) // stride + 1
        out = np.zeros((bs, c_out, ho, wo))
        for bi in range(bs):
            for co in range(c_out):
                g = co // (c_out // groups)
                for y in range(ho):
                    for xx in range(wo):
                        patch = xp[bi, g * cg : (g + 1) * cg,
                                   y * stride : y * stride + kh,
                                   xx * stride : xx * stride + kw]
                        out[bi, co, y, xx] = float((patch * w[co]).sum()) + b[co]
        return out

    for stride, padding, groups, c_in, c_out in [
        (1, 0, 1, 3, 4), (1, 1, 1, 2, 2), (2, 1, 1, 3, 4),
        (1, 1, 2, 4, 6), (1, 1, 4, 4, 4), (2, 0, 5, 5, 5),
    ]:
        x = _rand(2, c_in, 6, 7)
        w = _rand(c_out, c_in // groups, 3, 3)
        b = _rand(c_out)
        got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b),
                        stride=stride, padding=padding, groups=groups)
        want = brute(x, w, b, stride, padding, groups)
        assert np.allclose(got.data, want, atol=1e-10), (stride, padding, groups)


def test_conv2d_shape_errors_mention_dims():
    x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
    with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\)"):
        ag.conv2d(x, w)


def test_gelu_values():
    x = Tensor(np.array([0.0, 10.0, -10.0], dtype=np.float64).reshape(1, 1, 1, 3))
    out = ag.gelu(x)
    assert out.data.flat[0] == 0.0
    assert abs(out.data.flat[1] - 10.0) < 1e-6
    assert abs(out.data.flat[2]) < 1e-6


def test_gelu_derivative_at_zero():
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    loss = ag.mean(ag.gelu(x))
    ag.backward(loss)
    assert x.grad.flat[0] == pytest.approx(0.5, abs=1e-12)


def test_group_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 4, 3, 3), 7.0, dtype=np.float32))
    gain = Tensor(np.ones(4, dtype=np.float32))
    bias = Tensor(np.zeros(4, dtype=np.float32))
    out = ag.group_norm(x, 2, gain, bias)
    assert np.max(np.abs(out.data)) < 1e-2


def test_group_norm_zero_gain_gives_bias():
    x = Tensor(_rand(2, 4, 3, 3))
    gain = Tensor(np.zeros(4))
    bias = Tensor(np.full(4, 3.5))
    out = ag.group_norm(x, 2, gain, bias)
    assert np.allclose(out.data, 3.5)


def test_group_norm_divisibility_error():
    x = Tensor(np.zeros((1, 5, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeError, match="divisible"):
        ag.group_norm(x, 2, Tensor(np.ones(5)), Tensor(np.zeros(5)))


def test_upsample_values_and_constant():
    x = Tensor(np.array([[[[1.0, 3.0]]]]))
    out = ag.upsample_bilinear_x2(x)
    assert out.shape == (1, 1, 2, 4)
    expected = [1.0, 0.75 * 1 + 0.25 * 3, 0.25 * 1 + 0.75 * 3, 3.0]
    assert np.allclose(out.data[0, 0, 0], expected)
    assert np.allclose(out.data[0, 0, 1], expected)
    const = ag.upsample_bilinear_x2(Tensor(np.full((1, 2, 3, 5), 2.5)))
    assert np.allclose(const.data, 2.5)


def test_l1_loss_values():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    y = Tensor(np.ones((1, 1, 2, 2)))
    assert ag.l1_loss(x, x).item() == 0.0
    assert ag.l1_loss(x, y).item() == 1.0


def test_concat_and_slice_recoverable():
    a = Tensor(_rand(2, 3, 4, 4))
    b = Tensor(_rand(2, 6, 4, 4))
    cat = ag.concat_channels(a, b)
    assert cat.shape == (2, 9, 4, 4)
    assert np.array_equal(ag.slice_channels(cat, 0, 3).data, a.data)
    assert np.array_equal(ag.slice_channels(cat, 3, 9).data, b.data)


def test_clamp01_forward_and_boundary_grad():
    x = Tensor(np.array([-0.5, 0.0, 0.5, 1.0, 1.5]).reshape(1, 1, 1, 5),
               requires_grad=True)
    out = ag.clamp01(x)
    assert np.allclose(out.data.ravel(), [0.0, 0.0, 0.5, 1.0, 1.0])
    ag.backward(ag.mean(out))
    # gradient passes only strictly inside (0, 1)
    assert np.allclose(x.grad.ravel(), [0.0, 0.0, 0.2, 0.0, 0.0])


def test_mean_gradient():
    x = Tensor(_rand(2, 3, 2, 2), requires_grad=True)
    ag.backward(ag.mean(x))
    assert np.allclose(x.grad, 1.0 / x.size)


def test_mean_square_gradient_via_mul():
    data = _rand(1, 2, 3, 3)
    x = Tensor(data, requires_grad=True)
    ag.backward(ag.mean(ag.mul(x, x)))
    assert np.allclose(x.grad, 2.0 * data / data.size, atol=1e-12)


def test_diamond_graph_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ag.add(x, x)
    ag.backward(ag.mean(y))
    assert x.grad[0] == pytest.approx(2.0)


def test_pad_reflect_values():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(1, 1, 2, 3))
    out = ag.pad_reflect(x, 1, 1, 1, 1)
    assert np.array_equal(out.data, np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)),
                                           mode="reflect"))


def test_backward_errors():
    x = Tensor(_rand(2, 2), requires_grad=True)
    y = ag.add(x, x)
    with pytest.raises(ShapeError, match="scalar"):
        ag.backward(y)
    ag.clear_graph()
    leaf = Tensor(_rand(2, 2))
    with pytest.raises(GraphError):
        ag.backward(ag.mean(leaf))  # nothing recorded: leaf has no grad


def test_no_grad_records_nothing():
    ag.clear_graph()
    x = Tensor(_rand(1, 2, 3, 3), requires_grad=True)
    with ag.no_grad():
        out = ag.gelu(ag.conv2d(x, Tensor(_rand(2, 2, 1, 1), requires_grad=True)))
    assert not out.requires_grad
    assert out.grad is None
    assert len(ag._tape()) == 0
    assert x.grad is None


def test_forward_determinism():
    x = _rand(2, 4, 6, 6).astype(np.float32)
    w = _rand(8, 4, 3, 3).astype(np.float32)
    a = ag.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = ag.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# gradcheck battery (the same cases the acceptance gate runs)

CONV_CASES = [
    dict(x=(2, 3, 6, 6), w=(4, 3, 3, 3), stride=1, padding=1, groups=1),
    dict(x=(1, 2, 5, 5), w=(2, 2, 3, 3), stride=1, padding=0, groups=1),
    dict(x=(2, 4, 6, 6), w=(6, 2, 3, 3), stride=1, padding=1, groups=2),
    dict(x=(2, 4, 6, 6), w=(4, 1, 3, 3), stride=1, padding=1, groups=4),
    dict(x=(1, 3, 6, 6), w=(5, 3, 3, 3), stride=2, padding=1, groups=1),
    dict(x=(1, 6, 6, 6), w=(6, 1, 3, 3), stride=2, padding=1, groups=6),
    dict(x=(2, 2, 4, 4), w=(3, 2, 1, 1), stride=1, padding=0, groups=1),
]


@pytest.mark.parametrize("case", CONV_CASES)
def test_gradcheck_conv2d(case):
    x = _rand(*case["x"])
    w = _rand(*case["w"])
    b = _rand(case["w"][0])

    def fn(ts):
        return ag.mean(
            ag.mul(
                ag.conv2d(ts[0], ts[1], ts[2], stride=case["stride"],
                          padding=case["padding"], groups=case["groups"]),
                ts[3],
            )
        )

    out_h = (case["x"][2] + 2 * case["padding"] - case["w"][2]) // case["stride"] + 1
    out_w = (case["x"][3] + 2 * case["padding"] - case["w"][3]) // case["stride"] + 1
    probe = _rand(case["x"][0], case["w"][0], out_h, out_w)
    check_grads(fn, [x, w, b, probe])


GN_CASES = [(1, 2, 2, 3, 3), (2, 4, 2, 2, 2), (2, 4, 4, 3, 3), (1, 6, 3, 2, 2), (2, 6, 2, 4, 4)]


@pytest.mark.parametrize("shape", GN_CASES)
def test_gradcheck_group_norm(shape):
    b, c, groups, h, w = shape
    x = _rand(b, c, h, w)
    gain = _rand(c, lo=0.5, hi=1.5)
    bias = _rand(c)
    probe = _rand(b, c, h, w)

    def fn(ts):
        return ag.mean(ag.mul(ag.group_norm(ts[0], groups, ts[1], ts[2]), ts[3]))

    check_grads(fn, [x, gain, bias, probe])


ELEMENT_SHAPES = [(1, 1, 2, 2), (2, 3, 3, 3), (1, 2, 4, 5), (3, 1, 2, 6), (2, 2, 5, 5)]


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_gelu(shape):
    check_grads(lambda ts: ag.mean(ag.mul(ag.gelu(ts[0]), ts[1])),
                [_rand(*shape, lo=-2, hi=2), _rand(*shape)])


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_upsample(shape):
    probe = _rand(shape[0], shape[1], 2 * shape[2], 2 * shape[3])
    check_grads(lambda ts: ag.mean(ag.mul(ag.upsample_bilinear_x2(ts[0]), ts[1])),
                [_rand(*shape), probe])


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_add_mul_scalar(shape):
    check_grads(
        lambda ts: ag.mean(ag.mul(ag.add(ts[0], ag.mul_scalar(ts[1], 1.7)), ts[2])),
        [_rand(*shape), _rand(*shape), _rand(*shape)],
    )


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_mul(shape):
    check_grads(lambda ts: ag.mean(ag.mul(ts[0], ts[1])),
                [_rand(*shape), _rand(*shape)])


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_clamp01(shape):
    # keep samples away from the 0/1 kinks so central differences are valid
    x = rng.choice([-0.6, -0.3, 0.2, 0.4, 0.6, 0.8, 1.3, 1.6], size=shape)
    x = x + rng.uniform(-0.05, 0.05, size=shape)
    check_grads(lambda ts: ag.mean(ag.mul(ag.clamp01(ts[0]), ts[1])),
                [x, _rand(*shape)])


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_mean(shape):
    check_grads(lambda ts: ag.mean(ts[0]), [_rand(*shape)])


@pytest.mark.parametrize("shape", ELEMENT_SHAPES)
def test_gradcheck_l1(shape):
    a = _rand(*shape)
    b = _rand(*shape)
    # keep |a - b| above the finite-difference step so sign() is stable
    gap = np.abs(a - b) < 0.05
    a[gap] += 0.1
    check_grads(lambda ts: ag.l1_loss(ts[0], ts[1]), [a, b])


CONCAT_CASES = [((1, 2, 3, 3), (1, 3, 3, 3)), ((2, 1, 2, 2), (2, 1, 2, 2)),
                ((1, 4, 2, 5), (1, 2, 2, 5)), ((2, 3, 4, 4), (2, 6, 4, 4)),
                ((1, 5, 3, 2), (1, 1, 3, 2))]


@pytest.mark.parametrize("shapes", CONCAT_CASES)
def test_gradcheck_concat_slice(shapes):
    sa, sb = shapes

    def fn(ts):
        cat = ag.concat_channels(ts[0], ts[1])
        return ag.mean(ag.mul(ag.slice_channels(cat, 1, cat.shape[1]), ts[2]))

    probe = _rand(sa[0], sa[1] + sb[1] - 1, sa[2], sa[3])
    check_grads(fn, [_rand(*sa), _rand(*sb), probe])


PAD_CROP_CASES = [((1, 1, 4, 4), (1, 2, 1, 2)), ((2, 2, 5, 5), (2, 2, 2, 2)),
                  ((1, 3, 3, 6), (0, 2, 3, 0)), ((1, 1, 6, 3), (1, 0, 0, 2)),
                  ((2, 1, 4, 5), (3, 3, 3, 3))]


@pytest.mark.parametrize("case", PAD_CROP_CASES)
def test_gradcheck_pad_reflect_and_crop(case):
    shape, pads = case

    def fn(ts):
        padded = ag.pad_reflect(ts[0], *pads)
        return ag.mean(ag.mul(ag.crop(padded, 1, 1, shape[2], shape[3]), ts[1]))

    check_grads(fn, [_rand(*shape), _rand(shape[0], shape[1], shape[2], shape[3])])
