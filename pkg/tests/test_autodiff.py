import numpy as np
import pytest
from hypothesis import given, strategies as st

from mccan import autodiff as ad
from mccan.autodiff import Tensor


def naive_conv(x, w, stride, padding):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for b in range(n):
        for o in range(k):
            for i in range(ho):
                for j in range(wo):
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, o, i, j] += xp[b, ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
    return out


def f64(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)


def test_conv_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = ad.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 1, 6, 5)).astype(np.float32))
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(ad.conv2d(x, Tensor(k), padding=1).data, x.data)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, padding):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    got = ad.conv2d(Tensor(x), Tensor(w), stride, padding).data
    np.testing.assert_allclose(got, naive_conv(x, w, stride, padding), atol=1e-6, rtol=0)


def test_conv_output_extent():
    x = Tensor(np.zeros((2, 3, 11, 8)))
    w = Tensor(np.zeros((4, 3, 3, 2)))
    assert ad.conv2d(x, w, stride=2, padding=1).shape == (2, 4, (11 + 2 - 3) // 2 + 1, (8 + 2 - 2) // 2 + 1)


def test_conv_shape_errors_name_dimension():
    with pytest.raises(ad.ShapeError) as e:
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    assert e.value.dim == "C"
    with pytest.raises(ad.ShapeError) as e:
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 4))), Tensor(np.zeros((1, 1, 3, 3))))
    assert e.value.dim == "H"
    with pytest.raises(ad.ShapeError) as e:
        ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    assert e.value.dim == "stride"


def test_quadratic_gradient():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward(ad.sum(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])


def test_l1_zero_residual_has_zero_subgradient():
    a = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    ad.backward(ad.l1_distance(a, b))
    np.testing.assert_array_equal(a.grad, 0)
    np.testing.assert_array_equal(b.grad, 0)


def test_scalar_examples():
    assert ad.sigmoid(Tensor(np.float32(0))).item() == 0.5
    assert ad.l1_distance(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 0.0]))).item() == 2.0


def test_instance_norm_of_constant_is_zero():
    x = Tensor(np.full((2, 3, 4, 4), 7.5, dtype=np.float32))
    y = ad.instance_norm(x)
    np.testing.assert_array_equal(y.data, 0)
    assert np.all(np.isfinite(y.data))


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(w * w)


def test_log_clamps_and_counts():
    ad.reset_log_clamp_count()
    x = Tensor(np.array([0.0, -1.0, 1.0]), requires_grad=True)
    y = ad.log(x)
    assert y.data[0] == pytest.approx(np.log(1e-12))
    assert ad.log_clamp_count() == 2
    ad.backward(ad.sum(y))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_mixed_precision_rejected():
    with pytest.raises(ad.PrecisionError):
        Tensor(np.ones(2, np.float32)) + Tensor(np.ones(2, np.float64))


def test_double_backward_doubles_gradients(rng):
    x = f64(rng, 1, 2, 6, 6)
    w = f64(rng, 3, 2, 3, 3)
    loss = ad.mean(ad.tanh(ad.conv2d(x, w, 1, 1)))
    ad.backward(loss)
    g1x, g1w = x.grad.copy(), w.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * g1x)
    np.testing.assert_array_equal(w.grad, 2 * g1w)


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    ad.backward(ad.sum(y + y))  # d/dx 2x^2 = 4x
    np.testing.assert_array_equal(x.grad, [12.0])


def _composite(rng):
    x = f64(rng, 2, 2, 8, 8)
    ws = [f64(rng, 4, 2, 3, 3), f64(rng, 4, 4, 3, 3), f64(rng, 1, 4, 3, 3)]
    b = f64(rng, 1, 4, 1, 1)

    def f():
        h = ad.leaky_relu(ad.conv2d(x, ws[0], 2, 1) + b)
        h = ad.relu(ad.instance_norm(ad.conv2d(ad.upsample_nearest(h), ws[1], 1, 1)))
        return ad.mean(ad.sigmoid(ad.conv2d(h, ws[2], 1, 1)))

    return f, [x, *ws, b]


def test_three_layer_composite_gradcheck(rng):
    f, params = _composite(rng)
    res = ad.grad_check(f, params, rng, samples=30)
    assert res["checked"] > 100
    assert res["max_rel_error"] < 1e-4, res


def test_forward_backward_bitwise_deterministic():
    def run():
        f, params = _composite(np.random.default_rng(7))
        loss = f()
        ad.backward(loss)
        return loss.data.tobytes(), [p.grad.tobytes() for p in params]

    assert run() == run()


UNARY = {
    "neg": ad.neg,
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "abs": ad.abs,
    "mean": ad.mean,
    "sum": ad.sum,
    "log": lambda t: ad.log(ad.sigmoid(t) + 0.1),
    "upsample": lambda t: ad.upsample_nearest(t),
    "instance_norm": ad.instance_norm,
}
BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "l1_distance": ad.l1_distance,
    "conv2d_s1": lambda a, b: ad.conv2d(a, b, 1, 1),
    "conv2d_s2": lambda a, b: ad.conv2d(a, b, 2, 0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_op_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    x = f64(rng, 2, 2, 4, 4)
    # random projection so every output element reaches the scalar
    proj = Tensor(np.random.default_rng(seed + 1).normal(size=UNARY[name](x).shape))
    res = ad.grad_check(lambda: ad.sum(UNARY[name](x) * proj), [x], rng)
    assert res["ok"], res


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_op_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    a = f64(rng, 1, 2, 6, 6)
    b = f64(rng, 3, 2, 3, 3) if name.startswith("conv") else f64(rng, 1, 2, 6, 6)
    proj = Tensor(np.random.default_rng(seed + 1).normal(size=BINARY[name](a, b).shape))
    res = ad.grad_check(lambda: ad.sum(BINARY[name](a, b) * proj), [a, b], rng)
    assert res["ok"], res


def test_broadcast_add_reduces_gradient():
    x = Tensor(np.ones((2, 3, 2, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True)
    ad.backward(ad.sum(x + b))
    np.testing.assert_array_equal(b.grad, np.full((1, 3, 1, 1), 8.0))


def test_tensor_serialization_roundtrip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": rng.normal(size=(4,))}
    entries = ad.save_tensors(arrays, tmp_path / "t.bin")
    assert {e["name"] for e in entries} == {"a", "b"}
    assert entries[0]["dtype"] == "float32" and entries[0]["shape"] == [2, 3]
    back = ad.load_tensors(entries, tmp_path / "t.bin")
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)
