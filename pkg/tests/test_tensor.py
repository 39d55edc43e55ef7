"""Tensor engine: forward oracles, gradient checks, format round trips."""

import numpy as np
import pytest

from changescan import tensor as T
from changescan.tensor import Tensor

from helpers import check_grads, leaf

rng = np.random.default_rng(7)


# -- forward oracles -----------------------------------------------------------


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for kk in range(k):
                out[i, j] += a[i, kk] * b[kk, j]
    return out


def conv_oracle(x, w, stride, padding):
    ci, h, ww = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(ci):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def test_matmul_against_triple_loop():
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(got, a @ b)
    assert np.allclose(got, matmul_oracle(a, b), rtol=0, atol=1e-12)


def test_matmul_identity_and_scalar_case():
    a = rng.standard_normal((4, 4))
    assert np.array_equal(T.matmul(Tensor(np.eye(4)), Tensor(a)).data, a)
    one = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
    assert one.data[0, 0] == 6.0


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert np.array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])
    x = Tensor(rng.standard_normal(5))
    assert np.array_equal((x - x).data, np.zeros(5))


def test_no_implicit_broadcasting():
    with pytest.raises(ValueError, match=r"shape mismatch \(2, 3\) vs \(3,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    # scalars are the one exception
    assert np.array_equal((Tensor(np.ones((2, 3))) * 2.0).data, 2 * np.ones((2, 3)))


def test_conv2d_identity_permutation_1x1():
    x = rng.standard_normal((3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[0, 1], w[1, 2], w[2, 0] = 1.0, 1.0, 1.0  # permute channels
    y = T.conv2d(Tensor(x), Tensor(w)).data
    assert np.array_equal(y, x[[1, 2, 0]])


def test_conv2d_depthwise_delta_kernel():
    x = rng.standard_normal((4, 6, 6))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    y = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1, groups=4).data
    assert np.array_equal(y, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_against_nested_loops(stride, padding):
    x = rng.standard_normal((4, 5, 5))
    w = rng.standard_normal((2, 4, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    assert np.allclose(got, conv_oracle(x, w, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_group_arithmetic_error():
    with pytest.raises(ValueError, match="groups"):
        T.conv2d(Tensor(np.ones((4, 4, 4))), Tensor(np.ones((4, 2, 1, 1))), groups=4)


def test_avg_pool_constant_map():
    x = Tensor(np.full((8, 8), 3.25))
    y = T.avg_pool2d(x, (4, 4))
    assert np.array_equal(y.data, np.full((2, 2), 3.25))


def test_avg_pool_divisibility_error():
    with pytest.raises(ValueError, match="not divisible"):
        T.avg_pool2d(Tensor(np.ones((6, 6))), (4, 4))


def test_softmax_uniform_vector():
    y = T.softmax(Tensor(np.zeros(7)), axis=0)
    assert np.allclose(y.data, np.full(7, 1 / 7), atol=1e-12)


def test_layer_norm_constant_channel_is_zero_before_affine():
    g = Tensor(np.ones(5))
    b = Tensor(np.zeros(5))
    x = Tensor(np.full((5, 3), 2.0))
    y = T.layer_norm(x, g, b, axis=0)
    assert np.allclose(y.data, 0.0, atol=1e-6)


def test_layer_norm_zero_mean_over_channels():
    g = Tensor(np.ones(6))
    b = Tensor(np.zeros(6))
    x = Tensor(rng.standard_normal((6, 10)))
    y = T.layer_norm(x, g, b, axis=0)
    assert np.abs(y.data.mean(axis=0)).max() < 1e-6


def test_reshape_round_trip_exact():
    x = Tensor(rng.standard_normal((3, 4, 5)))
    y = T.reshape(T.reshape(x, 12, 5), 3, 4, 5)
    assert np.array_equal(x.data, y.data)


def test_upsample_then_pool_is_identity():
    x = Tensor(rng.standard_normal((2, 3, 3)))
    y = T.avg_pool2d(T.upsample_nearest(x, 2), (2, 2))
    assert np.allclose(y.data, x.data, atol=1e-12)


def test_roll_round_trip():
    x = Tensor(rng.standard_normal((2, 8, 8)))
    y = T.roll2d(T.roll2d(x, 3, -2), -3, 2)
    assert np.array_equal(x.data, y.data)


def test_index_select_bijection_round_trip():
    x = Tensor(rng.standard_normal((3, 10)))
    perm = rng.permutation(10)
    inv = np.argsort(perm)
    y = T.index_select(T.index_select(x, perm, unique=True), inv, unique=True)
    assert np.array_equal(x.data, y.data)


def test_non_finite_raises():
    with pytest.raises(T.NumericalError):
        T.texp(Tensor(np.array([1000.0])))
    with pytest.raises(T.NumericalError):
        Tensor(np.array([np.nan]))


def test_backward_requires_scalar():
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_accumulates_additively():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    assert np.allclose(x.grad, [3.0])
    (x * 3.0).sum().backward()
    assert np.allclose(x.grad, [6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_of_sum_linearity():
    xa = rng.standard_normal((4, 4))
    a_coef, b_coef = 1.7, -0.3

    def run(coeff_f, coeff_g):
        x = Tensor(xa.copy(), requires_grad=True)
        f = T.texp(x * 0.1).sum()
        g = (x * x).sum()
        (f * coeff_f + g * coeff_g).backward()
        return x.grad.copy()

    combined = run(a_coef, b_coef)
    parts = a_coef * run(1.0, 0.0) + b_coef * run(0.0, 1.0)
    assert np.allclose(combined, parts, rtol=0, atol=1e-12)


def test_diamond_graph_gradient():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    z = (y + y).sum()
    z.backward()
    assert np.allclose(x.grad, [2 * 2 * 1.5])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# -- gradient checks (central differences, 64-bit) ------------------------------


def test_gelu_gradient_on_random_scalars():
    vals = rng.standard_normal(16)
    for v in vals:
        x = Tensor(np.array([v]), requires_grad=True)
        check_grads(lambda: T.gelu(x).sum(), [x], rtol=1e-4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_elementwise_ops(seed):
    r = np.random.default_rng(seed)
    a = leaf(r, 4, 3)
    b = leaf(r, 4, 3)
    check_grads(lambda: (a + b).sum(), [a, b])
    check_grads(lambda: (a - b).sum(), [a, b])
    check_grads(lambda: (a * b).sum(), [a, b])
    check_grads(lambda: (a / (b * b + 1.0)).sum(), [a, b])
    check_grads(lambda: T.texp(a * 0.3).sum(), [a])
    check_grads(lambda: T.tlog(a * a + 1.0).sum(), [a])
    check_grads(lambda: T.sigmoid(a).sum(), [a])
    check_grads(lambda: T.softplus(a).sum(), [a])
    check_grads(lambda: T.tabs(a + 0.7).sum(), [a])
    check_grads(lambda: (-a).sum(), [a])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_shape_and_reduce_ops(seed):
    r = np.random.default_rng(seed)
    a = leaf(r, 2, 3, 4)
    check_grads(lambda: T.reshape(a, 6, 4).sum(), [a])
    check_grads(lambda: T.transpose(a, (2, 0, 1)).sum(axis=1).sum(), [a])
    check_grads(lambda: (T.narrow(a, 2, 1, 2) * 3.0).sum(), [a])
    check_grads(lambda: a.sum(axis=(0, 2)).sum(), [a])
    check_grads(lambda: a.mean(axis=1).sum(), [a])
    s = leaf(r, 1, 3, 1)
    check_grads(lambda: (T.expand(s, (2, 3, 4)) * 1.3).sum(), [s])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_matmul_softmax_concat(seed):
    r = np.random.default_rng(seed)
    a = leaf(r, 3, 4)
    b = leaf(r, 4, 2)
    check_grads(lambda: T.matmul(a, b).sum(), [a, b])
    check_grads(lambda: (T.softmax(a, axis=1) * T.softmax(a, axis=0)).sum(), [a])
    c = leaf(r, 3, 2)
    check_grads(lambda: T.concat([a, c], axis=1).sum(axis=0).sum(), [a, c])


@pytest.mark.parametrize("seed", [0, 1])
def test_grad_layer_norm(seed):
    r = np.random.default_rng(seed)
    x = leaf(r, 5, 7)
    g = leaf(r, 5)
    b = leaf(r, 5)
    check_grads(lambda: (T.layer_norm(x, g, b, axis=0) * T.sigmoid(x)).sum(), [x, g, b])


@pytest.mark.parametrize(
    "cfg",
    [
        dict(ci=3, co=2, k=1, stride=1, padding=0, groups=1),
        dict(ci=3, co=2, k=3, stride=1, padding=1, groups=1),
        dict(ci=4, co=4, k=3, stride=1, padding=1, groups=4),
        dict(ci=3, co=2, k=3, stride=2, padding=1, groups=1),
    ],
)
def test_grad_conv2d(cfg):
    r = np.random.default_rng(3)
    x = leaf(r, cfg["ci"], 6, 6)
    w = leaf(r, cfg["co"], cfg["ci"] // cfg["groups"], cfg["k"], cfg["k"], scale=0.5)
    b = leaf(r, cfg["co"])
    check_grads(
        lambda: T.conv2d(x, w, b, stride=cfg["stride"], padding=cfg["padding"], groups=cfg["groups"]).sum(),
        [x, w, b],
    )


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_spatial_ops(seed):
    r = np.random.default_rng(seed)
    x = leaf(r, 2, 4, 4)
    check_grads(lambda: (T.avg_pool2d(x, (2, 2)) * 2.0).sum(), [x])
    check_grads(lambda: (T.upsample_nearest(x, 2) * 0.5).sum(), [x])
    check_grads(lambda: T.roll2d(x, 1, -1).sum(axis=(1, 2)).sum(), [x])
    check_grads(lambda: (T.reflect_pad2d(x, (1, 2, 2, 1)) * 1.1).sum(), [x])
    check_grads(lambda: T.crop2d(x, 1, 1, 2, 2).sum(), [x])


def test_grad_index_select_repeats():
    r = np.random.default_rng(4)
    x = leaf(r, 3, 5)
    idx = np.array([0, 2, 2, 4, 1, 0])
    check_grads(lambda: (T.index_select(x, idx) * 1.5).sum(), [x])


def test_grad_flows_through_straight_through():
    r = np.random.default_rng(5)
    soft = leaf(r, 4)
    hard = np.array([1.0, 0.0, 1.0, 0.0])
    w = leaf(r, 4)

    loss = (T.straight_through(hard, T.softmax(soft, 0)) * w).sum()
    loss.backward()
    # forward used hard values
    assert loss.item() == pytest.approx(float((hard * w.data).sum()))
    # backward routed through the soft surrogate
    assert soft.grad is not None and np.abs(soft.grad).sum() > 0


# -- LTNS format ----------------------------------------------------------------


def test_ltns_round_trip_f64(tmp_path):
    x = rng.standard_normal((3, 4, 2))
    p = tmp_path / "x.ltns"
    T.save_ltns(p, Tensor(x))
    back = T.load_ltns(p)
    assert back.dtype == np.float64
    assert np.array_equal(back, x)


def test_ltns_round_trip_f32(tmp_path):
    x = rng.standard_normal((5,)).astype(np.float32)
    p = tmp_path / "x.ltns"
    T.save_ltns(p, x)
    back = T.load_ltns(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, x)


def test_ltns_header_layout(tmp_path):
    p = tmp_path / "x.ltns"
    T.save_ltns(p, np.zeros((2, 3), dtype=np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"LTNS"
    assert raw[4:8] == (1).to_bytes(4, "little")  # version
    assert raw[8:12] == (2).to_bytes(4, "little")  # rank
    assert raw[12:16] == (2).to_bytes(4, "little")
    assert raw[16:20] == (3).to_bytes(4, "little")
    assert raw[20:24] == (1).to_bytes(4, "little")  # f32 tag
    assert len(raw) == 24 + 6 * 4


def test_ltns_truncation_reports_offset(tmp_path):
    p = tmp_path / "x.ltns"
    T.save_ltns(p, np.zeros((4, 4)))
    blob = p.read_bytes()
    q = tmp_path / "cut.ltns"
    q.write_bytes(blob[:30])
    with pytest.raises(ValueError, match="byte offset"):
        T.load_ltns(q)


def test_ltns_bad_magic(tmp_path):
    q = tmp_path / "bad.ltns"
    q.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError, match="magic"):
        T.load_ltns(q)
