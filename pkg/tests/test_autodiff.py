import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxkit import autodiff as ad
from voxkit.autodiff import NormState, Record, ShapeError, Tensor, grad_check
from voxkit.autodiff.conv import conv3d_direct, conv3d_gemm, pad_amounts, upconv3d


def _grads(f, *tensors):
    for t in tensors:
        t.grad = None
    with Record() as rec:
        loss = f()
    rec.backward(loss)
    return [t.grad for t in tensors]


def _t(rng, shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# ---------------------------------------------------------------- tensor basics

def test_tensor_rejects_empty_dims():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 0, 3)))


def test_integer_input_becomes_float32():
    assert Tensor(np.arange(4)).dtype == np.float32


def test_no_record_means_no_graph(rng):
    x = _t(rng, (3,))
    y = ad.relu(x)
    assert not y.requires_grad


def test_backward_requires_scalar(rng):
    x = _t(rng, (2, 3))
    with Record() as rec:
        y = ad.mul(x, x)
    with pytest.raises(ad.AutodiffError):
        rec.backward(y)


def test_backward_requires_loss_on_record(rng):
    x = _t(rng, (2,))
    loss = ad.sum(ad.mul(x, x))  # built outside any record
    with Record() as rec:
        pass
    with pytest.raises(ad.AutodiffError):
        rec.backward(loss)


def test_record_is_topologically_ordered(rng):
    x, w = _t(rng, (1, 2, 4, 4, 4)), _t(rng, (3, 2, 3, 3, 3))
    with Record() as rec:
        ad.sum(ad.relu(ad.conv3d(x, w)))
    seen = {id(x), id(w)}
    for node in rec.nodes:
        assert all(id(t) in seen or not t.requires_grad for t in node.inputs)
        seen.add(id(node.output))


# ---------------------------------------------------------------- conv3d

def test_conv_same_shape():
    x = Tensor(np.zeros((1, 1, 8, 8, 8)))
    w = Tensor(np.zeros((16, 1, 3, 3, 3)))
    assert ad.conv3d(x, w, Tensor(np.zeros(16))).shape == (1, 16, 8, 8, 8)


def test_conv_identity_kernel_is_bit_exact(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 6, 7)))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    out = ad.conv3d(x, w, Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x.data)


def test_conv_all_ones_kernel_interior():
    v = 1.5
    x = Tensor(np.full((1, 1, 6, 6, 6), v))
    w = Tensor(np.ones((1, 1, 3, 3, 3)))
    out = ad.conv3d(x, w)
    assert out.data[0, 0, 2, 3, 3] == pytest.approx(27 * v)
    # a corner only sees 2x2x2 of the input under zero padding
    assert out.data[0, 0, 0, 0, 0] == pytest.approx(8 * v)


@pytest.mark.parametrize("D,k,s,pad,expected", [
    (8, 3, 1, "same", 8), (8, 3, 2, "same", 4), (7, 3, 2, "same", 4),
    (8, 3, 1, "valid", 6), (9, 3, 2, "valid", 4), (5, 1, 3, "same", 2),
])
def test_conv_output_size(D, k, s, pad, expected):
    x = Tensor(np.zeros((1, 1, D, D, D)))
    w = Tensor(np.zeros((1, 1, k, k, k)))
    assert ad.conv3d(x, w, stride=s, padding=pad).shape[2:] == (expected,) * 3


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeError):
        ad.conv3d(x, Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((1, 2, 3, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((1, 2, 2, 2, 2))), padding="same")
    with pytest.raises(ValueError):
        ad.conv3d(x, Tensor(np.zeros((1, 2, 5, 5, 5))), padding="valid")


@given(
    d=st.integers(3, 9), h=st.integers(3, 9), w=st.integers(3, 9),
    k=st.sampled_from([1, 3]), stride=st.integers(1, 3),
    padding=st.sampled_from(["same", "valid"]), seed=st.integers(0, 2**16),
)
def test_gemm_path_matches_direct_loops(d, h, w, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, d, h, w))
    wt = rng.standard_normal((4, 3, k, k, k))
    b = rng.standard_normal(4)
    pads = pad_amounts((d, h, w), k, stride, padding)
    fast = conv3d_gemm(x, wt, b, stride, pads)
    slow = conv3d_direct(x, wt, b, stride, pads)
    np.testing.assert_allclose(fast, slow, rtol=1e-10, atol=1e-10)


def test_conv_impls_agree_in_float32(rng):
    x = Tensor(rng.standard_normal((1, 4, 10, 9, 8)).astype(np.float32))
    w = Tensor(rng.standard_normal((5, 4, 3, 3, 3)).astype(np.float32))
    a = ad.conv3d(x, w, stride=2, impl="gemm").data
    b = ad.conv3d(x, w, stride=2, impl="direct").data
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


def test_conv_is_deterministic(rng):
    x, w = _t(rng, (2, 3, 9, 9, 9)), _t(rng, (4, 3, 3, 3, 3))
    assert np.array_equal(ad.conv3d(x, w).data, ad.conv3d(x, w).data)


# ---------------------------------------------------------------- transposed conv

def test_transposed_conv_shape():
    x = Tensor(np.zeros((1, 8, 4, 4, 4)))
    w = Tensor(np.zeros((8, 4, 2, 2, 2)))
    assert ad.transposed_conv3d(x, w, stride=2).shape == (1, 4, 8, 8, 8)


def test_transposed_conv_block_replication():
    x = Tensor(np.full((1, 1, 3, 3, 3), 2.5))
    w = Tensor(np.ones((1, 1, 2, 2, 2)))
    out = ad.transposed_conv3d(x, w, stride=2).data
    assert np.all(out == 2.5)


def test_transposed_conv_scatter_oracle(rng):
    x = rng.standard_normal((1, 2, 2, 3, 2))
    w = rng.standard_normal((2, 3, 2, 2, 2))
    out = upconv3d(x, w, None, 2)
    expected = np.zeros((1, 3, 4, 6, 4))
    for c in range(2):
        for i, j, l in np.ndindex(2, 3, 2):
            expected[0, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * l:2 * l + 2] += x[0, c, i, j, l] * w[c]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_transposed_conv_kernel_must_equal_stride():
    x = Tensor(np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(ValueError):
        ad.transposed_conv3d(x, Tensor(np.zeros((1, 1, 3, 3, 3))), stride=2)


def test_down_then_up_restores_shape(rng):
    x = Tensor(rng.standard_normal((1, 2, 8, 6, 10)))
    down = ad.conv3d(x, Tensor(rng.standard_normal((4, 2, 3, 3, 3))), stride=2)
    up = ad.transposed_conv3d(down, Tensor(rng.standard_normal((4, 2, 2, 2, 2))), stride=2)
    assert up.shape == x.shape


# ---------------------------------------------------------------- relu / bn / softmax

def test_relu_values_and_subgradient():
    x = Tensor(np.array([-1.0, 2.0, 3.0, -3.0, 0.0]), requires_grad=True)
    assert list(ad.relu(x).data) == [0, 2, 3, 0, 0]
    (g,) = _grads(lambda: ad.sum(ad.relu(x)), x)
    assert list(g) == [0, 1, 1, 0, 0]


def _bn_inputs(x, C):
    return Tensor(np.ones(C)), Tensor(np.zeros(C)), NormState(Tensor(np.zeros(C)), Tensor(np.ones(C)))


def test_batch_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 3, 4, 4, 4), 7.0))
    g, b, s = _bn_inputs(x, 3)
    assert np.all(ad.batch_norm(x, g, b, s, training=True).data == 0)


def test_batch_norm_train_moments(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 4, 6)) * 3 + 2)
    g, b, s = _bn_inputs(x, 3)
    y = ad.batch_norm(x, g, b, s, training=True).data
    axes = (0, 2, 3, 4)
    assert np.abs(y.mean(axis=axes)).max() < 1e-6
    assert np.abs(y.var(axis=axes) - 1).max() < 1e-4


def test_batch_norm_updates_moving_state(rng):
    x = Tensor(rng.standard_normal((2, 2, 3, 3, 3)) + 5)
    g, b, s = _bn_inputs(x, 2)
    ad.batch_norm(x, g, b, s, training=True)
    batch_mean = x.data.mean(axis=(0, 2, 3, 4))
    batch_var = x.data.var(axis=(0, 2, 3, 4))
    np.testing.assert_allclose(s.mean.data, 0.1 * batch_mean, rtol=1e-12)
    np.testing.assert_allclose(s.var.data, 0.9 + 0.1 * batch_var, rtol=1e-12)


def test_batch_norm_infer_identity_stats(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
    g, b = Tensor(np.full(2, 2.0)), Tensor(np.ones(2))
    s = NormState(Tensor(np.zeros(2)), Tensor(np.ones(2)))
    y = ad.batch_norm(x, g, b, s, training=False).data
    np.testing.assert_allclose(y, 2 * x.data + 1, rtol=1e-5, atol=1e-5)


def test_batch_norm_channel_mismatch():
    x = Tensor(np.zeros((1, 3, 2, 2, 2)))
    g, b, s = _bn_inputs(x, 2)
    with pytest.raises(ShapeError):
        ad.batch_norm(x, g, b, s, training=True)


def test_softmax_uniform_and_analytic():
    p = ad.softmax_channels(Tensor(np.zeros((1, 14, 2, 2, 2)))).data
    np.testing.assert_allclose(p, 1 / 14)
    z = np.zeros((1, 2, 1, 1, 1))
    z[0, 1] = np.log(3)
    p = ad.softmax_channels(Tensor(z)).data.reshape(2)
    np.testing.assert_allclose(p, [0.25, 0.75], rtol=1e-12)


@given(seed=st.integers(0, 2**16), shift=st.floats(-50, 50))
def test_softmax_normalized_and_shift_invariant(seed, shift):
    z = np.random.default_rng(seed).standard_normal((2, 5, 3, 3, 3)) * 10
    p = ad.softmax_channels(Tensor(z)).data
    q = ad.softmax_channels(Tensor(z + shift)).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
    assert np.abs(p - q).max() < 1e-6
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_large_logits_are_stable():
    z = np.zeros((1, 2, 1, 1, 1))
    z[0, 0] = 1000.0
    p = ad.softmax_channels(Tensor(z)).data
    assert np.all(np.isfinite(p)) and p[0, 0, 0, 0, 0] == pytest.approx(1.0)


# ---------------------------------------------------------------- concat / elementwise / reduce

def test_concat_shape_order_and_grad(rng):
    a, b = _t(rng, (1, 16, 8, 8, 8)), _t(rng, (1, 32, 8, 8, 8))
    out = ad.concat_channels(a, b)
    assert out.shape == (1, 48, 8, 8, 8)
    assert np.array_equal(out.data[:, :16], a.data)
    ga, gb = _grads(lambda: ad.sum(ad.concat_channels(a, b)), a, b)
    assert np.all(ga == 1) and np.all(gb == 1)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_channels(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 4, 4, 2))))


def test_elementwise_identities(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)))
    assert np.array_equal(ad.add(x, 0).data, x.data)
    assert np.array_equal(ad.mul(x, 1).data, x.data)
    assert np.array_equal(ad.elementwise("add", x, x).data, 2 * x.data)


def test_elementwise_rejects_broadcasting():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3,))))


def test_mul_grad_is_other_operand(rng):
    a, b = _t(rng, (3, 4)), _t(rng, (3, 4))
    ga, gb = _grads(lambda: ad.sum(ad.mul(a, b)), a, b)
    assert np.array_equal(ga, b.data) and np.array_equal(gb, a.data)


def test_reduce_examples():
    ones = Tensor(np.ones((2, 2, 2)))
    assert ad.sum(ones).data.item() == 8
    assert ad.mean(ones).data.item() == 1
    assert ad.reduce(Tensor(np.ones((1, 3, 4, 4, 4))), "sum", 1).shape == (1, 4, 4, 4)
    with pytest.raises(ValueError):
        ad.reduce(ones, "sum", 3)


# ---------------------------------------------------------------- backward

def test_bilinear_grad(rng):
    x, w = Tensor(rng.standard_normal((4, 5))), _t(rng, (4, 5))
    (g,) = _grads(lambda: ad.sum(ad.mul(x, w)), w)
    assert np.array_equal(g, x.data)


def test_relu_example_grad():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    (g,) = _grads(lambda: ad.sum(ad.relu(x)), x)
    assert list(g) == [0.0, 1.0]


def test_fan_out_sums_branch_gradients(rng):
    x = _t(rng, (3, 3))
    (g,) = _grads(lambda: ad.sum(ad.add(ad.mul(x, x), ad.mul(x, 3.0))), x)
    np.testing.assert_allclose(g, 2 * x.data + 3, rtol=1e-12)


def test_leaf_grads_accumulate_across_backward_calls(rng):
    x = _t(rng, (4,))
    for _ in range(2):
        with Record() as rec:
            loss = ad.sum(ad.mul(x, 2.0))
        rec.backward(loss)
    assert np.all(x.grad == 4.0)


def test_two_layer_conv_net_fd(rng):
    x = Tensor(rng.standard_normal((2, 2, 6, 6, 6)))
    w1, b1 = _t(rng, (3, 2, 3, 3, 3)), _t(rng, (3,))
    w2, b2 = _t(rng, (2, 3, 3, 3, 3)), _t(rng, (2,))
    r = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))

    def f():
        h = ad.conv3d(x, w1, b1)
        return ad.sum(ad.mul(ad.conv3d(h, w2, b2, stride=2), r))

    report = grad_check(f, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
    assert all(item.max_rel_error < 1e-5 for item in report.values())


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic_is_exact(rng):
    p = _t(rng, (5, 4))
    report = grad_check(lambda: ad.sum(ad.mul(p, p)), {"p": p}, h=1e-4, tol=1e-8)
    assert report["p"].passed and report["p"].max_rel_error < 1e-8


def test_grad_check_catches_corrupted_gradient(rng):
    p = _t(rng, (5,))
    report = grad_check(lambda: ad.sum(ad.mul(p, p)), {"p": p}, tol=1e-3,
                        analytic_hook=lambda name, g: g * 1.01)
    assert not report["p"].passed


def test_grad_check_rejects_nonfinite():
    p = Tensor(np.array([np.inf, 1.0]), requires_grad=True)
    with pytest.raises(ad.NonFiniteError):
        grad_check(lambda: ad.sum(ad.mul(p, p)), {"p": p})


def test_grad_check_skips_straddled_hinges():
    # the probe at 0 crosses the hinge: excluded, not reported as a failure
    p = Tensor(np.array([0.0, 1.0, -2.0]), requires_grad=True)
    report = grad_check(lambda: ad.sum(ad.relu(p)), {"p": p}, skip_kinks=True)
    assert report["p"].skipped == 1 and report["p"].passed


@pytest.mark.parametrize("name, build", [
    ("conv_same_s2", lambda r: (lambda x, w, b: ad.conv3d(x, w, b, stride=2),
                                [(2, 4, 6, 6, 6), (3, 4, 3, 3, 3), (3,)])),
    ("conv_valid", lambda r: (lambda x, w, b: ad.conv3d(x, w, b, padding="valid"),
                              [(2, 2, 6, 5, 4), (2, 2, 3, 3, 3), (2,)])),
    ("upconv", lambda r: (lambda x, w, b: ad.transposed_conv3d(x, w, b, 2),
                          [(2, 4, 3, 3, 3), (4, 2, 2, 2, 2), (2,)])),
    ("softmax", lambda r: (lambda x: ad.softmax_channels(x), [(2, 4, 3, 3, 3)])),
    ("mean", lambda r: (lambda x: ad.mean(x, (0, 2)), [(2, 4, 6, 6, 6)])),
])
def test_ops_pass_grad_check_64bit(name, build, rng):
    op, shapes = build(rng)
    args = [_t(rng, s) for s in shapes]
    weights = Tensor(rng.standard_normal(op(*args).shape))
    report = grad_check(lambda: ad.sum(ad.mul(op(*args), weights)),
                        {f"a{i}": a for i, a in enumerate(args)})
    assert max(it.max_rel_error for it in report.values()) < 1e-5


def test_conv_grad_check_32bit(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5, 5)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32), requires_grad=True)
    r = Tensor(rng.standard_normal((1, 2, 5, 5, 5)).astype(np.float32))
    report = grad_check(lambda: ad.sum(ad.mul(ad.conv3d(x, w), r)), {"x": x, "w": w}, h=1e-2, tol=1e-3)
    assert all(item.passed for item in report.values())
