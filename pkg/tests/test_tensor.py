import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvkd import functional as F
from mvkd.errors import (
    InvalidAxis,
    InvalidBackward,
    InvalidParameter,
    InvalidShape,
    PatchMismatch,
    ShapeMismatch,
)
from mvkd.gradcheck import check_gradients
from mvkd.tensor import Rng, Tensor, concat, create, matmul, no_grad, reduce, tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- creation ---------------------------------------------------------------


def test_create_zeros():
    assert create([2, 2], "zeros").data.tolist() == [[0, 0], [0, 0]]


def test_create_constant():
    np.testing.assert_array_equal(create([3], "constant", value=2.5).data, [2.5, 2.5, 2.5])


def test_create_uniform_same_seed_bit_identical():
    a = create([4], "uniform", low=0, high=1, rng=Rng(7))
    b = create([4], "uniform", low=0, high=1, rng=Rng(7))
    assert a.data.tobytes() == b.data.tobytes()
    assert ((a.data >= 0) & (a.data < 1)).all()


def test_create_rejects_bad_extent_and_params():
    with pytest.raises(InvalidShape):
        create([2, 0])
    with pytest.raises(InvalidShape):
        create([-1])
    with pytest.raises(InvalidParameter):
        create([2], "uniform", low=1, high=1, rng=Rng(0))
    with pytest.raises(InvalidParameter):
        create([2], "normal", std=-1.0, rng=Rng(0))


def test_trunc_normal_within_two_sigma():
    x = create([2000], "trunc_normal", std=0.02, rng=Rng(3)).data
    assert np.abs(x).max() <= 0.04 + 1e-7


def test_rng_streams_are_independent_and_stable():
    r = Rng(11)
    a = r.stream("shuffle", 0).integers(0, 1 << 30, 5)
    # drawing from another stream first must not shift this one
    r.stream("init").standard_normal(100)
    b = r.stream("shuffle", 0).integers(0, 1 << 30, 5)
    np.testing.assert_array_equal(a, b)
    c = r.stream("shuffle", 1).integers(0, 1 << 30, 5)
    assert not np.array_equal(a, c)


def test_rng_frozen_values():
    # PCG64 stream output pinned so cross-platform drift is caught
    assert Rng(0).stream("init").integers(0, 1000, 4).tolist() == [522, 889, 992, 557]
    assert Rng(0).stream("custom").integers(0, 1000, 4).tolist() == [848, 664, 144, 327]
    assert Rng(1).stream("init").integers(0, 1000, 4).tolist() != [522, 889, 992, 557]


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    a = tensor([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(matmul(tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_case():
    out = matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_grad_is_column_sums_of_b():
    a = t64(np.random.default_rng(0).normal(size=(3, 4)))
    b = t64(np.random.default_rng(1).normal(size=(4, 5)), grad=False)
    matmul(a, b).sum().backward()
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeMismatch):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_matmul_batched_broadcast():
    a = t64(np.random.default_rng(2).normal(size=(2, 3, 4)))
    b = t64(np.random.default_rng(3).normal(size=(4, 2)))
    err = check_gradients(lambda: (matmul(a, b) ** 2).sum(), [a, b])
    assert err < 1e-6


# -- conv2d -------------------------------------------------------------------


def test_conv_identity_kernel():
    x = tensor(np.random.default_rng(0).normal(size=(2, 1, 5, 5)))
    w = tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(F.conv2d(x, w, tensor(np.zeros(1))).data, x.data)


def test_conv_constant_input_ones_kernel():
    x = tensor(np.full((1, 1, 6, 6), 0.7))
    out = F.conv2d(x, tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, 9 * 0.7, rtol=1e-6)


def test_conv_single_window_is_dot_product():
    g = np.random.default_rng(5)
    x, w = g.normal(size=(1, 1, 2, 2)), g.normal(size=(1, 1, 2, 2))
    out = F.conv2d(tensor(x), tensor(w))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == pytest.approx(float((x * w).sum()), rel=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
def test_conv_output_size(stride, padding):
    x = tensor(np.zeros((1, 2, 9, 7)))
    out = F.conv2d(x, tensor(np.zeros((4, 2, 3, 3))), stride=stride, padding=padding)
    assert out.shape[2:] == ((9 + 2 * padding - 3) // stride + 1, (7 + 2 * padding - 3) // stride + 1)


def test_conv_matches_direct_loop():
    g = np.random.default_rng(9)
    x, w, b = g.normal(size=(2, 4, 6, 6)), g.normal(size=(6, 2, 3, 3)), g.normal(size=6)
    out = F.conv2d(tensor(x), tensor(w), tensor(b), stride=2, padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(6):
            grp = o // 3
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, grp * 2 : grp * 2 + 2, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_conv_group_mismatch():
    with pytest.raises(ShapeMismatch):
        F.conv2d(tensor(np.zeros((1, 3, 4, 4))), tensor(np.zeros((4, 1, 3, 3))), groups=2)
    with pytest.raises(ShapeMismatch):
        F.conv2d(tensor(np.zeros((1, 4, 2, 2))), tensor(np.zeros((4, 4, 3, 3))))


# -- softmax / layer norm / activations ---------------------------------------


def test_softmax_symmetric():
    np.testing.assert_allclose(F.softmax(tensor([1.0, 1.0])).data, [0.5, 0.5])


def test_softmax_temperature_hand_value():
    np.testing.assert_allclose(F.softmax(tensor([2.0, 0.0]), temperature=2.0).data, [0.73106, 0.26894], atol=1e-5)


def test_softmax_rejects_nonpositive_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(InvalidParameter):
            F.softmax(tensor([1.0, 2.0]), temperature=t)
        with pytest.raises(InvalidParameter):
            F.log_softmax(tensor([1.0, 2.0]), temperature=t)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=8),
    st.sampled_from([0.5, 1.0, 2.0, 10.0]),
)
def test_softmax_properties(z, temp):
    s = F.softmax(tensor(np.array(z, dtype=np.float64)), temperature=temp).data
    assert (s >= 0).all() and abs(s.sum() - 1) < 1e-6
    assert np.argmax(s) == np.argmax(z) or np.isclose(s.max(), s[np.argmax(z)])


def test_softmax_stable_for_large_logits():
    s = F.softmax(tensor([1000.0, 999.0, -1000.0], dtype=np.float64)).data
    assert np.isfinite(s).all() and abs(s.sum() - 1) < 1e-12
    np.testing.assert_allclose(F.log_softmax(tensor([1e4, 0.0], dtype=np.float64)).data, [0.0, -1e4])


def test_layer_norm_hand_value():
    out = F.layer_norm(tensor([1.0, 2.0, 3.0], dtype=np.float64), tensor(np.ones(3)), tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [-1.22474, 0.0, 1.22474], atol=1e-5)


def test_layer_norm_constant_vector_and_affine():
    out = F.layer_norm(tensor(np.full(4, 3.0)), tensor(np.ones(4)), tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)
    out = F.layer_norm(tensor([1.0, 5.0, -2.0]), tensor(np.zeros(3)), tensor(np.full(3, 5.0)))
    np.testing.assert_array_equal(out.data, 5.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 16))
def test_layer_norm_moments(seed, d):
    x = np.random.default_rng(seed).normal(3.0, 4.0, size=(5, d))
    out = F.layer_norm(tensor(x, dtype=np.float64), tensor(np.ones(d)), tensor(np.zeros(d)), eps=1e-5).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-10)
    v = x.var(axis=-1)
    np.testing.assert_allclose(out.var(axis=-1), v / (v + 1e-5), rtol=1e-9)


def test_activation_values():
    np.testing.assert_array_equal(F.relu(tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert F.silu(tensor([0.0])).data.item() == 0.0
    # erf form is the default; 0.84119 is what the tanh fit gives at 1
    assert F.gelu(tensor([1.0], dtype=np.float64)).data.item() == pytest.approx(0.8413447, abs=1e-7)
    assert F.gelu(tensor([1.0], dtype=np.float64), approximate="tanh").data.item() == pytest.approx(0.84119, abs=1e-5)
    with pytest.raises(InvalidParameter):
        F.activation(tensor([1.0]), "tanh")


# -- patches and reductions -------------------------------------------------


def test_unfold_ramp_hand_layout():
    x = tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    p = F.unfold_patches(x, 2).data[0, :, :, 0]
    np.testing.assert_array_equal(p, [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]])


def test_unfold_single_patch():
    x = tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
    p = F.unfold_patches(x, 4)
    assert p.shape == (2, 1, 16, 3)
    np.testing.assert_array_equal(p.data[0, 0, :, 1], x.data[0, 1].reshape(-1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_fold_unfold_roundtrip_exact(b, c, nh, nw, p):
    x = np.random.default_rng(b * 100 + c).normal(size=(b, c, nh * p, nw * p)).astype(np.float32)
    back = F.fold_patches(F.unfold_patches(tensor(x), p), p, nh * p, nw * p).data
    assert back.tobytes() == x.tobytes()


def test_patch_mismatch():
    with pytest.raises(PatchMismatch):
        F.unfold_patches(tensor(np.zeros((1, 1, 5, 4))), 2)
    with pytest.raises(PatchMismatch):
        F.fold_patches(tensor(np.zeros((1, 4, 4, 1))), 2, 6, 4)


def test_reductions():
    assert reduce(tensor([1.0, 2.0, 3.0]), "mean").data.item() == 2.0
    c = tensor(np.full((2, 3, 4, 5), 1.75))
    np.testing.assert_array_equal(F.global_avg_pool(c).data, np.full((2, 3), 1.75))
    x = tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5)), dtype=np.float64)
    s = reduce(x, "sum", (2, 3)).data
    np.testing.assert_allclose(s, 20 * reduce(x, "mean", (2, 3)).data, rtol=1e-12)
    with pytest.raises(InvalidAxis):
        reduce(x, "sum", 4)


def test_max_grad_goes_to_first_maximum():
    x = t64([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]])
    reduce(x, "max", 1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


# -- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.zeros((2, 3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = t64([1.0, -2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_accumulates_until_cleared():
    x = t64([1.0, 2.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    with pytest.raises(InvalidBackward):
        (t64([1.0, 2.0]) * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = t64([1.0, 2.0])
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_shared_subexpression_gradient():
    x = t64([0.5, -1.5])
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


def test_concat_and_getitem_grads():
    a, b = t64(np.ones((2, 2))), t64(np.ones((2, 3)))
    (concat([a, b], axis=1)[:, 1:4] * 2.0).sum().backward()
    np.testing.assert_array_equal(a.grad, [[0, 2], [0, 2]])
    np.testing.assert_array_equal(b.grad, [[2, 2, 0], [2, 2, 0]])
