"""Neural-net ops: hand-derived oracles, permutation round trips, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import grtn.functional as F
from grtn.errors import ConfigError, ShapeError
from grtn.gradcheck import finite_diff_check
from grtn.tensor import Tensor


# -- activations ---------------------------------------------------------------

def test_sigmoid_at_zero():
    assert F.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_leaky_relu_definition():
    out = F.leaky_relu(Tensor([-2.0, 3.0]), slope=0.1)
    np.testing.assert_allclose(out.data, [-0.2, 3.0])


def test_gelu_at_zero():
    assert F.gelu(Tensor([0.0])).data[0] == 0.0


def test_activation_dispatch_unknown_kind():
    with pytest.raises(ConfigError, match="unknown activation"):
        F.activation(Tensor([1.0]), "swish")


def test_sigmoid_strictly_inside_unit_interval():
    x = np.random.default_rng(0).normal(scale=4.0, size=1000)
    out = F.sigmoid(Tensor(x)).data
    assert out.min() > 0.0 and out.max() < 1.0


# -- softmax ---------------------------------------------------------------------

def test_softmax_equal_inputs_uniform():
    out = F.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-12)


def test_softmax_closed_form_ln2():
    out = F.softmax(Tensor([0.0, np.log(2.0)]), axis=-1)
    np.testing.assert_allclose(out.data, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(scale=30.0, size=(8, 16)))  # large logits: stability
    out = F.softmax(x, axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(8), atol=1e-6)
    assert (out.data > 0).all()


def test_softmax_shift_invariance():
    x = np.array([1000.0, 1001.0, 999.0])
    out = F.softmax(Tensor(x), axis=0)
    ref = F.softmax(Tensor(x - 1000.0), axis=0)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)
    assert np.isfinite(out.data).all()


# -- layer norm -------------------------------------------------------------------

def _ln_params(n):
    return Tensor(np.ones(n), requires_grad=True), Tensor(np.zeros(n), requires_grad=True)


def test_layer_norm_constant_input_zeros():
    g, b = _ln_params(4)
    out = F.layer_norm(Tensor(np.full((2, 4), 7.0)), g, b)
    np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-12)


def test_layer_norm_two_point_oracle():
    g, b = _ln_params(2)
    out = F.layer_norm(Tensor([[1.0, 3.0]]), g, b, eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_beta_passthrough():
    gamma = Tensor(np.zeros(3))
    beta = Tensor(np.array([1.0, 2.0, 3.0]))
    out = F.layer_norm(Tensor(np.random.default_rng(2).normal(size=(4, 3))), gamma, beta)
    np.testing.assert_allclose(out.data, np.tile([1.0, 2.0, 3.0], (4, 1)), atol=1e-12)


def test_layer_norm_normalizes_chosen_axis():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 4)) * 3.0 + 1.0
    g, b = _ln_params(5)
    out = F.layer_norm(Tensor(x), g, b, axis=1, eps=1e-12)
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-6)


# -- linear ------------------------------------------------------------------------

def test_linear_identity():
    x = np.random.default_rng(4).normal(size=(3, 4))
    out = F.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_linear_hand_product():
    out = F.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [0.0, 1.0]]),
                   Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 3.0])


def test_linear_bias_only():
    out = F.linear(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 3))),
                   Tensor([4.0, 5.0, 6.0]))
    np.testing.assert_allclose(out.data, np.tile([4.0, 5.0, 6.0], (2, 1)))


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))


# -- conv2d ------------------------------------------------------------------------

def test_conv2d_all_ones_sliding_sum():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = F.conv2d(x, w)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = F.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_conv2d_zero_group_kernels():
    x = Tensor(np.random.default_rng(6).normal(size=(1, 4, 6, 6)))
    w = np.random.default_rng(7).normal(size=(4, 2, 3, 3))
    w[2:] = 0.0
    out = F.conv2d(x, Tensor(w), stride=1, padding=1, groups=2)
    assert np.abs(out.data[:, 2:]).max() == 0.0
    assert np.abs(out.data[:, :2]).max() > 0.0


def _reference_conv(x, w, b, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    og = cout // groups
    for ni in range(n):
        for o in range(cout):
            gidx = o // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, gidx * cg:(gidx + 1) * cg,
                               i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[ni, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2), (2, 0, 4)])
def test_conv2d_matches_bruteforce(stride, padding, groups):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 7, 6))
    w = rng.normal(size=(8, 4 // groups, 3, 3))
    b = rng.normal(size=8)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                   padding=padding, groups=groups)
    ref = _reference_conv(x, w, b, stride, padding, groups)
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_grouped_conv_equals_independent_slices(groups):
    rng = np.random.default_rng(9)
    cin = 8
    x = rng.normal(size=(1, cin, 6, 6))
    w = rng.normal(size=(cin, cin // groups, 3, 3))
    b = rng.normal(size=cin)
    full = F.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1, groups=groups).data
    cg = cin // groups
    og = cin // groups
    pieces = []
    for g in range(groups):
        xs = x[:, g * cg:(g + 1) * cg]
        ws = w[g * og:(g + 1) * og]
        bs = b[g * og:(g + 1) * og]
        pieces.append(F.conv2d(Tensor(xs), Tensor(ws), Tensor(bs), padding=1).data)
    np.testing.assert_allclose(full, np.concatenate(pieces, axis=1), atol=1e-12)


def test_conv2d_groups_must_divide_channels():
    with pytest.raises(ConfigError, match="groups"):
        F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)


def test_conv2d_weight_axis_mismatch():
    with pytest.raises(ShapeError, match="axis 1"):
        F.conv2d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((2, 3, 3, 3))))


def test_conv2d_output_size_formula():
    x = Tensor(np.ones((1, 1, 64, 64)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = F.conv2d(x, w, stride=2, padding=1)
    assert out.shape == (1, 1, 32, 32)


# -- interleave / pixel shuffle ------------------------------------------------------

def test_interleave_channel_order():
    a = Tensor(np.stack([np.full((1, 2, 2), 0.0), np.full((1, 2, 2), 1.0)], axis=1)[0][None])
    b = Tensor(np.stack([np.full((1, 2, 2), 10.0), np.full((1, 2, 2), 11.0)], axis=1)[0][None])
    out = F.interleave_concat(a, b)
    assert out.shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(out.data[0, :, 0, 0], [0.0, 10.0, 1.0, 11.0])


def test_interleave_same_input_pairs():
    a = Tensor(np.random.default_rng(10).normal(size=(1, 3, 2, 2)))
    out = F.interleave_concat(a, a)
    np.testing.assert_array_equal(out.data[:, 0::2], out.data[:, 1::2])


@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4))
@settings(max_examples=20, deadline=None)
def test_interleave_deinterleave_roundtrip(c, hw):
    rng = np.random.default_rng(c * 10 + hw)
    a = rng.normal(size=(1, c, hw, hw))
    b = rng.normal(size=(1, c, hw, hw))
    out = F.interleave_concat(Tensor(a), Tensor(b))
    ra, rb = F.deinterleave(out)
    np.testing.assert_array_equal(ra.data, a)
    np.testing.assert_array_equal(rb.data, b)


def test_interleave_shape_mismatch():
    with pytest.raises(ShapeError):
        F.interleave_concat(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 3, 2, 2))))


def test_pixel_shuffle_enumerated_layout():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    out = F.pixel_shuffle(x, 2)
    np.testing.assert_array_equal(out.data, [[[[1.0, 2.0], [3.0, 4.0]]]])


def test_pixel_shuffle_r1_identity():
    x = np.random.default_rng(11).normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(F.pixel_shuffle(Tensor(x), 1).data, x)


def test_pixel_shuffle_preserves_multiset():
    x = np.random.default_rng(12).normal(size=(1, 8, 3, 5))
    out = F.pixel_shuffle(Tensor(x), 2)
    assert out.shape == (1, 2, 6, 10)
    np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))


def test_pixel_shuffle_channel_divisibility():
    with pytest.raises(ShapeError, match="divisible"):
        F.pixel_shuffle(Tensor(np.ones((1, 6, 2, 2))), 2)


# -- windows ---------------------------------------------------------------------------

def test_window_partition_counts_and_roundtrip():
    x = np.random.default_rng(13).normal(size=(1, 3, 4, 4))
    tokens, meta = F.window_partition(Tensor(x), 2)
    assert tokens.shape == (4, 4, 3)
    back = F.window_reverse(tokens, meta)
    np.testing.assert_array_equal(back.data, x)


def test_window_shift_zero_is_plain_partition():
    x = np.random.default_rng(14).normal(size=(2, 1, 8, 8))
    t0, _ = F.window_partition(Tensor(x), 4, shift=0)
    t1, _ = F.window_partition(Tensor(x), 4)
    np.testing.assert_array_equal(t0.data, t1.data)


def test_window_partition_pads_and_crops_odd_sizes():
    x = np.random.default_rng(15).normal(size=(1, 2, 5, 5))
    tokens, meta = F.window_partition(Tensor(x), 4)
    assert tokens.shape == (4, 16, 2)  # padded to 8x8 -> 4 windows
    back = F.window_reverse(tokens, meta)
    np.testing.assert_array_equal(back.data, x)


def test_window_shifted_roundtrip_bit_exact():
    x = np.random.default_rng(16).normal(size=(1, 3, 8, 8))
    tokens, meta = F.window_partition(Tensor(x), 4, shift=2)
    back = F.window_reverse(tokens, meta)
    np.testing.assert_array_equal(back.data, x)


@given(st.integers(min_value=1, max_value=3), st.sampled_from([2, 4]),
       st.integers(min_value=0, max_value=3))
@settings(max_examples=25, deadline=None)
def test_window_roundtrip_property(c, m, shift):
    rng = np.random.default_rng(c * 31 + m * 7 + shift)
    h = int(rng.integers(3, 11))
    w = int(rng.integers(3, 11))
    x = rng.normal(size=(1, c, h, w))
    tokens, meta = F.window_partition(Tensor(x), m, shift=shift)
    back = F.window_reverse(tokens, meta)
    np.testing.assert_array_equal(back.data, x)


def test_reflect_pad_matches_numpy():
    x = np.random.default_rng(17).normal(size=(1, 2, 5, 6))
    out = F.pad_reflect2d(Tensor(x), (2, 1, 0, 3))
    ref = np.pad(x, ((0, 0), (0, 0), (2, 1), (0, 3)), mode="reflect")
    np.testing.assert_array_equal(out.data, ref)


def test_reflect_pad_larger_than_input():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    out = F.pad_reflect2d(Tensor(x), (3, 3, 0, 0))
    assert out.shape == (1, 1, 8, 2)
    assert np.isfinite(out.data).all()


# -- attention primitives ----------------------------------------------------------------

def test_pairwise_distance_hand_case():
    q = Tensor(np.array([[0.0], [2.0]]))
    k = Tensor(np.array([[0.0], [2.0]]))
    d = F.pairwise_distance(q, k, eps=0.0)
    np.testing.assert_allclose(d.data, [[0.0, 2.0], [2.0, 0.0]], atol=1e-12)


def test_pairwise_distance_batched():
    rng = np.random.default_rng(18)
    q = rng.normal(size=(2, 3, 4, 5))
    k = rng.normal(size=(2, 3, 6, 5))
    d = F.pairwise_distance(Tensor(q), Tensor(k)).data
    assert d.shape == (2, 3, 4, 6)
    ref = np.linalg.norm(q[:, :, :, None] - k[:, :, None], axis=-1)
    np.testing.assert_allclose(d, ref, atol=1e-9)


def test_gather_rows_forward_and_scatter():
    table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    idx = np.array([[0, 3], [3, 3]])
    out = F.gather_rows(table, idx)
    assert out.shape == (2, 2, 2)
    out.sum().backward()
    np.testing.assert_array_equal(table.grad[:, 0], [1.0, 0.0, 0.0, 3.0])


def test_bilinear_warp_integer_flow_is_roll_with_clamp():
    rng = np.random.default_rng(19)
    x = rng.normal(size=(1, 2, 5, 5))
    flow = np.zeros((1, 2, 5, 5))
    flow[:, 1] = 1.0  # sample from one pixel to the left
    out = F.bilinear_warp(Tensor(x), flow)
    np.testing.assert_allclose(out.data[:, :, :, 1:], x[:, :, :, :-1], atol=1e-12)
    np.testing.assert_allclose(out.data[:, :, :, 0], x[:, :, :, 0], atol=1e-12)


def test_bilinear_warp_fractional_average():
    x = np.zeros((1, 1, 1, 3))
    x[0, 0, 0] = [0.0, 1.0, 2.0]
    flow = np.full((1, 2, 1, 3), 0.0)
    flow[:, 1] = 0.5
    out = F.bilinear_warp(Tensor(x), flow)
    np.testing.assert_allclose(out.data[0, 0, 0, 1], 0.5)
    np.testing.assert_allclose(out.data[0, 0, 0, 2], 1.5)


# -- gradients through every op ------------------------------------------------------------

def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


@pytest.mark.parametrize("name,builder,arrays", [
    ("leaky_relu", lambda ts: F.leaky_relu(ts[0], 0.1).sum(),
     [_rand((4, 4), 20) + 0.05]),
    ("sigmoid", lambda ts: F.sigmoid(ts[0]).sum(), [_rand((4, 4), 21)]),
    ("gelu", lambda ts: F.gelu(ts[0]).sum(), [_rand((4, 4), 22)]),
    ("softmax", lambda ts: (F.softmax(ts[0], axis=1) * Tensor(_rand((3, 5), 99))).sum(),
     [_rand((3, 5), 23)]),
    ("layer_norm", lambda ts: (F.layer_norm(ts[0], ts[1], ts[2], eps=1e-5)
                               * Tensor(_rand((3, 6), 98))).sum(),
     [_rand((3, 6), 24), _rand((6,), 25), _rand((6,), 26)]),
    ("linear", lambda ts: (F.linear(ts[0], ts[1], ts[2]) * Tensor(_rand((3, 4), 97))).sum(),
     [_rand((3, 5), 27), _rand((5, 4), 28), _rand((4,), 29)]),
    ("conv2d", lambda ts: (F.conv2d(ts[0], ts[1], ts[2], stride=2, padding=1, groups=2)
                           * Tensor(_rand((1, 4, 3, 3), 96))).sum(),
     [_rand((1, 4, 5, 5), 30), _rand((4, 2, 3, 3), 31), _rand((4,), 32)]),
    ("interleave", lambda ts: (F.interleave_concat(ts[0], ts[1])
                               * Tensor(_rand((1, 4, 2, 2), 95))).sum(),
     [_rand((1, 2, 2, 2), 33), _rand((1, 2, 2, 2), 34)]),
    ("pixel_shuffle", lambda ts: (F.pixel_shuffle(ts[0], 2)
                                  * Tensor(_rand((1, 1, 4, 4), 94))).sum(),
     [_rand((1, 4, 2, 2), 35)]),
    ("pad_reflect", lambda ts: (F.pad_reflect2d(ts[0], (1, 2, 2, 1))
                                * Tensor(_rand((1, 1, 7, 7), 93))).sum(),
     [_rand((1, 1, 4, 4), 36)]),
    ("pairwise_distance", lambda ts: (F.pairwise_distance(ts[0], ts[1])
                                      * Tensor(_rand((3, 4), 92))).sum(),
     [_rand((3, 5), 37), _rand((4, 5), 38)]),
    ("gather_rows", lambda ts: (F.gather_rows(ts[0], np.array([0, 2, 2, 1]))
                                * Tensor(_rand((4, 3), 91))).sum(),
     [_rand((3, 3), 39)]),
    ("bilinear_warp", lambda ts: (F.bilinear_warp(ts[0], _warp_flow)
                                  * Tensor(_rand((1, 2, 4, 4), 90))).sum(),
     [_rand((1, 2, 4, 4), 40)]),
])
def test_gradients_match_finite_differences(name, builder, arrays):
    err = finite_diff_check(builder, arrays)
    assert err < 1e-4, f"{name}: max relative error {err}"


_warp_flow = np.stack(
    [np.full((2, 4, 4), 0.5), np.full((2, 4, 4), -0.25)], axis=1
)[:1]


def test_window_ops_gradient():
    def builder(ts):
        tokens, meta = F.window_partition(ts[0], 4, shift=1)
        weighted = tokens * Tensor(_rand(tokens.shape, 89))
        return F.window_reverse(weighted, meta).sum()

    err = finite_diff_check(builder, [_rand((1, 2, 6, 6), 41)])
    assert err < 1e-4
