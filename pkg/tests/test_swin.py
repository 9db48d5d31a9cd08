import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgdiff import tensor as T
from sgdiff.swin import (TAU_MIN, PatchExpand, PatchMerge, SwinBlock, WindowAttention, WindowConfig,
                         attention_weights, cosine_attention, depth_to_space, relative_position_index,
                         shift_mask, space_to_depth, swin_block, window_partition, window_reverse)
from sgdiff.tensor import Tensor


@settings(max_examples=40)
@given(st.sampled_from([(4, 4, 2), (8, 8, 4), (4, 8, 2), (6, 6, 3)]), st.integers(0, 3), st.integers(1, 3))
def test_window_round_trip_is_bit_exact(geom, shift, batch):
    H, W, w = geom
    shift = shift % w
    x = np.random.default_rng(shift).standard_normal((batch, H, W, 5)).astype(np.float32)
    win = window_partition(Tensor(x), w, shift)
    assert win.shape == (batch * (H // w) * (W // w), w * w, 5)
    back = window_reverse(win, (batch,), H, W, w, shift)
    assert np.array_equal(back.data, x)


def test_single_window_is_row_major():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    win = window_partition(Tensor(x), 4, 0)
    assert win.shape == (1, 16, 1)
    assert win.data[0, :, 0].tolist() == list(range(16))


def test_shifted_partition_matches_index_oracle():
    H = W = 4
    w, s = 2, 1
    x = np.arange(16, dtype=np.float32).reshape(1, H, W, 1)
    win = window_partition(Tensor(x), w, s).data[..., 0]
    for wi in range(H // w):
        for wj in range(W // w):
            for a in range(w):
                for b in range(w):
                    src_r, src_c = (wi * w + a + s) % H, (wj * w + b + s) % W
                    assert win[wi * (W // w) + wj, a * w + b] == x[0, src_r, src_c, 0]
    # token (0, 0) of the original grid ends up at the last slot of the last window
    assert win[-1, -1] == 0


def test_partition_rejects_indivisible_grid():
    with pytest.raises(ValueError):
        window_partition(Tensor(np.zeros((1, 5, 4, 1))), 2)


def test_shift_mask_blocks_wrapped_neighbours():
    m = shift_mask(4, 4, 2, 1)
    assert m.shape == (4, 4, 4)
    assert m[0].all()  # top-left window never wraps
    assert not m[-1].all()
    for k in range(4):
        assert np.array_equal(m[k], m[k].T) and m[k].diagonal().all()


def test_relative_position_index_range_and_clipping():
    idx = relative_position_index(4)
    assert idx.shape == (16, 16) and idx.min() == 0 and idx.max() == 48
    assert (idx.diagonal() == 24).all()
    clipped = relative_position_index(8, 4)
    assert clipped.max() <= 48


def test_single_token_attention_returns_value():
    v = Tensor(np.array([[[3.0, -1.0]]]))
    q = Tensor(np.array([[[0.5, 0.2]]]))
    out = cosine_attention(q, q, v, 0.1)
    assert np.array_equal(out.data, v.data)


def test_two_token_weights_match_formula():
    q = np.array([[1.0, 0.0], [1.0, 1.0]])
    k = np.array([[0.0, 2.0], [3.0, 0.0]])
    with T.default_dtype(np.float64):
        A = attention_weights(Tensor(q), Tensor(k), 1.0).data
    cos = np.array([[0.0, 1.0], [1 / np.sqrt(2), 1 / np.sqrt(2)]])
    ref = np.exp(cos) / np.exp(cos).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(A, ref, atol=1e-12)


@settings(max_examples=30)
@given(arrays(np.float64, (5, 4), elements=st.floats(-3, 3)), arrays(np.float64, (5, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (5, 1), elements=st.floats(0.1, 10)), st.floats(0.01, 2))
def test_attention_row_sums_and_scale_invariance(q, k, c, tau):
    q = q + 0.5
    k = k - 0.5
    bias = np.random.default_rng(0).standard_normal((5, 5))
    with T.default_dtype(np.float64):
        A = attention_weights(Tensor(q), Tensor(k), tau, Tensor(bias)).data
        Aq = attention_weights(Tensor(q * c), Tensor(k), tau, Tensor(bias)).data
        Ak = attention_weights(Tensor(q), Tensor(k * c), tau, Tensor(bias)).data
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-6)
    assert (A >= 0).all() and (A <= 1).all()
    np.testing.assert_allclose(Aq, A, atol=1e-6)
    np.testing.assert_allclose(Ak, A, atol=1e-6)


def test_tau_clamp():
    attn = WindowAttention(8, 2, 2, np.random.default_rng(0))
    attn.tau.data[:] = [-1.0, 0.5]
    attn.clamp_tau()
    assert attn.tau.data.tolist() == pytest.approx([TAU_MIN, 0.5])


@pytest.mark.parametrize("shape, cfg", [((1, 4, 4, 8), WindowConfig(2, 1)), ((2, 8, 8, 8), WindowConfig(4, 2)),
                                        ((1, 2, 2, 8), WindowConfig(4, 2)), ((1, 4, 4, 8), WindowConfig(2, full=True))])
def test_swin_block_preserves_shape(shape, cfg):
    blk = SwinBlock(8, 2, cfg, np.random.default_rng(0))
    assert swin_block(Tensor(np.random.default_rng(1).standard_normal(shape)), blk).shape == shape


def test_swin_block_residual_identity():
    blk = SwinBlock(8, 2, WindowConfig(2, 1), np.random.default_rng(0))
    for p in (blk.attn.proj.weight, blk.attn.proj.bias, blk.mlp.fc2.weight, blk.mlp.fc2.bias):
        p.data[:] = 0
    z = np.random.default_rng(1).standard_normal((1, 4, 4, 8)).astype(np.float32)
    assert np.array_equal(blk(Tensor(z)).data, z)


def test_swin_block_rejects_wrong_channels():
    blk = SwinBlock(8, 2, WindowConfig(2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 4, 4, 6))))


def test_window_config_resolution():
    assert WindowConfig(4, 2).resolve(8, 8) == (4, 2)
    assert WindowConfig(4, 2).resolve(4, 4) == (4, 0)
    assert WindowConfig(4, 2).resolve(2, 2) == (2, 0)
    assert WindowConfig(4, full=True).resolve(8, 8) == (8, 0)
    with pytest.raises(ValueError):
        WindowConfig(4, 4)


def test_patch_shapes():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((8, 8, 32)))
    merged = PatchMerge(32, rng)(x)
    assert merged.shape == (4, 4, 64)
    assert PatchExpand(64, rng)(merged).shape == (8, 8, 32)
    assert PatchExpand(64, rng)(Tensor(rng.standard_normal((4, 4, 64)))).shape == (8, 8, 32)


def test_patch_merge_constant_input_by_hand():
    with T.default_dtype(np.float64):
        m = PatchMerge(2, np.random.default_rng(0))
        m.reduce.weight.data[:] = np.eye(8, 4)
        x = np.tile(np.array([1.0, 3.0]), (1, 4, 4, 1))
        out = m(Tensor(x)).data
    # the 8-vector [1,3,1,3,...] has mean 2 and variance 1
    expected = np.array([-1.0, 1.0, -1.0, 1.0]) / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, np.broadcast_to(expected, (1, 2, 2, 4)), atol=1e-12)


def test_space_to_depth_neighbourhood_order():
    x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
    out = space_to_depth(Tensor(x)).data
    assert out[0, 0].tolist() == [0, 1, 4, 5]
    assert out[1, 1].tolist() == [10, 11, 14, 15]


def test_patch_expand_matches_per_pixel_oracle():
    rng = np.random.default_rng(0)
    with T.default_dtype(np.float64):
        m = PatchExpand(4, rng)
        x = rng.standard_normal((3, 3, 4))
        out = m(Tensor(x)).data
    y = x @ m.expand.weight.data + m.expand.bias.data   # [3, 3, 8]
    ref = np.zeros((6, 6, 2))
    for i in range(3):
        for j in range(3):
            for a in range(2):
                for b in range(2):
                    ref[2 * i + a, 2 * j + b] = y[i, j, (2 * a + b) * 2:(2 * a + b + 1) * 2]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert np.array_equal(depth_to_space(space_to_depth(Tensor(ref))).data, ref)


def test_patch_expand_zero_in_zero_out():
    m = PatchExpand(8, np.random.default_rng(0))
    assert np.array_equal(m(Tensor(np.zeros((2, 2, 8)))).data, np.zeros((4, 4, 4)))


def test_patch_ops_reject_bad_extents():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        PatchMerge(2, rng)(Tensor(np.zeros((3, 4, 2))))
    with pytest.raises(ValueError):
        PatchExpand(3, rng)
