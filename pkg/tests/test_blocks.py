import numpy as np
import pytest

from panomtl.blocks import LocalFFN, PanoAttention, PanoBlock, local_ffn, pano_attention, pano_block
from panomtl.checks import block_suite, set_flow_state
from panomtl.geometry import StageShape, build_sampling_grid
from panomtl.tensor import Tensor, gelu

GRID = build_sampling_grid(StageShape(8, 16), 3)


def feat(rng, B=1, C=4, H=8, W=16):
    return Tensor(rng.standard_normal((B, C, H, W)), dtype=np.float64)


def attn64(C=4, heads=2, seed=1):
    return PanoAttention(C, heads=heads, k=9, rng=np.random.default_rng(seed)).to_dtype(np.float64)


def test_flow_head_starts_at_zero_and_samples_the_grid():
    attn = attn64()
    assert not attn.flow_w.data.any() and not attn.flow_b.data.any()
    f = feat(np.random.default_rng(0))
    u, v = attn.sampling_coords(f, GRID)
    np.testing.assert_array_equal(u.data[0, 0], GRID.u.T)
    np.testing.assert_array_equal(v.data[0, 1], GRID.v.T)


def test_attention_weights_are_a_distribution():
    attn = attn64()
    attn.attn_w.data = np.random.default_rng(5).standard_normal(attn.attn_w.shape) * 3
    A = attn.attention_weights(feat(np.random.default_rng(0), B=2)).data
    assert A.min() >= 0
    np.testing.assert_allclose(A.sum(axis=2), 1.0, atol=1e-6)


def test_constant_feature_gives_constant_output():
    attn = attn64()
    c = np.arange(1.0, 5.0)
    f = Tensor(np.broadcast_to(c[None, :, None, None], (1, 4, 8, 16)).copy())
    out = pano_attention(f, GRID, attn).data
    Wv, bv = attn.value_w.data[:, :, 0, 0], attn.value_b.data
    Wo, bo = attn.out_w.data[:, :, 0, 0], attn.out_b.data
    expected = c + Wo @ (Wv @ c + bv) + bo
    np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape), atol=1e-12)


def test_single_head_identity_uniform_is_neighbourhood_mean():
    rng = np.random.default_rng(2)
    C, H, W = 3, 8, 16
    attn = PanoAttention(C, heads=1, k=9, rng=rng).to_dtype(np.float64)
    eye = np.eye(C)[:, :, None, None]
    attn.value_w.data, attn.out_w.data = eye.copy(), eye.copy()
    attn.attn_w.data[:] = 0.0
    f = rng.standard_normal((1, C, H, W))
    out = pano_attention(Tensor(f), GRID, attn).data

    def bilinear(img, u, v):
        v = min(max(v, 0.0), H - 1.0)
        x0, y0 = int(np.floor(u)), int(np.floor(v))
        fx, fy = u - x0, v - y0
        y1 = min(y0 + 1, H - 1)
        val = 0.0
        for yy, wy in ((y0, 1 - fy), (y1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                val = val + wy * wx * img[:, yy, xx % W]
        return val

    ref = np.empty_like(f)
    for q in range(H * W):
        i, j = divmod(q, W)
        samples = [bilinear(f[0], GRID.u[q, s], GRID.v[q, s]) for s in range(9)]
        ref[0, :, i, j] = f[0, :, i, j] + np.mean(samples, axis=0)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_attention_rejects_mismatched_grid():
    attn = attn64()
    with pytest.raises(ValueError):
        attn.delta(feat(np.random.default_rng(0), H=4, W=8), GRID)
    with pytest.raises(ValueError):
        PanoAttention(5, heads=2)


def test_ffn_zero_input_zero_bias_is_identity():
    ffn = LocalFFN(4, 2, rng=np.random.default_rng(0))
    x = Tensor(np.zeros((1, 4, 8, 16)))
    np.testing.assert_array_equal(local_ffn(x, ffn).data, 0.0)


def test_ffn_identity_configuration_matches_oracle():
    C = 3
    ffn = LocalFFN(C, ratio=1, rng=np.random.default_rng(0)).to_dtype(np.float64)
    ffn.pw1_w.data = np.eye(C)[:, :, None, None]
    ffn.pw2_w.data = np.eye(C)[:, :, None, None]
    k = np.zeros((C, 3, 3))
    k[:, 1, 1] = 1.0
    ffn.dw_w.data = k
    x = np.random.default_rng(1).standard_normal((2, C, 4, 8))
    from math import erf, sqrt
    g = np.vectorize(lambda t: t * 0.5 * (1 + erf(t / sqrt(2))))(x)
    np.testing.assert_allclose(local_ffn(Tensor(x), ffn).data, x + g, atol=1e-12)
    np.testing.assert_allclose(gelu(Tensor(x)).data, g, atol=1e-15)


@pytest.mark.parametrize("H", [64, 32, 16, 8])
def test_block_preserves_shape(H):
    grid = build_sampling_grid(StageShape(H, 2 * H), 3)
    block = PanoBlock(4, 2, 9, 2, rng=np.random.default_rng(0))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, H, 2 * H)).astype(np.float32))
    assert pano_block(x, grid, block).shape == x.shape


def random_block(seed=0, C=4):
    block = PanoBlock(C, 2, 9, 2, rng=np.random.default_rng(seed)).to_dtype(np.float64)
    set_flow_state(block, np.random.default_rng(seed + 100), scale=0.3)
    return block


def test_block_batch_permutation_equivariance():
    block = random_block()
    x = np.random.default_rng(1).standard_normal((3, 4, 8, 16))
    perm = [2, 0, 1]
    a = block(Tensor(x), GRID).data[perm]
    b = block(Tensor(x[perm]), GRID).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_block_is_deterministic():
    x = np.random.default_rng(2).standard_normal((1, 4, 8, 16))
    a = random_block(3)(Tensor(x), GRID).data
    b = random_block(3)(Tensor(x), GRID).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("shift", [1, 3, 8])
def test_block_longitude_roll_equivariance(shift):
    block = random_block(4)
    x = np.random.default_rng(3).standard_normal((1, 4, 8, 16))
    a = np.roll(block(Tensor(x), GRID).data, shift, axis=3)
    b = block(Tensor(np.roll(x, shift, axis=3)), GRID).data
    assert np.abs(a - b).max() < 1e-5


def test_block_suite_gradchecks():
    results = dict(block_suite(0))
    assert {"pano_attention", "local_ffn", "pano_block", "fusion", "shared_embed"} <= results.keys()
    for name, rep in results.items():
        assert rep.passed, (name, rep.max_rel_error)
