import numpy as np
import pytest
from hypothesis import given, strategies as st

from twohand import numcore as nc
from twohand.attention import (AttentionConfig, AttentionParams, PatchEmbedder, cha_merge, cross_attention,
                               cross_hand_stage, embed_patches, init_attention, init_patch_embedder,
                               init_pointwise_mlp, mhsa, patchify, pifa, pointwise_mlp)
from twohand.errors import ConfigError, ShapeError
from twohand.oracle import dense_attention, dense_mhsa, relative_error


def params(rng, dim, scale=1.0):
    mats = [scale * rng.standard_normal((dim, dim)) for _ in range(4)]
    return AttentionParams(*(nc.Parameter(m, n) for m, n in zip(mats, "qkvo"))), mats


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        AttentionConfig(3, 8)
    assert AttentionConfig(4, 64).head_dim == 16


def test_single_token_attends_to_itself(rng):
    p, mats = params(rng, 4)
    x = rng.standard_normal((1, 4))
    res = mhsa(x, p, AttentionConfig(2, 4))
    np.testing.assert_allclose(res.out.value, x @ mats[2] @ mats[3], atol=1e-12)
    np.testing.assert_allclose(res.weights, [[1.0]])


def test_equal_value_rows_give_equal_outputs(rng):
    cfg = AttentionConfig(2, 4)
    q, k = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    v = np.tile(rng.standard_normal(4), (3, 1))
    out, _ = cross_attention(q, k, v, cfg)
    np.testing.assert_allclose(out.value, np.tile(v[0], (5, 1)), atol=1e-12)


def test_mhsa_matches_dense_oracle_single_head(rng):
    p, mats = params(rng, 6)
    x = rng.standard_normal((5, 6))
    assert relative_error(mhsa(x, p, AttentionConfig(1, 6)).out.value, dense_mhsa(x, *mats, 1)) < 1e-10


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_cross_attention_matches_dense_oracle(heads, d, nq, nk, seed):
    rng = np.random.default_rng(seed)
    dim = heads * d
    q, k, v = (rng.standard_normal((n, dim)) for n in (nq, nk, nk))
    out, w = cross_attention(q, k, v, AttentionConfig(heads, dim))
    assert relative_error(out.value, dense_attention(q, k, v, heads)) < 1e-10
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


def test_identical_keys_give_uniform_attention(rng):
    q = rng.standard_normal((3, 4))
    k = np.tile(rng.standard_normal(4), (5, 1))
    v = rng.standard_normal((5, 4))
    out, w = cross_attention(q, k, v, AttentionConfig(1, 4))
    np.testing.assert_allclose(w, 0.2, atol=1e-12)
    np.testing.assert_allclose(out.value, np.tile(v.mean(0), (3, 1)), atol=1e-12)


def test_cross_attention_output_in_convex_hull_of_values(rng):
    q, k, v = rng.standard_normal((4, 3)), rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    out, _ = cross_attention(q, k, v, AttentionConfig(1, 3))
    assert np.all(out.value <= v.max(0) + 1e-12) and np.all(out.value >= v.min(0) - 1e-12)


def test_weights_invariant_to_constant_score_shift(rng):
    # adding one vector to every key shifts each query's scores by a constant
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    _, w = cross_attention(q, k, v, AttentionConfig(1, 4))
    _, w2 = cross_attention(q, k + rng.standard_normal(4), v, AttentionConfig(1, 4))
    np.testing.assert_allclose(w, w2, atol=1e-12)


def test_cross_hand_stage_is_symmetric_under_hand_swap(rng):
    cfg = AttentionConfig(2, 4)
    store = nc.ParamStore()
    p = init_attention(store, "cha", 4, rng)
    mlp = init_pointwise_mlp(store, "mlp", 4, rng)
    fl, fr = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
    a = cross_hand_stage(fl, fr, p, mlp, cfg)
    b = cross_hand_stage(fr, fl, p, mlp, cfg)
    np.testing.assert_allclose(a.left.value, b.right.value, atol=1e-14)
    np.testing.assert_allclose(a.right_to_left, b.left_to_right, atol=1e-14)


def test_identity_merge_with_zero_cross_returns_input(rng):
    store = nc.ParamStore()
    mlp = init_pointwise_mlp(store, "mlp", 4, rng, identity=True)
    f = rng.standard_normal((6, 4))
    np.testing.assert_allclose(cha_merge(f, np.zeros((6, 4)), mlp).value, f, atol=1e-14)
    with pytest.raises(ShapeError):
        cha_merge(f, np.zeros((5, 4)), mlp)


def test_pointwise_mlp_acts_per_token(rng):
    store = nc.ParamStore()
    mlp = init_pointwise_mlp(store, "mlp", 4, rng)
    f = rng.standard_normal((6, 4))
    g = f.copy()
    g[2] += 1.0
    a, b = pointwise_mlp(f, mlp).value, pointwise_mlp(g, mlp).value
    np.testing.assert_array_equal(np.delete(a, 2, 0), np.delete(b, 2, 0))


def test_cha_merge_gradient(rng):
    store = nc.ParamStore()
    mlp = init_pointwise_mlp(store, "mlp", 3, rng)
    fs = nc.Parameter(rng.standard_normal((4, 3)), "fs")
    fc = nc.Parameter(rng.standard_normal((4, 3)), "fc")
    c = rng.standard_normal((4, 3))
    rep = nc.grad_check(lambda: nc.sum(nc.mul(cha_merge(fs, fc, mlp), c)), [fs, fc, *store], n_coords=20)
    assert max(rep.values()) < 1e-5


def test_attention_gradients(rng):
    cfg = AttentionConfig(2, 4)
    p, _ = params(rng, 4, scale=0.5)
    x = nc.Parameter(rng.standard_normal((5, 4)), "x")
    c = rng.standard_normal((3, 4))
    rep = nc.grad_check(lambda: nc.sum(nc.mul(mhsa(x, p, cfg, n_queries=3).out, c)),
                        [x, p.wq, p.wk, p.wv, p.wo], n_coords=20)
    assert max(rep.values()) < 1e-4


def test_patchify_row_major_layout():
    fm = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    patches = patchify(fm, 2)
    assert patches.shape == (4, 8)
    # patch 1 = top-right 2x2 block of both channels
    np.testing.assert_array_equal(patches[1], np.concatenate([fm[0, :2, 2:].ravel(), fm[1, :2, 2:].ravel()]))
    with pytest.raises(ConfigError):
        patchify(fm, 3)


def test_pifa_matches_dense_concatenated_sequence_oracle(rng):
    cfg = AttentionConfig(1, 4)
    store = nc.ParamStore()
    emb = init_patch_embedder(store, "e", 2, 3, 4, 4, 4, rng)
    p, mats = params(rng, 4)
    fgcn = rng.standard_normal((2, 4))
    fm = rng.standard_normal((3, 4, 4))
    res = pifa(fgcn, fm, emb, p, cfg)
    tokens = np.vstack([fgcn, patchify(fm, 2) @ emb.weight.value + emb.bias.value + emb.position.value])
    assert relative_error(res.out.value, dense_mhsa(tokens, *mats, 1, n_queries=2)) < 1e-10
    assert res.weights.shape == (2, 6) and res.attn_map.shape == (2, 4)
    np.testing.assert_allclose(res.weights.sum(1), 1.0, atol=1e-12)


def test_pifa_zero_map_gives_identical_image_tokens(rng):
    cfg = AttentionConfig(2, 4)
    store = nc.ParamStore()
    emb = init_patch_embedder(store, "e", 2, 3, 4, 4, 4, rng)
    emb.position.value[...] = 0.0
    tokens = embed_patches(np.zeros((3, 4, 4)), emb).value
    assert np.all(tokens == tokens[0])
    p, _ = params(rng, 4)
    res = pifa(rng.standard_normal((3, 4)), np.zeros((3, 4, 4)), emb, p, cfg)
    assert np.isfinite(res.out.value).all()
    np.testing.assert_allclose(res.weights.sum(1), 1.0, atol=1e-12)


def test_pifa_gradient(rng):
    cfg = AttentionConfig(2, 4)
    store = nc.ParamStore()
    emb = init_patch_embedder(store, "e", 2, 2, 4, 4, 4, rng)
    p = init_attention(store, "a", 4, rng)
    x = nc.Parameter(rng.standard_normal((3, 4)), "x")
    fm = rng.standard_normal((2, 4, 4))
    c = rng.standard_normal((3, 4))
    rep = nc.grad_check(lambda: nc.sum(nc.mul(pifa(x, fm, emb, p, cfg).out, c)), [x, *store], n_coords=20)
    assert max(rep.values()) < 1e-4


def test_embedder_rejects_bad_grid(rng):
    with pytest.raises(ConfigError):
        init_patch_embedder(nc.ParamStore(), "e", 3, 2, 4, 4, 4, rng)
    emb = PatchEmbedder(2, nc.Parameter(np.zeros((5, 4)), "w"), nc.Parameter(np.zeros(4), "b"),
                        nc.Parameter(np.zeros((4, 4)), "p"))
    with pytest.raises(ShapeError):
        embed_patches(np.zeros((2, 4, 4)), emb)
