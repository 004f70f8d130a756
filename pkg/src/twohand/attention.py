"""Multi-head attention blocks: self attention, cross-hand attention and image-patch attention."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .graphconv import glorot


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    dim: int

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class AttentionParams:
    wq: nc.Parameter
    wk: nc.Parameter
    wv: nc.Parameter
    wo: nc.Parameter


def init_attention(store, name, dim, rng) -> AttentionParams:
    mats = [store.add(f"{name}.{k}", glorot(rng, (dim, dim), dim, dim)) for k in "qkvo"]
    return AttentionParams(*mats)


class MHSAResult(NamedTuple):
    out: nc.Node
    q: nc.Node
    k: nc.Node
    v: nc.Node
    weights: np.ndarray  # head-averaged (M, M)


def project_qkv(x, p: AttentionParams):
    x = nc.as_node(x)
    return nc.matmul(x, p.wq), nc.matmul(x, p.wk), nc.matmul(x, p.wv)


def attend(q, k, v, cfg: AttentionConfig) -> tuple[nc.Node, np.ndarray]:
    """Per-head ``softmax(Q K^T / sqrt(d)) V`` with heads concatenated.

    Returns the concatenated output and the head-averaged weight matrix.
    """
    q, k, v = nc.as_node(q), nc.as_node(k), nc.as_node(v)
    if q.shape[1] != cfg.dim or k.shape[1] != cfg.dim or v.shape[1] != cfg.dim:
        raise ShapeError(f"attention widths {q.shape[1]}, {k.shape[1]}, {v.shape[1]} != {cfg.dim}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"keys ({k.shape[0]}) and values ({v.shape[0]}) differ in token count")
    n_q, n_k, H, d = q.shape[0], k.shape[0], cfg.heads, cfg.head_dim
    inv = 1.0 / np.sqrt(d)
    # (H, tokens, d) views of the head slices
    qh = q.value.reshape(n_q, H, d).transpose(1, 0, 2)
    kh = k.value.reshape(n_k, H, d).transpose(1, 0, 2)
    vh = v.value.reshape(n_k, H, d).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1) * inv
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    out = (a @ vh).transpose(1, 0, 2).reshape(n_q, H * d)

    def backward(g):
        go = g.reshape(n_q, H, d).transpose(1, 0, 2)
        gv = a.transpose(0, 2, 1) @ go
        ga = go @ vh.transpose(0, 2, 1)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * inv
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh

        def merge(x, n):
            return x.transpose(1, 0, 2).reshape(n, H * d)
        return merge(gq, n_q), merge(gk, n_k), merge(gv, n_k)

    return nc.custom_op(out, (q, k, v), backward), a.mean(axis=0)


def mhsa(x, p: AttentionParams, cfg: AttentionConfig, n_queries: int | None = None) -> MHSAResult:
    """Self attention over the token rows of ``x``.

    With ``n_queries`` only the first ``n_queries`` tokens produce outputs
    (keys and values still span every token).
    """
    x = nc.as_node(x)
    if x.shape[0] < 1:
        raise ShapeError("mhsa needs at least one token")
    q, k, v = project_qkv(x, p)
    if n_queries is not None:
        q = nc.slice_rows(q, 0, n_queries)
    heads, weights = attend(q, k, v, cfg)
    return MHSAResult(nc.matmul(heads, p.wo), q, k, v, weights)


def cross_attention(q_self, k_other, v_other, cfg: AttentionConfig) -> tuple[nc.Node, np.ndarray]:
    """Queries of one hand attend to keys and values of the other; heads concatenated."""
    return attend(q_self, k_other, v_other, cfg)


# ------------------------------------------------------------ pointwise MLP

@dataclass
class PointwiseMLP:
    w1: nc.Parameter  # (f, 2f)
    b1: nc.Parameter
    w2: nc.Parameter  # (2f, f)
    b2: nc.Parameter


def init_pointwise_mlp(store, name, dim, rng, identity: bool = False) -> PointwiseMLP:
    """Two-layer per-token MLP ``f -> 2f -> f``.

    ``identity=True`` uses ``relu(x) - relu(-x) = x`` so the MLP starts as the
    exact identity map.
    """
    if identity:
        eye = np.eye(dim)
        w1 = np.concatenate([eye, -eye], axis=1)
        w2 = np.concatenate([eye, -eye], axis=0)
    else:
        w1 = glorot(rng, (dim, 2 * dim), dim, 2 * dim)
        w2 = glorot(rng, (2 * dim, dim), 2 * dim, dim)
    return PointwiseMLP(store.add(f"{name}.w1", w1), store.add(f"{name}.b1", np.zeros(2 * dim)),
                        store.add(f"{name}.w2", w2), store.add(f"{name}.b2", np.zeros(dim)))


def pointwise_mlp(x, mlp: PointwiseMLP) -> nc.Node:
    h = nc.relu(nc.add(nc.matmul(x, mlp.w1), mlp.b1))
    return nc.add(nc.matmul(h, mlp.w2), mlp.b2)


def cha_merge(f_self, f_cross, mlp: PointwiseMLP) -> nc.Node:
    f_self, f_cross = nc.as_node(f_self), nc.as_node(f_cross)
    if f_self.shape != f_cross.shape:
        raise ShapeError(f"cha_merge: {f_self.shape} vs {f_cross.shape}")
    return pointwise_mlp(nc.add(f_self, f_cross), mlp)


class CrossHandResult(NamedTuple):
    left: nc.Node
    right: nc.Node
    right_to_left: np.ndarray  # left queries over right keys
    left_to_right: np.ndarray


def cross_hand_stage(f_left, f_right, p: AttentionParams | None, mlp: PointwiseMLP,
                     cfg: AttentionConfig) -> CrossHandResult:
    """Symmetric cross-hand exchange with weights shared by both directions.

    ``p=None`` silences the cross path: each hand passes through the merge MLP alone.
    """
    if p is None:
        n_l, n_r = f_left.shape[0], f_right.shape[0]
        return CrossHandResult(pointwise_mlp(f_left, mlp), pointwise_mlp(f_right, mlp),
                               np.zeros((n_l, n_r)), np.zeros((n_r, n_l)))
    ql, kl, vl = project_qkv(f_left, p)
    qr, kr, vr = project_qkv(f_right, p)
    r2l, w_r2l = cross_attention(ql, kr, vr, cfg)
    l2r, w_l2r = cross_attention(qr, kl, vl, cfg)
    out_l = cha_merge(f_left, nc.matmul(r2l, p.wo), mlp)
    out_r = cha_merge(f_right, nc.matmul(l2r, p.wo), mlp)
    return CrossHandResult(out_l, out_r, w_r2l, w_l2r)


# ---------------------------------------------------------- image patches

@dataclass
class PatchEmbedder:
    grid: int
    weight: nc.Parameter  # (C * ph * pw, f)
    bias: nc.Parameter  # (f,)
    position: nc.Parameter  # (grid * grid, f)

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


def init_patch_embedder(store, name, grid, channels, height, width, dim, rng) -> PatchEmbedder:
    if height % grid or width % grid:
        raise ConfigError(f"feature map {height}x{width} is not divisible into a {grid}x{grid} grid")
    n_in = channels * (height // grid) * (width // grid)
    return PatchEmbedder(
        grid,
        store.add(f"{name}.weight", glorot(rng, (n_in, dim), n_in, dim)),
        store.add(f"{name}.bias", np.zeros(dim)),
        store.add(f"{name}.position", 0.02 * rng.standard_normal((grid * grid, dim))),
    )


def patchify(feature_map: np.ndarray, grid: int) -> np.ndarray:
    """Split a (C, H, W) map into ``grid**2`` row-major patches, each flattened as (C, h, w)."""
    c, h, w = feature_map.shape
    if h % grid or w % grid:
        raise ConfigError(f"feature map {h}x{w} is not divisible into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    x = feature_map.reshape(c, grid, ph, grid, pw).transpose(1, 3, 0, 2, 4)
    return x.reshape(grid * grid, c * ph * pw)


def embed_patches(feature_map, emb: PatchEmbedder) -> nc.Node:
    patches = patchify(np.asarray(feature_map), emb.grid)
    if patches.shape[1] != emb.weight.shape[0]:
        raise ShapeError(f"patch size {patches.shape[1]} != embedder input {emb.weight.shape[0]}")
    return nc.add(nc.add(nc.matmul(patches, emb.weight), emb.bias), emb.position)


class PifaResult(NamedTuple):
    out: nc.Node
    weights: np.ndarray  # head-averaged (N, N + P): vertex queries over all keys
    attn_map: np.ndarray  # (N, P): the image-key block of ``weights``


def pifa(f_gcn, feature_map, emb: PatchEmbedder, p: AttentionParams, cfg: AttentionConfig) -> PifaResult:
    """Self attention over vertex tokens followed by image-patch tokens.

    Only the vertex-position outputs are returned as the updated vertex features.
    """
    f_gcn = nc.as_node(f_gcn)
    n = f_gcn.shape[0]
    tokens = nc.concat_rows([f_gcn, embed_patches(feature_map, emb)])
    res = mhsa(tokens, p, cfg, n_queries=n)
    return PifaResult(res.out, res.weights, res.weights[:, n:])
