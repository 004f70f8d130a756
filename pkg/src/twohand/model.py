"""The two-hand mesh regression network.

Each of the three blocks runs, per hand, a residual Chebyshev GCN stack and
image-patch attention, then exchanges information between the hands with
cross attention. Merged features are upsampled to the next level; a linear
head per level and hand predicts vertex coordinates, and a frozen dense
layer lifts the finest level to the full template.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numcore as nc
from .attention import (AttentionConfig, AttentionParams, PatchEmbedder, PointwiseMLP,
                        cross_hand_stage, init_attention, init_patch_embedder,
                        init_pointwise_mlp, pifa)
from .config import Config
from .errors import ConfigError, ShapeError
from .graphconv import ResidualGcnBlock, glorot, init_residual_block, residual_block
from .meshtopo import DenseMatchingEncoding, MeshHierarchy
from .storage import read_container, write_container

HANDS = ("left", "right")
N_BLOCKS = 3
MAP_CHANNELS = 6
CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    heads: int = 4
    cheb_order: int = 3
    res_blocks: int = 2
    global_dim: int = 64
    patch_grids: tuple = (4, 8, 16)
    map_resolutions: tuple = (16, 32, 64)
    map_channels: int = MAP_CHANNELS
    level_sizes: tuple = (16, 32, 64)
    template_size: int = 197
    use_pifa: bool = True
    use_cha: bool = True
    reinject_encoding: bool = True

    def __post_init__(self):
        if len(self.patch_grids) != N_BLOCKS or len(self.level_sizes) != N_BLOCKS \
                or len(self.map_resolutions) != N_BLOCKS:
            raise ConfigError(f"the network has exactly {N_BLOCKS} blocks")
        if self.feature_dim % self.heads:
            raise ConfigError(f"feature_dim {self.feature_dim} not divisible by {self.heads} heads")
        for g, r in zip(self.patch_grids, self.map_resolutions):
            if r % g:
                raise ConfigError(f"map resolution {r} is not divisible by patch grid {g}")

    @classmethod
    def from_config(cls, cfg: Config, hierarchy: MeshHierarchy) -> "ModelConfig":
        return cls(cfg.feature_dim, cfg.heads, cfg.cheb_order, cfg.res_blocks, cfg.global_dim,
                   tuple(cfg.patch_grids), tuple(cfg.map_resolutions), MAP_CHANNELS,
                   tuple(hierarchy.sizes), hierarchy.template.n_vertices, cfg.use_pifa, cfg.use_cha,
                   cfg.reinject_encoding)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.heads, self.feature_dim)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f"model.{f.name}"] = str(v)
        return out

    @classmethod
    def from_kv(cls, items: dict[str, str]) -> "ModelConfig":
        vals = {}
        for f in fields(cls):
            raw = items[f"model.{f.name}"]
            default = getattr(cls(), f.name)
            if isinstance(default, bool):
                vals[f.name] = raw == "true"
            elif isinstance(default, tuple):
                vals[f.name] = tuple(int(x) for x in raw.split(","))
            else:
                vals[f.name] = type(default)(raw)
        return cls(**vals)

    def parameter_count(self) -> int:
        """Analytic size of the parameter registry built by :func:`build_params`."""
        f, g, K = self.feature_dim, self.global_dim, self.cheb_order
        total = 2 * (g * (f - 3) + (f - 3))
        for t in range(N_BLOCKS):
            per_hand = self.res_blocks * 2 * K * f * f + 3 * f + 3
            if self.use_pifa:
                grid, res = self.patch_grids[t], self.map_resolutions[t]
                n_in = self.map_channels * (res // grid) ** 2
                per_hand += n_in * f + f + grid * grid * f + 4 * f * f
            if self.reinject_encoding and t > 0:
                per_hand += 3 * f
            total += 2 * per_hand
            total += 4 * f * f + 3 * f  # merge MLP f -> 2f -> f
            if self.use_cha:
                total += 4 * f * f
        total += self.template_size * self.level_sizes[-1]
        return total


@dataclass
class HandBlock:
    gcn: list[ResidualGcnBlock]
    embed: PatchEmbedder | None
    pifa: AttentionParams | None
    head_w: nc.Parameter
    head_b: nc.Parameter
    encoding_w: nc.Parameter | None = None  # (3, f) re-injection of the level encoding


@dataclass
class Block:
    hands: dict[str, HandBlock]
    cha: AttentionParams | None
    mlp: PointwiseMLP


@dataclass
class ModelParams:
    config: ModelConfig
    store: nc.ParamStore
    global_w: dict[str, nc.Parameter]
    global_b: dict[str, nc.Parameter]
    blocks: list[Block]
    final_up: nc.Parameter


def build_params(cfg: ModelConfig, hierarchy: MeshHierarchy, seed: int = 0,
                 stable: bool = False) -> ModelParams:
    """Register every parameter; ``stable=True`` starts each block as the identity map.

    Stable init zeroes the last layer of every residual branch (second GCN conv,
    patch-attention output projection) and the coordinate heads, and makes the
    merge MLP an exact identity. The untrained network then outputs the origin
    for every vertex, which keeps the first Adam moments on the loss scale.
    """
    if tuple(hierarchy.sizes) != tuple(cfg.level_sizes) or hierarchy.template.n_vertices != cfg.template_size:
        raise ConfigError(f"hierarchy sizes {hierarchy.sizes} do not match the model config {cfg.level_sizes}")
    rng = np.random.default_rng(seed)
    store = nc.ParamStore()
    f, g = cfg.feature_dim, cfg.global_dim
    gw, gb = {}, {}
    for h in HANDS:
        gw[h] = store.add(f"{h}.global.weight", glorot(rng, (g, f - 3), g, f - 3))
        gb[h] = store.add(f"{h}.global.bias", np.zeros(f - 3))
    blocks = []
    for t in range(N_BLOCKS):
        hands = {}
        for h in HANDS:
            pre = f"block{t}.{h}"
            gcn = [init_residual_block(store, f"{pre}.gcn{r}", cfg.cheb_order, f, t, rng)
                   for r in range(cfg.res_blocks)]
            if stable:
                for rb in gcn:
                    rb.second.weight.value[...] = 0.0
            embed = attn = None
            if cfg.use_pifa:
                res = cfg.map_resolutions[t]
                embed = init_patch_embedder(store, f"{pre}.pifa.embed", cfg.patch_grids[t],
                                            cfg.map_channels, res, res, f, rng)
                attn = init_attention(store, f"{pre}.pifa.attn", f, rng)
                if stable:
                    attn.wo.value[...] = 0.0
            w0 = glorot(rng, (f, 3), f, 3)
            head_w = store.add(f"{pre}.head.weight", 0.0 * w0 if stable else w0)
            head_b = store.add(f"{pre}.head.bias", np.zeros(3))
            enc_w = None
            if cfg.reinject_encoding and t > 0:
                enc_w = store.add(f"{pre}.encoding.weight", glorot(rng, (3, f), 3, f))
            hands[h] = HandBlock(gcn, embed, attn, head_w, head_b, enc_w)
        cha = init_attention(store, f"block{t}.cha.attn", f, rng) if cfg.use_cha else None
        mlp = init_pointwise_mlp(store, f"block{t}.cha.merge", f, rng, identity=stable)
        blocks.append(Block(hands, cha, mlp))
    final_up = store.add("final_up", hierarchy.final_up_init, frozen=True)
    return ModelParams(cfg, store, gw, gb, blocks, final_up)


# ------------------------------------------------------------------ forward

@dataclass
class TwoHandPrediction:
    levels: dict  # hand -> [Node (N_t, 3)]
    full: dict  # hand -> Node (N, 3)
    pifa_attention: list = field(default_factory=list)  # per block: hand -> (N_t, N_t + P_t)
    cha_attention: list = field(default_factory=list)  # per block: direction -> (N_t, N_t)

    def vertices(self, hand: str) -> np.ndarray:
        return self.full[hand].value


def init_vertex_features(global_feature, colors: np.ndarray, weight, bias) -> nc.Node:
    """Rows ``concat(g_h(F_G), c_i)``: a shared projection of the global feature plus each vertex's colour."""
    fg = np.asarray(global_feature, dtype=np.float64).reshape(1, -1)
    if fg.shape[1] != weight.shape[0]:
        raise ShapeError(f"global feature length {fg.shape[1]} != {weight.shape[0]}")
    shared = nc.add(nc.matmul(fg, weight), bias)
    rows = nc.matmul(np.ones((len(colors), 1)), shared)
    return nc.concat_cols([rows, np.asarray(colors)])


def forward_block(params: ModelParams, t: int, features: dict, feature_map: np.ndarray,
                  hierarchy: MeshHierarchy) -> tuple[dict, dict, dict]:
    """One block for both hands; returns merged features and the attention records."""
    cfg = params.config
    block = params.blocks[t]
    lhat = hierarchy.laplacians[t]
    for h in HANDS:
        if features[h].shape[0] != hierarchy.sizes[t]:
            raise ShapeError(f"block {t} expects {hierarchy.sizes[t]} tokens, got {features[h].shape[0]}")
    mid, pifa_w = {}, {}
    for h in HANDS:
        hb = block.hands[h]
        x = features[h]
        for rb in hb.gcn:
            x = residual_block(x, lhat, rb)
        if hb.pifa is not None:
            res = pifa(x, feature_map, hb.embed, hb.pifa, cfg.attention)
            x = nc.add(x, res.out)  # skip path around the attention stage
            pifa_w[h] = res.weights
        mid[h] = x
    cross = cross_hand_stage(mid["left"], mid["right"], block.cha, block.mlp, cfg.attention)
    cha_w = {"right_to_left": cross.right_to_left, "left_to_right": cross.left_to_right} \
        if block.cha is not None else {}
    return {"left": cross.left, "right": cross.right}, pifa_w, cha_w


def forward(pyramid, hierarchy: MeshHierarchy, encoding: DenseMatchingEncoding,
            params: ModelParams) -> TwoHandPrediction:
    if len(pyramid.maps) != N_BLOCKS:
        raise ShapeError(f"pyramid has {len(pyramid.maps)} maps, the network needs {N_BLOCKS}")
    feats = {h: init_vertex_features(pyramid.global_feature, encoding.level(0),
                                     params.global_w[h], params.global_b[h]) for h in HANDS}
    levels = {h: [] for h in HANDS}
    pifa_records, cha_records = [], []
    for t in range(N_BLOCKS):
        merged, pw, cw = forward_block(params, t, feats, pyramid.maps[t], hierarchy)
        pifa_records.append(pw)
        cha_records.append(cw)
        for h in HANDS:
            hb = params.blocks[t].hands[h]
            levels[h].append(nc.add(nc.matmul(merged[h], hb.head_w), hb.head_b))
            if t + 1 < N_BLOCKS:
                up = nc.matmul(hierarchy.up_ops[t], merged[h])
                enc_w = params.blocks[t + 1].hands[h].encoding_w
                if enc_w is not None:
                    # copies of one parent are otherwise identical; the finer encoding tells them apart
                    up = nc.add(up, nc.matmul(encoding.level(t + 1), enc_w))
                feats[h] = up
    full = {h: nc.matmul(params.final_up, levels[h][-1]) for h in HANDS}
    return TwoHandPrediction(levels, full, pifa_records, cha_records)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, extra_header=None, extra_arrays=None) -> None:
    header = {"kind": CHECKPOINT_KIND, **params.config.to_kv(),
              "frozen": ",".join(sorted(params.store.frozen))}
    header.update(extra_header or {})
    arrays = {f"param.{n}": a for n, a in params.store.arrays().items()}
    for n, a in (extra_arrays or {}).items():
        arrays[n] = a
    write_container(path, header, arrays)


def read_checkpoint(path) -> tuple[dict, dict]:
    header, arrays = read_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a checkpoint")
    return header, arrays


def load_params(path, hierarchy: MeshHierarchy) -> tuple[ModelParams, dict, dict]:
    """Rebuild a model from a checkpoint; returns the params plus the raw header and arrays."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_kv(header)
    params = build_params(cfg, hierarchy)
    params.store.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    return params, header, arrays
