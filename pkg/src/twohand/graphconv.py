"""Chebyshev spectral graph convolution and the residual GCN block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ShapeError


@dataclass
class ChebLayer:
    """``K`` stacked weight matrices ``W_k`` of shape (f_in, f_out) for one hierarchy level."""
    weight: nc.Parameter  # (K, f_in, f_out)
    level: int

    def __post_init__(self):
        if self.weight.value.ndim != 3 or self.weight.shape[0] < 1:
            raise ShapeError(f"Chebyshev weight must be (K, f_in, f_out), got {self.weight.shape}")

    @property
    def K(self) -> int:
        return self.weight.shape[0]

    @property
    def f_in(self) -> int:
        return self.weight.shape[1]

    @property
    def f_out(self) -> int:
        return self.weight.shape[2]


@dataclass
class ResidualGcnBlock:
    first: ChebLayer
    second: ChebLayer

    def __post_init__(self):
        if self.first.f_in != self.second.f_out or self.first.f_out != self.second.f_in:
            raise ShapeError("residual block layers must map f -> f' -> f")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_cheb_layer(store: nc.ParamStore, name: str, K: int, f_in: int, f_out: int,
                    level: int, rng: np.random.Generator) -> ChebLayer:
    w = glorot(rng, (K, f_in, f_out), f_in, f_out)
    return ChebLayer(store.add(name, w), level)


def init_residual_block(store, name, K, f, level, rng) -> ResidualGcnBlock:
    return ResidualGcnBlock(
        init_cheb_layer(store, f"{name}.conv1", K, f, f, level, rng),
        init_cheb_layer(store, f"{name}.conv2", K, f, f, level, rng),
    )


def chebyshev_terms(x: nc.Node, lhat: np.ndarray, K: int) -> list[nc.Node]:
    """``[T_0(L) X, ..., T_{K-1}(L) X]`` by the three-term recurrence."""
    terms = [x]
    if K > 1:
        terms.append(nc.matmul(lhat, x))
    for _ in range(2, K):
        terms.append(nc.sub(nc.scale(nc.matmul(lhat, terms[-1]), 2.0), terms[-2]))
    return terms


def cheb_conv(x, lhat, layer: ChebLayer, activation=nc.relu) -> nc.Node:
    """``activation(sum_k T_k(L) X W_k)``; pass ``activation=None`` for the linear filter."""
    x = nc.as_node(x)
    lhat = np.asarray(lhat)
    if lhat.ndim != 2 or lhat.shape[0] != lhat.shape[1] or lhat.shape[0] != x.shape[0]:
        raise ShapeError(f"cheb_conv: features {x.shape} do not match Laplacian {lhat.shape}")
    if x.shape[1] != layer.f_in:
        raise ShapeError(f"cheb_conv: feature width {x.shape[1]} != layer input {layer.f_in}")
    stacked = nc.concat_cols(chebyshev_terms(x, lhat, layer.K))
    w = nc.reshape(layer.weight, (layer.K * layer.f_in, layer.f_out))
    out = nc.matmul(stacked, w)
    return activation(out) if activation is not None else out


def residual_block(x, lhat, block: ResidualGcnBlock) -> nc.Node:
    x = nc.as_node(x)
    if x.shape[1] != block.first.f_in:
        raise ShapeError(f"residual_block: width {x.shape[1]} != block width {block.first.f_in}")
    h = cheb_conv(x, lhat, block.first)
    return nc.add(x, cheb_conv(h, lhat, block.second))
