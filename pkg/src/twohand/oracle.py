"""Dense reference implementations used to validate the fast paths.

The Chebyshev oracle evaluates ``T_k(L)`` through an eigendecomposition and
``cos(k arccos lambda)``, so it shares no code path with the recurrence. The
attention oracle loops over heads and rows with explicit exponentials.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .attention import AttentionConfig, AttentionParams, cross_attention, mhsa
from .graphconv import ChebLayer, cheb_conv
from .meshtopo import scaled_laplacian


def chebyshev_matrix(lhat: np.ndarray, k: int) -> np.ndarray:
    lam, vec = np.linalg.eigh(lhat)
    lam = np.clip(lam, -1.0, 1.0)
    return (vec * np.cos(k * np.arccos(lam))) @ vec.T


def dense_cheb_conv(x: np.ndarray, lhat: np.ndarray, weight: np.ndarray, relu: bool = True) -> np.ndarray:
    out = sum(chebyshev_matrix(lhat, k) @ x @ weight[k] for k in range(weight.shape[0]))
    return np.maximum(out, 0.0) if relu else out


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    d = q.shape[1] // heads
    out = np.zeros((q.shape[0], v.shape[1]))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(q.shape[0]):
            scores = np.array([q[i, sl] @ k[j, sl] for j in range(k.shape[0])]) / np.sqrt(d)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = w @ v[:, sl]
    return out


def dense_mhsa(x, wq, wk, wv, wo, heads, n_queries=None) -> np.ndarray:
    q = x @ wq
    if n_queries is not None:
        q = q[:n_queries]
    return dense_attention(q, x @ wk, x @ wv, heads) @ wo


def relative_error(a, b) -> float:
    """Max absolute deviation scaled by the oracle's largest magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def random_connected_graph(rng, n: int, extra_edges: int) -> np.ndarray:
    w = np.zeros((n, n))
    for i in range(1, n):  # random spanning tree keeps it connected
        j = rng.integers(0, i)
        w[i, j] = w[j, i] = 1.0
    for _ in range(extra_edges):
        i, j = rng.choice(n, 2, replace=False)
        w[i, j] = w[j, i] = 1.0
    return w


@dataclass
class OracleReport:
    cheb: float
    mhsa: float
    cross: float
    pifa_like: float
    cases: int

    @property
    def worst(self) -> float:
        return max(self.cheb, self.mhsa, self.cross, self.pifa_like)


def run_oracle_suite(seed: int = 0, n_graphs: int = 100, max_vertices: int = 12, max_k: int = 5) -> OracleReport:
    rng = np.random.default_rng(seed)
    cheb_err = 0.0
    for _ in range(n_graphs):
        n = int(rng.integers(2, max_vertices + 1))
        w = random_connected_graph(rng, n, int(rng.integers(0, n)))
        lhat = scaled_laplacian(w)
        K = int(rng.integers(1, max_k + 1))
        f_in, f_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, f_in))
        weight = rng.standard_normal((K, f_in, f_out))
        fast = cheb_conv(x, lhat, ChebLayer(nc.Parameter(weight, "w"), 0), activation=None).value
        cheb_err = max(cheb_err, relative_error(fast, dense_cheb_conv(x, lhat, weight, relu=False)))

    mhsa_err = cross_err = pifa_err = 0.0
    for _ in range(n_graphs):
        heads = int(rng.integers(1, 5))
        dim = heads * int(rng.integers(1, 5))
        cfg = AttentionConfig(heads, dim)
        mats = [rng.standard_normal((dim, dim)) for _ in range(4)]
        p = AttentionParams(*(nc.Parameter(m, n) for m, n in zip(mats, "qkvo")))
        m = int(rng.integers(1, 9))
        x = rng.standard_normal((m, dim))
        mhsa_err = max(mhsa_err, relative_error(mhsa(x, p, cfg).out.value, dense_mhsa(x, *mats, heads)))
        nq = int(rng.integers(1, m + 1))
        pifa_err = max(pifa_err, relative_error(mhsa(x, p, cfg, n_queries=nq).out.value,
                                                dense_mhsa(x, *mats, heads, n_queries=nq)))
        q = rng.standard_normal((int(rng.integers(1, 9)), dim))
        kv = int(rng.integers(1, 9))
        k, v = rng.standard_normal((kv, dim)), rng.standard_normal((kv, dim))
        out, _ = cross_attention(q, k, v, cfg)
        cross_err = max(cross_err, relative_error(out.value, dense_attention(q, k, v, heads)))
    return OracleReport(cheb_err, mhsa_err, cross_err, pifa_err, n_graphs)


@dataclass
class GradientReport:
    per_param: dict
    seconds: float

    @property
    def worst(self) -> float:
        return max(self.per_param.values())

    @property
    def worst_name(self) -> str:
        return max(self.per_param, key=self.per_param.get)


PERTURBATION = 0.1


def gradient_check_params(cfg, hierarchy, seed: int = 0):
    """Identity-started weights plus a small random perturbation of every trainable tensor.

    Plain random init sends the loss to ~1e7, where finite-difference roundoff
    swamps small gradients; the pure identity start has exactly zero gradient
    on many paths. The perturbed point avoids both.
    """
    from .model import ModelConfig, build_params

    mc = ModelConfig.from_config(cfg, hierarchy)
    params = build_params(mc, hierarchy, seed=seed, stable=True)
    noise = build_params(mc, hierarchy, seed=seed + 1)
    for p in params.store.trainable():
        p.value += PERTURBATION * noise.store[p.name].value
    return params


def run_gradient_suite(cfg=None, seed: int = 0, n_coords: int = 16, eps: float = 1e-4) -> GradientReport:
    """Finite-difference check of ``total_loss`` through the whole network on one synthetic sample.

    The loss is ~1e3 here, so a 1e-5 step leaves ~1e-8 of roundoff in each
    difference, while the normal and edge terms curve too sharply in the
    final upsampler for a plain 1e-4 step. The fourth-order difference at
    1e-4 handles both.
    """
    import time

    from .config import Config
    from .losses import total_loss
    from .model import forward
    from .synthdata import SynthConfig, generate_sample
    from .trainer import context_from_config

    cfg = cfg or Config()
    ctx = context_from_config(cfg)
    h = ctx.hierarchy
    params = gradient_check_params(cfg, h, seed)
    sample = generate_sample(seed, h.template, h, SynthConfig.from_config(cfg))

    def objective():
        pred = forward(sample.pyramid, h, ctx.encoding, params)
        return total_loss(pred, sample, h, ctx.regressor, ctx.weights).total

    t0 = time.perf_counter()
    report = nc.grad_check(objective, list(params.store), eps=eps, n_coords=n_coords, seed=seed, richardson=True)
    return GradientReport(report, time.perf_counter() - t0)
