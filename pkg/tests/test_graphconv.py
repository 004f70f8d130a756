import numpy as np
import pytest
from hypothesis import given, strategies as st

from twohand import numcore as nc
from twohand.errors import ShapeError
from twohand.graphconv import (ChebLayer, ResidualGcnBlock, cheb_conv, chebyshev_terms, init_residual_block,
                               residual_block)
from twohand.meshtopo import scaled_laplacian
from twohand.oracle import dense_cheb_conv, random_connected_graph, relative_error


def layer(w):
    return ChebLayer(nc.Parameter(np.asarray(w, float), "w"), 0)


def test_k1_is_a_plain_linear_map(rng):
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((1, 3, 2))
    lhat = scaled_laplacian(random_connected_graph(rng, 5, 2))
    np.testing.assert_allclose(cheb_conv(x, lhat, layer(w), activation=None).value, x @ w[0])


def test_chebyshev_terms_follow_polynomials_of_laplacian(rng):
    lhat = scaled_laplacian(random_connected_graph(rng, 6, 3))
    x = rng.standard_normal((6, 2))
    t = [v.value for v in chebyshev_terms(nc.constant(x), lhat, 4)]
    eye = np.eye(6)
    np.testing.assert_allclose(t[2], (2 * lhat @ lhat - eye) @ x, atol=1e-12)
    np.testing.assert_allclose(t[3], (4 * lhat @ lhat @ lhat - 3 * lhat) @ x, atol=1e-12)


@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_cheb_conv_matches_eigendecomposition_oracle(n, K, seed):
    rng = np.random.default_rng(seed)
    lhat = scaled_laplacian(random_connected_graph(rng, n, int(rng.integers(0, n))))
    x = rng.standard_normal((n, 3))
    w = rng.standard_normal((K, 3, 4))
    fast = cheb_conv(x, lhat, layer(w)).value
    assert relative_error(fast, dense_cheb_conv(x, lhat, w)) < 1e-10 or np.abs(fast).max() == 0


def test_cheb_conv_gradient(rng):
    lhat = scaled_laplacian(random_connected_graph(rng, 7, 4))
    x = nc.Parameter(rng.standard_normal((7, 3)), "x")
    lay = layer(rng.standard_normal((3, 3, 2)))
    c = rng.standard_normal((7, 2))
    rep = nc.grad_check(lambda: nc.sum(nc.mul(cheb_conv(x, lhat, lay, activation=nc.square), c)),
                        [x, lay.weight], n_coords=30)
    assert max(rep.values()) < 1e-6


def test_shape_errors(rng):
    lhat = np.zeros((4, 4))
    with pytest.raises(ShapeError):
        cheb_conv(np.ones((5, 3)), lhat, layer(np.ones((2, 3, 3))))
    with pytest.raises(ShapeError):
        cheb_conv(np.ones((4, 2)), lhat, layer(np.ones((2, 3, 3))))
    with pytest.raises(ShapeError):
        ChebLayer(nc.Parameter(np.ones((3, 3)), "w"), 0)


def test_residual_block_with_zero_second_conv_is_identity(rng):
    store = nc.ParamStore()
    block = init_residual_block(store, "b", 3, 4, 0, rng)
    block.second.weight.value[...] = 0.0
    x = rng.standard_normal((6, 4))
    lhat = scaled_laplacian(random_connected_graph(rng, 6, 3))
    np.testing.assert_array_equal(residual_block(x, lhat, block).value, x)
    assert set(store.names()) == {"b.conv1", "b.conv2"}


def test_residual_block_rejects_mismatched_widths():
    with pytest.raises(ShapeError):
        ResidualGcnBlock(layer(np.ones((2, 3, 4))), layer(np.ones((2, 3, 3))))
