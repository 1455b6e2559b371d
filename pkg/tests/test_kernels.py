"""The compiled and pure chain kernels must be interchangeable: identical
inputs produce bit-identical chains."""

import numpy as np
import pytest

from shiplearn import _chains_py, kernels
from shiplearn.randcore import SeededStream, gamma_array, normal_array

compiled_only = pytest.mark.skipif(
    not kernels.USING_COMPILED, reason="compiled extension not available")


def _inputs(seed: int, n_routes: int, total: int):
    stream = SeededStream(seed)
    gen = stream.child("stats").generator()
    nj = gen.integers(0, 9, n_routes).astype(float)
    qbar = np.where(nj > 0, gen.normal(0, 2, n_routes), 0.0)
    ssj = np.where(nj > 0, gen.uniform(0, 30, n_routes), 0.0)
    dist = gen.uniform(500, 9000, n_routes)
    z = normal_array(stream.child("z"), (total, n_routes + 2))
    g_sigma = gamma_array(stream.child("gs"), 1.05 + 0.5 * nj.sum(), total)
    g_xi = gamma_array(stream.child("gx"), 1.05 + 0.5 * n_routes, total)
    return nj, qbar, ssj, dist, z, g_sigma, g_xi


@compiled_only
def test_hier_simple_chain_bit_identical():
    nj, qbar, ssj, _, z, gs, gx, = _inputs(1, 4, 800)
    args = (nj, qbar, ssj, np.zeros(4), 0.0, 200.0, 60.0,
            10.0, 0.0, 900.0, 3.0, z[:, :5].copy(), gs, gx, 400)
    for pure, fast in zip(_chains_py.hier_simple_chain(*args),
                          kernels.hier_simple_chain(*args)):
        assert np.array_equal(pure, fast)


@compiled_only
def test_hier_regression_chain_bit_identical():
    nj, qbar, ssj, dist, z, gs, gx = _inputs(2, 3, 600)
    args = (nj, qbar, ssj, dist, np.zeros(3), 0.0, 0.0, 200.0, 60.0,
            10.0, 0.0, 900.0, 3.0, 0.0, 900.0, z[:, :5].copy(), gs, gx, 300)
    for pure, fast in zip(_chains_py.hier_regression_chain(*args),
                          kernels.hier_regression_chain(*args)):
        assert np.array_equal(pure, fast)


@compiled_only
def test_independent_chain_bit_identical():
    nj, qbar, ssj, _, z, gs, _ = _inputs(3, 4, 500)
    nj = np.maximum(nj, 1.0)  # independent kernel sees observed routes only
    args = (nj, qbar, ssj, np.zeros(4), np.full(4, 9.0), np.zeros(4),
            200.0, 10.0, z[:, :4].copy(), gs, 250)
    for pure, fast in zip(_chains_py.independent_chain(*args),
                          kernels.independent_chain(*args)):
        assert np.array_equal(pure, fast)


@compiled_only
def test_pooling_chain_bit_identical():
    _, _, _, _, z, gs, _ = _inputs(4, 2, 500)
    args = (12.0, 1.5, 80.0, 0.0, 9.0, 0.0, 200.0, 10.0,
            z[:, 0].copy(), gs, 250)
    for pure, fast in zip(_chains_py.pooling_chain(*args),
                          kernels.pooling_chain(*args)):
        assert np.array_equal(pure, fast)


@compiled_only
def test_pooling_regression_chain_bit_identical():
    nj, qbar, ssj, dist, z, gs, _ = _inputs(5, 3, 500)
    nj = np.maximum(nj, 1.0)
    args = (nj, qbar, ssj, dist, 0.0, 0.0, 200.0, 0.0, 9.0, 0.0, 900.0,
            10.0, z[:, :2].copy(), gs, 250)
    for pure, fast in zip(_chains_py.pooling_regression_chain(*args),
                          kernels.pooling_regression_chain(*args)):
        assert np.array_equal(pure, fast)


def test_selected_kernel_reports_implementation():
    assert isinstance(kernels.USING_COMPILED, bool)
