"""The numba and numpy kernel paths must agree numerically."""

import numpy as np
import pytest

from editfix import _kernels as K


requires_numba = pytest.mark.skipif(
    not K.NUMBA_AVAILABLE, reason="numba backend not available"
)


@requires_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_paths_agree(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 13)).astype(dtype)
    x[0, :5] = -np.inf
    a = K.softmax_rows_numba(x)
    b = K.softmax_rows_numpy(x)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)
    g = rng.normal(size=x.shape).astype(dtype)
    np.testing.assert_allclose(
        K.softmax_rows_bwd_numba(a, g), K.softmax_rows_bwd_numpy(b, g), rtol=1e-4, atol=1e-6
    )


@requires_numba
def test_cross_entropy_paths_agree():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(9, 6))
    t = rng.integers(0, 6, size=9)
    la, pa = K.cross_entropy_rows_numba(x, t)
    lb, pb = K.cross_entropy_rows_numpy(x, t)
    np.testing.assert_allclose(la, lb, rtol=1e-12)
    np.testing.assert_allclose(pa, pb, rtol=1e-12)


@requires_numba
def test_layernorm_paths_agree():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 16))
    gain = rng.normal(1, 0.1, 16)
    bias = rng.normal(0, 0.1, 16)
    ya, xha, rsa = K.layernorm_rows_numba(x, gain, bias, 1e-5)
    yb, xhb, rsb = K.layernorm_rows_numpy(x, gain, bias, 1e-5)
    np.testing.assert_allclose(ya, yb, rtol=1e-10)
    np.testing.assert_allclose(rsa, rsb, rtol=1e-10)
    g = rng.normal(size=x.shape)
    for a, b in zip(
        K.layernorm_rows_bwd_numba(xha, rsa, gain, g),
        K.layernorm_rows_bwd_numpy(xhb, rsb, gain, g),
    ):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@requires_numba
def test_gelu_and_adamw_and_scatter_agree():
    rng = np.random.default_rng(3)
    x = rng.normal(size=64)
    np.testing.assert_allclose(K.gelu_numba(x), K.gelu_numpy(x), rtol=1e-12)
    g = rng.normal(size=64)
    np.testing.assert_allclose(K.gelu_bwd_numba(x, g), K.gelu_bwd_numpy(x, g), rtol=1e-12)

    p1, p2 = x.copy(), x.copy()
    m1, m2 = np.zeros(64), np.zeros(64)
    v1, v2 = np.zeros(64), np.zeros(64)
    K.adamw_update_numba(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)
    K.adamw_update_numpy(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)
    np.testing.assert_allclose(p1, p2, rtol=1e-12)

    out1 = np.zeros((5, 4))
    out2 = np.zeros((5, 4))
    ids = np.array([0, 3, 3, 1], dtype=np.int64)
    grad = rng.normal(size=(4, 4))
    K.embedding_grad_numba(out1, ids, grad)
    K.embedding_grad_numpy(out2, ids, grad)
    np.testing.assert_allclose(out1, out2, rtol=1e-12)


@requires_numba
def test_longest_match_paths_agree():
    rng = np.random.default_rng(4)
    for _ in range(200):
        x = rng.integers(0, 6, size=rng.integers(0, 20)).astype(np.int64)
        y = rng.integers(0, 6, size=rng.integers(0, 20)).astype(np.int64)
        a = K.longest_match_numba(x, y, 0, len(x), 0, len(y))
        b = K.longest_match_numpy(x, y, 0, len(x), 0, len(y))
        assert tuple(a) == tuple(b)


@requires_numba
def test_bpe_encode_paths_agree():
    rng = np.random.default_rng(5)
    merges = np.array([[1, 2, 10], [10, 3, 11], [0, 0, 12]], dtype=np.int64)
    for _ in range(100):
        ids = rng.integers(0, 5, size=rng.integers(0, 30)).astype(np.int64)
        a = K.bpe_encode_numba(ids.copy(), merges)
        b = K.bpe_encode_numpy(ids.copy(), merges)
        assert a.tolist() == b.tolist()


def test_backend_name():
    assert K.backend() in ("numba", "numpy")
