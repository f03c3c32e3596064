"""Time the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
The numpy path is what EDITFIX_NO_NUMBA=1 selects at import time; here both
implementations are called directly so one process can compare them.
"""

import time

import numpy as np

from editfix import _kernels as K


def bench(name, fn_numba, fn_numpy, args, repeats=50, check=None):
    if fn_numba is None:
        print(f"{name:<28} numba unavailable")
        return
    fn_numba(*args)  # compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        out_a = fn_numba(*args)
    t_numba = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        out_b = fn_numpy(*args)
    t_numpy = (time.perf_counter() - t0) / repeats
    if check is not None:
        check(out_a, out_b)
    speedup = t_numpy / t_numba if t_numba > 0 else float("inf")
    print(f"{name:<28} numba {t_numba * 1e6:9.1f} us   numpy {t_numpy * 1e6:9.1f} us"
          f"   x{speedup:5.2f}")


def close(a, b):
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-6)


def close_tuple(a, b):
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-4, atol=1e-6)


def main():
    rng = np.random.default_rng(0)
    print(f"active backend: {K.backend()}\n")

    x = rng.normal(size=(2048, 128)).astype(np.float32)
    g = rng.normal(size=(2048, 128)).astype(np.float32)
    gain = rng.normal(1, 0.1, 128).astype(np.float32)
    bias = np.zeros(128, dtype=np.float32)

    bench("softmax rows (2048x128)", K.softmax_rows_numba, K.softmax_rows_numpy,
          (x,), check=close)
    y = K.softmax_rows_numpy(x)
    bench("softmax backward", K.softmax_rows_bwd_numba, K.softmax_rows_bwd_numpy,
          (y, g), check=close)

    targets = rng.integers(0, 128, size=2048)
    bench("cross entropy rows", K.cross_entropy_rows_numba, K.cross_entropy_rows_numpy,
          (x, targets), check=close_tuple)

    bench("layer norm fwd", K.layernorm_rows_numba, K.layernorm_rows_numpy,
          (x, gain, bias, 1e-5), check=close_tuple)
    _, xhat, rstd = K.layernorm_rows_numpy(x, gain, bias, 1e-5)
    bench("layer norm bwd", K.layernorm_rows_bwd_numba, K.layernorm_rows_bwd_numpy,
          (xhat, rstd, gain, g), check=close_tuple)

    flat = np.ascontiguousarray(x.reshape(-1))
    gflat = np.ascontiguousarray(g.reshape(-1))
    bench("gelu fwd (262k)", K.gelu_numba, K.gelu_numpy, (flat,), check=close)
    bench("gelu bwd", K.gelu_bwd_numba, K.gelu_bwd_numpy, (flat, gflat), check=close)

    p = flat.copy()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    bench("adamw update (262k)", K.adamw_update_numba, K.adamw_update_numpy,
          (p, gflat, m, v, 1e-4, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001))

    table = np.zeros((500, 128), dtype=np.float32)
    ids = rng.integers(0, 500, size=4096)
    grads = rng.normal(size=(4096, 128)).astype(np.float32)
    bench("embedding scatter-add", K.embedding_grad_numba, K.embedding_grad_numpy,
          (table, ids, grads))

    a = rng.integers(0, 30, size=512).astype(np.int64)
    b = rng.integers(0, 30, size=512).astype(np.int64)
    bench("longest match (512x512)", K.longest_match_numba, K.longest_match_numpy,
          (a, b, 0, 512, 0, 512),
          check=lambda u, w: np.testing.assert_array_equal(np.array(u), np.array(w)))

    doc = rng.integers(0, 256, size=4000).astype(np.int64)
    merges = np.stack([
        rng.integers(0, 256, size=200),
        rng.integers(0, 256, size=200),
        np.arange(261, 461),
    ], axis=1).astype(np.int64)
    bench("bpe encode (4k bytes)", K.bpe_encode_numba, K.bpe_encode_numpy,
          (doc, merges), check=lambda u, w: np.testing.assert_array_equal(u, w))


if __name__ == "__main__":
    main()
