"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path compiles lazily with ``@njit(cache=True)`` and is selected by
default. Setting the environment variable ``EDITFIX_NO_NUMBA`` to any
non-empty value (or a failed numba import) selects the numpy path instead.
``benchmarks/bench_kernels.py`` times the two paths side by side.

Every kernel takes contiguous arrays in a fixed layout (callers reshape):
row-wise kernels take 2D ``(rows, cols)``, elementwise kernels take flat 1D.
"""

from __future__ import annotations

import math
import os

import numpy as np

_DISABLED = bool(os.environ.get("EDITFIX_NO_NUMBA"))

if not _DISABLED:
    try:
        from numba import njit

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_AVAILABLE = False
else:
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE


def backend() -> str:
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations (always defined; also the reference for the benchmark)
# ---------------------------------------------------------------------------

def softmax_rows_numpy(x):
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_rows_bwd_numpy(y, g):
    dot = np.sum(g * y, axis=1, keepdims=True)
    return (g - dot) * y


def cross_entropy_rows_numpy(logits, targets):
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = np.sum(e, axis=1, keepdims=True)
    probs = e / s
    lse = m[:, 0] + np.log(s[:, 0])
    losses = lse - logits[np.arange(logits.shape[0]), targets]
    return losses, probs


def layernorm_rows_numpy(x, gain, bias, eps):
    mu = np.mean(x, axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain + bias
    return y, xhat, rstd[:, 0]


def layernorm_rows_bwd_numpy(xhat, rstd, gain, gy):
    dxhat = gy * gain
    m1 = np.mean(dxhat, axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    gx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    ggain = np.sum(gy * xhat, axis=0)
    gbias = np.sum(gy, axis=0)
    return gx, ggain, gbias


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_numpy(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_bwd_numpy(x, g):
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def adamw_update_numpy(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p)


def embedding_grad_numpy(out, ids, g):
    np.add.at(out, ids, g)


def longest_match_numpy(x, y, ilo, ihi, jlo, jhi):
    best_i, best_j, best_k = ilo, jlo, 0
    n = jhi - jlo
    if n <= 0 or ihi <= ilo:
        return best_i, best_j, best_k
    yseg = y[jlo:jhi]
    prev = np.zeros(n, dtype=np.int64)
    shifted = np.empty(n, dtype=np.int64)
    for i in range(ilo, ihi):
        shifted[0] = 0
        shifted[1:] = prev[:-1]
        cur = np.where(yseg == x[i], shifted + 1, 0)
        k = int(cur.max())
        if k > best_k:
            jj = int(np.argmax(cur))
            best_k = k
            best_i = i - k + 1
            best_j = jlo + jj - k + 1
        prev = cur
    return best_i, best_j, best_k


def bpe_merge_pass_numpy(ids, a, b, new_id):
    """One greedy left-to-right merge pass over a (possibly separator-laden) id array."""
    if ids.size < 2:
        return ids
    m = (ids[:-1] == a) & (ids[1:] == b)
    if not m.any():
        return ids
    idx = np.arange(m.size)
    starts = m & ~np.concatenate(([False], m[:-1]))
    start_idx = np.maximum.accumulate(np.where(starts, idx, -1))
    keep = m & ((idx - start_idx) % 2 == 0)
    pos = np.flatnonzero(keep)
    out = ids.copy()
    out[pos] = new_id
    return np.delete(out, pos + 1)


def bpe_encode_numpy(ids, merges):
    for mi in range(merges.shape[0]):
        ids = bpe_merge_pass_numpy(ids, merges[mi, 0], merges[mi, 1], merges[mi, 2])
    return ids


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def softmax_rows_numba(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = -np.inf
            for c in range(cols):
                if x[r, c] > m:
                    m = x[r, c]
            if not np.isfinite(m):
                m = 0.0
            s = 0.0
            for c in range(cols):
                e = np.exp(x[r, c] - m)
                out[r, c] = e
                s += e
            for c in range(cols):
                out[r, c] /= s
        return out

    @njit(cache=True)
    def softmax_rows_bwd_numba(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += g[r, c] * y[r, c]
            for c in range(cols):
                out[r, c] = (g[r, c] - dot) * y[r, c]
        return out

    @njit(cache=True)
    def cross_entropy_rows_numba(logits, targets):
        rows, cols = logits.shape
        probs = np.empty_like(logits)
        losses = np.empty(rows, dtype=logits.dtype)
        for r in range(rows):
            m = -np.inf
            for c in range(cols):
                if logits[r, c] > m:
                    m = logits[r, c]
            s = 0.0
            for c in range(cols):
                e = np.exp(logits[r, c] - m)
                probs[r, c] = e
                s += e
            for c in range(cols):
                probs[r, c] /= s
            losses[r] = m + np.log(s) - logits[r, targets[r]]
        return losses, probs

    @njit(cache=True)
    def layernorm_rows_numba(x, gain, bias, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for c in range(cols):
                mu += x[r, c]
            mu /= cols
            var = 0.0
            for c in range(cols):
                d = x[r, c] - mu
                var += d * d
            var /= cols
            rs = 1.0 / np.sqrt(var + eps)
            rstd[r] = rs
            for c in range(cols):
                h = (x[r, c] - mu) * rs
                xhat[r, c] = h
                y[r, c] = h * gain[c] + bias[c]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_rows_bwd_numba(xhat, rstd, gain, gy):
        rows, cols = xhat.shape
        gx = np.empty_like(xhat)
        ggain = np.zeros(cols, dtype=xhat.dtype)
        gbias = np.zeros(cols, dtype=xhat.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for c in range(cols):
                d = gy[r, c] * gain[c]
                m1 += d
                m2 += d * xhat[r, c]
            m1 /= cols
            m2 /= cols
            for c in range(cols):
                d = gy[r, c] * gain[c]
                gx[r, c] = (d - m1 - xhat[r, c] * m2) * rstd[r]
                ggain[c] += gy[r, c] * xhat[r, c]
                gbias[c] += gy[r, c]
        return gx, ggain, gbias

    @njit(cache=True)
    def gelu_numba(x):
        out = np.empty_like(x)
        for i in range(x.size):
            out[i] = 0.5 * x[i] * (1.0 + math.erf(x[i] / _SQRT2))
        return out

    @njit(cache=True)
    def gelu_bwd_numba(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            cdf = 0.5 * (1.0 + math.erf(x[i] / _SQRT2))
            pdf = np.exp(-0.5 * x[i] * x[i]) * _INV_SQRT_2PI
            out[i] = g[i] * (cdf + x[i] * pdf)
        return out

    @njit(cache=True)
    def adamw_update_numba(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
        for i in range(p.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * ((mi / bc1) / (np.sqrt(vi / bc2) + eps) + wd * p[i])

    @njit(cache=True)
    def embedding_grad_numba(out, ids, g):
        n, h = g.shape
        for i in range(n):
            r = ids[i]
            for c in range(h):
                out[r, c] += g[i, c]

    @njit(cache=True)
    def longest_match_numba(x, y, ilo, ihi, jlo, jhi):
        best_i, best_j, best_k = ilo, jlo, 0
        n = jhi - jlo
        if n <= 0 or ihi <= ilo:
            return best_i, best_j, best_k
        prev = np.zeros(n, dtype=np.int64)
        cur = np.zeros(n, dtype=np.int64)
        for i in range(ilo, ihi):
            xi = x[i]
            for jj in range(n):
                if y[jlo + jj] == xi:
                    k = prev[jj - 1] + 1 if jj > 0 else 1
                    cur[jj] = k
                    if k > best_k:
                        best_k = k
                        best_i = i - k + 1
                        best_j = jlo + jj - k + 1
                else:
                    cur[jj] = 0
            prev, cur = cur, prev
        return best_i, best_j, best_k

    @njit(cache=True)
    def bpe_encode_numba(ids, merges):
        n = ids.size
        out = ids.copy()
        for mi in range(merges.shape[0]):
            a = merges[mi, 0]
            b = merges[mi, 1]
            nid = merges[mi, 2]
            if n < 2:
                break
            w = 0
            r = 0
            while r < n:
                if r < n - 1 and out[r] == a and out[r + 1] == b:
                    out[w] = nid
                    r += 2
                else:
                    out[w] = out[r]
                    r += 1
                w += 1
            n = w
        return out[:n].copy()

else:  # pragma: no cover - exercised via EDITFIX_NO_NUMBA runs
    softmax_rows_numba = None
    softmax_rows_bwd_numba = None
    cross_entropy_rows_numba = None
    layernorm_rows_numba = None
    layernorm_rows_bwd_numba = None
    gelu_numba = None
    gelu_bwd_numba = None
    adamw_update_numba = None
    embedding_grad_numba = None
    longest_match_numba = None
    bpe_encode_numba = None


if USE_NUMBA:
    # Kernels dominated by scalar transcendentals (exp/log per element) lose
    # to numpy's vectorized versions without SVML, so those stay on numpy even
    # when numba is active; see benchmarks/bench_kernels.py for the numbers.
    softmax_rows = softmax_rows_numpy
    softmax_rows_bwd = softmax_rows_bwd_numba
    cross_entropy_rows = cross_entropy_rows_numpy
    layernorm_rows = layernorm_rows_numba
    layernorm_rows_bwd = layernorm_rows_bwd_numba
    gelu = gelu_numba
    gelu_bwd = gelu_bwd_numpy
    adamw_update = adamw_update_numpy
    embedding_grad = embedding_grad_numba
    longest_match = longest_match_numba
    bpe_encode = bpe_encode_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_bwd = softmax_rows_bwd_numpy
    cross_entropy_rows = cross_entropy_rows_numpy
    layernorm_rows = layernorm_rows_numpy
    layernorm_rows_bwd = layernorm_rows_bwd_numpy
    gelu = gelu_numpy
    gelu_bwd = gelu_bwd_numpy
    adamw_update = adamw_update_numpy
    embedding_grad = embedding_grad_numpy
    longest_match = longest_match_numpy
    bpe_encode = bpe_encode_numpy


def warmup():
    """Force-compile the numba kernels on tiny inputs (no-op on the numpy path)."""
    x = np.array([[0.1, -0.2, 0.3]], dtype=np.float64)
    y = softmax_rows(x)
    softmax_rows_bwd(y, x)
    cross_entropy_rows(x, np.array([0], dtype=np.int64))
    g = np.ones(3, dtype=np.float64)
    yy, xh, rs = layernorm_rows(x, g, np.zeros(3), 1e-5)
    layernorm_rows_bwd(xh, rs, g, yy)
    gelu(x.ravel())
    gelu_bwd(x.ravel(), g)
    p = np.zeros(3)
    adamw_update(p, g, np.zeros(3), np.zeros(3), 0.0, 0.9, 0.999, 1e-8, 0.0, 0.1, 0.001)
    embedding_grad(np.zeros((2, 3)), np.array([0, 1], dtype=np.int64), np.ones((2, 3)))
    a = np.array([1, 2, 3], dtype=np.int64)
    longest_match(a, a, 0, 3, 0, 3)
    bpe_encode(a, np.array([[1, 2, 9]], dtype=np.int64))
