"""Hot elementwise and search kernels.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. ``LOCALICL_NUMBA=0`` in the environment (read at import time)
selects the numpy path; so does a missing numba install. Both paths
compute the same quantities with sequential per-row reductions, so they
agree to rounding, and each is deterministic on its own.

All functions take 2-D C-contiguous float64 arrays (rows, features).
"""

from __future__ import annotations

import math
import os

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

try:  # pragma: no cover - exercised implicitly
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("LOCALICL_NUMBA", "1").lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def np_layer_norm_fwd(x, gain, shift):
    d = x.shape[1]
    mean = np.zeros(x.shape[0])
    for j in range(d):
        mean += x[:, j]
    mean /= d
    xc = x - mean[:, None]
    var = np.zeros(x.shape[0])
    for j in range(d):
        var += xc[:, j] * xc[:, j]
    var /= d
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd[:, None]
    return xhat * gain + shift, xhat, rstd


def np_layer_norm_bwd(dout, xhat, rstd, gain):
    d = xhat.shape[1]
    g = dout * gain
    s1 = np.zeros(xhat.shape[0])
    s2 = np.zeros(xhat.shape[0])
    for j in range(d):
        s1 += g[:, j]
        s2 += g[:, j] * xhat[:, j]
    dx = (g - (s1[:, None] + xhat * s2[:, None]) / d) * rstd[:, None]
    dgain = (dout * xhat).sum(axis=0)
    dshift = dout.sum(axis=0)
    return dx, dgain, dshift


def np_gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def np_gelu_bwd(dout, x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def np_softmax_rows(x, mask):
    """Row softmax; ``mask`` (same shape, bool) marks allowed entries or is None."""
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        m = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x, m) - m), 0.0)
    s = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        s += e[:, j]
    return e / s[:, None]


def np_sq_distances(queries, points):
    """Squared Euclidean distances accumulated feature by feature."""
    out = np.zeros((queries.shape[0], points.shape[0]))
    for j in range(points.shape[1]):
        diff = queries[:, j, None] - points[None, :, j]
        out += diff * diff
    return out


def np_knn_select(dist, k):
    """Indices of the k smallest entries per row, ordered by (distance, index)."""
    n = dist.shape[1]
    out = np.empty((dist.shape[0], k), dtype=np.int64)
    for r in range(dist.shape[0]):
        row = dist[r]
        if k < n:
            kth = np.partition(row, k - 1)[k - 1]
            cand = np.flatnonzero(row <= kth)
        else:
            cand = np.arange(n)
        order = np.lexsort((cand, row[cand]))
        out[r] = cand[order[:k]]
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_layer_norm_fwd(x, gain, shift):
        n, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + LN_EPS)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                out[i, j] = h * gain[j] + shift[j]
        return out, xhat, rstd

    @njit(cache=True)
    def nb_layer_norm_bwd(dout, xhat, rstd, gain):
        n, d = xhat.shape
        dx = np.empty_like(xhat)
        dgain = np.zeros(d)
        dshift = np.zeros(d)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dout[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
            for j in range(d):
                g = dout[i, j] * gain[j]
                dx[i, j] = (g - (s1 + xhat[i, j] * s2) / d) * rstd[i]
        for i in range(n):
            for j in range(d):
                dgain[j] += dout[i, j] * xhat[i, j]
                dshift[j] += dout[i, j]
        return dx, dgain, dshift

    @njit(cache=True)
    def nb_gelu_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out

    @njit(cache=True)
    def nb_gelu_bwd(dout, x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
                dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                out[i, j] = dout[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out

    @njit(cache=True)
    def _nb_softmax_rows(x, mask, use_mask):
        n, d = x.shape
        out = np.zeros_like(x)
        for i in range(n):
            m = -np.inf
            for j in range(d):
                if (not use_mask or mask[i, j]) and x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                if not use_mask or mask[i, j]:
                    e = math.exp(x[i, j] - m)
                    out[i, j] = e
                    s += e
            for j in range(d):
                out[i, j] /= s
        return out

    def nb_softmax_rows(x, mask):
        if mask is None:
            return _nb_softmax_rows(x, np.ones((1, 1), dtype=np.bool_), False)
        return _nb_softmax_rows(x, np.ascontiguousarray(mask, dtype=np.bool_), True)

    @njit(cache=True)
    def nb_sq_distances(queries, points):
        m, e = queries.shape
        n = points.shape[0]
        out = np.zeros((m, n))
        for q in range(m):
            for i in range(n):
                acc = 0.0
                for j in range(e):
                    diff = queries[q, j] - points[i, j]
                    acc += diff * diff
                out[q, i] = acc
        return out

    @njit(cache=True, inline="always")
    def _heap_less(d1, i1, d2, i2):
        return d1 < d2 or (d1 == d2 and i1 < i2)

    @njit(cache=True)
    def _sift_down(hd, hi, pos, size):
        # max-heap on (distance, index)
        while True:
            left = 2 * pos + 1
            if left >= size:
                return
            big = left
            right = left + 1
            if right < size and _heap_less(hd[left], hi[left], hd[right], hi[right]):
                big = right
            if not _heap_less(hd[pos], hi[pos], hd[big], hi[big]):
                return
            hd[pos], hd[big] = hd[big], hd[pos]
            hi[pos], hi[big] = hi[big], hi[pos]
            pos = big

    @njit(cache=True)
    def nb_knn_select(dist, k):
        m, n = dist.shape
        out = np.empty((m, k), dtype=np.int64)
        hd = np.empty(k)
        hi = np.empty(k, dtype=np.int64)
        for r in range(m):
            for j in range(k):
                hd[j] = dist[r, j]
                hi[j] = j
            for j in range(k // 2 - 1, -1, -1):
                _sift_down(hd, hi, j, k)
            for j in range(k, n):
                d = dist[r, j]
                # a later index never beats an equal distance already held
                if d < hd[0]:
                    hd[0] = d
                    hi[0] = j
                    _sift_down(hd, hi, 0, k)
            for size in range(k, 0, -1):
                out[r, size - 1] = hi[0]
                hd[0] = hd[size - 1]
                hi[0] = hi[size - 1]
                _sift_down(hd, hi, 0, size - 1)
        return out


HEAP_K_MAX = 64


def _knn_select_mixed(dist, k):
    # the heap is O(n log k) but branchy; numpy's introselect wins past small k
    return nb_knn_select(dist, k) if k <= HEAP_K_MAX else np_knn_select(dist, k)


if USE_NUMBA:
    layer_norm_fwd = nb_layer_norm_fwd
    layer_norm_bwd = nb_layer_norm_bwd
    # numpy's vectorized tanh beats a scalar loop, so GELU stays on numpy
    gelu_fwd = np_gelu_fwd
    gelu_bwd = np_gelu_bwd
    softmax_rows = nb_softmax_rows
    sq_distances = nb_sq_distances
    knn_select = _knn_select_mixed
else:
    layer_norm_fwd = np_layer_norm_fwd
    layer_norm_bwd = np_layer_norm_bwd
    gelu_fwd = np_gelu_fwd
    gelu_bwd = np_gelu_bwd
    softmax_rows = np_softmax_rows
    sq_distances = np_sq_distances
    knn_select = np_knn_select


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
