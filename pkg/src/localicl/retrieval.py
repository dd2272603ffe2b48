"""Exact nearest-neighbour retrieval and local-context construction.

Distances are squared Euclidean on the standardized embedding; ties go to
the smaller row id, so results are deterministic under duplicated rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .numerics import ContractError

# distance matrix elements per block (32 MB of float64)
_BLOCK_ELEMS = 1 << 22


def k_rule(n_train: int, k_max: int) -> int:
    """Neighbour count: min(ceil(10 * sqrt(n_train)), k_max, n_train)."""
    if n_train < 1 or k_max < 1:
        raise ContractError("n_train and k_max must be >= 1")
    # isqrt keeps perfect squares exact (10 * sqrt(100) must be 100, not 100.00000000000001)
    r = math.isqrt(n_train)
    ten_root = 10 * r if r * r == n_train else math.ceil(10 * math.sqrt(n_train))
    return min(ten_root, k_max, n_train)


@dataclass(frozen=True)
class RetrievalIndex:
    embeddings: np.ndarray
    row_ids: np.ndarray
    embedding_kind: str = "raw"

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def build_index(embeddings, kind: str = "raw", row_ids=None) -> RetrievalIndex:
    emb = np.ascontiguousarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ContractError("embeddings must be a 2-D matrix")
    if kind not in ("raw", "one_hot"):
        raise ContractError(f"unknown embedding kind {kind!r}")
    if kind == "one_hot" and emb.shape[1] > 100:
        raise ContractError("one-hot embeddings are limited to 100 columns")
    ids = np.arange(len(emb)) if row_ids is None else np.asarray(row_ids, dtype=np.int64)
    return RetrievalIndex(emb, ids, kind)


def knn_query_batch(index: RetrievalIndex, points, k: int, exclude=None) -> np.ndarray:
    """Positions (0..N-1) of the k nearest rows for each point, nearest first.

    ``exclude`` is an optional per-point position to skip (-1 for none).
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    n = len(index)
    n_excl = 0 if exclude is None else int(np.any(np.asarray(exclude) >= 0))
    if not 1 <= k <= n - n_excl:
        raise ContractError(f"k={k} is not in [1, {n - n_excl}]")
    if pts.shape[1] != index.embeddings.shape[1]:
        raise ContractError("query width differs from index width")
    out = np.empty((len(pts), k), dtype=np.int64)
    step = max(1, _BLOCK_ELEMS // max(n, 1))
    for s in range(0, len(pts), step):
        dist = K.sq_distances(pts[s : s + step], index.embeddings)
        if exclude is not None:
            ex = np.asarray(exclude[s : s + step])
            rows = np.flatnonzero(ex >= 0)
            dist[rows, ex[rows]] = np.inf
        out[s : s + step] = K.knn_select(dist, k)
    return out


def knn_query(index: RetrievalIndex, point, k: int, exclude=None) -> np.ndarray:
    """Row ids of the k nearest rows to ``point``, sorted by (distance, id).

    ``exclude`` is an optional collection of row ids that may not be returned.
    """
    exclude = set() if exclude is None else {int(e) for e in exclude}
    n = len(index)
    if not 1 <= k <= n - len(exclude & set(index.row_ids.tolist())):
        raise ContractError(f"k={k} too large for {n} rows with {len(exclude)} excluded")
    pt = np.ascontiguousarray(np.reshape(point, (1, -1)), dtype=np.float64)
    dist = K.sq_distances(pt, index.embeddings)
    if exclude:
        dist[0, np.isin(index.row_ids, list(exclude))] = np.inf
    return index.row_ids[K.knn_select(dist, k)[0]]


def build_local_context(index: RetrievalIndex, train_x, train_y, query_point, k: int, query_id: int | None = None):
    """Features and labels of the query's k nearest training rows.

    When the query is itself training row ``query_id`` that row is left out.
    """
    ids = knn_query(index, query_point, k, None if query_id is None else [query_id])
    return np.asarray(train_x)[ids], np.asarray(train_y)[ids]


@dataclass(frozen=True)
class SharedContextBatch:
    anchors: np.ndarray
    context_ids: np.ndarray
    query_ids: np.ndarray


def build_shared_context_batch(index: RetrievalIndex, B: int, L_ctx: int, L_qy: int, seed) -> SharedContextBatch:
    """Anchor-centred batches where many queries share one local context.

    B anchors are drawn without replacement; each contributes its
    L_ctx + L_qy nearest neighbours (the anchor itself discarded), shuffled
    and split into a context block and a query block.
    """
    n = len(index)
    k = L_ctx + L_qy
    if B < 1 or L_ctx < 1 or L_qy < 1:
        raise ContractError("B, L_ctx and L_qy must be >= 1")
    if k > n - 1 or B > n:
        raise ContractError(f"dataset of {n} rows too small for B={B}, L_ctx+L_qy={k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    anchors = rng.choice(n, size=B, replace=False)
    nbrs = knn_query_batch(index, index.embeddings[anchors], k, exclude=anchors)
    for row in nbrs:
        rng.shuffle(row)
    return SharedContextBatch(anchors, nbrs[:, :L_ctx].copy(), nbrs[:, L_ctx:].copy())
