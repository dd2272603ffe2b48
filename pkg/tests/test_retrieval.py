import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localicl.model import FeatureEncoder
from localicl.numerics import ContractError
from localicl.retrieval import (
    build_index,
    build_local_context,
    build_shared_context_batch,
    k_rule,
    knn_query,
    knn_query_batch,
)


def brute_force_knn(emb, point, k, exclude=()):
    """Oracle: full sort of (distance, id) pairs, computed in plain Python."""
    pairs = []
    for i, row in enumerate(emb):
        if i in exclude:
            continue
        d = 0.0
        for a, b in zip(point, row):
            d += (a - b) * (a - b)
        pairs.append((d, i))
    pairs.sort()
    return [i for _, i in pairs[:k]]


def random_instance(rng, kind):
    n = int(rng.integers(2, 201))
    if kind == "raw":
        emb = rng.normal(size=(n, int(rng.integers(1, 8))))
    else:
        X = np.column_stack([rng.normal(size=n), rng.integers(0, 4, n), rng.normal(size=n)])
        emb = FeatureEncoder.fit(X, [False, True, False], one_hot=True).transform(X)
    if n > 3:
        dup = rng.integers(0, n, size=max(1, n // 10))
        emb[dup[1:]] = emb[dup[0]]
    return emb


@pytest.mark.parametrize("kind", ["raw", "one_hot"])
def test_knn_matches_brute_force(kind):
    rng = np.random.default_rng(0 if kind == "raw" else 1)
    for _ in range(100):
        emb = random_instance(rng, kind)
        index = build_index(emb, kind=kind)
        k = int(rng.integers(1, len(emb) + 1))
        point = emb[rng.integers(len(emb))] if rng.random() < 0.5 else rng.normal(size=emb.shape[1])
        assert knn_query(index, point, k).tolist() == brute_force_knn(emb, point, k)


def test_knn_worked_example():
    index = build_index(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]))
    assert knn_query(index, [0.1, 0.0], 2).tolist() == [0, 1]


def test_knn_exact_duplicate_picks_smallest_id():
    emb = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
    assert knn_query(build_index(emb), emb[2], 1).tolist() == [0]


def test_knn_k_equals_n_sorted():
    emb = np.array([[3.0], [1.0], [2.0], [0.0]])
    assert knn_query(build_index(emb), [0.0], 4).tolist() == [3, 1, 2, 0]


def test_knn_exclusion_and_size_check():
    emb = np.arange(5.0)[:, None]
    index = build_index(emb)
    assert knn_query(index, [2.0], 2, exclude=[2]).tolist() == [1, 3]
    with pytest.raises(ContractError):
        knn_query(index, [2.0], 5, exclude=[2])


def test_batch_query_agrees_with_single():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(50, 3))
    index = build_index(emb)
    pts = rng.normal(size=(7, 3))
    batch = knn_query_batch(index, pts, 6)
    for p, row in zip(pts, batch):
        assert row.tolist() == knn_query(index, p, 6).tolist()


def test_one_hot_width_limit():
    with pytest.raises(ContractError):
        build_index(np.zeros((3, 101)), kind="one_hot")


def test_local_context_whole_set():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(6, 2)), np.arange(6) % 2
    ctx_x, ctx_y = build_local_context(build_index(X), X, y, rng.normal(size=2), 6)
    assert sorted(map(tuple, ctx_x)) == sorted(map(tuple, X))
    assert sorted(ctx_y.tolist()) == sorted(y.tolist())


def test_local_context_excludes_query_row():
    X = np.array([[0.0], [1.0], [1.5], [3.0], [4.2], [2.1]])
    ctx_x, _ = build_local_context(build_index(X), X, np.zeros(6, int), X[5], 2, query_id=5)
    # distances from 2.1: 1.5 -> 0.6, 3.0 -> 0.9, 1.0 -> 1.1
    np.testing.assert_array_equal(ctx_x[:, 0], [1.5, 3.0])


def test_local_context_keeps_duplicates():
    X = np.array([[0.0], [0.0], [0.0], [9.0]])
    _, ctx_y = build_local_context(build_index(X), X, np.array([0, 1, 2, 3]), [0.0], 3)
    assert sorted(ctx_y.tolist()) == [0, 1, 2]


# -- k rule -------------------------------------------------------------------


@pytest.mark.parametrize("n,k_max,expected", [(10000, 1000, 1000), (16, 1000, 16), (100, 1000, 100), (3200, 1000, 566)])
def test_k_rule_table(n, k_max, expected):
    assert k_rule(n, k_max) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**6), st.integers(1, 5000))
def test_k_rule_monotone_and_capped(n, k_max):
    k = k_rule(n, k_max)
    assert 1 <= k <= min(n, k_max)
    assert k_rule(n + 1, k_max) >= k


# -- shared context batches ---------------------------------------------------


def test_shared_batch_on_a_line():
    X = np.arange(10.0)[:, None]
    index = build_index(X)
    # find a seed whose anchor is at the end of the line
    for seed in range(200):
        batch = build_shared_context_batch(index, 1, 4, 2, seed)
        if batch.anchors[0] == 0:
            break
    assert batch.anchors[0] == 0
    members = sorted(batch.context_ids[0].tolist() + batch.query_ids[0].tolist())
    assert members == [1, 2, 3, 4, 5, 6]
    assert batch.context_ids.shape == (1, 4) and batch.query_ids.shape == (1, 2)


def test_shared_batch_membership_against_oracle():
    rng = np.random.default_rng(7)
    for inst in range(50):
        n = int(rng.integers(12, 120))
        emb = rng.normal(size=(n, int(rng.integers(1, 5))))
        index = build_index(emb)
        B = int(rng.integers(1, 4))
        L_qy = int(rng.integers(1, 4))
        L_ctx = int(rng.integers(1, n - L_qy - 1))
        batch = build_shared_context_batch(index, B, L_ctx, L_qy, inst)
        assert len(set(batch.anchors.tolist())) == B
        for b in range(B):
            ids = batch.context_ids[b].tolist() + batch.query_ids[b].tolist()
            assert len(set(ids)) == len(ids)
            a = int(batch.anchors[b])
            assert a not in ids
            assert sorted(ids) == sorted(brute_force_knn(emb, emb[a], L_ctx + L_qy, exclude={a}))


def test_shared_batch_deterministic_and_size_checked():
    emb = np.random.default_rng(0).normal(size=(30, 2))
    index = build_index(emb)
    a = build_shared_context_batch(index, 2, 8, 4, 11)
    b = build_shared_context_batch(index, 2, 8, 4, 11)
    for x, y in zip((a.anchors, a.context_ids, a.query_ids), (b.anchors, b.context_ids, b.query_ids)):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(ContractError):
        build_shared_context_batch(index, 1, 25, 5, 0)
