import numpy as np
import pytest

from localicl.datagen import DataError, Dataset, PriorConfig, gen_circles, gen_prior_task, split_dataset
from localicl.evaluation import accuracy, knn_baseline_predict
from localicl.numerics import ContractError
from localicl.retrieval import build_index


def test_prior_task_deterministic():
    a = gen_prior_task(PriorConfig(), 17)
    b = gen_prior_task(PriorConfig(), 17)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


@pytest.mark.parametrize("seed", range(30))
def test_prior_task_balanced_classes(seed):
    cfg = PriorConfig()
    ds = gen_prior_task(cfg, seed)
    n, C = len(ds), ds.n_classes
    assert cfg.classes[0] <= C <= cfg.classes[1]
    counts = np.bincount(ds.labels, minlength=C)
    assert counts.min() >= 1
    assert np.all(np.abs(counts - n / C) <= 1)
    assert counts.max() / n <= 1 / C + 2 / n
    assert cfg.dims[0] <= ds.features.shape[1] <= cfg.dims[1]


def test_prior_config_validation():
    with pytest.raises(ContractError):
        PriorConfig(classes=(1, 3))
    with pytest.raises(ContractError):
        PriorConfig(size=(100, 50))


def test_circles_clean_two_rings():
    ds = gen_circles(8, 1, 0.0, 0)
    r = np.hypot(*ds.features.T)
    # radii (j+1)/(2*pairs): outer ring at 1
    np.testing.assert_allclose(np.sort(np.unique(np.round(r, 12))), [0.5, 1.0])
    np.testing.assert_array_equal(ds.labels[np.isclose(r, 0.5)], 0)
    np.testing.assert_array_equal(ds.labels[np.isclose(r, 1.0)], 1)


def test_circles_three_pairs_alternate():
    ds = gen_circles(600, 3, 0.0, 1)
    r = np.hypot(*ds.features.T)
    radii = np.unique(np.round(r, 9))
    assert radii.size == 6
    for j, rad in enumerate(radii):
        assert np.all(ds.labels[np.isclose(r, rad)] == j % 2)


def test_circles_remainder_to_inner_rings():
    ds = gen_circles(1003, 3, 0.0, 2)
    counts = np.bincount(ds.labels)
    assert abs(counts[0] - counts[1]) <= 3


@pytest.mark.parametrize("pairs", [1, 2, 3, 4])
def test_circles_noise_free_one_nn_is_perfect(pairs):
    train = gen_circles(4000, pairs, 0.0, 10 + pairs)  # dense enough that no angular gap exceeds the ring spacing
    test = gen_circles(1000, pairs, 0.0, 100 + pairs)
    probs = knn_baseline_predict(build_index(train.features), train.labels, test.features, 1, 2)
    assert accuracy(probs, test.labels) == 1.0


def test_split_sizes_and_coverage():
    ds = Dataset(np.random.default_rng(0).normal(size=(100, 3)), np.arange(100) % 3)
    train, val, test = split_dataset(ds, seed=4)
    assert (len(train), len(val), len(test)) == (80, 10, 10)
    for part in (train, val, test):
        assert set(part.labels.tolist()) == {0, 1, 2}
    all_rows = np.concatenate([train.features, val.features, test.features])
    assert len(np.unique(all_rows, axis=0)) == 100


def test_split_deterministic():
    ds = gen_circles(200, 2, 0.01, 3)
    a = split_dataset(ds, seed=9)
    b = split_dataset(ds, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.features, y.features)


def test_split_names_missing_class():
    ds = Dataset(np.zeros((40, 1)), np.r_[np.zeros(38, int), [1, 1]])
    with pytest.raises(DataError, match="class 1"):
        split_dataset(ds)
