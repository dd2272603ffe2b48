"""Synthetic tasks: the random-MLP prior, concentric circles, and splitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError


class DataError(ValueError):
    """A dataset violates an ingestion or splitting requirement."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    cat_mask: np.ndarray | None = None
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cat_mask is None:
            self.cat_mask = np.zeros(self.features.shape[1], dtype=bool)
        if len(self.features) != len(self.labels):
            raise DataError("features and labels differ in length")

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, suffix: str = "") -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.cat_mask, self.name + suffix, self.provenance)


@dataclass(frozen=True)
class PriorConfig:
    dims: tuple[int, int] = (2, 20)
    depth: tuple[int, int] = (1, 4)
    width: tuple[int, int] = (4, 64)
    classes: tuple[int, int] = (2, 10)
    size: tuple[int, int] = (64, 576)
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "depth", "width", "classes", "size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ContractError(f"prior range {name}={lo}..{hi} is empty")
        if self.classes[0] < 2:
            raise ContractError("prior tasks need at least 2 classes")
        if self.noise_scale < 0:
            raise ContractError("noise_scale must be >= 0")


def _mlp_scores(rng: np.random.Generator, x: np.ndarray, depth: int, width: int) -> np.ndarray:
    h = x
    for _ in range(depth):
        w = rng.standard_normal((h.shape[1], width)) / np.sqrt(h.shape[1])
        b = rng.standard_normal(width) * 0.5
        h = np.tanh(h @ w + b)
    w = rng.standard_normal((h.shape[1], 1)) / np.sqrt(h.shape[1])
    return (h @ w)[:, 0]


def quantile_labels(scores: np.ndarray, n_classes: int) -> np.ndarray:
    """Bin scores into ``n_classes`` equal-count bins by rank."""
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[np.argsort(scores, kind="stable")] = np.arange(len(scores))
    return ranks * n_classes // len(scores)


def gen_prior_task(config: PriorConfig, seed: int, size: int | None = None) -> Dataset:
    """Sample one classification task from the random-network prior.

    Inputs are standard normal; one output unit of a randomly initialised
    tanh MLP plus Gaussian noise is binned into classes by quantiles, and
    the bins are assigned to class indices in random order.
    """
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        D = int(rng.integers(config.dims[0], config.dims[1] + 1))
        depth = int(rng.integers(config.depth[0], config.depth[1] + 1))
        width = int(rng.integers(config.width[0], config.width[1] + 1))
        C = int(rng.integers(config.classes[0], config.classes[1] + 1))
        n = size if size is not None else int(rng.integers(config.size[0], config.size[1] + 1))
        if n < C:
            raise ContractError(f"task size {n} smaller than class count {C}")
        x = rng.standard_normal((n, D))
        s = _mlp_scores(rng, x, depth, width)
        sd = s.std()
        if not np.isfinite(sd) or sd < 1e-12:
            continue
        s = s + rng.standard_normal(n) * sd * config.noise_scale * rng.uniform()
        labels = rng.permutation(C)[quantile_labels(s, C)]
        meta = {"generator": "prior", "seed": seed, "attempt": attempt, "D": D, "depth": depth, "width": width, "C": C}
        return Dataset(x, labels, name=f"prior-{seed}", provenance=meta)
    raise DataError(f"prior produced only degenerate tasks for seed {seed}")


def gen_circles(n: int, pairs: int, noise_std: float = 0.01, seed: int = 0) -> Dataset:
    """``2*pairs`` concentric rings with alternating labels.

    Ring j has radius (j+1)/(2*pairs) and label j mod 2; points are uniform
    in angle with Gaussian radial noise. Leftover points go to inner rings.
    """
    if pairs < 1 or n < 4 * pairs:
        raise ContractError("need pairs >= 1 and n >= 4 * pairs")
    rng = np.random.default_rng(seed)
    rings = 2 * pairs
    counts = np.full(rings, n // rings)
    counts[: n % rings] += 1
    ring = np.repeat(np.arange(rings), counts)
    radius = (ring + 1) / rings + rng.normal(0.0, noise_std, n) if noise_std > 0 else (ring + 1) / rings
    angle = rng.uniform(0.0, 2 * np.pi, n)
    x = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    meta = {"generator": "circles", "pairs": pairs, "noise_std": noise_std, "seed": seed}
    return Dataset(x, ring % 2, name=f"circles-p{pairs}-s{seed}", provenance=meta)


def _allocate(counts: np.ndarray, target: int) -> np.ndarray:
    """Per-class split sizes: at least one each, the rest by largest remainder."""
    quota = counts * target / counts.sum()
    alloc = np.maximum(np.floor(quota).astype(np.int64), 1)
    while alloc.sum() > target:
        over = np.flatnonzero(alloc > 1)
        if over.size == 0:
            break
        j = over[np.argmax((alloc - quota)[over])]
        alloc[j] -= 1
    rem = quota - alloc
    while alloc.sum() < target:
        j = int(np.argmax(rem))
        alloc[j] += 1
        rem[j] -= 1
    return alloc


def split_dataset(ds: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/validation/test split with every class in every part."""
    n = len(ds)
    classes, counts = np.unique(ds.labels, return_counts=True)
    r = np.asarray(ratios, dtype=np.float64) / np.sum(ratios)
    n_val = int(round(n * r[1]))
    n_test = int(round(n * r[2]))
    for c, m in zip(classes, counts):
        if m < 3:
            raise DataError(f"class {c} has {m} rows; every split needs at least one")
    if n_val < len(classes) or n_test < len(classes):
        raise DataError(f"{n} rows cannot place each of {len(classes)} classes in every split")
    val_alloc = _allocate(counts, n_val)
    test_alloc = _allocate(counts, n_test)
    for c, m, a, b in zip(classes, counts, val_alloc, test_alloc):
        if m - a - b < 1:
            raise DataError(f"class {c} has no rows left for the training split")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c, a, b in zip(classes, val_alloc, test_alloc):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        parts[1].append(idx[:a])
        parts[2].append(idx[a : a + b])
        parts[0].append(idx[a + b :])
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return ds.subset(train, "/train"), ds.subset(val, "/val"), ds.subset(test, "/test")
