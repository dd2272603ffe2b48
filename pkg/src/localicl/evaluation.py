"""Metrics, aggregate statistics and the dataset-binning analyses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .numerics import ContractError
from .retrieval import RetrievalIndex, knn_query_batch

METRICS = ("auc", "accuracy", "f1")


def auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auc_binary needs both classes present")
    # midranks turn ties into half-counts
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_multiclass(probs, labels) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if present.size < 2:
        raise ContractError("auc needs at least two classes present")
    if probs.shape[1] == 2:
        return auc_binary(probs[:, 1], labels == 1)
    return float(np.mean([auc_binary(probs[:, c], labels == c) for c in present]))


def predicted_class(probs) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the smaller class index
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(probs, labels) -> float:
    return float(np.mean(predicted_class(probs) == np.asarray(labels)))


def f1_macro(probs, labels) -> float:
    """Macro F1 over all classes in the probability matrix; classes never
    predicted and absent from the labels score 0."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    pred = predicted_class(probs)
    scores = []
    for c in range(probs.shape[1]):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def all_metrics(probs, labels) -> dict[str, float]:
    return {"auc": auc_multiclass(probs, labels), "accuracy": accuracy(probs, labels), "f1": f1_macro(probs, labels)}


def _mean(v: np.ndarray) -> float:
    # shifted by the first value so constant inputs average to themselves exactly
    return float(v[0] + np.mean(v - v[0]))


def iqm(values) -> float:
    """Interquartile mean: drop floor(n/4) values from each end, average the rest."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ContractError("iqm of an empty vector")
    cut = v.size // 4
    return _mean(v[cut : v.size - cut])


_STATISTICS = {"iqm": iqm, "mean": lambda v: _mean(np.asarray(v, dtype=np.float64).ravel())}


def stratified_bootstrap_ci(per_dataset_scores, statistic: str = "iqm", n_resamples: int = 2000, alpha: float = 0.05,
                            seed: int = 0) -> tuple[float, float]:
    """Percentile CI; each resample redraws fold scores within every dataset."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in per_dataset_scores]
    if not groups or any(g.size == 0 for g in groups):
        raise ContractError("bootstrap needs at least one non-empty dataset")
    stat = _STATISTICS[statistic]
    rng = np.random.default_rng(seed)
    draws = np.empty(n_resamples)
    for r in range(n_resamples):
        pooled = np.concatenate([g[rng.integers(0, g.size, g.size)] for g in groups])
        draws[r] = stat(pooled)
    lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)

    def add(self, dataset: str, fold: int, method: str, metrics: dict[str, float]) -> None:
        for name in METRICS:
            if name in metrics:
                self.records.append({"dataset": dataset, "fold": fold, "method": method, "metric": name, "value": float(metrics[name])})

    def scores(self, method: str, metric: str) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for r in self.records:
            if r["method"] == method and r["metric"] == metric:
                out.setdefault(r["dataset"], []).append(r["value"])
        return out

    def aggregates(self, n_resamples: int = 2000, seed: int = 0) -> list[dict]:
        """IQM and mean with stratified-bootstrap 95% intervals per (method, metric).

        Per-dataset fold scores are the bootstrap strata; the point
        statistics are over all pooled fold scores.
        """
        rows = []
        methods = sorted({r["method"] for r in self.records})
        for method in methods:
            for metric in METRICS:
                per_ds = self.scores(method, metric)
                if not per_ds:
                    continue
                groups = [per_ds[k] for k in sorted(per_ds)]
                pooled = np.concatenate(groups)
                row = {"method": method, "metric": metric, "n_datasets": len(groups)}
                for stat in ("iqm", "mean"):
                    lo, hi = stratified_bootstrap_ci(groups, stat, n_resamples, seed=seed)
                    row[stat] = _STATISTICS[stat](pooled)
                    row[f"{stat}_ci_low"] = lo
                    row[f"{stat}_ci_high"] = hi
                rows.append(row)
        return rows


@dataclass
class ScoreTable:
    """Mean AUC per (dataset, method) plus dataset sizes."""

    datasets: list[str]
    methods: list[str]
    auc: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        self.auc = np.asarray(self.auc, dtype=np.float64)
        self.sizes = np.asarray(self.sizes)
        if self.auc.shape != (len(self.datasets), len(self.methods)) or np.isnan(self.auc).any():
            raise ContractError("score table must be complete: one AUC per (dataset, method)")

    @classmethod
    def from_report(cls, report: EvalReport, sizes: dict[str, int], metric: str = "auc") -> ScoreTable:
        methods = sorted({r["method"] for r in report.records})
        datasets = sorted({r["dataset"] for r in report.records})
        table = np.full((len(datasets), len(methods)), np.nan)
        for j, m in enumerate(methods):
            for ds, vals in report.scores(m, metric).items():
                table[datasets.index(ds), j] = np.mean(vals)
        return cls(datasets, methods, table, np.array([sizes.get(d, 0) for d in datasets]))


def _relative_by_bin(table: ScoreTable, bins: np.ndarray, n_bins: int, reference: str) -> list[dict]:
    ref = table.methods.index(reference)
    out = []
    for b in range(n_bins):
        rows = np.flatnonzero(bins == b)
        entry = {"bin": b, "n_datasets": int(rows.size), "datasets": [table.datasets[i] for i in rows]}
        for j, m in enumerate(table.methods):
            entry[m] = float(table.auc[rows, j].mean() - table.auc[rows, ref].mean()) if rows.size else float("nan")
        out.append(entry)
    return out


def complexity_bins(table: ScoreTable, n_bins: int = 5, reference: str | None = None) -> list[dict]:
    """Bin datasets by AUC spread across methods; report mean AUC relative to ``reference``.

    Datasets are ordered by spread (ties by table order) and cut into
    ``n_bins`` contiguous groups of near-equal size.
    """
    if len(table.datasets) < n_bins:
        raise ContractError(f"need at least {n_bins} datasets for {n_bins} bins")
    spread = table.auc.max(axis=1) - table.auc.min(axis=1)
    order = np.argsort(spread, kind="stable")
    bins = np.empty(len(order), dtype=np.int64)
    bins[order] = np.arange(len(order)) * n_bins // len(order)
    out = _relative_by_bin(table, bins, n_bins, reference or table.methods[0])
    for entry in out:
        members = bins == entry["bin"]
        entry["complexity_low"] = float(spread[members].min())
        entry["complexity_high"] = float(spread[members].max())
    return out


def size_bins(table: ScoreTable, edges, reference: str | None = None) -> list[dict]:
    """Bin datasets by size with thresholds ``edges`` (bin b holds edges[b-1] <= n < edges[b])."""
    edges = list(edges)
    bins = np.searchsorted(np.asarray(edges), table.sizes, side="right")
    return _relative_by_bin(table, bins, len(edges) + 1, reference or table.methods[0])


def knn_baseline_predict(index: RetrievalIndex, train_y, query_emb, k: int, n_classes: int | None = None) -> np.ndarray:
    """Class frequencies among each query's k nearest training rows."""
    if k < 1:
        raise ContractError("k must be >= 1")
    train_y = np.asarray(train_y, dtype=np.int64)
    n_classes = int(train_y.max()) + 1 if n_classes is None else n_classes
    ids = knn_query_batch(index, query_emb, k)
    counts = np.zeros((len(ids), n_classes))
    for j in range(k):
        counts[np.arange(len(ids)), train_y[ids[:, j]]] += 1
    return counts / k
