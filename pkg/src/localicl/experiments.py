"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ExperimentConfig
from .datagen import Dataset, DataError, gen_circles, gen_prior_task, split_dataset
from .evaluation import EvalReport, all_metrics, auc_multiclass, knn_baseline_predict
from .model import ModelParams, TaskView, predict, predict_chunked, predict_ensemble, predict_local, prepare_task
from .numerics import ContractError
from .retrieval import k_rule
from .training import TrainConfig, finetune

log = logging.getLogger(__name__)

METHODS = ("icl_full", "icl_knn", "icl_ensemble", "icl_chunked", "knn_baseline")


def n_workers() -> int:
    env = os.environ.get("LOCALICL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def fold_seed(master: int, dataset_index: int, fold: int) -> int:
    return int(np.random.SeedSequence([master, dataset_index, fold]).generate_state(1)[0])


def validate_dataset(ds: Dataset, params: ModelParams, embedding: str = "raw") -> None:
    """Reject datasets the model cannot take (too many classes or encoded features)."""
    cfg = params.config
    if ds.n_classes > cfg.C_max:
        raise DataError(f"{ds.name}: {ds.n_classes} classes exceed C_max={cfg.C_max}")
    if ds.features.shape[1] > cfg.D_max:
        raise DataError(f"{ds.name}: {ds.features.shape[1]} features exceed D_max={cfg.D_max}")
    if np.unique(ds.labels).size < 2:
        raise DataError(f"{ds.name}: single-class dataset")


def full_context_ids(n: int, cap: int, seed: int) -> np.ndarray:
    """All training rows, or a seeded random subset of ``cap`` when there are more."""
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, cap, replace=False))


def method_probs(method: str, params: ModelParams, task: TaskView, X_query, cfg: ExperimentConfig, seed: int) -> np.ndarray:
    q, emb = task.encode(X_query)
    n = len(task.labels)
    cap = params.config.L_ctx_max
    bs = cfg.eval.batch_size
    if method == "icl_full":
        ids = full_context_ids(n, cap, seed)
        return predict(params, task.features[ids], task.labels[ids], q, task.n_classes, batch_size=bs)
    if method == "icl_knn":
        k = min(k_rule(n, cfg.retrieval.k_max), cap)
        return predict_local(params, task, q, emb, k, batch_size=bs)
    if method == "icl_ensemble":
        ids = full_context_ids(n, cap, seed)
        return predict_ensemble(params, task.features[ids], task.labels[ids], q, task.n_classes,
                                n_members=cfg.eval.ensemble_members, seed=seed, n_features=task.n_features)
    if method == "icl_chunked":
        chunk = min(cfg.eval.chunk_size or cap, cap)
        return predict_chunked(params, task.features, task.labels, q, task.n_classes, chunk, seed=seed)
    if method == "knn_baseline":
        k = cfg.eval.knn_baseline_k or k_rule(n, cfg.retrieval.k_max)
        return knn_baseline_predict(task.index, task.labels, emb, min(k, n), task.n_classes)
    raise ContractError(f"unknown method {method!r}")


def evaluate_dataset(params: ModelParams, ds: Dataset, dataset_index: int, methods, cfg: ExperimentConfig) -> list[dict]:
    """Records for every fold and method on one dataset (test split metrics)."""
    report = EvalReport()
    for fold in range(cfg.eval.folds):
        seed = fold_seed(cfg.seed, dataset_index, fold)
        train, _, test = split_dataset(ds, seed=seed)
        task = prepare_task(train.features, train.labels, params.config, ds.cat_mask, cfg.retrieval.embedding,
                            n_classes=ds.n_classes)
        for method in methods:
            probs = method_probs(method, params, task, test.features, cfg, seed)
            report.add(ds.name, fold, method, all_metrics(probs, test.labels))
    return report.records


def evaluate_many(params: ModelParams, datasets, methods, cfg: ExperimentConfig):
    """Evaluate datasets concurrently; returns (report, skipped reasons)."""
    report = EvalReport()
    skipped = {}
    usable = []
    for i, ds in enumerate(datasets):
        try:
            validate_dataset(ds, params, cfg.retrieval.embedding)
            usable.append((i, ds))
        except DataError as exc:
            log.warning("skipping %s: %s", ds.name, exc)
            skipped[ds.name] = str(exc)

    def run(item):
        i, ds = item
        try:
            return evaluate_dataset(params, ds, i, methods, cfg), None
        except (DataError, ContractError) as exc:
            return [], (ds.name, str(exc))

    with ThreadPoolExecutor(max_workers=n_workers()) as pool:
        for recs, skip in pool.map(run, usable):
            report.records.extend(recs)
            if skip:
                log.warning("skipping %s: %s", *skip)
                skipped[skip[0]] = skip[1]
    return report, skipped


def circles_sweep(params: ModelParams, pairs_list, ks, seeds: int, n: int = 1000, noise_std: float = 0.01,
                  master_seed: int = 0, batch_size: int = 512) -> list[dict]:
    """Test AUC of full-context and k-NN-context prediction on concentric circles.

    Rows have ``k`` set to "full" for the full-context method. A k larger
    than the training split is clamped to it, which reproduces full context.
    """
    rows = []
    for pairs in pairs_list:
        for s in range(seeds):
            seed = fold_seed(master_seed, pairs, s)
            ds = gen_circles(n, pairs, noise_std, seed)
            train, _, test = split_dataset(ds, seed=seed)
            task = prepare_task(train.features, train.labels, params.config, n_classes=2)
            q, emb = task.encode(test.features)
            n_train = len(train)
            ids = full_context_ids(n_train, params.config.L_ctx_max, seed)
            full = predict(params, task.features[ids], task.labels[ids], q, 2, batch_size=batch_size)
            rows.append({"pairs": pairs, "k": "full", "seed": s, "auc": auc_multiclass(full, test.labels)})
            for k in ks:
                kk = min(int(k), n_train, params.config.L_ctx_max)
                probs = predict_local(params, task, q, emb, kk, batch_size=batch_size)
                rows.append({"pairs": pairs, "k": int(k), "seed": s, "auc": auc_multiclass(probs, test.labels)})
    return rows


def finetune_config(cfg: ExperimentConfig, mode: str) -> TrainConfig:
    f = cfg.train.finetune
    return TrainConfig(mode=mode, lr=f.lr, weight_decay=f.weight_decay, B=f.B, N_qy=f.N_qy, eval_every=f.eval_every,
                       patience=f.patience, max_steps=f.max_steps, k_max=cfg.retrieval.k_max, grad_clip=f.grad_clip,
                       seed=cfg.seed)


def finetune_run(params: ModelParams, ds: Dataset, cfg: ExperimentConfig, mode: str = "finetune_local",
                 split_seed: int | None = None):
    """Fine-tune on one dataset; returns (params, log rows, summary dict).

    The summary holds test metrics before (step 0, i.e. the retrieval-only
    model) and after fine-tuning, plus wallclock per phase.
    """
    seed = fold_seed(cfg.seed, 0, 0) if split_seed is None else split_seed
    train, val, test = split_dataset(ds, seed=seed)
    task = prepare_task(train.features, train.labels, params.config, ds.cat_mask, cfg.retrieval.embedding,
                        n_classes=ds.n_classes)
    method = "icl_full" if mode == "finetune_random" else "icl_knn"
    t0 = time.perf_counter()
    before = all_metrics(method_probs(method, params, task, test.features, cfg, seed), test.labels)
    t1 = time.perf_counter()
    tuned, state = finetune(params, task, val, finetune_config(cfg, mode))
    t2 = time.perf_counter()
    after = all_metrics(method_probs(method, tuned, task, test.features, cfg, seed), test.labels)
    t3 = time.perf_counter()
    summary = {
        "dataset": ds.name,
        "mode": mode,
        "inference_method": method,
        "before": before,
        "after": after,
        "best_val_auc": state.best_val_auc,
        "steps": state.step,
        "wallclock_ms": {"eval_before": int((t1 - t0) * 1000), "finetune": int((t2 - t1) * 1000),
                         "eval_after": int((t3 - t2) * 1000)},
    }
    return tuned, state.log, summary


def parse_generator(spec: str) -> Dataset:
    """Build a dataset from ``circles:pairs=3,n=1000,seed=0,noise=0.01`` or ``prior:seed=3,n=4000``."""
    kind, _, rest = spec.partition(":")
    opts = {}
    for part in filter(None, rest.split(",")):
        key, _, value = part.partition("=")
        opts[key.strip()] = value.strip()
    try:
        if kind == "circles":
            return gen_circles(int(opts.get("n", 1000)), int(opts.get("pairs", 3)), float(opts.get("noise", 0.01)),
                               int(opts.get("seed", 0)))
        if kind == "prior":
            from .datagen import PriorConfig

            size = int(opts["n"]) if "n" in opts else None
            return gen_prior_task(PriorConfig(), int(opts.get("seed", 0)), size=size)
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad generator spec {spec!r}: {exc}") from exc
    raise DataError(f"unknown generator {kind!r} (expected circles or prior)")
