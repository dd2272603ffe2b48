"""Prior-fitting from scratch and per-task fine-tuning with early stopping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset, PriorConfig, gen_prior_task
from .evaluation import auc_multiclass
from .model import (
    FeatureEncoder,
    ModelConfig,
    ModelParams,
    TaskView,
    forward,
    init_params,
    pad_features,
    predict,
    predict_local,
)
from .numerics import AdamWState, ContractError, NumericalError, Tape, Var, adamw_step
from .retrieval import build_shared_context_batch, k_rule

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "split", "loss", "auc", "wallclock_ms")
MODES = ("prior_fit", "finetune_local", "finetune_random")
PRIOR_POOL_FACTOR, PRIOR_POOL_MIN = 4, 2048


@dataclass
class TrainConfig:
    mode: str = "finetune_local"
    lr: float = 0.01
    weight_decay: float = 0.01
    B: int = 2
    L_ctx: int | None = None
    N_qy: int = 128
    eval_every: int = 30
    patience: int = 5
    max_steps: int = 1000
    k_max: int = 1000
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown training mode {self.mode!r}")
        if not self.lr > 0 or self.eval_every < 1 or self.B < 1 or self.N_qy < 1 or self.max_steps < 0:
            raise ContractError("need lr > 0, eval_every >= 1, B >= 1, N_qy >= 1, max_steps >= 0")


@dataclass
class TrainState:
    params: ModelParams
    opt: AdamWState
    step: int = 0
    best_val_auc: float = -math.inf
    best_params: ModelParams | None = None
    evaluations_since_best: int = 0
    log: list[dict] = field(default_factory=list)


def loss_and_grads(params: ModelParams, features, context_labels, query_labels, n_classes):
    """Mean query cross-entropy of a batch and its gradient for every tensor."""
    tape = Tape()
    weights = {k: Var(v) for k, v in params.tensors.items()}
    probs = forward(params, features, context_labels, n_classes, tape=tape, weights=weights)
    loss = tape.cross_entropy(probs, np.asarray(query_labels).reshape(-1))
    tape.backward(loss)
    grads = {k: (w.grad if w.grad is not None else np.zeros_like(w.value)) for k, w in weights.items()}
    return float(loss.value), grads, probs.value


def _clip(grads: dict, max_norm: float | None) -> None:
    if max_norm is None:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


class _Guard:
    """Halves the learning rate on the first non-finite loss, aborts on the second."""

    def __init__(self, opt: AdamWState):
        self.opt = opt
        self.tripped = False

    def ok(self, loss: float, grads: dict) -> bool:
        if math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values()):
            return True
        if self.tripped:
            raise NumericalError("non-finite loss after learning-rate halving")
        self.tripped = True
        self.opt.lr /= 2
        log.warning("non-finite loss; learning rate halved to %g", self.opt.lr)
        return False


# ---------------------------------------------------------------------------
# prior-fitting
# ---------------------------------------------------------------------------


def prior_batch(model_config: ModelConfig, prior: PriorConfig, rng: np.random.Generator, n_tasks: int):
    """A batch of prior tasks sharing one size and one context/query split point.

    Features are standardized with context-row statistics, like inference.
    The context length is log-uniform so that short, local-sized contexts
    are as common as long ones.
    """
    hi = min(prior.size[1], model_config.L_ctx_max + 64)
    n = int(rng.integers(prior.size[0], max(prior.size[0], hi) + 1))
    lo_ctx, hi_ctx = 4, max(5, min(n - 16, model_config.L_ctx_max))
    n_ctx = int(round(math.exp(rng.uniform(math.log(lo_ctx), math.log(hi_ctx)))))
    feats = np.empty((n_tasks, n, model_config.D_max))
    labels = np.empty((n_tasks, n), dtype=np.int64)
    n_classes = np.empty(n_tasks, dtype=np.int64)
    pool = max(PRIOR_POOL_FACTOR * n, PRIOR_POOL_MIN)
    for b in range(n_tasks):
        # Quantile bins are exactly balanced over the generated task, so a
        # sequence that used the whole task would leak: an over-represented
        # class in the context is under-represented among the queries. The
        # sequence is a sample from a much larger task instead.
        ds = gen_prior_task(prior, int(rng.integers(2**62)), size=pool)
        # random class proportions make the context's label mix informative about the queries
        weight = rng.dirichlet(np.ones(ds.n_classes))[ds.labels]
        pick = rng.choice(pool, n, replace=False, p=weight / weight.sum())
        x, y = ds.features[pick], ds.labels[pick]
        enc = FeatureEncoder.fit(x[:n_ctx])
        feats[b] = pad_features(enc.transform(x), model_config.D_max)
        labels[b] = y
        n_classes[b] = ds.n_classes
    return feats, labels[:, :n_ctx], labels[:, n_ctx:], n_classes


def _batch_auc(probs, query_labels, n_classes) -> float:
    vals = []
    for b in range(len(query_labels)):
        y = query_labels[b]
        if np.unique(y).size >= 2:
            vals.append(auc_multiclass(probs[b][:, : n_classes[b]], y))
    return float(np.mean(vals)) if vals else float("nan")


def prior_fit(model_config: ModelConfig, prior: PriorConfig, config: TrainConfig, init: ModelParams | None = None,
              progress=None) -> tuple[ModelParams, list[dict]]:
    """Train a fresh model on a stream of synthetic tasks.

    ``config.B`` tasks per step; the log holds one row per ``eval_every``
    steps with the mean training loss and query AUC over that window.
    """
    params = init if init is not None else init_params(model_config, config.seed)
    params = params.copy()
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    guard = _Guard(opt)
    rows: list[dict] = []
    window_loss, window_auc = [], []
    t0 = time.perf_counter()
    for step in range(config.max_steps):
        rng = np.random.default_rng([config.seed, prior.seed, step])
        feats, ctx_y, qy_y, n_classes = prior_batch(model_config, prior, rng, config.B)
        loss, grads, probs = loss_and_grads(params, feats, ctx_y, qy_y, n_classes)
        if not guard.ok(loss, grads):
            continue
        _clip(grads, config.grad_clip)
        adamw_step(opt, params.tensors, grads)
        window_loss.append(loss)
        window_auc.append(_batch_auc(probs, qy_y, n_classes))
        if (step + 1) % config.eval_every == 0 or step + 1 == config.max_steps:
            row = {
                "step": step + 1,
                "split": "train",
                "loss": float(np.mean(window_loss)),
                "auc": float(np.nanmean(window_auc)) if not np.all(np.isnan(window_auc)) else float("nan"),
                "wallclock_ms": int((time.perf_counter() - t0) * 1000),
            }
            rows.append(row)
            window_loss, window_auc = [], []
            if progress is not None:
                progress(row)
    return params, rows


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def finetune_shapes(n_train: int, config: TrainConfig) -> tuple[int, int, int]:
    """(k, L_ctx, L_qy) for fine-tuning; L_ctx + L_qy equals the inference k."""
    k = k_rule(n_train, config.k_max)
    L_qy = max(1, config.N_qy // config.B)
    if config.L_ctx is not None:
        L_ctx = config.L_ctx
    else:
        L_qy = min(L_qy, k // 2)
        L_ctx = k - L_qy
    return k, max(1, L_ctx), max(1, L_qy)


def evaluate_auc(params: ModelParams, task: TaskView, X, y, mode: str, k: int, seed: int = 0,
                 batch_size: int = 512) -> float:
    """Validation/test AUC with the inference method matching ``mode``."""
    q, emb = task.encode(X)
    if mode == "finetune_random":
        n = len(task.labels)
        m = min(n, params.config.L_ctx_max)
        ids = np.sort(np.random.default_rng(seed).choice(n, m, replace=False)) if m < n else np.arange(n)
        probs = predict(params, task.features[ids], task.labels[ids], q, task.n_classes)
    else:
        probs = predict_local(params, task, q, emb, k, batch_size=batch_size)
    return auc_multiclass(probs, y)


def _random_batch(rng, n: int, B: int, L_ctx: int, L_qy: int):
    ctx = np.empty((B, L_ctx), dtype=np.int64)
    qry = np.empty((B, L_qy), dtype=np.int64)
    for b in range(B):
        pick = rng.choice(n, L_ctx + L_qy, replace=False)
        ctx[b], qry[b] = pick[:L_ctx], pick[L_ctx:]
    return ctx, qry


def finetune(params: ModelParams, task: TaskView, val: Dataset, config: TrainConfig, progress=None,
             check_batches: bool = False) -> tuple[ModelParams, TrainState]:
    """Fine-tune all parameters on one task, returning the best-on-validation snapshot.

    ``finetune_local`` draws shared local-context batches from the retrieval
    index; ``finetune_random`` uses uniformly random context and query rows.
    Validation AUC is measured at step 0 and every ``eval_every`` steps.
    """
    n = len(task.labels)
    k, L_ctx, L_qy = finetune_shapes(n, config)
    if L_ctx + L_qy > n - 1:
        raise ContractError(f"training split of {n} rows too small for L_ctx={L_ctx}, L_qy={L_qy}")
    state = TrainState(params.copy(), AdamWState(lr=config.lr, weight_decay=config.weight_decay))
    guard = _Guard(state.opt)
    rng = np.random.default_rng([config.seed, 1])
    t0 = time.perf_counter()

    def evaluate(train_loss: float) -> bool:
        auc = evaluate_auc(state.params, task, val.features, val.labels, config.mode, k, seed=config.seed)
        row = {"step": state.step, "split": "val", "loss": train_loss, "auc": auc,
               "wallclock_ms": int((time.perf_counter() - t0) * 1000)}
        state.log.append(row)
        if progress is not None:
            progress(row)
        if auc > state.best_val_auc:
            state.best_val_auc = auc
            state.best_params = state.params.copy()
            state.evaluations_since_best = 0
        else:
            state.evaluations_since_best += 1
        return state.evaluations_since_best >= config.patience

    evaluate(float("nan"))
    window = []
    while state.step < config.max_steps:
        if config.mode == "finetune_local":
            batch = build_shared_context_batch(task.index, config.B, L_ctx, L_qy, rng)
            if check_batches:
                members = np.hstack([batch.context_ids, batch.query_ids])
                assert not (members == batch.anchors[:, None]).any()
                assert all(np.unique(row).size == row.size for row in members)
            ctx, qry = batch.context_ids, batch.query_ids
        else:
            ctx, qry = _random_batch(rng, n, config.B, L_ctx, L_qy)
        feats = np.concatenate([task.features[ctx], task.features[qry]], axis=1)
        loss, grads, _ = loss_and_grads(state.params, feats, task.labels[ctx], task.labels[qry], task.n_classes)
        state.step += 1
        if not guard.ok(loss, grads):
            continue
        _clip(grads, config.grad_clip)
        adamw_step(state.opt, state.params.tensors, grads)
        window.append(loss)
        if state.step % config.eval_every == 0:
            stop = evaluate(float(np.mean(window)))
            window = []
            if stop:
                break
    return state.best_params, state
