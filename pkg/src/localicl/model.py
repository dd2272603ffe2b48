"""The in-context tabular classifier.

A row token is the projection of the row's padded feature vector plus a
label embedding (row ``C_max`` of the embedding table is the "label absent"
token used by every query). Pre-norm transformer blocks follow; in each
attention layer context rows attend to all context rows and query rows
attend to context rows only. The head reads query rows and normalises over
the task's active classes.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractError, Tape, Var, check_finite
from .retrieval import RetrievalIndex, build_index, knn_query_batch

MAGIC = b"LCPF"
FORMAT_VERSION = 1
INFERENCE_BATCH = 512
# cap on attention score elements per forward chunk (~128 MB of float64)
_SCORE_BUDGET = 1 << 24


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    D_max: int = 20
    C_max: int = 10
    L_ctx_max: int = 1024

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 2 or self.d_ff < 1:
            raise ContractError("model sizes must be positive (d_model >= 2)")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.C_max < 1 or self.D_max < 1 or self.L_ctx_max < 1:
            raise ContractError("D_max, C_max and L_ctx_max must be >= 1")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes = {
        "encoder.weight": (config.D_max, d),
        "encoder.bias": (d,),
        "label_embedding": (config.C_max + 1, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.gain": (d,),
                p + "ln1.shift": (d,),
                p + "attn.qkv.weight": (d, 3 * d),
                p + "attn.qkv.bias": (3 * d,),
                p + "attn.out.weight": (d, d),
                p + "attn.out.bias": (d,),
                p + "ln2.gain": (d,),
                p + "ln2.shift": (d,),
                p + "ff.in.weight": (d, f),
                p + "ff.in.bias": (f,),
                p + "ff.out.weight": (f, d),
                p + "ff.out.bias": (d,),
            }
        )
    shapes.update(
        {
            "final_ln.gain": (d,),
            "final_ln.shift": (d,),
            "head.weight": (d, config.C_max),
            "head.bias": (config.C_max,),
        }
    )
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights ~ N(0, 1/fan_in); biases and shifts 0; layer-norm gains 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# row encoding
# ---------------------------------------------------------------------------


@dataclass
class FeatureEncoder:
    """Training-split statistics: z-scores for numeric columns, vocabularies for categorical ones.

    With ``one_hot`` set, categorical columns expand into indicator blocks
    (unseen categories give an all-zero block); otherwise every column is
    z-scored, category codes included.
    """

    mean: np.ndarray
    std: np.ndarray
    cat_mask: np.ndarray
    vocab: dict[int, np.ndarray]
    one_hot: bool = False

    @classmethod
    def fit(cls, X: np.ndarray, cat_mask=None, one_hot: bool = False) -> FeatureEncoder:
        X = np.asarray(X, dtype=np.float64)
        cat_mask = np.zeros(X.shape[1], bool) if cat_mask is None else np.asarray(cat_mask, bool)
        mean = X.mean(axis=0)
        std = np.maximum(X.std(axis=0), 1e-8)
        vocab = {j: np.unique(X[:, j]) for j in np.flatnonzero(cat_mask)}
        return cls(mean, std, cat_mask, vocab, one_hot and bool(cat_mask.any()))

    @property
    def width(self) -> int:
        if not self.one_hot:
            return self.mean.size
        return int((~self.cat_mask).sum() + sum(v.size for v in self.vocab.values()))

    def with_one_hot(self, flag: bool) -> FeatureEncoder:
        return FeatureEncoder(self.mean, self.std, self.cat_mask, self.vocab, flag and bool(self.cat_mask.any()))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        z = (X - self.mean) / self.std
        if not self.one_hot:
            return z
        blocks = []
        for j in range(X.shape[1]):
            if self.cat_mask[j]:
                blocks.append((X[:, j, None] == self.vocab[j][None, :]).astype(np.float64))
            else:
                blocks.append(z[:, j, None])
        return np.hstack(blocks)


def pad_features(z: np.ndarray, D_max: int) -> np.ndarray:
    """Zero-pad standardized rows to ``D_max`` columns, scaled by D_max / D_effective."""
    n, d_eff = z.shape
    if d_eff > D_max:
        raise ContractError(f"{d_eff} encoded features exceed D_max={D_max}")
    out = np.zeros((n, D_max))
    out[:, :d_eff] = z * (D_max / d_eff)
    return out


def encode_rows(raw_features, cat_mask, stats: FeatureEncoder, config: ModelConfig) -> np.ndarray:
    """Standardize with training statistics, then pad to the model's input width."""
    enc = stats if cat_mask is None else FeatureEncoder(stats.mean, stats.std, np.asarray(cat_mask, bool), stats.vocab, stats.one_hot)
    return pad_features(enc.transform(raw_features), config.D_max)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def normalize_to_context(features: np.ndarray, n_ctx: int) -> np.ndarray:
    """Re-standardize every sequence with its own context rows.

    Columns varying within the context get zero mean and unit spread, then
    the ``D_max / D_effective`` scale of ``pad_features`` (D_effective = the
    number of varying columns); constant columns are only centred. A local
    context therefore looks like a full one to the network, and with k = N
    this is the same map as for the full training set.
    """
    ctx = features[:, :n_ctx]
    mean = ctx.mean(axis=1, keepdims=True)
    std = ctx.std(axis=1, keepdims=True)
    varying = std > 1e-8
    d_eff = np.maximum(varying.sum(axis=2, keepdims=True), 1)
    scale = np.where(varying, (features.shape[2] / d_eff) / np.where(varying, std, 1.0), 1.0)
    return (features - mean) * scale


def class_mask(n_classes, batch: int, C_max: int) -> np.ndarray:
    n = np.broadcast_to(np.asarray(n_classes), (batch,))
    if n.min() < 1 or n.max() > C_max:
        raise ContractError(f"n_classes must lie in [1, {C_max}]")
    return np.arange(C_max)[None, :] < n[:, None]


def forward(params: ModelParams, features: np.ndarray, context_labels: np.ndarray, n_classes, tape: Tape | None = None,
            weights: dict[str, Var] | None = None) -> Var:
    """Class probabilities for the query rows of a batch.

    ``features`` is (B, L, D_max); the first ``context_labels.shape[1]``
    positions of each sequence are context, the rest are queries. Returns a
    Var of shape (B, L - n_ctx, C_max); inactive classes get probability 0.
    """
    cfg = params.config
    if tape is None:
        tape = Tape(record=False)
    if weights is None:
        weights = {k: Var(v, requires_grad=tape.record) for k, v in params.tensors.items()}
    W = weights
    # a fixed memory layout keeps reduction order, hence results, layout-independent
    features = np.ascontiguousarray(features, dtype=np.float64)
    B, L, D = features.shape
    n_ctx = context_labels.shape[1]
    if D != cfg.D_max:
        raise ContractError(f"features must be padded to D_max={cfg.D_max}, got {D}")
    if n_ctx < 1:
        raise ContractError("empty context")
    if n_ctx >= L:
        raise ContractError("batch has no query rows")
    features = normalize_to_context(features, n_ctx)
    labels = np.full((B, L), cfg.C_max, dtype=np.int64)
    labels[:, :n_ctx] = context_labels
    onehot = np.zeros((B, L, cfg.C_max + 1))
    np.put_along_axis(onehot, labels[:, :, None], 1.0, axis=2)

    h = tape.add(tape.affine(Tape.const(features), W["encoder.weight"], W["encoder.bias"]),
                 tape.affine(Tape.const(onehot), W["label_embedding"]))
    last = cfg.n_layers - 1
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = tape.layer_norm(h, W[p + "ln1.gain"], W[p + "ln1.shift"])
        qkv = tape.affine(a, W[p + "attn.qkv.weight"], W[p + "attn.qkv.bias"])
        if i == last:
            # only query rows feed the head, so the last block skips context outputs
            att = tape.context_attention(qkv, n_ctx, cfg.n_heads, out_from=n_ctx)
            h = tape.take_rows(h, n_ctx)
        else:
            att = tape.context_attention(qkv, n_ctx, cfg.n_heads)
        h = tape.add(h, tape.affine(att, W[p + "attn.out.weight"], W[p + "attn.out.bias"]))
        f = tape.layer_norm(h, W[p + "ln2.gain"], W[p + "ln2.shift"])
        f = tape.gelu(tape.affine(f, W[p + "ff.in.weight"], W[p + "ff.in.bias"]))
        h = tape.add(h, tape.affine(f, W[p + "ff.out.weight"], W[p + "ff.out.bias"]))
    h = tape.layer_norm(h, W["final_ln.gain"], W["final_ln.shift"])
    logits = tape.affine(h, W["head.weight"], W["head.bias"])
    mask = class_mask(n_classes, B, cfg.C_max)[:, None, :]
    return tape.softmax_rows(logits, mask=mask)


def _chunk_rows(n_rows: int, seq_len: int, n_ctx: int, heads: int, limit: int = INFERENCE_BATCH) -> int:
    per_row = max(1, heads * seq_len * n_ctx)
    return max(1, min(limit, _SCORE_BUDGET // per_row))


def _check_context(params: ModelParams, ctx_x, ctx_y, n_classes):
    cfg = params.config
    if len(ctx_y) == 0:
        raise ContractError("empty context")
    if len(ctx_y) > cfg.L_ctx_max:
        raise ContractError(f"context length {len(ctx_y)} exceeds L_ctx_max={cfg.L_ctx_max}")
    if not 1 <= n_classes <= cfg.C_max:
        raise ContractError(f"n_classes={n_classes} outside [1, {cfg.C_max}]")
    if np.min(ctx_y) < 0 or np.max(ctx_y) >= n_classes:
        raise ContractError("context labels outside [0, n_classes)")


def predict(params: ModelParams, ctx_x: np.ndarray, ctx_y: np.ndarray, queries: np.ndarray, n_classes: int,
            batch_size: int = INFERENCE_BATCH) -> np.ndarray:
    """Posterior predictive for every query given one shared context.

    Queries never attend to each other, so they are processed in chunks of
    ``batch_size`` with identical results.
    """
    ctx_x = np.asarray(ctx_x, dtype=np.float64)
    ctx_y = np.asarray(ctx_y, dtype=np.int64)
    queries = np.asarray(queries, dtype=np.float64)
    _check_context(params, ctx_x, ctx_y, n_classes)
    n_ctx = len(ctx_y)
    out = np.empty((len(queries), n_classes))
    step = max(1, batch_size)
    for s in range(0, len(queries), step):
        q = queries[s : s + step]
        feats = np.concatenate([ctx_x, q])[None]
        probs = forward(params, feats, ctx_y[None], n_classes).value[0]
        out[s : s + step] = probs[:, :n_classes]
    return check_finite(out, "predictions")


@dataclass
class TaskView:
    """A training split prepared for in-context prediction.

    ``features`` are model inputs (padded, scaled); ``index`` holds the
    retrieval embeddings, built from the same training statistics.
    """

    encoder: FeatureEncoder
    retrieval_encoder: FeatureEncoder
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    index: RetrievalIndex
    D_max: int

    @property
    def n_features(self) -> int:
        return self.encoder.width

    def encode(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Model inputs and retrieval embeddings for raw rows."""
        return pad_features(self.encoder.transform(X), self.D_max), self.retrieval_encoder.transform(X)


def prepare_task(X_train, y_train, config: ModelConfig, cat_mask=None, embedding: str = "raw",
                 n_classes: int | None = None) -> TaskView:
    """Fit feature statistics on the training split and build its retrieval index.

    ``embedding='one_hot'`` expands categorical columns for retrieval when
    the expanded width stays within 100, and for the model input when it
    fits in ``D_max``.
    """
    y_train = np.asarray(y_train, dtype=np.int64)
    base = FeatureEncoder.fit(X_train, cat_mask, one_hot=False)
    want = embedding == "one_hot"
    retr = base.with_one_hot(want)
    if retr.width > 100:
        retr = base
    model_enc = base.with_one_hot(want)
    if model_enc.width > config.D_max:
        model_enc = base
    if model_enc.width > config.D_max:
        raise ContractError(f"{model_enc.width} features exceed D_max={config.D_max}")
    n_classes = int(y_train.max()) + 1 if n_classes is None else n_classes
    index = build_index(retr.transform(X_train), kind="one_hot" if retr.one_hot else "raw")
    return TaskView(model_enc, retr, pad_features(model_enc.transform(X_train), config.D_max), y_train, n_classes,
                    index, config.D_max)


def predict_local(params: ModelParams, task: TaskView, queries: np.ndarray, query_emb: np.ndarray, k: int,
                  batch_size: int = INFERENCE_BATCH, exclude: np.ndarray | None = None) -> np.ndarray:
    """Each query is classified with its k nearest training rows as context.

    ``queries`` are model inputs and ``query_emb`` retrieval embeddings for
    the same rows. ``exclude`` optionally gives, per query, a training id to
    leave out (the query's own row when it comes from the training split).
    """
    n_train = len(task.labels)
    if not 1 <= k <= n_train:
        raise ContractError(f"k={k} outside [1, {n_train}]")
    _check_context(params, task.features[:k], task.labels[:k], task.n_classes)
    queries = np.asarray(queries, dtype=np.float64)
    out = np.empty((len(queries), task.n_classes))
    cfg = params.config
    step = _chunk_rows(len(queries), k + 1, k, cfg.n_heads, batch_size)
    for s in range(0, len(queries), step):
        sl = slice(s, s + step)
        ids = knn_query_batch(task.index, query_emb[sl], k, None if exclude is None else exclude[sl])
        feats = np.concatenate([task.features[ids], queries[sl, None, :]], axis=1)
        probs = forward(params, feats, task.labels[ids], task.n_classes).value[:, 0]
        out[sl] = probs[:, : task.n_classes]
    return check_finite(out, "predictions")


def draw_permutations(n_members: int, n_features: int, n_classes: int, seed: int):
    rng = np.random.default_rng(seed)
    return [(rng.permutation(n_features), rng.permutation(n_classes)) for _ in range(n_members)]


def predict_ensemble(params: ModelParams, ctx_x, ctx_y, queries, n_classes: int, n_members: int = 32, seed: int = 0,
                     n_features: int | None = None, permutations=None) -> np.ndarray:
    """Average of ``predict`` over random feature-column and class-index permutations.

    Only the first ``n_features`` (active, unpadded) columns are permuted.
    A member with class permutation ``perm`` sees label ``perm[y]`` and its
    output column ``perm[c]`` is read back as class ``c``.
    """
    if n_members < 1:
        raise ContractError("n_members must be >= 1")
    ctx_x = np.asarray(ctx_x, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    ctx_y = np.asarray(ctx_y, dtype=np.int64)
    if n_features is None:
        active = np.flatnonzero(np.any(ctx_x != 0, axis=0) | np.any(queries != 0, axis=0))
        n_features = int(active.max()) + 1 if active.size else 1
    if permutations is None:
        permutations = draw_permutations(n_members, n_features, n_classes, seed)
    total = np.zeros((len(queries), n_classes))
    for fperm, cperm in permutations:
        cols = np.concatenate([fperm, np.arange(n_features, ctx_x.shape[1])])
        probs = predict(params, ctx_x[:, cols], cperm[ctx_y], queries[:, cols], n_classes)
        total += probs[:, cperm]
    return total / len(permutations)


def predict_chunked(params: ModelParams, ctx_x, ctx_y, queries, n_classes: int, chunk_size: int, seed: int = 0) -> np.ndarray:
    """Average ``predict`` over a random partition of the training rows into chunks."""
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    n = len(ctx_y)
    n_chunks = math.ceil(n / chunk_size)
    order = np.random.default_rng(seed).permutation(n) if n_chunks > 1 else np.arange(n)
    total = np.zeros((len(queries), n_classes))
    for part in np.array_split(order, n_chunks):
        total += predict(params, np.asarray(ctx_x)[part], np.asarray(ctx_y)[part], queries, n_classes)
    return total / n_chunks


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(params: ModelParams) -> bytes:
    """Serialize in the LCPF layout.

    magic "LCPF" | u32 version | u32 config length | config JSON |
    u32 tensor count | per tensor: u16 name length, name, u8 rank,
    u64 dims, float64 data. All integers and floats little-endian.
    """
    buf = io.BytesIO()
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ModelParams:
    """Parse an LCPF blob; any structural damage raises ContractError."""
    if data[:4] != MAGIC:
        raise ContractError("not an LCPF checkpoint")
    try:
        return _parse_checkpoint(data)
    except ContractError:
        raise
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise ContractError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(data: bytes) -> ModelParams:
    pos = 4
    version, cfg_len = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**json.loads(data[pos : pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ContractError("trailing bytes after the last tensor")
    expected = param_shapes(config)
    if set(expected) != set(tensors) or any(tensors[k].shape != expected[k] for k in expected):
        raise ContractError("checkpoint tensors do not match its model config")
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
