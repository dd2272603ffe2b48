"""Dense kernels, a small reverse-mode tape, AdamW and finite-difference checks.

Tensors are plain float64 numpy arrays. The autodiff surface is the fixed
set of kernels the in-context transformer needs; each tape method computes
its forward value and records a hand-written backward closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K


class ContractError(ValueError):
    """A caller broke an operation's precondition (shapes, ranges, sizes)."""


class NumericalError(ArithmeticError):
    """A NaN or infinity showed up where only finite values are allowed."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)


# ---------------------------------------------------------------------------
# pure kernels
# ---------------------------------------------------------------------------


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ContractError(f"affine shapes do not conform: x{x.shape} w{w.shape} b{None if b is None else b.shape}")
    out = x @ w
    if b is not None:
        out += b
    return out


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (bool, same shape) marks allowed entries; disallowed entries
    get probability exactly 0, as if their logits were minus infinity.
    """
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "softmax input")
    shape = x.shape
    m = None
    if mask is not None:
        m = np.broadcast_to(mask, shape).reshape(-1, shape[-1])
        if not m.any(axis=1).all():
            raise ContractError("softmax row with no allowed entries")
    return K.softmax_rows(_rows(x), m).reshape(shape)


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 2:
        raise ContractError("layer_norm needs at least 2 features")
    out, _, _ = K.layer_norm_fwd(_rows(x), gain, shift)
    return out.reshape(x.shape)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    return K.gelu_fwd(_rows(x)).reshape(x.shape)


def _attention_core(q, k, v, allowed, heads):
    """Per-head scaled dot-product attention on (L, d) inputs; returns output and probs."""
    L, d = q.shape
    dh = d // heads
    qh = q.reshape(L, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(-1, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(-1, heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    probs = softmax_rows(scores, None if allowed is None else np.broadcast_to(allowed, scores.shape))
    out = (probs @ vh).transpose(1, 0, 2).reshape(L, d)
    return out, probs, (qh, kh, vh)


def masked_attention(q, k, v, mask, heads: int) -> np.ndarray:
    """Multi-head attention where ``mask[i, j]`` allows row i to attend to row j."""
    mask = np.asarray(mask, dtype=bool)
    L, d = q.shape
    if k.shape != (L, d) or v.shape != (L, d) or mask.shape != (L, L):
        raise ContractError("masked_attention shapes do not conform")
    if heads < 1 or d % heads:
        raise ContractError(f"d={d} not divisible by heads={heads}")
    if not mask.any(axis=1).all():
        raise ContractError("attention mask has a row with no allowed targets")
    return _attention_core(q, k, v, mask, heads)[0]


def context_mask(n_ctx: int, n_qy: int) -> np.ndarray:
    """Context rows see all context rows; query rows see only context rows."""
    L = n_ctx + n_qy
    mask = np.zeros((L, L), dtype=bool)
    mask[:, :n_ctx] = True
    return mask


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood, probabilities clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, probs.shape[-1])
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise ContractError("cross_entropy: one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ContractError(f"label out of range [0, {probs.shape[1]})")
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Var:
    """A value on the tape together with its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = True):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


def _accumulate(var: Var, g) -> None:
    if not var.requires_grad or g is None:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        var.grad += g


class Tape:
    """Records kernel applications and replays them in reverse.

    With ``record=False`` the methods only compute forward values, which is
    the inference path.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[tuple[Sequence[Var], Var, Callable]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    @staticmethod
    def const(value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), requires_grad=False)

    def _push(self, inputs, value, backward) -> Var:
        wants = self.record and any(v.requires_grad for v in inputs)
        out = Var(value, requires_grad=wants)
        if wants:
            self._nodes.append((inputs, out, backward))
        return out

    def backward(self, out: Var, grad=None) -> None:
        """Propagate from ``out`` (seeded with ones unless ``grad`` given)."""
        out.grad = np.ones_like(out.value, dtype=np.float64) if grad is None else np.asarray(grad, dtype=np.float64)
        for inputs, node_out, fn in reversed(self._nodes):
            if node_out.grad is None:
                continue
            grads = fn(node_out.grad)
            for var, g in zip(inputs, grads):
                _accumulate(var, g)

    # -- kernels ----------------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        return self._push((a, b), a.value + b.value, lambda g: (g, g))

    def affine(self, x: Var, w: Var, b: Var | None = None) -> Var:
        xv, wv = x.value, w.value
        out = affine(xv, wv, None if b is None else b.value)

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            dx = (g @ wv.T) if x.requires_grad else None
            dw = (xv.reshape(-1, xv.shape[-1]).T @ g2) if w.requires_grad else None
            db = g2.sum(axis=0) if b is not None and b.requires_grad else None
            return (dx, dw, db)

        inputs = (x, w) if b is None else (x, w, b)
        return self._push(inputs, out, backward)

    def layer_norm(self, x: Var, gain: Var, shift: Var) -> Var:
        shape = x.value.shape
        if shape[-1] < 2:
            raise ContractError("layer_norm needs at least 2 features")
        out, xhat, rstd = K.layer_norm_fwd(_rows(x.value), gain.value, shift.value)

        def backward(g):
            dx, dgain, dshift = K.layer_norm_bwd(_rows(g), xhat, rstd, gain.value)
            return dx.reshape(shape), dgain, dshift

        return self._push((x, gain, shift), out.reshape(shape), backward)

    def gelu(self, x: Var) -> Var:
        shape = x.value.shape
        xr = _rows(x.value)
        return self._push((x,), K.gelu_fwd(xr).reshape(shape), lambda g: (K.gelu_bwd(_rows(g), xr).reshape(shape),))

    def softmax_rows(self, x: Var, mask=None) -> Var:
        p = softmax_rows(x.value, mask)

        def backward(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._push((x,), p, backward)

    def cross_entropy(self, probs: Var, labels) -> Var:
        labels = np.asarray(labels).reshape(-1)
        p = probs.value
        loss = cross_entropy(p, labels)
        n = labels.size

        def backward(g):
            flat = p.reshape(-1, p.shape[-1])
            d = np.zeros_like(flat)
            picked = flat[np.arange(n), labels]
            live = picked > 1e-12
            d[np.arange(n)[live], labels[live]] = -1.0 / (picked[live] * n)
            return (d.reshape(p.shape) * g,)

        return self._push((probs,), np.array(loss), backward)

    def masked_attention(self, q: Var, k: Var, v: Var, mask, heads: int) -> Var:
        out = masked_attention(q.value, k.value, v.value, mask, heads)
        _, probs, (qh, kh, vh) = _attention_core(q.value, k.value, v.value, np.asarray(mask, bool), heads)
        L, d = q.value.shape
        dh = d // heads

        def backward(g):
            gh = g.reshape(L, heads, dh).transpose(1, 0, 2)
            dv = probs.transpose(0, 2, 1) @ gh
            dp = gh @ vh.transpose(0, 2, 1)
            ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
            dq = ds @ kh
            dk = ds.transpose(0, 2, 1) @ qh
            back = lambda t: t.transpose(1, 0, 2).reshape(L, d)  # noqa: E731
            return back(dq), back(dk), back(dv)

        return self._push((q, k, v), out, backward)

    def context_attention(self, qkv: Var, n_ctx: int, heads: int, out_from: int = 0) -> Var:
        """Batched attention under the context/query mask.

        ``qkv`` has shape (B, L, 3d). Keys and values come from the first
        ``n_ctx`` rows only, so query rows never influence any output but
        their own. Equivalent to ``masked_attention`` with ``context_mask``.
        Only rows ``out_from:`` are returned.
        """
        x = qkv.value
        B, L, d3 = x.shape
        d = d3 // 3
        if n_ctx < 1:
            raise ContractError("attention needs at least one context row")
        if d % heads:
            raise ContractError(f"d={d} not divisible by heads={heads}")
        dh = d // heads
        scale = 1.0 / math.sqrt(dh)
        Lo = L - out_from
        q = x[:, out_from:, :d].reshape(B, Lo, heads, dh).transpose(0, 2, 1, 3)
        k = x[:, :n_ctx, d : 2 * d].reshape(B, n_ctx, heads, dh).transpose(0, 2, 1, 3)
        v = x[:, :n_ctx, 2 * d :].reshape(B, n_ctx, heads, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        probs = K.softmax_rows(_rows(scores), None).reshape(scores.shape)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, Lo, d)

        def backward(g):
            gh = g.reshape(B, Lo, heads, dh).transpose(0, 2, 1, 3)
            dv = probs.transpose(0, 1, 3, 2) @ gh
            dp = gh @ v.transpose(0, 1, 3, 2)
            ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dx = np.zeros_like(x)
            dx[:, out_from:, :d] = dq.transpose(0, 2, 1, 3).reshape(B, Lo, d)
            dx[:, :n_ctx, d : 2 * d] = dk.transpose(0, 2, 1, 3).reshape(B, n_ctx, d)
            dx[:, :n_ctx, 2 * d :] = dv.transpose(0, 2, 1, 3).reshape(B, n_ctx, d)
            return (dx,)

        return self._push((qkv,), out, backward)

    def take_rows(self, x: Var, start: int) -> Var:
        """Slice ``x[:, start:]`` along the sequence axis."""
        val = x.value
        out = val[:, start:].copy()

        def backward(g):
            dx = np.zeros_like(val)
            dx[:, start:] = g
            return (dx,)

        return self._push((x,), out, backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict, grads: dict) -> dict:
    """One AdamW update, in place on ``params``; returns ``params``.

    Weight decay is decoupled: ``p -= lr * wd * p`` on the pre-update value,
    separately from the bias-corrected adaptive step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        decay = state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= decay
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, h: float = 1e-5) -> float:
    """Compare ``f``'s analytic gradient against central differences.

    ``f(x)`` returns ``(value, gradient)``. The result is the max over
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x.copy())[0]
        flat[i] = orig - h
        fm = f(x.copy())[0]
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i])))
    return worst
