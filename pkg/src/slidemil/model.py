"""Gated-attention bag aggregator with a hand-derived backward pass.

The forward pass gathers each slide's valid rows before any reduction over
the patch axis, so appending padded rows cannot perturb attention scores or
pooled features even at the last bit. Attention projections operate on a
column subspace of the weight matrices (the sampled feature indices); the
pooled representation and the output head always use the full embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .sampling import FeatureIndexSet

PARAM_NAMES = ("attention_v", "attention_u", "attention_w", "head_weight", "head_bias")


@dataclass
class ForwardResult:
    outputs: np.ndarray    # (n_slides, n_outputs)
    attention: np.ndarray  # (n_slides, bag_size); exactly 0 at padded rows
    cache: list | None


def _as_index_array(feature_indices) -> np.ndarray:
    if isinstance(feature_indices, FeatureIndexSet):
        return feature_indices.indices
    return np.asarray(feature_indices)


def _glorot(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0] if len(shape) > 1 else 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class GatedAttentionMIL:
    """tanh/sigmoid gated attention over patches, weighted mean pool, linear head."""

    def __init__(self, embed_dim: int, hidden_dim: int, n_outputs: int,
                 dropout: float = 0.0, dtype=np.float32):
        if embed_dim < 1 or hidden_dim < 1 or n_outputs < 1:
            raise ValidationError("model dimensions must be >= 1")
        if not 0.0 <= dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.n_outputs = n_outputs
        self.dropout = dropout
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}

    def init_params(self, rng: np.random.Generator) -> None:
        d, h, c = self.embed_dim, self.hidden_dim, self.n_outputs
        w_limit = 1.0 / np.sqrt(h)
        self.params = {
            "attention_v": _glorot(rng, (h, d), self.dtype),
            "attention_u": _glorot(rng, (h, d), self.dtype),
            "attention_w": rng.uniform(-w_limit, w_limit, size=h).astype(self.dtype),
            "head_weight": _glorot(rng, (c, d), self.dtype),
            "head_bias": np.zeros(c, dtype=self.dtype),
        }

    def forward(self, embeddings: np.ndarray, valid_mask: np.ndarray, feature_indices,
                training: bool = False, rng: np.random.Generator | None = None,
                need_cache: bool = False) -> ForwardResult:
        """Run the aggregator on a stacked batch (n_slides, bag_size, embed_dim)."""
        x = np.asarray(embeddings, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.embed_dim:
            raise ValidationError(f"expected (n, m, {self.embed_dim}) embeddings")
        if not np.all(np.isfinite(x)):
            raise ValidationError("embeddings contain non-finite values")
        mask = np.asarray(valid_mask, dtype=bool)
        if mask.shape != x.shape[:2]:
            raise ValidationError("mask shape must match (n_slides, bag_size)")
        feat = _as_index_array(feature_indices)
        use_dropout = training and self.dropout > 0.0
        if use_dropout and rng is None:
            raise ValidationError("training-mode dropout needs an rng")

        v_sub = self.params["attention_v"][:, feat]
        u_sub = self.params["attention_u"][:, feat]
        w = self.params["attention_w"]
        head_w = self.params["head_weight"]
        head_b = self.params["head_bias"]

        n_slides, bag_size, _ = x.shape
        outputs = np.empty((n_slides, self.n_outputs), dtype=self.dtype)
        attention = np.zeros((n_slides, bag_size), dtype=self.dtype)
        pooled = np.empty((n_slides, self.embed_dim), dtype=self.dtype)
        cache = [] if need_cache else None

        for i in range(n_slides):
            valid = np.flatnonzero(mask[i])
            if len(valid) == 0:
                raise ValidationError(f"slide {i} has no valid patches")
            xi = x[i, valid]          # (m, D)
            xs = xi[:, feat]          # (m, F)
            pre_t = xs @ v_sub.T      # (m, H)
            pre_g = xs @ u_sub.T
            tanh_act = np.tanh(pre_t)
            gate_act = 1.0 / (1.0 + np.exp(-pre_g))
            gated = tanh_act * gate_act
            if use_dropout:
                keep = (rng.random(gated.shape) >= self.dropout)
                drop = keep.astype(self.dtype) / self.dtype.type(1.0 - self.dropout)
            else:
                drop = None
            gated_out = gated if drop is None else gated * drop
            logits = gated_out @ w    # (m,)
            shifted = logits - logits.max()
            exp_l = np.exp(shifted)
            alpha = exp_l / exp_l.sum()
            hi = alpha @ xi           # (D,)
            pooled[i] = hi
            attention[i, valid] = alpha
            if need_cache:
                cache.append((valid, xi, xs, tanh_act, gate_act, drop, gated_out, alpha))

        outputs[:] = pooled @ head_w.T + head_b
        if need_cache:
            cache = [("batch", pooled, feat)] + cache
        return ForwardResult(outputs=outputs, attention=attention, cache=cache)

    def backward(self, cache: list, d_outputs: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for the cached forward pass; d_outputs is (n_slides, n_outputs)."""
        _, pooled, feat = cache[0]
        d_out = np.asarray(d_outputs, dtype=self.dtype)
        head_w = self.params["head_weight"]
        v_sub = self.params["attention_v"][:, feat]
        u_sub = self.params["attention_u"][:, feat]
        w = self.params["attention_w"]

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        grads["head_weight"] += d_out.T @ pooled
        grads["head_bias"] += d_out.sum(axis=0)
        d_pooled = d_out @ head_w  # (n, D)

        d_v_sub = np.zeros_like(v_sub)
        d_u_sub = np.zeros_like(u_sub)
        for i, (valid, xi, xs, tanh_act, gate_act, drop, gated_out, alpha) in enumerate(cache[1:]):
            dhi = d_pooled[i]                       # (D,)
            d_alpha = xi @ dhi                      # (m,)
            # softmax Jacobian: d_logits = alpha * (d_alpha - <alpha, d_alpha>)
            d_logits = alpha * (d_alpha - alpha @ d_alpha)
            grads["attention_w"] += gated_out.T @ d_logits
            d_gated_out = np.outer(d_logits, w)     # (m, H)
            d_gated = d_gated_out if drop is None else d_gated_out * drop
            d_pre_t = d_gated * gate_act * (1.0 - tanh_act ** 2)
            d_pre_g = d_gated * tanh_act * gate_act * (1.0 - gate_act)
            d_v_sub += d_pre_t.T @ xs
            d_u_sub += d_pre_g.T @ xs

        grads["attention_v"][:, feat] = d_v_sub
        grads["attention_u"][:, feat] = d_u_sub
        return grads


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy; returns (loss, d_logits)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp_l = np.exp(shifted)
    probs = exp_l / exp_l.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp_l.sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def mse_loss(preds: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over 1-D predictions; returns (loss, d_preds)."""
    diff = preds - np.asarray(targets, dtype=preds.dtype)
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / len(diff)


def cox_loss(risk_scores: np.ndarray, times: np.ndarray,
             events: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative Cox partial log-likelihood, averaged over events, with ties
    handled by keeping tied times inside each other's risk set."""
    eta = np.asarray(risk_scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(int)
    n_events = int(events.sum())
    if n_events == 0:
        raise ValidationError("Cox loss needs at least one event in the batch")
    loss = 0.0
    d_eta = np.zeros_like(eta)
    for i in np.flatnonzero(events):
        at_risk = times >= times[i]
        shift = eta[at_risk].max()
        lse = shift + np.log(np.exp(eta[at_risk] - shift).sum())
        loss += lse - eta[i]
        soft = np.where(at_risk, np.exp(eta - lse), 0.0)
        d_eta += soft
        d_eta[i] -= 1.0
    loss /= n_events
    d_eta /= n_events
    return float(loss), d_eta.astype(risk_scores.dtype)


def _batch_loss(model: GatedAttentionMIL, task: str, x, mask, feat, targets) -> float:
    out = model.forward(x, mask, feat, training=False).outputs
    if task == "classification":
        return cross_entropy_loss(out, targets)[0]
    if task == "regression":
        return mse_loss(out[:, 0], targets)[0]
    times, events = targets
    return cox_loss(out[:, 0], times, events)[0]


def grad_check(task: str, embed_dim: int = 8, hidden_dim: int = 4, n_classes: int = 3,
               n_slides: int = 3, bag_size: int = 4, seed: int = 0,
               eps: float = 1e-5) -> dict:
    """Compare analytic parameter gradients against central finite differences
    in 64-bit; returns per-parameter and overall max relative error."""
    rng = np.random.default_rng(seed)
    n_out = n_classes if task == "classification" else 1
    model = GatedAttentionMIL(embed_dim, hidden_dim, n_out, dropout=0.0, dtype=np.float64)
    model.init_params(rng)

    x = rng.standard_normal((n_slides, bag_size, embed_dim))
    mask = rng.random((n_slides, bag_size)) < 0.75
    mask[:, 0] = True
    if hidden_dim < embed_dim:
        feat = np.sort(rng.choice(embed_dim, size=hidden_dim, replace=False))
    else:
        feat = np.arange(embed_dim)
    if task == "classification":
        targets = rng.integers(n_classes, size=n_slides)
    elif task == "regression":
        targets = rng.standard_normal(n_slides)
    else:
        times = rng.uniform(0.5, 3.0, size=n_slides)
        events = rng.integers(0, 2, size=n_slides)
        events[0] = 1
        targets = (times, events)

    result = model.forward(x, mask, feat, training=False, need_cache=True)
    if task == "classification":
        _, d_out = cross_entropy_loss(result.outputs, targets)
    elif task == "regression":
        _, d_pred = mse_loss(result.outputs[:, 0], targets)
        d_out = d_pred[:, None]
    else:
        _, d_pred = cox_loss(result.outputs[:, 0], *targets)
        d_out = d_pred[:, None]
    analytic = model.backward(result.cache, d_out)

    per_param = {}
    worst = 0.0
    for name in PARAM_NAMES:
        p = model.params[name]
        flat = p.reshape(-1)
        err = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = _batch_loss(model, task, x, mask, feat, targets)
            flat[j] = orig - eps
            down = _batch_loss(model, task, x, mask, feat, targets)
            flat[j] = orig
            fd = (up - down) / (2.0 * eps)
            an = analytic[name].reshape(-1)[j]
            denom = max(abs(an), abs(fd), 1e-8)
            rel = abs(an - fd) / denom if max(abs(an), abs(fd)) > 1e-10 else 0.0
            err = max(err, rel)
        per_param[name] = err
        worst = max(worst, err)
    return {"max_rel_err": worst, "per_param": per_param, "task": task,
            "embed_dim": embed_dim, "hidden_dim": hidden_dim}
