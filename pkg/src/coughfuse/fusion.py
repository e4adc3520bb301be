"""Multi-model fusion over per-segment outputs of several trained classifiers.

Feature-level heads consume the stacked 256-d embeddings ``[batch, n_models, 256]``;
decision-level max/avg consume member probabilities; decision-level attention
consumes embeddings again. For the attention heads the model axis plays the
role of sequence positions and the embedding units are channels, so one
kernel-1 convolution is shared by every member.
"""

from __future__ import annotations

import numpy as np

from . import nnet
from .errors import CheckpointError, ShapeError
from .models import EMBED_DIM
from .nnet import kaiming_uniform, sigmoid

FEATURE_STRATEGIES = ("feature_max", "feature_avg", "feature_attention")
DECISION_STRATEGIES = ("decision_max", "decision_avg", "decision_attention")
STRATEGIES = FEATURE_STRATEGIES + DECISION_STRATEGIES
TRAINABLE = ("feature_max", "feature_avg", "feature_attention", "decision_attention")


def _stack(reps):
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim == 2:
        reps = reps[None]
    if reps.ndim != 3 or reps.shape[1] < 2:
        raise ShapeError(f"embedding stack must be [batch, n_models>=2, dim], got {reps.shape}")
    return reps


# --- feature-level ---------------------------------------------------------

def fuse_max(reps):
    """Elementwise max over the model axis; also returns the (first) argmax per unit."""
    reps = _stack(reps)
    arg = reps.argmax(axis=1)
    return np.take_along_axis(reps, arg[:, None, :], axis=1)[:, 0], arg


def fuse_avg(reps):
    return _stack(reps).mean(axis=1)


def attention_weights(reps, W, b):
    """Per-channel convex weights over models: sigmoid(conv_k1(reps)) / sum over models."""
    reps = _stack(reps)
    a = sigmoid(reps @ W.T + b)  # [B, M, C]
    return a / a.sum(axis=1, keepdims=True), a


def fuse_attention(reps, W, b):
    reps = _stack(reps)
    w, _ = attention_weights(reps, W, b)
    return (w * reps).sum(axis=1)


def feature_max(stack, out_W, out_b):
    fused, _ = fuse_max(stack)
    return (fused @ np.asarray(out_W).T + out_b)[:, 0]


def feature_avg(stack, out_W, out_b):
    return (fuse_avg(stack) @ np.asarray(out_W).T + out_b)[:, 0]


def feature_attention(stack, attn_W, attn_b, out_W, out_b):
    return (fuse_attention(stack, attn_W, attn_b) @ np.asarray(out_W).T + out_b)[:, 0]


# --- decision-level --------------------------------------------------------

def _probs(probs):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    if p.ndim != 2 or p.shape[1] < 1:
        raise ShapeError(f"probabilities must be [batch, n_models], got {p.shape}")
    return p


def decision_max(probs):
    out = _probs(probs).max(axis=1)
    return out if np.ndim(probs) > 1 else float(out[0])


def decision_avg(probs):
    out = _probs(probs).mean(axis=1)
    return out if np.ndim(probs) > 1 else float(out[0])


def decision_attention_logit(stack, value_w, value_b, weight_w, weight_b):
    """s = sum_m w_m v_m with v_m = value_conv(e_m), w = normalized sigmoid(weight_conv(e_m))."""
    reps = _stack(stack)
    v = reps @ np.asarray(value_w).reshape(-1) + value_b  # [B, M]
    u = sigmoid(reps @ np.asarray(weight_w).reshape(-1) + weight_b)
    w = u / u.sum(axis=1, keepdims=True)
    return (w * v).sum(axis=1)


def decision_attention(stack, value_w, value_b, weight_w, weight_b):
    return sigmoid(decision_attention_logit(stack, value_w, value_b, weight_w, weight_b))


# --- trainable heads -------------------------------------------------------

class FusionHead:
    """Trainable fusion parameters for one strategy.

    Implements the trainer protocol (``logits``, ``backward``, ``parameters``,
    ``grads``, ``zero_grad``) on embedding stacks ``[batch, n_models, dim]``.
    Attention convolutions start at zero, i.e. as plain averaging.
    """

    def __init__(self, strategy: str, dim: int = EMBED_DIM, rng=None):
        if strategy not in TRAINABLE:
            raise ValueError(f"{strategy!r} has no trainable head")
        self.strategy, self.dim = strategy, dim
        p = {}
        if strategy == "decision_attention":
            p["value_w"] = kaiming_uniform(rng, (1, dim), dim) if rng is not None else np.zeros((1, dim))
            p["value_b"] = np.zeros(1)
            p["weight_w"] = np.zeros((1, dim))
            p["weight_b"] = np.zeros(1)
        else:
            if strategy == "feature_attention":
                p["attn_W"] = np.zeros((dim, dim))
                p["attn_b"] = np.zeros(dim)
            p["out_W"] = kaiming_uniform(rng, (1, dim), dim) if rng is not None else np.zeros((1, dim))
            p["out_b"] = np.zeros(1)
        self.params = p
        self.zero_grad()

    def parameters(self):
        return self.params

    def grads(self):
        return self._grads

    def zero_grad(self):
        self._grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def logits(self, stack):
        reps = _stack(stack)
        if reps.shape[2] != self.dim:
            raise ShapeError(f"embedding width {reps.shape[2]} != {self.dim}")
        self._reps = reps
        p = self.params
        s = self.strategy
        if s == "feature_max":
            fused, self._arg = fuse_max(reps)
        elif s == "feature_avg":
            fused = reps.mean(axis=1)
        elif s == "feature_attention":
            self._w, self._a = attention_weights(reps, p["attn_W"], p["attn_b"])
            fused = (self._w * reps).sum(axis=1)
        else:
            self._v = reps @ p["value_w"][0] + p["value_b"]
            self._u = sigmoid(reps @ p["weight_w"][0] + p["weight_b"])
            self._w = self._u / self._u.sum(axis=1, keepdims=True)
            return nnet.check_finite((self._w * self._v).sum(axis=1), "fusion logit")
        self._fused = fused
        return nnet.check_finite(fused @ p["out_W"][0] + p["out_b"][0], "fusion logit")

    def backward(self, dlogit, input_grad: bool = True):
        """Accumulate parameter gradients; return d/d(stack)."""
        g = np.asarray(dlogit, dtype=np.float64).reshape(-1)
        reps, p, grads = self._reps, self.params, self._grads
        s = self.strategy
        if s == "decision_attention":
            dw = g[:, None] * self._v
            dv = g[:, None] * self._w
            # w_m = u_m / U  =>  du_m = (dw_m - sum_k dw_k w_k) / U
            du = (dw - (dw * self._w).sum(axis=1, keepdims=True)) / self._u.sum(axis=1, keepdims=True)
            dpre = du * self._u * (1.0 - self._u)
            grads["value_w"][0] += np.einsum("bm,bmc->c", dv, reps)
            grads["value_b"] += dv.sum()
            grads["weight_w"][0] += np.einsum("bm,bmc->c", dpre, reps)
            grads["weight_b"] += dpre.sum()
            return dv[..., None] * p["value_w"][0] + dpre[..., None] * p["weight_w"][0]

        grads["out_W"][0] += g @ self._fused
        grads["out_b"] += g.sum()
        dfused = g[:, None] * p["out_W"][0]  # [B, C]
        if s == "feature_max":
            dreps = np.zeros_like(reps)
            np.put_along_axis(dreps, self._arg[:, None, :], dfused[:, None, :], axis=1)
            return dreps
        if s == "feature_avg":
            return np.repeat(dfused[:, None, :] / reps.shape[1], reps.shape[1], axis=1)
        # feature_attention: fused_c = sum_m w_mc r_mc, w = a / sum_m a
        w, a = self._w, self._a
        dw = dfused[:, None, :] * reps
        da = (dw - (dw * w).sum(axis=1, keepdims=True)) / a.sum(axis=1, keepdims=True)
        dpre = da * a * (1.0 - a)  # [B, M, C_out]
        grads["attn_W"] += np.einsum("bmo,bmi->oi", dpre, reps)
        grads["attn_b"] += dpre.sum(axis=(0, 1))
        return dfused[:, None, :] * w + dpre @ p["attn_W"]

    def predict_logits(self, stack):
        return self.logits(stack)


def combine_decisions(strategy: str, member_probs, stack=None, head: FusionHead | None = None):
    """Fused per-segment probability for any strategy.

    ``member_probs`` is ``[batch, n_models]``; ``stack`` the embeddings, needed
    by all strategies except decision max/avg.
    """
    if strategy == "decision_max":
        return _probs(member_probs).max(axis=1)
    if strategy == "decision_avg":
        return _probs(member_probs).mean(axis=1)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    if head is None or stack is None:
        raise ValueError(f"{strategy} needs a trained head and embeddings")
    return sigmoid(head.logits(stack))


def train_fusion(strategy: str, stack, labels, cfg: nnet.TrainConfig, rng):
    """Fit the fusion parameters on frozen member embeddings.

    Decision max/avg have nothing to learn and return ``(None, [])``.
    Mixup, when enabled, mixes embedding stacks.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1] < 2:
        raise ValueError("fusion needs at least two member models")
    if strategy in ("decision_max", "decision_avg"):
        return None, []
    head = FusionHead(strategy, stack.shape[2], rng)
    history = nnet.train(head, stack, labels, cfg, rng)
    return head, history


def head_state(head: FusionHead):
    return [(f"fusion.{k}", v) for k, v in head.params.items()]


def head_from_state(strategy: str, arrays: dict, dim: int = EMBED_DIM) -> FusionHead:
    head = FusionHead(strategy, dim)
    for k, v in head.params.items():
        key = f"fusion.{k}"
        if key not in arrays or arrays[key].shape != v.shape:
            raise CheckpointError(f"fusion checkpoint lacks {key}")
        v[...] = arrays[key]
    return head
