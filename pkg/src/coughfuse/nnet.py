"""A small numpy neural-network stack with hand-written backward passes.

Only the layer vocabulary the classifiers need is provided: dense layers,
odd-kernel 1-D convolutions, ReLU, sigmoid, length-2 max-pooling and a global
average+max pool. All arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, NonFiniteError, ShapeError

BASE_LR = 1e-3
LR_DECAY = 0.1
LR_STEP_EPOCHS = 10


def check_finite(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")
    return arr


# --- functional ops --------------------------------------------------------

def linear_forward(x, W, b):
    """y = x @ W.T + b for x [batch, in], W [out, in], b [out]."""
    x, W, b = np.asarray(x, float), np.asarray(W, float), np.asarray(b, float)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def linear_backward(x, W, dy):
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def _pad(x, pad: int, mode: str):
    if pad == 0:
        return x
    if mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    if mode == "edge":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad)), mode="edge")
    raise ValueError(f"unknown padding mode {mode!r}")


def conv1d_forward(x, W, b, padding: str = "zeros"):
    """Stride-1 cross-correlation with 'same' output length.

    x [batch, ch_in, len], W [ch_out, ch_in, k] with odd k, b [ch_out].
    ``padding`` is ``"zeros"`` or ``"edge"`` (replicate border samples).
    """
    x, W, b = np.asarray(x, float), np.asarray(W, float), np.asarray(b, float)
    if x.ndim != 3 or W.ndim != 3 or W.shape[1] != x.shape[1] or W.shape[2] % 2 == 0 \
            or b.shape != (W.shape[0],):
        raise ShapeError(f"conv1d: x {x.shape}, W {W.shape}, b {b.shape}")
    length = x.shape[2]
    k = W.shape[2]
    xp = _pad(x, k // 2, padding)
    # one batched matmul per tap; contiguous kernel slices keep numpy on BLAS
    y = np.matmul(np.ascontiguousarray(W[:, :, 0]), xp[:, :, 0:length])
    for i in range(1, k):
        y += np.matmul(np.ascontiguousarray(W[:, :, i]), xp[:, :, i:i + length])
    y += b[:, None]
    return y


def conv1d_backward(x, W, dy, padding: str = "zeros", need_dx: bool = True):
    length = x.shape[2]
    k = W.shape[2]
    pad = k // 2
    xp = _pad(x, pad, padding)
    dW = np.empty_like(W)
    for i in range(k):
        dW[:, :, i] = np.matmul(dy, xp[:, :, i:i + length].transpose(0, 2, 1)).sum(axis=0)
    db = dy.sum(axis=(0, 2))
    if not need_dx:
        return None, dW, db
    dxp = np.zeros(xp.shape)
    for i in range(k):
        dxp[:, :, i:i + length] += np.matmul(np.ascontiguousarray(W[:, :, i].T), dy)
    if pad == 0:
        return dxp, dW, db
    dx = dxp[:, :, pad:-pad].copy()
    if padding == "edge":
        dx[:, :, 0] += dxp[:, :, :pad].sum(axis=2)
        dx[:, :, -1] += dxp[:, :, -pad:].sum(axis=2)
    return dx, dW, db


def conv1d_k1_forward(x, W, b):
    """Kernel-1 convolution: the same dense map applied at every position.

    x [batch, ch_in, len], W [ch_out, ch_in], b [ch_out].
    """
    W = np.asarray(W, float)
    if W.ndim != 2:
        raise ShapeError(f"conv1d_k1 expects W [ch_out, ch_in], got {W.shape}")
    return conv1d_forward(x, W[:, :, None], b)


def conv1d_k3_forward(x, W, b, padding: str = "zeros"):
    W = np.asarray(W, float)
    if W.ndim != 3 or W.shape[2] != 3:
        raise ShapeError(f"conv1d_k3 expects W [ch_out, ch_in, 3], got {W.shape}")
    return conv1d_forward(x, W, b, padding)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    return np.logaddexp(0.0, z)


def bce_with_logits(z, y, pos_weight: float = 1.0):
    """Weighted binary cross-entropy on logits, averaged over the batch.

    Returns ``(loss, dloss/dz)``. Soft targets in [0, 1] are allowed.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs targets {y.shape}")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("targets must lie in [0, 1]")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    # -log sigma(z) = softplus(-z), -log(1 - sigma(z)) = softplus(z)
    losses = pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)
    s = sigmoid(z)
    grad = (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / z.size
    return float(losses.mean()), grad


# --- optimizer and schedule ------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Bias-corrected Adam update of ``params`` in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        # lr * m_hat / (sqrt(v_hat) + eps), evaluated in one scratch buffer
        step = np.sqrt(v)
        step *= 1.0 / np.sqrt(bc2)
        step += state.eps
        np.divide(m, step, out=step)
        step *= state.lr / bc1
        p -= step


def lr_at(epoch: int, base_lr: float = BASE_LR, decay: float = LR_DECAY,
          step_epochs: int = LR_STEP_EPOCHS) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * decay ** (epoch // step_epochs)


# --- mixup -----------------------------------------------------------------

@dataclass(frozen=True)
class MixupConfig:
    beta_shape: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.beta_shape > 0:
            raise ValueError("beta_shape must be positive")


def mixup(x1, y1, x2, y2, rng=None, cfg: MixupConfig = MixupConfig(), alpha=None):
    """Convex combination of two examples with alpha ~ Beta(a, a).

    ``alpha`` may be a scalar or one value per row of a batch; pass it to
    force the mixing weight instead of sampling.
    """
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    y1, y2 = np.asarray(y1, dtype=np.float64), np.asarray(y2, dtype=np.float64)
    if x1.shape != x2.shape or y1.shape != y2.shape:
        raise ShapeError(f"mixup operands differ: {x1.shape}/{x2.shape}, {y1.shape}/{y2.shape}")
    if alpha is None:
        alpha = rng.beta(cfg.beta_shape, cfg.beta_shape, size=y1.shape or None)
    alpha = np.asarray(alpha, dtype=np.float64)
    ax = alpha.reshape(alpha.shape + (1,) * (x1.ndim - alpha.ndim))
    return ax * x1 + (1.0 - ax) * x2, alpha * y1 + (1.0 - alpha) * y2


# --- layers ----------------------------------------------------------------

def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"type": self.kind}

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["W"] = kaiming_uniform(rng, (n_out, n_in), n_in) if rng is not None else np.zeros((n_out, n_in))
        self.params["b"] = np.zeros(n_out)
        self.zero_grad()

    def spec(self):
        return {"type": self.kind, "in": self.n_in, "out": self.n_out}

    def forward(self, x):
        self._x = x
        return linear_forward(x, self.params["W"], self.params["b"])

    def backward(self, dy):
        dx, dW, db = linear_backward(self._x, self.params["W"], dy)
        self.grads["W"] += dW
        self.grads["b"] += db
        return dx


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, ch_in, ch_out, kernel=3, padding="zeros", rng=None):
        super().__init__()
        self.ch_in, self.ch_out, self.kernel, self.padding = ch_in, ch_out, kernel, padding
        shape = (ch_out, ch_in, kernel)
        self.params["W"] = kaiming_uniform(rng, shape, ch_in * kernel) if rng is not None else np.zeros(shape)
        self.params["b"] = np.zeros(ch_out)
        self.zero_grad()

    def spec(self):
        return {"type": self.kind, "in": self.ch_in, "out": self.ch_out,
                "kernel": self.kernel, "padding": self.padding}

    def forward(self, x):
        self._x = x
        return conv1d_forward(x, self.params["W"], self.params["b"], self.padding)

    def backward(self, dy, need_dx=True):
        dx, dW, db = conv1d_backward(self._x, self.params["W"], dy, self.padding, need_dx)
        self.grads["W"] += dW
        self.grads["b"] += db
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class MaxPool1d(Layer):
    """Non-overlapping length-2 max over the last axis; an odd trailing sample is dropped."""

    kind = "maxpool2"

    def forward(self, x):
        b, c, n = x.shape
        self._shape = x.shape
        pairs = x[:, :, :n - n % 2].reshape(b, c, n // 2, 2)
        self._arg = pairs.argmax(axis=3)
        return np.take_along_axis(pairs, self._arg[..., None], axis=3)[..., 0]

    def backward(self, dy):
        b, c, n = self._shape
        dpairs = np.zeros((b, c, n // 2, 2))
        np.put_along_axis(dpairs, self._arg[..., None], dy[..., None], axis=3)
        dx = np.zeros(self._shape)
        dx[:, :, :n - n % 2] = dpairs.reshape(b, c, -1)
        return dx


class GlobalAvgMaxPool(Layer):
    """[batch, ch, len] -> [batch, 2*ch]: mean over length, then max over length."""

    kind = "global_avg_max"

    def forward(self, x):
        self._shape = x.shape
        self._arg = x.argmax(axis=2)
        return np.concatenate([x.mean(axis=2), x.max(axis=2)], axis=1)

    def backward(self, dy):
        b, c, n = self._shape
        dx = np.repeat(dy[:, :c, None] / n, n, axis=2)
        np.add.at(dx, (np.arange(b)[:, None], np.arange(c)[None, :], self._arg), dy[:, c:])
        return dx


LAYER_TYPES = {cls.kind: cls for cls in (Linear, Conv1d, ReLU, Sigmoid, MaxPool1d, GlobalAvgMaxPool)}


def layer_from_spec(spec: dict) -> Layer:
    t = spec["type"]
    if t == "linear":
        return Linear(spec["in"], spec["out"])
    if t == "conv1d":
        return Conv1d(spec["in"], spec["out"], spec["kernel"], spec["padding"])
    return LAYER_TYPES[t]()


class Sequential:
    def __init__(self, layers, name: str = "seq"):
        self.layers = list(layers)
        self.name = name

    def forward(self, x):
        x = check_finite(np.asarray(x, dtype=np.float64), f"{self.name} input")
        for i, layer in enumerate(self.layers):
            x = check_finite(layer.forward(x), f"{self.name}[{i}] {layer.kind} forward")
        return x

    def backward(self, dy, input_grad: bool = True):
        """Backpropagate through all layers. With ``input_grad=False`` a leading
        convolution skips its input gradient and ``None`` is returned."""
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and not input_grad and isinstance(layer, Conv1d):
                layer.backward(dy, need_dx=False)
                return None
            dy = check_finite(layer.backward(dy), f"{self.name}[{i}] backward")
        return dy

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, p in layer.params.items():
                yield f"{self.name}.{i}.{k}", p, layer, k

    def spec(self):
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_spec(cls, specs, name):
        return cls([layer_from_spec(s) for s in specs], name)


# --- checkpoints -----------------------------------------------------------

MAGIC = b"CSNN"
VERSION = 1


def save_checkpoint(path, spec: dict, arrays) -> str:
    """Write header + JSON spec + little-endian float64 blobs; return the sha256 of the bytes.

    ``arrays`` is an ordered iterable of ``(name, ndarray)``; the order and
    shapes are recorded in ``spec["params"]``.
    """
    arrays = [(n, np.ascontiguousarray(a, dtype="<f8")) for n, a in arrays]
    spec = dict(spec)
    spec["params"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    js = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<II", VERSION, len(js)) + js + b"".join(a.tobytes() for _, a in arrays)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path):
    """Return ``(spec, {name: array}, sha256)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        spec = json.loads(blob[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off = 12 + n
    arrays = {}
    for entry in spec["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return spec, arrays, hashlib.sha256(blob).hexdigest()


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# --- training loop ---------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = BASE_LR
    lr_decay: float = LR_DECAY
    lr_step: int = LR_STEP_EPOCHS
    mixup: bool = True
    beta_shape: float = 1.0
    pos_weight: str = "auto"


def resolve_pos_weight(setting, labels) -> float:
    """``auto``: n_negative / n_positive. ``pos_over_neg``: the inverse ratio. Otherwise a number."""
    labels = np.asarray(labels)
    n_pos = float((labels >= 0.5).sum())
    n_neg = float(labels.size - n_pos)
    if setting == "auto":
        return n_neg / n_pos if n_pos and n_neg else 1.0
    if setting == "pos_over_neg":
        return n_pos / n_neg if n_pos and n_neg else 1.0
    value = float(setting)
    if value <= 0:
        raise ValueError("pos_weight must be positive")
    return value


def train(model, X, y, cfg: TrainConfig, rng) -> list[float]:
    """Minibatch Adam on weighted BCE; returns the mean loss of each epoch.

    ``model`` needs ``logits(x)``, ``backward(dlogit)``, ``parameters()``,
    ``grads()`` and ``zero_grad()``. With mixup on, every batch is extended
    by a mixed copy of itself (each row paired with another row of the batch).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    pos_weight = resolve_pos_weight(cfg.pos_weight, y)
    mix_cfg = MixupConfig(cfg.beta_shape, cfg.mixup)
    state = OptimizerState()
    params = model.parameters()
    history = []
    for epoch in range(cfg.epochs):
        state.lr = lr_at(epoch, cfg.lr, cfg.lr_decay, cfg.lr_step)
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            if mix_cfg.enabled and len(idx) > 1:
                partner = np.roll(np.arange(len(idx)), int(rng.integers(1, len(idx))))
                xm, ym = mixup(xb, yb, xb[partner], yb[partner], rng, mix_cfg)
                xb = np.concatenate([xb, xm])
                yb = np.concatenate([yb, ym])
            model.zero_grad()
            loss, dz = bce_with_logits(model.logits(xb), yb, pos_weight)
            model.backward(dz, input_grad=False)
            grads = model.grads()
            for name in params:
                check_finite(grads[name], f"gradient of {name}")
            adam_step(params, grads, state)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history
