"""Single-model classifiers, each exposing a 256-d penultimate embedding.

``handcrafted_dnn`` is a three-layer MLP over a functional feature vector.
``spec_cnn_a`` (128 Mel bins) and ``spec_cnn_b`` (64 Mel bins) are small
convolutional backbones over log-Mel spectrograms that take the slots of the
image-pretrained and audio-pretrained networks. They convolve over time with
Mel bins as input channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nnet
from .errors import CheckpointError, ShapeError
from .nnet import GlobalAvgMaxPool, Linear, MaxPool1d, ReLU, Sequential

MODEL_KINDS = ("handcrafted_dnn", "spec_cnn_a", "spec_cnn_b")
EMBED_DIM = 256
HIDDEN_DIM = 1024
SLOT_MELS = {"spec_cnn_a": 128, "spec_cnn_b": 64}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple  # (n_features,) or (n_mels, n_frames)
    features: str = ""  # hand-crafted feature set name, informational
    channels: tuple = (32, 64)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind == "handcrafted_dnn" and len(self.input_shape) != 1:
            raise ValueError("handcrafted_dnn takes a flat feature vector")
        if self.kind != "handcrafted_dnn":
            if len(self.input_shape) != 2 or self.input_shape[0] != SLOT_MELS[self.kind]:
                raise ValueError(f"{self.kind} takes [{SLOT_MELS[self.kind]} x n_frames] log-Mels")

    @property
    def is_spectral(self) -> bool:
        return self.kind != "handcrafted_dnn"

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["kind"], tuple(d["input_shape"]), d.get("features", ""), tuple(d.get("channels", (32, 64))))


@dataclass
class ModelOutput:
    logit: np.ndarray  # [batch]
    embedding: np.ndarray  # [batch, 256]


def classifier_head(n_in, rng=None):
    """linear(n_in->1024) ReLU linear(1024->256) ReLU; the final 256->1 layer is kept separately."""
    trunk = Sequential([Linear(n_in, HIDDEN_DIM, rng), ReLU(), Linear(HIDDEN_DIM, EMBED_DIM, rng), ReLU()], "head")
    return trunk, Linear(EMBED_DIM, 1, rng)


class SingleModel:
    """Input standardization + optional backbone + classifier head."""

    def __init__(self, spec: ModelSpec, rng=None):
        self.spec = spec
        if spec.is_spectral:
            n_mels = spec.input_shape[0]
            c1, c2 = spec.channels
            self.backbone = Sequential([
                nnet.Conv1d(n_mels, c1, 3, "edge", rng), ReLU(), MaxPool1d(),
                nnet.Conv1d(c1, c2, 3, "edge", rng), ReLU(), MaxPool1d(),
                GlobalAvgMaxPool(),
            ], "backbone")
            head_in = 2 * c2
            norm_shape = (n_mels, 1)
        else:
            self.backbone = Sequential([], "backbone")
            head_in = spec.input_shape[0]
            norm_shape = (head_in,)
        self.trunk, self.out = classifier_head(head_in, rng)
        self.norm_mean = np.zeros(norm_shape)
        self.norm_std = np.ones(norm_shape)

    # -- normalization --
    def fit_normalizer(self, X):
        X = np.asarray(X, dtype=np.float64)
        axes = (0, 2) if self.spec.is_spectral else (0,)
        self.norm_mean = X.mean(axis=axes).reshape(self.norm_mean.shape)
        std = X.std(axis=axes).reshape(self.norm_std.shape)
        self.norm_std = np.where(std > 1e-8, std, 1.0)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        want = self.spec.input_shape
        if self.spec.is_spectral:
            if x.ndim == 2:
                x = x[None]
            if x.ndim != 3 or x.shape[1] != want[0]:
                raise ShapeError(f"{self.spec.kind} expects [batch, {want[0]}, frames], got {x.shape}")
        else:
            if x.ndim == 1:
                x = x[None]
            if x.ndim != 2 or x.shape[1] != want[0]:
                raise ShapeError(f"{self.spec.kind} expects [batch, {want[0]}], got {x.shape}")
        return x

    # -- forward / backward --
    def forward(self, x) -> ModelOutput:
        x = self._check_input(x)
        h = self.backbone.forward((x - self.norm_mean) / self.norm_std)
        emb = self.trunk.forward(h)
        logit = self.out.forward(emb)[:, 0]
        return ModelOutput(nnet.check_finite(logit, "logit"), emb)

    def backward(self, dlogit, dembedding=None, input_grad: bool = True):
        """Accumulate parameter gradients; return d/d(raw input) (``None`` if not requested)."""
        demb = self.out.backward(np.asarray(dlogit, dtype=np.float64).reshape(-1, 1))
        if dembedding is not None:
            demb = demb + dembedding
        dh = self.trunk.backward(demb)
        dx = self.backbone.backward(dh, input_grad)
        return None if dx is None else dx / self.norm_std

    # trainer protocol
    def logits(self, x):
        return self.forward(x).logit

    def embed(self, x, batch_size: int = 64):
        outs = [self.forward(x[i:i + batch_size]).embedding for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def predict_logits(self, x, batch_size: int = 64):
        outs = [self.forward(x[i:i + batch_size]).logit for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def _layers(self):
        named = []
        for seq in (self.backbone, self.trunk):
            named.extend(seq.named_params())
        for k, p in self.out.params.items():
            named.append((f"out.{k}", p, self.out, k))
        return named

    def parameters(self) -> dict:
        return {name: p for name, p, _, _ in self._layers()}

    def grads(self) -> dict:
        return {name: layer.grads[k] for name, _, layer, k in self._layers()}

    def zero_grad(self):
        for seq in (self.backbone, self.trunk):
            for layer in seq.layers:
                layer.zero_grad()
        self.out.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # -- persistence --
    def state(self):
        arrays = [("norm.mean", self.norm_mean), ("norm.std", self.norm_std)]
        arrays.extend(self.parameters().items())
        return arrays

    def load_state(self, arrays: dict):
        self.norm_mean = arrays["norm.mean"].copy()
        self.norm_std = arrays["norm.std"].copy()
        for name, p, _, _ in self._layers():
            if name not in arrays or arrays[name].shape != p.shape:
                raise CheckpointError(f"checkpoint parameter {name} missing or misshaped")
            p[...] = arrays[name]

    def save(self, path, extra: dict | None = None) -> str:
        header = {"artifact": "single_model", "model": self.spec.to_json(),
                  "layers": {"backbone": self.backbone.spec(), "head": self.trunk.spec(),
                             "out": self.out.spec()}}
        if extra:
            header.update(extra)
        return nnet.save_checkpoint(path, header, self.state())

    @classmethod
    def from_checkpoint(cls, spec_json: dict, arrays: dict) -> "SingleModel":
        if spec_json.get("artifact") != "single_model":
            raise CheckpointError("not a single-model checkpoint")
        model = cls(ModelSpec.from_json(spec_json["model"]))
        model.load_state(arrays)
        return model

    @classmethod
    def load(cls, path) -> "SingleModel":
        spec_json, arrays, _ = nnet.load_checkpoint(path)
        return cls.from_checkpoint(spec_json, arrays)


def handcrafted_dnn_forward(model: SingleModel, fv) -> ModelOutput:
    if model.spec.kind != "handcrafted_dnn":
        raise ValueError(f"model is {model.spec.kind}, not handcrafted_dnn")
    return model.forward(getattr(fv, "values", fv))


def spec_backbone_forward(model: SingleModel, mel) -> ModelOutput:
    if not model.spec.is_spectral:
        raise ValueError("model has no spectrogram backbone")
    values = getattr(mel, "values", mel)
    values = np.asarray(values, dtype=np.float64)
    n_mels = values.shape[-2]
    if n_mels != SLOT_MELS[model.spec.kind]:
        raise ShapeError(f"{model.spec.kind} needs {SLOT_MELS[model.spec.kind]} Mel bins, got {n_mels}")
    return model.forward(values)


def predict_segment_prob(model: SingleModel, x) -> np.ndarray:
    return nnet.sigmoid(model.forward(x).logit)
