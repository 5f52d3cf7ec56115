"""Small dense classifiers (multinomial logistic regression and MLPs) with
analytic cross-entropy gradients."""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .reshape import Dense, ParamSet, Passthrough


@dataclass(frozen=True)
class ModelSpec:
    """``layer_sizes`` is ``[input_dim, hidden_1, ...]``; the output layer maps
    the last entry to ``num_classes``. ``[input_dim]`` alone is logistic regression."""

    layer_sizes: Tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 1 or any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def kinds(self) -> Tuple:
        sizes = list(self.layer_sizes) + [self.num_classes]
        kinds = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            kinds.append(Dense(fan_out, fan_in))
            kinds.append(Passthrough(fan_out))
        return tuple(kinds)


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    values = []
    for kind in spec.kinds:
        if isinstance(kind, Dense):
            bound = np.sqrt(6.0 / (kind.in_features + kind.out_features))
            values.append(rng.uniform(-bound, bound, size=kind.size))
        else:
            values.append(np.zeros(kind.size))
    return ParamSet(spec.kinds, values)


def _layers(spec: ModelSpec, w: ParamSet):
    if w.kinds != spec.kinds:
        raise ValueError("parameter shapes do not match the model spec")
    out = []
    for j in range(0, len(w.kinds), 2):
        kind = w.kinds[j]
        out.append((w.values[j].reshape(kind.out_features, kind.in_features), w.values[j + 1]))
    return out


def _act(spec, z):
    return np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)


def _act_grad(spec, z, h):
    return (z > 0).astype(np.float64) if spec.activation == "relu" else 1.0 - h * h


def _forward(spec, layers, x):
    zs, hs = [], [x]
    h = x
    for W, b in layers[:-1]:
        z = h @ W.T + b
        h = _act(spec, z)
        zs.append(z)
        hs.append(h)
    W, b = layers[-1]
    return h @ W.T + b, zs, hs


def logits(spec: ModelSpec, w: ParamSet, features) -> np.ndarray:
    out, _, _ = _forward(spec, _layers(spec, w), np.asarray(features, dtype=np.float64))
    return out


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_batch(spec, batch):
    if len(batch) < 1:
        raise ValueError("empty batch")
    if batch.features.shape[1] != spec.layer_sizes[0]:
        raise ValueError(f"features have dim {batch.features.shape[1]}, model expects {spec.layer_sizes[0]}")


def loss(spec: ModelSpec, w: ParamSet, batch: Batch) -> float:
    """Mean cross-entropy over the batch."""
    _check_batch(spec, batch)
    z = logits(spec, w, batch.features)
    logp = _log_softmax(z)
    return float(-np.mean(logp[np.arange(len(batch)), batch.labels]))


def gradient(spec: ModelSpec, w: ParamSet, batch: Batch) -> ParamSet:
    _check_batch(spec, batch)
    layers = _layers(spec, w)
    n = len(batch)
    out, zs, hs = _forward(spec, layers, batch.features)
    delta = np.exp(_log_softmax(out))
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    grads: List[np.ndarray] = []
    for j in range(len(layers) - 1, -1, -1):
        W, _ = layers[j]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ hs[j]).reshape(-1))
        if j > 0:
            delta = (delta @ W) * _act_grad(spec, zs[j - 1], hs[j])
    grads.reverse()
    return ParamSet(w.kinds, grads)


def gradient_at_sum(spec: ModelSpec, w: ParamSet, p: ParamSet, batch: Batch) -> ParamSet:
    """Gradient of the loss at ``w + p`` (taken with respect to ``p``)."""
    w.check_compatible(p)
    return gradient(spec, w + p, batch)


def evaluate(spec: ModelSpec, w: ParamSet, p: Optional[ParamSet], test: Batch) -> float:
    """Top-1 accuracy of ``w`` (or ``w + p``); argmax ties go to the lowest class."""
    if len(test) == 0:
        raise ValueError("empty test set")
    params = w if p is None else w + p
    pred = np.argmax(logits(spec, params, test.features), axis=1)
    return float(np.mean(pred == test.labels))
