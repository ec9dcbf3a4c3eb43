"""Feedforward networks in numpy: dense layers, ReLU, inverted dropout, BCE/MSE, Adam.

Parameters are stored at the model's dtype (float32 by default); every
forward/backward computation and all optimizer state run in float64.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyDataset, SchemaViolation, ShapeMismatch

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
_MAGIC = "CODEXNN 1"


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    dropout_rates: tuple[float, ...] = ()
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        rates = tuple(float(r) for r in self.dropout_rates) or (0.0,) * len(self.hidden_dims)
        object.__setattr__(self, "dropout_rates", rates)
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden_dims):
            raise ValueError(f"layer sizes must be positive: {self}")
        if len(self.dropout_rates) != len(self.hidden_dims):
            raise ValueError("one dropout rate per hidden layer")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["dropout_rates"] = list(self.dropout_rates)
        return d


@dataclass
class MlpModel:
    spec: NetworkSpec
    weights: list[np.ndarray]  # layer l: (out, in)
    biases: list[np.ndarray]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def predict(self, X) -> np.ndarray:
        return forward(self, X, training=False)[0]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1 and learning_rate > 0 required")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_model(cls, model: MlpModel) -> "AdamState":
        zeros = [np.zeros(p.shape, dtype=np.float64) for p in model.params()]
        return cls([z.copy() for z in zeros], zeros, 0)


def init_mlp(spec: NetworkSpec, seed: int, dtype=np.float32) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpModel(spec, weights, biases)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]   # input to each layer (post-dropout activations)
    pre: list[np.ndarray]      # pre-activations per layer
    masks: list[Optional[np.ndarray]]
    output: np.ndarray = field(default=None)


def forward(model: MlpModel, X, training: bool = False, dropout_seed=None):
    """Run the network; returns (output, cache).

    Dropout is active only when ``training`` is true; kept units are scaled
    by 1/(1 - rate) so inference needs no rescaling.
    """
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.spec.input_dim:
        raise ShapeMismatch(f"expected (n, {model.spec.input_dim}) input, got {a.shape}")
    rng = np.random.default_rng(dropout_seed) if training else None
    cache = ForwardCache([], [], [])
    n_layers = len(model.weights)
    for layer, (W, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(a)
        z = a @ W.astype(np.float64).T + b.astype(np.float64)
        cache.pre.append(z)
        if layer < n_layers - 1:
            a = np.maximum(z, 0.0)
            rate = model.spec.dropout_rates[layer]
            mask = None
            if training and rate > 0.0:
                mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
                a = a * mask
            cache.masks.append(mask)
        else:
            a = sigmoid(z) if model.spec.output_activation == "sigmoid" else z
    cache.output = a
    return a, cache


def bce_loss(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs target {t.shape}")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def mse_loss(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred {p.shape} vs target {t.shape}")
    return float(np.mean((p - t) ** 2))


LOSSES = {"bce": bce_loss, "mse": mse_loss}


def _output_delta(model: MlpModel, cache: ForwardCache, T: np.ndarray, loss: str) -> np.ndarray:
    y, z = cache.output, cache.pre[-1]
    n = y.size
    sig = model.spec.output_activation == "sigmoid"
    if loss == "bce":
        if not sig:
            raise ValueError("bce needs a sigmoid output")
        inside = (y >= BCE_EPS) & (y <= 1.0 - BCE_EPS)
        # d/dz of the clamped loss; zero where the clamp is active
        return np.where(inside, y - T, 0.0) / n
    if loss == "mse":
        dy = 2.0 * (y - T) / n
        return dy * y * (1.0 - y) if sig else dy
    raise ValueError(f"unknown loss {loss!r}")


def backward(model: MlpModel, cache: ForwardCache, targets, loss: str = "bce"):
    """Exact gradients of the mean loss; returns (weight grads, bias grads) in float64."""
    T = np.asarray(targets, dtype=np.float64)
    if T.shape != cache.output.shape:
        raise ShapeMismatch(f"targets {T.shape} vs output {cache.output.shape}")
    delta = _output_delta(model, cache, T, loss)
    gW: list[np.ndarray] = [None] * len(model.weights)
    gb: list[np.ndarray] = [None] * len(model.weights)
    for layer in range(len(model.weights) - 1, -1, -1):
        gW[layer] = delta.T @ cache.inputs[layer]
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        da = delta @ model.weights[layer].astype(np.float64)
        mask = cache.masks[layer - 1]
        if mask is not None:
            da = da * mask
        delta = da * (cache.pre[layer - 1] > 0)
    return gW, gb


def adam_step(model: MlpModel, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, in place; returns (model, state)."""
    gW, gb = grads
    flat = []
    for w, b in zip(gW, gb):
        flat += [w, b]
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(model.params(), flat)):
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g
        m_hat = state.m[i] / (1.0 - config.beta1 ** t)
        v_hat = state.v[i] / (1.0 - config.beta2 ** t)
        update = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
    return model, state


def _batch_seed(seed: int, epoch: int, batch: int) -> list[int]:
    return [seed, epoch, batch]


def evaluate_loss(model: MlpModel, X, Y, loss: str = "bce", batch_size: int = 4096) -> float:
    total, n = 0.0, 0
    for a in range(0, len(X), batch_size):
        out = forward(model, X[a:a + batch_size])[0]
        total += LOSSES[loss](out, Y[a:a + batch_size]) * out.size
        n += out.size
    return total / n


def train(
    model: MlpModel,
    X,
    Y,
    X_dev=None,
    Y_dev=None,
    config: TrainConfig = TrainConfig(),
    loss: str = "bce",
):
    """Mini-batch Adam with early stopping on dev loss.

    The dev loss of the untrained model is the first reference point, so a
    dev loss that only worsens stops training after ``patience + 1`` epochs.
    Returns (best model snapshot, history).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0:
        raise EmptyDataset("empty training set")
    if len(X) != len(Y):
        raise ShapeMismatch(f"{len(X)} inputs vs {len(Y)} targets")
    has_dev = X_dev is not None and len(X_dev) > 0
    if has_dev:
        X_dev = np.asarray(X_dev, dtype=np.float64)
        Y_dev = np.asarray(Y_dev, dtype=np.float64)
    model = model.copy()
    state = AdamState.for_model(model)
    best = model.copy()
    best_loss = evaluate_loss(model, X_dev, Y_dev, loss) if has_dev else np.inf
    history = {"initial_dev_loss": best_loss if has_dev else None, "epochs": []}
    wait = 0
    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(X))
        total = 0.0
        for b, start in enumerate(range(0, len(X), config.batch_size)):
            idx = order[start:start + config.batch_size]
            out, cache = forward(model, X[idx], training=True,
                                 dropout_seed=_batch_seed(config.seed, epoch, b))
            total += LOSSES[loss](out, Y[idx]) * len(idx)
            adam_step(model, backward(model, cache, Y[idx], loss), state, config)
        record = {"epoch": epoch + 1, "train_loss": total / len(X)}
        if has_dev:
            dev_loss = evaluate_loss(model, X_dev, Y_dev, loss)
            record["dev_loss"] = dev_loss
            if dev_loss < best_loss:
                best_loss, best, wait = dev_loss, model.copy(), 0
            else:
                wait += 1
        history["epochs"].append(record)
        if has_dev and wait > config.patience:
            break
    if not has_dev:
        best = model
    log.debug("trained %s for %d epochs, best dev loss %s",
              model.spec.layer_dims, len(history["epochs"]), best_loss)
    return best, history


def save_model(model: MlpModel, path: str | Path, meta: dict | None = None) -> None:
    """Named-tensor container: text header, blank line, little-endian raw values."""
    lines = [_MAGIC, "spec " + json.dumps(model.spec.to_dict(), sort_keys=True),
             "meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        for name, arr in ((f"W{layer}", w), (f"b{layer}", b)):
            lines.append(f"tensor {name} {','.join(map(str, arr.shape))} {arr.dtype.itemsize}")
            blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def read_model_header(path: str | Path) -> tuple[dict, dict, list[tuple[str, tuple, int]], int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, _ = raw.partition(b"\n\n")
    if not sep:
        raise SchemaViolation(f"{path}: missing header terminator")
    lines = head.decode("utf-8").split("\n")
    if lines[0] != _MAGIC:
        raise SchemaViolation(f"{path}: not a model file")
    spec = json.loads(lines[1].removeprefix("spec "))
    meta = json.loads(lines[2].removeprefix("meta "))
    tensors = []
    for line in lines[3:]:
        _, name, shape, width = line.split(" ")
        tensors.append((name, tuple(int(s) for s in shape.split(",")), int(width)))
    return spec, meta, tensors, len(head) + 2


def load_model(path: str | Path) -> tuple[MlpModel, dict]:
    spec_d, meta, tensors, offset = read_model_header(path)
    spec = NetworkSpec(**{**spec_d, "hidden_dims": tuple(spec_d["hidden_dims"]),
                          "dropout_rates": tuple(spec_d["dropout_rates"])})
    with open(path, "rb") as fh:
        fh.seek(offset)
        data = fh.read()
    arrays = {}
    pos = 0
    for name, shape, width in tensors:
        dt = np.dtype(f"<f{width}")
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += count * width
    n = len(spec.layer_dims) - 1
    model = MlpModel(spec, [arrays[f"W{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)])
    return model, meta
