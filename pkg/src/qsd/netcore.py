"""Dense rectifier network with dilution hooks, trained by momentum SGD.

Shapes follow the convention ``z = x @ W.T + b`` with ``W`` of shape
``(fan_out, fan_in)``.  All arithmetic is float64.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dilution import CoefficientBatch, DilutionConfig, sample_coefficients
from .errors import DataFormatError, NumericError, ShapeError, UsageError
from .stochastics import RngStream

MNIST_WIDTHS = (784, 128, 256, 512, 10)


@dataclass
class MlpModel:
    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dilution: list[DilutionConfig]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ShapeError(f"invalid layer widths {self.widths}")
        n_layers = len(self.widths) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("need one weight matrix and bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i + 1], self.widths[i]):
                raise ShapeError(f"layer {i} weight shape {w.shape} does not match widths")
            if b.shape != (self.widths[i + 1],):
                raise ShapeError(f"layer {i} bias shape {b.shape} does not match widths")
        if len(self.dilution) != self.n_hidden:
            raise ShapeError(f"need {self.n_hidden} dilution configs, got {len(self.dilution)}")

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpModel:
        return MlpModel(
            self.widths,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.dilution),
        )

    def with_dilution(self, dilution: Sequence[DilutionConfig] | DilutionConfig) -> MlpModel:
        """Same parameters (shared, not copied) under other dilution configs."""
        if isinstance(dilution, DilutionConfig):
            dilution = [dilution] * self.n_hidden
        return MlpModel(self.widths, self.weights, self.biases, list(dilution))


def init_variance_scaling(
    widths: Sequence[int],
    stream: RngStream,
    dilution: Sequence[DilutionConfig] | DilutionConfig | None = None,
) -> MlpModel:
    """He-style initialisation: W ~ N(0, 2 / fan_in), zero biases."""
    widths = tuple(int(w) for w in widths)
    n_hidden = len(widths) - 2
    if dilution is None:
        dilution = DilutionConfig()
    if isinstance(dilution, DilutionConfig):
        dilution = [dilution] * n_hidden
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(stream.normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out))
    return MlpModel(widths, weights, biases, list(dilution))


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, consumed by :func:`backward`.

    ``hidden_outputs`` holds the post-dilution outputs in training mode and
    the plain rectified activations in evaluation mode.
    """

    model: MlpModel
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    hidden_outputs: list[np.ndarray]
    coefficients: list[CoefficientBatch]
    logits: np.ndarray
    train: bool
    consumed: bool = field(default=False)


def forward(
    model: MlpModel,
    x: np.ndarray,
    stream: RngStream | None = None,
    *,
    train: bool | None = None,
    coefficients: Sequence[CoefficientBatch | np.ndarray] | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch of row vectors.

    Training mode is selected by passing ``stream`` (fresh coefficients are
    drawn for each hidden layer, in layer order) or by passing explicit
    ``coefficients`` to replay an earlier draw.  Otherwise the dilution
    transforms are the identity and no randomness is consumed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.widths[0]:
        raise ShapeError(f"expected input of shape (B, {model.widths[0]}), got {x.shape}")
    if train is None:
        train = stream is not None or coefficients is not None
    if coefficients is not None and len(coefficients) != model.n_hidden:
        raise ShapeError(f"need {model.n_hidden} coefficient vectors, got {len(coefficients)}")

    pre, outs, coefs = [], [], []
    h = x
    for i in range(model.n_hidden):
        with np.errstate(over="ignore", invalid="ignore"):
            # non-finite values are reported below with the layer index
            z = h @ model.weights[i].T + model.biases[i]
        a = np.maximum(z, 0.0)
        if train:
            if coefficients is not None:
                c = coefficients[i]
                if not isinstance(c, CoefficientBatch):
                    c = CoefficientBatch.from_coefficients(c)
            else:
                cfg = model.dilution[i]
                rows = x.shape[0] if cfg.per_example else None
                c = sample_coefficients(cfg, model.widths[i + 1], stream, rows)
            cshape = c.coefficients.shape
            if cshape[-1] != a.shape[1] or (len(cshape) == 2 and cshape[0] != a.shape[0]):
                raise ShapeError(f"layer {i}: coefficients of shape {cshape} for activations {a.shape}")
            a = a * c.coefficients
            coefs.append(c)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in hidden layer {i}", layer=i)
        pre.append(z)
        outs.append(a)
        h = a
    with np.errstate(over="ignore", invalid="ignore"):
        logits = h @ model.weights[-1].T + model.biases[-1]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits", layer=model.n_hidden)
    cache = ForwardCache(model, x, pre, outs, coefs, logits, train)
    return logits, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataFormatError(f"labels must lie in [0, {n_classes - 1}]", field="labels")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, float]:
    """Mean cross-entropy in nats and the argmax error rate."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = _log_softmax(logits)
    rows = np.arange(logits.shape[0])
    cost = float(-logp[rows, labels].mean())
    error = float(np.mean(np.argmax(logits, axis=1) != labels))
    return cost, error


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backward(cache: ForwardCache | None, labels) -> Gradients:
    """Gradients of the mean cross-entropy, holding coefficient draws fixed.

    Each cache can be used once; the rectifier derivative at 0 is taken as 0.
    """
    if cache is None:
        raise UsageError("backward needs the cache of a preceding forward pass")
    if cache.consumed:
        raise UsageError("forward cache already consumed by a previous backward pass")
    model = cache.model
    batch = cache.inputs.shape[0]
    labels = _check_labels(labels, batch, model.widths[-1])

    probs = np.exp(_log_softmax(cache.logits))
    probs[np.arange(batch), labels] -= 1.0
    delta = probs / batch

    n_layers = len(model.weights)
    grad_w: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    grad_b: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for layer in range(n_layers - 1, -1, -1):
        h_in = cache.inputs if layer == 0 else cache.hidden_outputs[layer - 1]
        grad_w[layer] = delta.T @ h_in
        grad_b[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        d_out = delta @ model.weights[layer]
        hidden = layer - 1
        if cache.train:
            d_out = d_out * cache.coefficients[hidden].coefficients
        delta = d_out * (cache.pre_activations[hidden] > 0.0)
    cache.consumed = True
    return Gradients(grad_w, grad_b)


@dataclass
class OptimizerState:
    momentum: float
    velocities: list[np.ndarray]
    epoch: int = 0

    @classmethod
    def for_model(cls, model: MlpModel, momentum: float = 0.9) -> OptimizerState:
        return cls(momentum, [np.zeros_like(p) for p in model.parameters()])


def sgd_momentum_step(
    model: MlpModel, grads: Gradients, state: OptimizerState, lr: float
) -> tuple[MlpModel, OptimizerState]:
    """Heavy-ball update v <- mu v - lr g; theta <- theta + v, in place."""
    params = model.parameters()
    g = grads.parameters()
    if len(g) != len(params) or len(state.velocities) != len(params):
        raise ShapeError("gradient/velocity count does not match model parameters")
    for theta, grad, v in zip(params, g, state.velocities):
        if grad.shape != theta.shape or v.shape != theta.shape:
            raise ShapeError(f"shape mismatch {grad.shape} vs {theta.shape}")
        v *= state.momentum
        v -= lr * grad
        theta += v
    return model, state


def lr_schedule(
    epoch: int,
    base_lr: float = 0.01,
    factor: float = 0.2,
    milestones: Sequence[int] = (30, 60, 80),
) -> float:
    """Step schedule: ``base_lr`` times ``factor`` per milestone reached."""
    drops = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor**drops


# Snapshot layout (all little-endian):
#   b"QSDW" | u32 version | u32 metadata length | metadata JSON (utf-8)
#   u32 tensor count | per tensor: u32 ndim, u32 dims..., float64 data (C order)
_SNAPSHOT_MAGIC = b"QSDW"
_SNAPSHOT_VERSION = 1


def snapshot_bytes(model: MlpModel, metadata: dict | None = None) -> bytes:
    meta = {
        "widths": list(model.widths),
        "dilution": [c.to_dict() for c in model.dilution],
    }
    if metadata:
        meta["extra"] = metadata
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_SNAPSHOT_MAGIC)
    buf.write(struct.pack("<II", _SNAPSHOT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        buf.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def load_snapshot_bytes(data: bytes) -> tuple[MlpModel, dict]:
    view = memoryview(data)
    if bytes(view[:4]) != _SNAPSHOT_MAGIC:
        raise DataFormatError("not a model snapshot", field="magic")
    offset = 4
    try:
        version, meta_len = struct.unpack_from("<II", view, offset)
        offset += 8
        if version != _SNAPSHOT_VERSION:
            raise DataFormatError(f"unsupported snapshot version {version}", field="version")
        meta = json.loads(bytes(view[offset:offset + meta_len]))
        offset += meta_len
        (count,) = struct.unpack_from("<I", view, offset)
        offset += 4
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", view, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", view, offset)
            offset += 4 * ndim
            n = int(np.prod(shape))
            if offset + 8 * n > len(view):
                raise DataFormatError("snapshot truncated", field="tensor data")
            arr = np.frombuffer(view, dtype="<f8", count=n, offset=offset).reshape(shape)
            tensors.append(arr.astype(np.float64))
            offset += 8 * n
    except struct.error as exc:
        raise DataFormatError(f"snapshot truncated: {exc}", field="header") from exc
    model = MlpModel(
        tuple(meta["widths"]),
        tensors[0::2],
        tensors[1::2],
        [DilutionConfig.from_dict(d) for d in meta["dilution"]],
    )
    return model, meta.get("extra", {})


def save_snapshot(model: MlpModel, path: str | Path, metadata: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(snapshot_bytes(model, metadata))
    tmp.replace(path)


def load_snapshot(path: str | Path) -> tuple[MlpModel, dict]:
    return load_snapshot_bytes(Path(path).read_bytes())
