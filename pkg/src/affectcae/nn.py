"""
Layer Stack, Training and Checkpoints
=====================================
Composable sequential networks with an explicit backward pass, the losses
and Adam optimizer used to train them, and the binary checkpoint container.

Usage:
    spec = NetworkSpec(input_shape=(1,), layers=(LayerSpec("fc", "dense", units=1),))
    weights = init_weights(spec, seed=0)
    out, tape = forward(spec, weights, batch, mode="train")
    grads = backward(tape, loss_gradient("mse", out, target))
    weights, state = adam_step(weights, grads, state, config)

Checkpoint container (little-endian):
    b"AFPL" | u16 version | 4-byte section tag | u32 header length | header (UTF-8)
    | u32 blob count | per blob: u16 name length, name, u8 ndim, u32 dims..., f8 data
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import tensor as T
from .errors import CheckpointError, DataError, ParameterError, ShapeError, StaleTapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv2d", "batchnorm", "maxpool", "upsample", "flatten", "dense", "dropout", "reshape")
PARAMETRIC_KINDS = ("conv2d", "batchnorm", "dense")
LOSS_KINDS = ("categorical-crossentropy", "mse")
LOG_FLOOR = 1e-12

MAGIC = b"AFPL"
FORMAT_VERSION = 1
NETWORK_TAG = b"NETW"

Params = Dict[str, Dict[str, Tensor]]


# ── Network description ────────────────────────────────────────


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network."""

    name: str
    kind: str
    units: int = 0  # conv2d filters / dense units
    kernel: int = 0
    activation: str = "linear"
    padding: str = "same"
    rate: float = 0.0
    target_shape: Tuple[int, ...] = ()
    momentum: float = T.BN_MOMENTUM
    epsilon: float = T.BN_EPSILON

    def to_text(self) -> str:
        fields = [self.kind, f"name={self.name}"]
        if self.kind == "conv2d":
            fields += [f"filters={self.units}", f"kernel={self.kernel}", f"activation={self.activation}"]
            fields.append(f"padding={self.padding}")
        elif self.kind == "dense":
            fields += [f"units={self.units}", f"activation={self.activation}"]
        elif self.kind == "dropout":
            fields.append(f"rate={self.rate!r}")
        elif self.kind == "batchnorm":
            fields += [f"momentum={self.momentum!r}", f"epsilon={self.epsilon!r}"]
        elif self.kind == "reshape":
            fields.append("shape=" + "x".join(str(d) for d in self.target_shape))
        return " ".join(fields)

    @classmethod
    def from_text(cls, line: str) -> "LayerSpec":
        kind, *pairs = line.split()
        if kind not in LAYER_KINDS:
            raise CheckpointError(f"unknown layer kind '{kind}'")
        values = dict(pair.split("=", 1) for pair in pairs)
        kwargs: Dict[str, object] = {"name": values.pop("name"), "kind": kind}
        if "filters" in values:
            kwargs["units"] = int(values.pop("filters"))
        if "units" in values:
            kwargs["units"] = int(values.pop("units"))
        if "kernel" in values:
            kwargs["kernel"] = int(values.pop("kernel"))
        if "shape" in values:
            kwargs["target_shape"] = tuple(int(d) for d in values.pop("shape").split("x"))
        for key in ("rate", "momentum", "epsilon"):
            if key in values:
                kwargs[key] = float(values.pop(key))
        kwargs.update(values)
        return cls(**kwargs)  # type: ignore[arg-type]


@dataclass(frozen=True)
class NetworkSpec:
    """
    Declarative layer stack.

    Construction checks that every consecutive pair of layers composes and
    that the stack ends in a single conv2d/dense output layer.
    """

    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...]
    name: str = "network"

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names in {self.name}")
        if not self.layers or self.layers[-1].kind not in ("conv2d", "dense"):
            raise ShapeError(f"{self.name} must end in one conv2d or dense output layer")
        self.output_shapes()

    def output_shapes(self) -> List[Tuple[int, ...]]:
        """Per-layer output shape (without the batch axis)."""
        shapes = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _infer_shape(layer, shape)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.output_shapes()[-1]

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    def input_shape_of(self, index: int) -> Tuple[int, ...]:
        return tuple(self.input_shape) if index == 0 else self.output_shapes()[index - 1]

    def parameter_shapes(self) -> Dict[str, Dict[str, Tuple[int, ...]]]:
        shapes: Dict[str, Dict[str, Tuple[int, ...]]] = {}
        for i, layer in enumerate(self.layers):
            in_shape = self.input_shape_of(i)
            if layer.kind == "conv2d":
                shapes[layer.name] = {
                    "kernel": (layer.kernel, layer.kernel, in_shape[-1], layer.units),
                    "bias": (layer.units,),
                }
            elif layer.kind == "dense":
                shapes[layer.name] = {"kernel": (in_shape[-1], layer.units), "bias": (layer.units,)}
            elif layer.kind == "batchnorm":
                shapes[layer.name] = {"gamma": (in_shape[-1],), "beta": (in_shape[-1],)}
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for layer in self.parameter_shapes().values() for s in layer.values())

    def to_text(self) -> str:
        lines = [f"network {self.name}", "input " + " ".join(str(d) for d in self.input_shape)]
        lines += [layer.to_text() for layer in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        name = "network"
        input_shape: Tuple[int, ...] = ()
        layers = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            head, _, rest = line.partition(" ")
            if head == "network":
                name = rest
            elif head == "input":
                input_shape = tuple(int(d) for d in rest.split())
            else:
                layers.append(LayerSpec.from_text(line))
        return cls(input_shape=input_shape, layers=tuple(layers), name=name)


def _infer_shape(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    kind = layer.kind
    if kind not in LAYER_KINDS:
        raise ShapeError(f"{layer.name}: unknown layer kind '{kind}'")
    if kind in ("conv2d", "maxpool", "upsample") and len(shape) != 3:
        raise ShapeError(f"{layer.name}: {kind} needs an (H, W, C) input, got {shape}")

    if kind == "conv2d":
        if layer.units < 1 or layer.kernel < 1:
            raise ShapeError(f"{layer.name}: filters and kernel must be positive")
        if layer.activation not in T.ACTIVATIONS:
            raise ShapeError(f"{layer.name}: unknown activation '{layer.activation}'")
        h, w, _ = shape
        if layer.padding == "valid":
            h, w = h - layer.kernel + 1, w - layer.kernel + 1
            if h < 1 or w < 1:
                raise ShapeError(f"{layer.name}: kernel larger than input")
        return (h, w, layer.units)
    if kind == "maxpool":
        if shape[0] % 2 or shape[1] % 2:
            raise ShapeError(f"{layer.name}: maxpool needs even spatial dims, got {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if kind == "upsample":
        return (shape[0] * 2, shape[1] * 2, shape[2])
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{layer.name}: dense needs a flat input, got {shape}")
        if layer.units < 1:
            raise ShapeError(f"{layer.name}: units must be positive")
        if layer.activation not in T.ACTIVATIONS:
            raise ShapeError(f"{layer.name}: unknown activation '{layer.activation}'")
        return (layer.units,)
    if kind == "reshape":
        if int(np.prod(layer.target_shape)) != int(np.prod(shape)):
            raise ShapeError(f"{layer.name}: cannot reshape {shape} to {layer.target_shape}")
        return tuple(layer.target_shape)
    if kind == "dropout" and not 0.0 <= layer.rate < 1.0:
        raise ShapeError(f"{layer.name}: dropout rate must be in [0, 1)")
    return shape


# ── Weights ────────────────────────────────────────────────────


@dataclass
class ModelWeights:
    """Learned parameters, batchnorm running statistics and per-layer freeze flags."""

    params: Params
    state: Params = field(default_factory=dict)
    frozen: frozenset = frozenset()

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            params={k: {p: a.copy() for p, a in v.items()} for k, v in self.params.items()},
            state={k: {p: a.copy() for p, a in v.items()} for k, v in self.state.items()},
            frozen=frozenset(self.frozen),
        )

    def is_frozen(self, layer: str) -> bool:
        return layer in self.frozen

    def num_parameters(self) -> int:
        return sum(a.size for layer in self.params.values() for a in layer.values())

    def validate(self, spec: NetworkSpec):
        """Raise ShapeError if any tensor disagrees with the spec."""
        expected = spec.parameter_shapes()
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter layers {sorted(self.params)} do not match spec {sorted(expected)}")
        for layer, shapes in expected.items():
            for pname, shape in shapes.items():
                actual = self.params[layer].get(pname)
                if actual is None or actual.shape != shape:
                    got = None if actual is None else actual.shape
                    raise ShapeError(f"{layer}/{pname}: expected {shape}, got {got}")
        for layer in spec.layers:
            if layer.kind == "batchnorm":
                channels = expected[layer.name]["gamma"]
                stats = self.state.get(layer.name, {})
                for key in ("running_mean", "running_var"):
                    if key not in stats or stats[key].shape != channels:
                        raise ShapeError(f"{layer.name}/{key}: missing or wrong shape")


def init_weights(spec: NetworkSpec, seed: int = 0) -> ModelWeights:
    """Glorot-uniform kernels, zero biases, gamma=1 beta=0, running mean 0 / var 1."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    state: Params = {}
    for layer_name, shapes in spec.parameter_shapes().items():
        layer = spec.layer(layer_name)
        if layer.kind == "batchnorm":
            channels = shapes["gamma"]
            params[layer_name] = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
            state[layer_name] = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
            continue
        kshape = shapes["kernel"]
        receptive = int(np.prod(kshape[:-2])) if len(kshape) == 4 else 1
        fan_in, fan_out = receptive * kshape[-2], receptive * kshape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[layer_name] = {
            "kernel": rng.uniform(-limit, limit, size=kshape),
            "bias": np.zeros(shapes["bias"]),
        }
    return ModelWeights(params=params, state=state)


# ── Forward / backward ─────────────────────────────────────────


@dataclass
class Tape:
    """Activation record of one forward call; consumed by exactly one backward."""

    spec: NetworkSpec
    weights: ModelWeights
    mode: str
    caches: List[object]
    running_updates: Dict[str, Tuple[Tensor, Tensor]]
    consumed: bool = False


def forward(
    spec: NetworkSpec,
    weights: ModelWeights,
    batch: Tensor,
    mode: str = "eval",
    seed: int = 0,
    stop_at: Optional[str] = None,
) -> Tuple[Tensor, Tape]:
    """
    Run the layer stack on ``batch``.

    Args:
        mode: ``train`` (batch statistics, dropout active) or ``eval``
        seed: dropout seed; layer i draws from SeedSequence([seed, i])
        stop_at: return the activation of this layer instead of the network output

    Returns:
        (output, tape)
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"unknown mode '{mode}'")
    if batch.ndim != len(spec.input_shape) + 1 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {batch.shape[1:]} does not match {spec.name} input {spec.input_shape}")

    last = spec.index(stop_at) if stop_at else len(spec.layers) - 1
    caches: List[object] = []
    running_updates: Dict[str, Tuple[Tensor, Tensor]] = {}
    x = batch
    for i, layer in enumerate(spec.layers[: last + 1]):
        kind = layer.kind
        if kind == "conv2d":
            p = weights.params[layer.name]
            z, conv_cache = T.conv2d_forward(x, p["kernel"], p["bias"], layer.padding)
            x, act_cache = T.activation_forward(z, layer.activation)
            caches.append((conv_cache, act_cache))
        elif kind == "dense":
            p = weights.params[layer.name]
            z, dense_cache = T.dense_forward(x, p["kernel"], p["bias"])
            x, act_cache = T.activation_forward(z, layer.activation)
            caches.append((dense_cache, act_cache))
        elif kind == "batchnorm":
            p = weights.params[layer.name]
            s = weights.state[layer.name]
            x, bn_cache, updated = T.batchnorm_forward(
                x, p["gamma"], p["beta"], s["running_mean"], s["running_var"], mode, layer.momentum, layer.epsilon
            )
            if mode == "train":
                running_updates[layer.name] = updated
            caches.append(bn_cache)
        elif kind == "maxpool":
            x, indices = T.maxpool2d_forward(x)
            caches.append(indices)
        elif kind == "upsample":
            x = T.upsample2d_forward(x)
            caches.append(None)
        elif kind in ("flatten", "reshape"):
            caches.append(x.shape)
            x = x.reshape((x.shape[0],) + spec.output_shapes()[i])
        elif kind == "dropout":
            x, mask = T.dropout_forward(x, layer.rate, mode, np.random.SeedSequence([seed, i]))
            caches.append(mask)
    tape = Tape(spec=spec, weights=weights, mode=mode, caches=caches, running_updates=running_updates)
    return x, tape


def backward(tape: Tape, dout: Tensor) -> Params:
    """
    Backpropagate ``dout`` (gradient of the loss w.r.t. the forward output).

    Returns:
        {layer: {param: gradient}} for every parameter of every unfrozen layer.
        Frozen layers are absent; propagation stops below the first trainable layer.
    """
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a backward pass")
    tape.consumed = True

    spec, weights = tape.spec, tape.weights
    layers = spec.layers[: len(tape.caches)]
    trainable = [
        i for i, layer in enumerate(layers) if layer.kind in PARAMETRIC_KINDS and not weights.is_frozen(layer.name)
    ]
    grads: Params = {}
    if not trainable:
        return grads
    first = trainable[0]

    for i in range(len(layers) - 1, first - 1, -1):
        layer, cache = layers[i], tape.caches[i]
        kind = layer.kind
        if kind in ("conv2d", "dense"):
            op_cache, act_cache = cache  # type: ignore[misc]
            dz = T.activation_backward(dout, act_cache, layer.activation)
            if kind == "conv2d":
                dout, dkernel, dbias = T.conv2d_backward(dz, op_cache)
            else:
                dout, dkernel, dbias = T.dense_backward(dz, op_cache)
            if not weights.is_frozen(layer.name):
                grads[layer.name] = {"kernel": dkernel, "bias": dbias}
        elif kind == "batchnorm":
            dout, dgamma, dbeta = T.batchnorm_backward(dout, cache)
            if not weights.is_frozen(layer.name):
                grads[layer.name] = {"gamma": dgamma, "beta": dbeta}
        elif kind == "maxpool":
            dout = T.maxpool2d_backward(dout, cache)  # type: ignore[arg-type]
        elif kind == "upsample":
            dout = T.upsample2d_backward(dout)
        elif kind in ("flatten", "reshape"):
            dout = dout.reshape(cache)  # type: ignore[arg-type]
        elif kind == "dropout":
            dout = T.dropout_backward(dout, cache)  # type: ignore[arg-type]
    return grads


# ── Losses ─────────────────────────────────────────────────────


def _check_loss_inputs(kind: str, predicted: Tensor, target: Tensor):
    if kind not in LOSS_KINDS:
        raise ParameterError(f"unknown loss '{kind}' (expected one of {LOSS_KINDS})")
    if predicted.shape != target.shape:
        raise ShapeError(f"prediction shape {predicted.shape} does not match target {target.shape}")
    if kind == "categorical-crossentropy":
        one_hot = np.all((target == 0.0) | (target == 1.0)) and np.all(target.sum(axis=-1) == 1.0)
        if not one_hot:
            raise ParameterError("categorical-crossentropy targets must be one-hot rows")


def loss(kind: str, predicted: Tensor, target: Tensor) -> float:
    """Mean loss over the batch (``mse`` averages over every element)."""
    _check_loss_inputs(kind, predicted, target)
    if kind == "mse":
        return float(np.mean((predicted - target) ** 2))
    return float(-np.sum(target * np.log(np.maximum(predicted, LOG_FLOOR))) / predicted.shape[0])


def loss_gradient(kind: str, predicted: Tensor, target: Tensor) -> Tensor:
    """Gradient of :func:`loss` with respect to ``predicted``."""
    _check_loss_inputs(kind, predicted, target)
    if kind == "mse":
        return 2.0 * (predicted - target) / predicted.size
    return -target / np.maximum(predicted, LOG_FLOOR) / predicted.shape[0]


# ── Optimizer ──────────────────────────────────────────────────


class TrainConfig(BaseModel):
    """Optimizer and loop settings for one training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(default=1e-5, ge=0.0)
    batch_size: int = Field(default=64, ge=1)
    max_epochs: int = Field(default=500, ge=1)
    loss: str = "categorical-crossentropy"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    patience: int = Field(default=0, ge=0)
    freeze_bn_stats: bool = True

    @field_validator("loss")
    @classmethod
    def check_known_loss(cls, value: str) -> str:
        if value not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        return value


@dataclass
class AdamState:
    """First/second moment estimates per trainable parameter plus the timestep."""

    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0


def adam_step(
    weights: ModelWeights, grads: Params, state: AdamState, config: TrainConfig
) -> Tuple[ModelWeights, AdamState]:
    """
    One bias-corrected Adam update.

    Frozen layers are skipped even when gradients are supplied for them.
    Returns new weights and state; the inputs are left untouched.
    """
    t = state.t + 1
    lr = config.learning_rate
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    params = dict(weights.params)
    new_m = dict(state.m)
    new_v = dict(state.v)

    for layer_name, layer_grads in grads.items():
        if weights.is_frozen(layer_name):
            continue
        layer_params = dict(params[layer_name])
        m_layer = dict(new_m.get(layer_name, {}))
        v_layer = dict(new_v.get(layer_name, {}))
        for pname, g in layer_grads.items():
            value = layer_params[pname]
            if g.shape != value.shape:
                raise ShapeError(f"{layer_name}/{pname}: gradient shape {g.shape} != parameter {value.shape}")
            m_prev = m_layer.get(pname, np.zeros_like(value))
            v_prev = v_layer.get(pname, np.zeros_like(value))
            if m_prev.shape != g.shape or v_prev.shape != g.shape:
                raise ShapeError(f"{layer_name}/{pname}: optimizer state shape mismatch")
            m = b1 * m_prev + (1.0 - b1) * g
            v = b2 * v_prev + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            layer_params[pname] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
            m_layer[pname], v_layer[pname] = m, v
        params[layer_name] = layer_params
        new_m[layer_name], new_v[layer_name] = m_layer, v_layer

    return replace(weights, params=params), AdamState(m=new_m, v=new_v, t=t)


# ── Training loop ──────────────────────────────────────────────


class BatchSource(Protocol):
    """Anything that yields (inputs, targets) mini-batches for an epoch."""

    partition: str

    def __len__(self) -> int: ...

    def batches(self, batch_size: int, seed: Optional[int] = None) -> Iterator[Tuple[Tensor, Tensor]]: ...


@dataclass
class TrainResult:
    weights: ModelWeights
    history: List[float]
    validation_history: List[float] = field(default_factory=list)
    gradient_norms: List[Dict[str, float]] = field(default_factory=list)
    stopped_early: bool = False


def evaluate_loss(spec: NetworkSpec, weights: ModelWeights, dataset: BatchSource, kind: str, batch_size: int) -> float:
    """Eval-mode loss averaged over every sample of ``dataset``."""
    total, count = 0.0, 0
    for inputs, targets in dataset.batches(batch_size, seed=None):
        out, _ = forward(spec, weights, inputs, mode="eval")
        total += loss(kind, out, targets) * len(inputs)
        count += len(inputs)
    return total / count


def train(
    spec: NetworkSpec,
    weights: ModelWeights,
    dataset: BatchSource,
    config: TrainConfig,
    validation: Optional[BatchSource] = None,
    on_epoch: Optional[Callable[[int, ModelWeights], None]] = None,
) -> TrainResult:
    """
    Mini-batch Adam training.

    Shuffling uses ``seed + epoch``; dropout uses a per-step seed derived from
    the run seed, so a fixed seed reproduces the run exactly. When
    ``config.patience`` > 0 and ``validation`` is given, training stops after
    that many epochs without validation improvement.

    Returns:
        TrainResult with the final weights and one mean training loss per epoch
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if getattr(dataset, "partition", "train") != "train":
        raise DataError(f"refusing to train on '{dataset.partition}' partition")
    if any(layer.kind == "batchnorm" for layer in spec.layers):
        if len(dataset) < 2:
            raise DataError(f"{spec.name} has batchnorm layers and needs at least 2 training samples, got {len(dataset)}")
        if config.batch_size < 2:
            raise ParameterError(f"{spec.name} has batchnorm layers; batch_size must be at least 2")
    weights.validate(spec)

    state = AdamState()
    result = TrainResult(weights=weights, history=[])
    best_val = np.inf
    stale_epochs = 0
    step = 0

    for epoch in range(config.max_epochs):
        total, count = 0.0, 0
        norms: Dict[str, float] = {}
        for inputs, targets in dataset.batches(config.batch_size, seed=config.seed + epoch):
            out, tape = forward(spec, weights, inputs, mode="train", seed=config.seed * 1_000_003 + step)
            batch_loss = loss(config.loss, out, targets)
            grads = backward(tape, loss_gradient(config.loss, out, targets))
            weights, state = adam_step(weights, grads, state, config)
            weights = _apply_running_updates(weights, tape.running_updates, config.freeze_bn_stats)

            for layer_name, layer_grads in grads.items():
                sq = sum(float(np.sum(g * g)) for g in layer_grads.values())
                norms[layer_name] = norms.get(layer_name, 0.0) + sq
            total += batch_loss * len(inputs)
            count += len(inputs)
            step += 1
            logger.debug(f"epoch {epoch + 1} step {step}: loss {batch_loss:.6f}")

        epoch_loss = total / count
        result.history.append(epoch_loss)
        result.gradient_norms.append({k: float(np.sqrt(v)) for k, v in norms.items()})
        message = f"{spec.name} epoch {epoch + 1}/{config.max_epochs}: loss {epoch_loss:.6f}"

        if validation is not None and len(validation):
            val_loss = evaluate_loss(spec, weights, validation, config.loss, config.batch_size)
            result.validation_history.append(val_loss)
            message += f", val {val_loss:.6f}"
            if val_loss < best_val:
                best_val, stale_epochs = val_loss, 0
            else:
                stale_epochs += 1
        logger.info(message)
        if on_epoch:
            on_epoch(epoch, weights)

        if config.patience and validation is not None and stale_epochs >= config.patience:
            logger.info(f"Early stop after {epoch + 1} epochs (no validation improvement for {config.patience})")
            result.stopped_early = True
            break

    result.weights = weights
    return result


def _apply_running_updates(
    weights: ModelWeights, updates: Dict[str, Tuple[Tensor, Tensor]], freeze_bn_stats: bool
) -> ModelWeights:
    if not updates:
        return weights
    state = dict(weights.state)
    for layer_name, (mean, var) in updates.items():
        if freeze_bn_stats and weights.is_frozen(layer_name):
            continue
        state[layer_name] = {"running_mean": mean, "running_var": var}
    return replace(weights, state=state)


# ── Checkpoint container ───────────────────────────────────────


def write_container(path: Union[str, Path], tag: bytes, header: str, blobs: Sequence[Tuple[str, Tensor]]):
    """Write a versioned AFPL container: text header followed by named float64 blobs."""
    if len(tag) != 4:
        raise CheckpointError(f"section tag must be 4 bytes, got {tag!r}")
    header_bytes = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), tag, struct.pack("<I", len(header_bytes)), header_bytes]
    parts.append(struct.pack("<I", len(blobs)))
    for name, array in blobs:
        name_bytes = name.encode("utf-8")
        array = np.asarray(array, dtype="<f8")
        parts.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        parts.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes(order="C"))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def read_container(path: Union[str, Path], tag: bytes) -> Tuple[str, Dict[str, Tensor]]:
    """Read an AFPL container written by :func:`write_container`."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an AFPL container")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if data[6:10] != tag:
        raise CheckpointError(f"{path}: section tag {data[6:10]!r}, expected {tag!r}")

    try:
        offset = 10
        (header_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        header = data[offset : offset + header_len].decode("utf-8")
        offset += header_len
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        blobs: Dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            blobs[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * size
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt container: {e}")
    return header, blobs


def save_checkpoint(path: Union[str, Path], spec: NetworkSpec, weights: ModelWeights):
    """Write spec (canonical text), freeze flags and every tensor to ``path``."""
    header = spec.to_text() + "frozen " + ",".join(sorted(weights.frozen)) + "\n"
    blobs = []
    for layer in spec.layers:
        for pname, array in weights.params.get(layer.name, {}).items():
            blobs.append((f"{layer.name}/{pname}", array))
        for sname, array in weights.state.get(layer.name, {}).items():
            blobs.append((f"{layer.name}/{sname}", array))
    write_container(path, NETWORK_TAG, header, blobs)
    logger.info(f"Saved checkpoint {path} ({weights.num_parameters():,} parameters)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[NetworkSpec, ModelWeights]:
    """Load a checkpoint and validate every tensor shape against its spec."""
    header, blobs = read_container(path, NETWORK_TAG)
    spec_lines, frozen = [], frozenset()
    for line in header.splitlines():
        if line.startswith("frozen"):
            names = line[len("frozen") :].strip()
            frozen = frozenset(n for n in names.split(",") if n)
        else:
            spec_lines.append(line)
    try:
        spec = NetworkSpec.from_text("\n".join(spec_lines))
    except (ShapeError, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid network spec: {e}")

    params: Params = {}
    state: Params = {}
    for key, array in blobs.items():
        layer_name, _, pname = key.partition("/")
        target = state if pname.startswith("running_") else params
        target.setdefault(layer_name, {})[pname] = array
    weights = ModelWeights(params=params, state=state, frozen=frozen)
    try:
        weights.validate(spec)
    except ShapeError as e:
        raise CheckpointError(f"{path}: {e}")
    return spec, weights
