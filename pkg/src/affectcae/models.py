"""
Network Builders
================
The two architectures of the pipeline and the glue between them.

- Pre-training CNN: three conv blocks + four dense layers, 7-way softmax
- Convolutional autoencoder: same conv encoder, dense bottleneck of size d,
  dense bridge back to a feature map, conv/upsample decoder
- Transfer of the pre-trained conv stack into the autoencoder encoder
- Freezing of the first n encoder conv blocks
- Feature extraction from the bottleneck

Conv layer names are shared between both networks so weights transfer by name.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DataError, ParameterError, ShapeError, TransferError
from .nn import LayerSpec, ModelWeights, NetworkSpec, forward, init_weights
from .tensor import Tensor

logger = logging.getLogger(__name__)

NUM_CLASSES = 7
INPUT_SIZE = 48
CONV_CHANNELS = (64, 64, 128)
ENCODER_SIZES = (100, 500, 700, 900, 1000)
DEFAULT_ENCODER_SIZE = 900
ENCODER_LAYER = "encoder"

# Encoder conv blocks in input-to-output order; freezing block i freezes all its layers
CONV_BLOCKS = (("conv1", "bn1"), ("conv2", "bn2"), ("conv3",))
TRANSFER_LAYERS = tuple(name for block in CONV_BLOCKS for name in block)


def _conv_stack(conv_channels: Sequence[int], cae_dropout: Optional[float] = None) -> Tuple[LayerSpec, ...]:
    c1, c2, c3 = conv_channels
    block1 = [
        LayerSpec("conv1", "conv2d", units=c1, kernel=3, activation="relu"),
        LayerSpec("bn1", "batchnorm"),
    ]
    block2 = [
        LayerSpec("conv2", "conv2d", units=c2, kernel=3, activation="tanh"),
        LayerSpec("pool1", "maxpool"),
        LayerSpec("bn2", "batchnorm"),
    ]
    block3 = [
        LayerSpec("conv3", "conv2d", units=c3, kernel=2, activation="relu"),
        LayerSpec("pool2", "maxpool"),
    ]
    if cae_dropout is None:
        return tuple(block1 + block2 + block3)
    layers = []
    for i, block in enumerate((block1, block2, block3), start=1):
        layers += block + [LayerSpec(f"drop{i}", "dropout", rate=cae_dropout)]
    return tuple(layers)


def _check_geometry(conv_channels: Sequence[int], input_size: int):
    if len(conv_channels) != 3 or any(c < 1 for c in conv_channels):
        raise ParameterError(f"conv_channels must be three positive ints, got {tuple(conv_channels)}")
    if input_size < 4 or input_size % 4:
        raise ParameterError(f"input_size must be a positive multiple of 4, got {input_size}")


def build_pretrain_cnn(
    seed: int = 0,
    conv_channels: Sequence[int] = CONV_CHANNELS,
    input_size: int = INPUT_SIZE,
    dropout: float = 0.5,
) -> Tuple[NetworkSpec, ModelWeights]:
    """
    Supervised 7-class CNN used to pre-train the conv stack.

    conv 64@3x3 relu, BN, conv 64@3x3 tanh, pool, BN, conv 128@2x2 relu, pool,
    flatten, FC 100 tanh, dropout, FC 50 relu, FC 10 tanh, FC 7 softmax.
    """
    _check_geometry(conv_channels, input_size)
    layers = _conv_stack(conv_channels) + (
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc1", "dense", units=100, activation="tanh"),
        LayerSpec("drop", "dropout", rate=dropout),
        LayerSpec("fc2", "dense", units=50, activation="relu"),
        LayerSpec("fc3", "dense", units=10, activation="tanh"),
        LayerSpec("fc4", "dense", units=NUM_CLASSES, activation="softmax"),
    )
    spec = NetworkSpec(input_shape=(input_size, input_size, 1), layers=layers, name="pretrain-cnn")
    weights = init_weights(spec, seed)
    logger.debug(f"Built {spec.name}: {spec.parameter_count():,} parameters")
    return spec, weights


def build_cae(
    encoder_size: int = DEFAULT_ENCODER_SIZE,
    seed: int = 0,
    conv_channels: Sequence[int] = CONV_CHANNELS,
    input_size: int = INPUT_SIZE,
    dropout: float = 0.25,
    decoder_pool_upsample: bool = True,
) -> Tuple[NetworkSpec, ModelWeights]:
    """
    Convolutional autoencoder whose encoder conv stack matches the pre-training CNN.

    Encoder: conv blocks (dropout after each), flatten, dense ``encoder`` layer of
    ``encoder_size`` tanh units, dropout. Bridge: dense back to the last feature map
    plus reshape. Decoder: conv c3@2x2 relu, [maxpool + upsample], upsample,
    conv c2@3x3 tanh, upsample, conv c1@3x3 relu, conv 1@3x3 linear head.
    """
    if encoder_size < 1:
        raise ParameterError(f"encoder_size must be >= 1, got {encoder_size}")
    _check_geometry(conv_channels, input_size)
    c1, c2, c3 = conv_channels
    side = input_size // 4

    decoder = [LayerSpec("dec1", "conv2d", units=c3, kernel=2, activation="relu")]
    if decoder_pool_upsample:
        decoder += [LayerSpec("dec_pool", "maxpool"), LayerSpec("dec_up0", "upsample")]
    decoder += [
        LayerSpec("dec_up1", "upsample"),
        LayerSpec("dec2", "conv2d", units=c2, kernel=3, activation="tanh"),
        LayerSpec("dec_up2", "upsample"),
        LayerSpec("dec3", "conv2d", units=c1, kernel=3, activation="relu"),
        LayerSpec("reconstruction", "conv2d", units=1, kernel=3, activation="linear"),
    ]
    if decoder_pool_upsample and side % 2:
        raise ParameterError(f"input_size {input_size} leaves an odd decoder map; disable decoder_pool_upsample")

    layers = _conv_stack(conv_channels, cae_dropout=dropout) + (
        LayerSpec("flatten", "flatten"),
        LayerSpec(ENCODER_LAYER, "dense", units=encoder_size, activation="tanh"),
        LayerSpec("drop_encoder", "dropout", rate=dropout),
        LayerSpec("bridge", "dense", units=side * side * c3, activation="linear"),
        LayerSpec("unflatten", "reshape", target_shape=(side, side, c3)),
        *decoder,
    )
    spec = NetworkSpec(input_shape=(input_size, input_size, 1), layers=layers, name=f"cae-d{encoder_size}")
    weights = init_weights(spec, seed)
    logger.debug(f"Built {spec.name}: {spec.parameter_count():,} parameters")
    return spec, weights


def transfer_weights(source: ModelWeights, target: ModelWeights) -> ModelWeights:
    """
    Copy the pre-trained conv stack (kernels, biases, BN params and running stats)
    into the autoencoder. Every other layer of ``target`` is left as is.
    """
    params = dict(target.params)
    state = dict(target.state)
    for layer in TRANSFER_LAYERS:
        if layer not in source.params or layer not in target.params:
            raise TransferError(f"layer {layer} missing from {'source' if layer not in source.params else 'target'}")
        src, dst = source.params[layer], target.params[layer]
        for pname, value in src.items():
            if pname not in dst or dst[pname].shape != value.shape:
                raise TransferError(f"layer {layer} shape mismatch")
        params[layer] = {pname: value.copy() for pname, value in src.items()}
        if layer in source.state:
            state[layer] = {sname: value.copy() for sname, value in source.state[layer].items()}
    logger.info(f"Transferred {len(TRANSFER_LAYERS)} encoder layers from pre-trained CNN")
    return replace(target, params=params, state=state)


def set_frozen(weights: ModelWeights, n_frozen_convs: int) -> ModelWeights:
    """
    Freeze the first ``n_frozen_convs`` encoder conv blocks counted from the input.

    Unfreezing therefore proceeds from the deepest block towards conv1 as n drops.
    """
    if not 0 <= n_frozen_convs <= len(CONV_BLOCKS):
        raise ParameterError(f"n_frozen_convs must be in 0..{len(CONV_BLOCKS)}, got {n_frozen_convs}")
    frozen = frozenset(name for block in CONV_BLOCKS[:n_frozen_convs] for name in block)
    if frozen:
        logger.info(f"Frozen layers: {', '.join(sorted(frozen))}")
    return replace(weights, frozen=frozen)


# ── Feature extraction ─────────────────────────────────────────


@dataclass
class EncodedFeatures:
    """Bottleneck activations, one row per frame."""

    features: Tensor
    timestamps: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.timestamps):
            raise ShapeError(f"features {self.features.shape} do not match {len(self.timestamps)} timestamps")

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    def to_csv(self, path: Union[str, Path]):
        """Header ``timestamp,f0..f{d-1}``; 9 significant digits."""
        columns = [f"f{i}" for i in range(self.dimension)]
        frame = pd.DataFrame(self.features, columns=columns)
        frame.insert(0, "timestamp", self.timestamps)
        frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "EncodedFeatures":
        frame = pd.read_csv(path)
        if frame.columns[0] != "timestamp":
            raise DataError(f"{path}: first column must be 'timestamp'")
        return cls(
            features=frame.iloc[:, 1:].to_numpy(dtype=np.float64),
            timestamps=frame["timestamp"].to_numpy(dtype=np.float64),
        )


def encode(
    spec: NetworkSpec, weights: ModelWeights, frames: Tensor, timestamps: np.ndarray, batch_size: int = 256
) -> EncodedFeatures:
    """
    Eval-mode forward through the encoder only.

    Args:
        frames: (T, H, W) grayscale frames in [0, 1] matching the CAE input size
        timestamps: (T,) frame times in seconds

    Returns:
        EncodedFeatures with one row per frame, in input order
    """
    expected = spec.input_shape[:2]
    if frames.ndim != 3 or tuple(frames.shape[1:]) != tuple(expected):
        raise ShapeError(f"frames must be (T, {expected[0]}, {expected[1]}), got {frames.shape}")
    if len(frames) != len(timestamps):
        raise ShapeError(f"{len(frames)} frames but {len(timestamps)} timestamps")

    if len(frames) == 0:
        width = spec.layer(ENCODER_LAYER).units
        return EncodedFeatures(features=np.zeros((0, width)), timestamps=np.zeros(0))

    chunks = []
    for start in range(0, len(frames), batch_size):
        batch = frames[start : start + batch_size, :, :, None]
        out, _ = forward(spec, weights, batch, mode="eval", stop_at=ENCODER_LAYER)
        chunks.append(out)
    features = np.concatenate(chunks, axis=0)
    return EncodedFeatures(features=features, timestamps=np.asarray(timestamps, dtype=np.float64))


def classify(spec: NetworkSpec, weights: ModelWeights, images: Tensor, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax class per image (N, H, W, 1)."""
    labels = []
    for start in range(0, len(images), batch_size):
        out, _ = forward(spec, weights, images[start : start + batch_size], mode="eval")
        labels.append(out.argmax(axis=1))
    return np.concatenate(labels)
