"""
Dense Tensor Kernels
====================
Forward/backward numeric kernels every layer of the networks is built from.

Tensors are plain ``numpy`` float64 arrays in NHWC layout (batch, height,
width, channels). Every ``*_forward`` function is pure: it returns its output
plus a cache, and the matching ``*_backward`` turns an upstream gradient and
that cache into input (and parameter) gradients. Inputs are never mutated.

Kernels:
- conv2d: stride 1, ``same`` or ``valid`` padding
- maxpool2d: 2x2 window, stride 2, argmax routing
- upsample2d: nearest-neighbour x2
- dense: affine map
- batchnorm: per-channel, train/eval modes
- activation: relu, tanh, softmax (last axis), linear
- dropout: inverted dropout, seeded
"""

import logging
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Tensor = NDArray[np.float64]
Seed = Union[int, np.random.SeedSequence]

PADDINGS = ("same", "valid")
ACTIVATIONS = ("relu", "tanh", "softmax", "linear")

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5


def as_tensor(values: ArrayLike, shape: Optional[Sequence[int]] = None) -> Tensor:
    """
    Validate external input and return it as a float64 array.

    Raises:
        ShapeError: non-positive extents or a shape other than ``shape``
        NumericError: NaN or Inf anywhere in the data
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0 or any(extent <= 0 for extent in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


def same_padding(kernel: int) -> Tuple[int, int]:
    """(before, after) zero padding that keeps a stride-1 extent; the odd pixel goes after."""
    total = kernel - 1
    before = total // 2
    return before, total - before


# ── Convolution ────────────────────────────────────────────────


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same") -> Tuple[Tensor, Any]:
    """
    2-D convolution (cross-correlation), stride 1.

    Args:
        x: input of shape (N, H, W, Cin)
        kernels: (kh, kw, Cin, Cout)
        bias: (Cout,)
        padding: ``same`` (zero padding, extra row/column at bottom/right) or ``valid``

    Returns:
        (output of shape (N, Ho, Wo, Cout), cache)
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N, H, W, C) input, got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (kh, kw, Cin, Cout) kernels, got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ShapeError(f"input has {x.shape[3]} channels but kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    if padding == "same":
        top, bottom = same_padding(kh)
        left, right = same_padding(kw)
    elif padding == "valid":
        top = bottom = left = right = 0
    else:
        raise ParameterError(f"unknown padding '{padding}' (expected one of {PADDINGS})")

    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    n, hp, wp, _ = xp.shape
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = hp - kh + 1, wp - kw + 1

    # one matmul per kernel offset
    out = np.empty((n, ho, wo, cout), dtype=np.float64)
    out[...] = bias
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + ho, j : j + wo, :] @ kernels[i, j]

    cache = (xp, kernels, (top, left), x.shape)
    return out, cache


def conv2d_backward(dout: Tensor, cache: Any) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dkernels, dbias)."""
    xp, kernels, (top, left), in_shape = cache
    kh, kw, cin, cout = kernels.shape
    _, ho, wo, _ = dout.shape
    dout_rows = dout.reshape(-1, cout)

    dxp = np.zeros_like(xp)
    dkernels = np.empty_like(kernels)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + ho, j : j + wo, :].reshape(-1, cin)
            dkernels[i, j] = patch.T @ dout_rows
            dxp[:, i : i + ho, j : j + wo, :] += dout @ kernels[i, j].T
    dbias = dout_rows.sum(axis=0)

    h, w = in_shape[1], in_shape[2]
    dx = dxp[:, top : top + h, left : left + w, :]
    return dx, dkernels, dbias


# ── Pooling / Upsampling ───────────────────────────────────────


def maxpool2d_forward(x: Tensor) -> Tuple[Tensor, NDArray[np.intp]]:
    """
    2x2 max pooling with stride 2.

    Returns the pooled tensor and, per output cell, the flat index (0..3,
    row-major inside the window) of the maximum. Ties go to the first maximum.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, H, W, C) input, got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even height and width, got {h}x{w}")

    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    indices = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, indices[..., None], axis=-1)[..., 0]
    return out, indices


def maxpool2d_backward(dout: Tensor, indices: NDArray[np.intp]) -> Tensor:
    """Route each upstream gradient to the position that won the forward max."""
    n, ho, wo, c = dout.shape
    dwindows = np.zeros((n, ho, wo, c, 4), dtype=np.float64)
    np.put_along_axis(dwindows, indices[..., None], dout[..., None], axis=-1)
    return dwindows.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * 2, wo * 2, c)


def upsample2d_forward(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling: every pixel becomes a factor x factor block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2d expects (N, H, W, C) input, got {x.shape}")
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample2d_backward(dout: Tensor, factor: int = 2) -> Tensor:
    n, h, w, c = dout.shape
    return dout.reshape(n, h // factor, factor, w // factor, factor, c).sum(axis=(2, 4))


# ── Dense ──────────────────────────────────────────────────────


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tuple[Tensor, Any]:
    """Affine map ``x @ W + b`` for x of shape (N, Din)."""
    if x.ndim != 2:
        raise ShapeError(f"dense expects (N, Din) input, got {x.shape}")
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight rows {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} units")
    return x @ weights + bias, (x, weights)


def dense_backward(dout: Tensor, cache: Any) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dweights, dbias)."""
    x, weights = cache
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


# ── Batch Normalization ────────────────────────────────────────


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> Tuple[Tensor, Any, Tuple[Tensor, Tensor]]:
    """
    Per-channel batch normalization over every axis but the last.

    Train mode normalizes with batch statistics (population variance) and
    returns updated running statistics; eval mode uses the running statistics
    and returns them unchanged.

    Returns:
        (output, cache, (new_running_mean, new_running_var))
    """
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm parameters must have shape ({channels},)")
    axes = tuple(range(x.ndim - 1))

    if mode == "train":
        if x.shape[0] < 2:
            raise ParameterError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x - mean) * inv_std
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
        cache = ("train", xhat, inv_std, gamma, axes)
        return gamma * xhat + beta, cache, (new_mean, new_var)

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + epsilon)
        xhat = (x - running_mean) * inv_std
        cache = ("eval", xhat, inv_std, gamma, axes)
        return gamma * xhat + beta, cache, (running_mean, running_var)

    raise ParameterError(f"unknown batchnorm mode '{mode}'")


def batchnorm_backward(dout: Tensor, cache: Any) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (dx, dgamma, dbeta)."""
    mode, xhat, inv_std, gamma, axes = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma

    if mode == "eval":
        return dxhat * inv_std, dgamma, dbeta

    m = dout.size // dout.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# ── Activations ────────────────────────────────────────────────


def activation_forward(x: Tensor, kind: str) -> Tuple[Tensor, Any]:
    if kind == "relu":
        return np.maximum(x, 0.0), x
    if kind == "tanh":
        out = np.tanh(x)
        return out, out
    if kind == "softmax":
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        out = shifted / shifted.sum(axis=-1, keepdims=True)
        return out, out
    if kind == "linear":
        return x, None
    raise ParameterError(f"unknown activation '{kind}' (expected one of {ACTIVATIONS})")


def activation_backward(dout: Tensor, cache: Any, kind: str) -> Tensor:
    if kind == "relu":
        return dout * (cache > 0.0)
    if kind == "tanh":
        return dout * (1.0 - cache**2)
    if kind == "softmax":
        # Jacobian-vector product of softmax along the last axis
        return cache * (dout - (dout * cache).sum(axis=-1, keepdims=True))
    if kind == "linear":
        return dout
    raise ParameterError(f"unknown activation '{kind}'")


# ── Dropout ────────────────────────────────────────────────────


def dropout_forward(x: Tensor, rate: float, mode: str = "train", seed: Seed = 0) -> Tuple[Tensor, Optional[Tensor]]:
    """
    Inverted dropout.

    Train mode zeroes each unit with probability ``rate`` and scales survivors
    by 1/(1 - rate); eval mode (or rate 0) is the identity.

    Returns:
        (output, mask) where mask is None for the identity case
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, None
    if mode != "train":
        raise ParameterError(f"unknown dropout mode '{mode}'")

    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout: Tensor, mask: Optional[Tensor]) -> Tensor:
    return dout if mask is None else dout * mask
