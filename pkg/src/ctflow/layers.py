"""Invertible 3D flow layers.

All layers act on channels-last batches shaped (N, D, H, W, C) and take their
parameters as a mapping of :class:`~ctflow.tensor.Tensor`. Each returns the
transformed tensor together with the log-determinant of the map that was
applied, so a reverse call reports the negated forward log-det.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = Mapping[str, Tensor]

LOG_2PI = math.log(2.0 * math.pi)
SINGULARITY_FLOOR = 1e-12
# scale = sigmoid(h - SCALE_SHIFT) + SCALE_OFFSET, bounded in (0.6, 1.6)
SCALE_SHIFT = 0.1
SCALE_OFFSET = 0.6


class SingularWeightError(np.linalg.LinAlgError):
    pass


class LayerShapeError(T.ShapeError):
    pass


def _spatial_size(x: Tensor) -> int:
    return int(np.prod(x.shape[1:4]))


# -- actnorm -----------------------------------------------------------------
def actnorm(x: Tensor, params: Params, reverse: bool = False) -> tuple[Tensor, Tensor]:
    """Per-channel affine ``y = exp(logs) * (x + bias)``."""
    bias, logs = params["bias"], params["logs"]
    logdet = T.tsum(logs) * float(_spatial_size(x))
    if not reverse:
        return (x + bias) * T.exp(logs), logdet
    return x * T.exp(-logs) - bias, -logdet


def actnorm_init(x: np.ndarray, eps: float = 1e-12) -> dict[str, np.ndarray]:
    """Data-dependent parameters giving zero mean, unit variance per channel."""
    flat = x.reshape(-1, x.shape[-1])
    mu = flat.mean(axis=0)
    var = ((flat - mu) ** 2).mean(axis=0)
    return {"bias": -mu, "logs": -0.5 * np.log(var + eps)}


# -- invertible 1x1x1 convolution ------------------------------------------------
def check_invertible(weight: np.ndarray) -> None:
    sign, logabs = np.linalg.slogdet(weight)
    if sign == 0 or logabs < math.log(SINGULARITY_FLOOR):
        raise SingularWeightError(f"1x1x1 mixing matrix is singular (log|det| = {logabs:.3g})")


def inv_conv(x: Tensor, params: Params, reverse: bool = False) -> tuple[Tensor, Tensor]:
    """Mix channels at every voxel: ``y[..., :] = W @ x[..., :]``."""
    weight = params["weight"]
    if x.shape[-1] != weight.shape[0]:
        raise LayerShapeError(f"inv_conv: {x.shape[-1]} channels vs {weight.shape[0]}x{weight.shape[1]} matrix")
    check_invertible(weight.data)
    logdet = T.logabsdet(weight) * float(_spatial_size(x))
    if not reverse:
        return x @ T.transpose(weight), logdet
    return x @ T.transpose(T.inverse(weight)), -logdet


def random_rotation(channels: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
    return q * np.sign(np.diag(r))


# -- affine coupling -------------------------------------------------------------
def coupling_net(x1: Tensor, params: Params) -> Tensor:
    h = T.relu(T.conv3d(x1, params["w1"], params["b1"]))
    h = T.relu(T.conv3d(h, params["w2"], params["b2"]))
    return T.conv3d(h, params["w3"], params["b3"])


def coupling_scale(h: Tensor) -> Tensor:
    return T.sigmoid(h - SCALE_SHIFT) + SCALE_OFFSET


def affine_coupling(x: Tensor, params: Params, reverse: bool = False) -> tuple[Tensor, Tensor]:
    """Scale and shift the second channel half conditioned on the first half.

    The subnetwork output is split into a scale pre-activation ``h`` and a
    shift ``t``; the scale is ``sigmoid(h - 0.1) + 0.6``.
    """
    c = x.shape[-1]
    if c % 2:
        raise LayerShapeError(f"affine_coupling needs an even channel count, got {c}")
    half = c // 2
    x1, x2 = T.split_channels(x, half)
    h, shift = T.split_channels(coupling_net(x1, params), half)
    scale = coupling_scale(h)
    logdet = T.tsum(T.log(scale), axis=(1, 2, 3, 4))
    if not reverse:
        y2 = scale * x2 + shift
        return T.concat([x1, y2], axis=-1), logdet
    y2 = (x2 - shift) / scale
    return T.concat([x1, y2], axis=-1), -logdet


def coupling_init(channels: int, width: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    half = channels // 2
    return {
        "w1": rng.standard_normal((3, 3, 3, half, width)) * math.sqrt(2.0 / (27 * half)),
        "b1": np.zeros(width),
        "w2": rng.standard_normal((1, 1, 1, width, width)) * math.sqrt(2.0 / width),
        "b2": np.zeros(width),
        # zero final layer: h = 0, shift = 0 at initialization
        "w3": np.zeros((3, 3, 3, width, channels)),
        "b3": np.zeros(channels),
    }


# -- squeeze ----------------------------------------------------------------------
def squeeze3d(x: Tensor, reverse: bool = False) -> Tensor:
    """Trade each 2x2x2 spatial block for 8x the channels (or undo it)."""
    n, d, h, w, c = x.shape
    if not reverse:
        if d % 2 or h % 2 or w % 2:
            raise LayerShapeError(f"squeeze3d needs even spatial dims, got {(d, h, w)}")
        y = T.reshape(x, (n, d // 2, 2, h // 2, 2, w // 2, 2, c))
        y = T.transpose(y, (0, 1, 3, 5, 2, 4, 6, 7))
        return T.reshape(y, (n, d // 2, h // 2, w // 2, 8 * c))
    if c % 8:
        raise LayerShapeError(f"unsqueeze needs channels divisible by 8, got {c}")
    y = T.reshape(x, (n, d, h, w, 2, 2, 2, c // 8))
    y = T.transpose(y, (0, 1, 4, 2, 5, 3, 6, 7))
    return T.reshape(y, (n, 2 * d, 2 * h, 2 * w, c // 8))


# -- Gaussian priors and split -------------------------------------------------
def gaussian_logp(z: Tensor, mean: Tensor | None = None, logs: Tensor | None = None) -> Tensor:
    """Per-sample diagonal Gaussian log-density, summed over all non-batch axes."""
    axes = tuple(range(1, z.ndim))
    const = -0.5 * int(np.prod(z.shape[1:])) * LOG_2PI
    diff = z - mean if mean is not None else z
    if logs is None:
        return const - 0.5 * T.sq_norm(diff, axis=axes)
    # logs is either per-sample (same shape as z) or shared across the batch
    logs_sum = T.tsum(logs, axis=axes) if logs.ndim == z.ndim else T.tsum(logs)
    return const - logs_sum - 0.5 * T.sq_norm(diff * T.exp(-logs), axis=axes)


def standard_normal_logp(z: np.ndarray | Tensor) -> float:
    """log N(z; 0, I) of a single latent treated as one flat vector."""
    arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return -0.5 * arr.size * LOG_2PI - 0.5 * float(np.sum(arr * arr))


def prior_head(kept: Tensor, params: Params) -> tuple[Tensor, Tensor]:
    """Mean and log-scale for the factored half, predicted from the kept half."""
    h = T.conv3d(kept, params["w"], params["b"])
    c = h.shape[-1] // 2
    return T.split_channels(h, c)


def split_prior(x: Tensor, params: Params | None) -> tuple[Tensor, Tensor, Tensor]:
    """Factor out half the channels and score them under the (learned) prior.

    With ``params=None`` the factored half is scored under N(0, I).
    """
    c = x.shape[-1]
    if c % 2:
        raise LayerShapeError(f"split_prior needs an even channel count, got {c}")
    kept, z = T.split_channels(x, c // 2)
    if params is None:
        return kept, z, gaussian_logp(z)
    mean, logs = prior_head(kept, params)
    return kept, z, gaussian_logp(z, mean, logs)


def merge_prior(
    kept: Tensor,
    z: Tensor | None,
    params: Params | None,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    standardized: bool = False,
) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`split_prior`; draws ``z`` from the prior when it is None.

    With ``standardized`` the given ``z`` is a whitened latent ``eps`` and the
    merged value is ``mean + exp(logs) * eps``.
    """
    if params is None:
        mean = logs = None
        mean_data = np.zeros(kept.shape)
        logs_data = np.zeros(kept.shape)
    else:
        mean, logs = prior_head(kept, params)
        mean_data, logs_data = mean.data, logs.data
    if z is None:
        noise = rng.standard_normal(kept.shape) if (rng is not None and temperature > 0) else 0.0
        z = Tensor(mean_data + temperature * np.exp(logs_data) * noise)
    elif standardized and params is not None:
        z = mean + T.exp(logs) * z
    logp = gaussian_logp(z, mean, logs)
    return T.concat([kept, z], axis=-1), logp


def split_prior_init(channels: int) -> dict[str, np.ndarray]:
    half = channels // 2
    return {"w": np.zeros((3, 3, 3, half, channels)), "b": np.zeros(channels)}
