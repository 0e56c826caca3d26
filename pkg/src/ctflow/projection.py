"""Averaging projection operators mapping volumes to DRR-style images.

Volumes are (..., D, H, W, C). ``project_depth`` averages over D giving an
(H, W) coronal image; ``project_width`` averages over W giving a (D, H)
sagittal image. Both accept numpy arrays or Tensors and return the same kind;
channels are averaged as well (C is 1 in practice).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEPTH = "depth"
WIDTH = "width"


@dataclass(frozen=True)
class Projection:
    pixels: np.ndarray
    plane: str

    def __post_init__(self):
        if self.plane not in (DEPTH, WIDTH):
            raise ValueError(f"unknown plane {self.plane!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _mean(y, axes):
    if isinstance(y, Tensor):
        return T.mean(y, axis=axes)
    return np.asarray(y, dtype=np.float64).mean(axis=axes)


def project_depth(y):
    return _mean(y, (-4, -1))


def project_width(y):
    return _mean(y, (-2, -1))


def project_depth_adjoint(x: np.ndarray, depth: int) -> np.ndarray:
    """Transpose of :func:`project_depth` for a single-channel volume."""
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x[..., None, :, :, None] / depth, x.shape[:-2] + (depth,) + x.shape[-2:] + (1,)).copy()


def project_width_adjoint(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x[..., :, :, None, None] / width, x.shape + (width, 1)).copy()


# any differentiable volume -> image map can stand in for the averaging operators
Projector = Callable[[Tensor], Tensor]
PROJECTORS: dict[str, Projector] = {DEPTH: project_depth, WIDTH: project_width}
