"""Multi-scale 3D Glow: squeeze, K flow steps, split, repeated over L levels."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers
from . import tensor as T
from .tensor import Tensor

# volumes live on a 0-255 scale; the flow sees (y + u) / 256 - 0.5 with u ~ U[0, 1)
INTENSITY_SCALE = 256.0
PRIOR_MODES = ("learned", "top", "standard")


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    depth: int = 4
    width: int = 64
    shape: tuple[int, int, int, int] = (16, 16, 16, 1)
    prior: str = "learned"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.levels < 1 or self.depth < 1 or self.width < 1:
            raise ValueError("levels, depth and width must be >= 1")
        if len(self.shape) != 4:
            raise ValueError(f"shape must be (D, H, W, C), got {self.shape}")
        step = 2**self.levels
        if any(s % step for s in self.shape[:3]):
            raise ValueError(f"spatial dims {self.shape[:3]} must be divisible by 2**levels = {step}")
        if self.prior not in PRIOR_MODES:
            raise ValueError(f"prior must be one of {PRIOR_MODES}, got {self.prior!r}")

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        """The full-size configuration: 32^3 input, 5 levels, 8 steps, width 512."""
        base = dict(levels=5, depth=8, width=512, shape=(32, 32, 32, 1))
        base.update(overrides)
        return cls(**base)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()[:16]


def to_flow_space(y: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if noise is not None:
        y = y + noise
    return y / INTENSITY_SCALE - 0.5


def to_intensity(x):
    return (x + 0.5) * INTENSITY_SCALE


class ModelNotInitializedError(RuntimeError):
    pass


class FlowModel:
    """Parameters plus the level/step layout of the bijection.

    Parameters are plain float64 arrays in ``self.params`` (declaration
    order is preserved). Differentiable passes take a mapping of Tensors made
    by :meth:`tensors`, so the same model can be differentiated w.r.t. its
    weights (training) or held fixed (latent optimisation).
    """

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.params: dict[str, np.ndarray] = {}
        self.initialized = False
        self._layout: list[dict] = []
        self._build()

    # -- construction ------------------------------------------------------------
    def _build(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, h, w, c = cfg.shape
        for i in range(cfg.levels):
            d, h, w, c = d // 2, h // 2, w // 2, c * 8
            steps = []
            for k in range(cfg.depth):
                pre = f"l{i}.s{k}"
                self.params[f"{pre}.actnorm.bias"] = np.zeros(c)
                self.params[f"{pre}.actnorm.logs"] = np.zeros(c)
                self.params[f"{pre}.invconv.weight"] = layers.random_rotation(c, rng)
                for name, arr in layers.coupling_init(c, cfg.width, rng).items():
                    self.params[f"{pre}.coupling.{name}"] = arr
                steps.append(pre)
            level = {"steps": steps, "shape": (d, h, w, c), "prior": None}
            if i < cfg.levels - 1:
                if cfg.prior == "learned":
                    for name, arr in layers.split_prior_init(c).items():
                        self.params[f"l{i}.prior.{name}"] = arr
                    level["prior"] = f"l{i}.prior"
                c //= 2
                level["latent_shape"] = (d, h, w, c)
            else:
                level["latent_shape"] = (d, h, w, c)
                if cfg.prior in ("learned", "top"):
                    self.params["top.mean"] = np.zeros((d, h, w, c))
                    self.params["top.logs"] = np.zeros((d, h, w, c))
                    level["prior"] = "top"
            self._layout.append(level)

    def latent_shapes(self) -> list[tuple[int, int, int, int]]:
        return [lvl["latent_shape"] for lvl in self._layout]

    def latent_dims(self) -> list[int]:
        return [int(np.prod(s)) for s in self.latent_shapes()]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad) for name, arr in self.params.items()}

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    @staticmethod
    def _sub(params, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}

    def _top_prior(self, params):
        if "top.mean" not in params:
            return None, None
        return params["top.mean"], params["top.logs"]

    # -- differentiable passes ---------------------------------------------------
    def forward(self, x: Tensor, params, *, init: bool = False):
        """Map flow-space ``x`` (N, D, H, W, C) to latents.

        Returns ``(zs, logdet, logps)`` with per-sample ``logdet`` and per-level
        prior log-densities, each of shape (N,).
        """
        if x.shape[1:] != self.config.shape:
            raise T.ShapeError(f"input shape {x.shape[1:]} does not match model shape {self.config.shape}")
        if not (self.initialized or init):
            raise ModelNotInitializedError("actnorm is uninitialized; call initialize() with a data batch")
        n = x.shape[0]
        logdet = Tensor(np.zeros(n))
        zs, logps = [], []
        h = x
        for i, level in enumerate(self._layout):
            h = layers.squeeze3d(h)
            for pre in level["steps"]:
                if init:
                    stats = layers.actnorm_init(h.data)
                    for key, arr in stats.items():
                        self.params[f"{pre}.actnorm.{key}"][...] = arr
                        params[f"{pre}.actnorm.{key}"] = Tensor(self.params[f"{pre}.actnorm.{key}"])
                h, ld = layers.actnorm(h, self._sub(params, f"{pre}.actnorm"))
                logdet = logdet + ld
                h, ld = layers.inv_conv(h, self._sub(params, f"{pre}.invconv"))
                logdet = logdet + ld
                h, ld = layers.affine_coupling(h, self._sub(params, f"{pre}.coupling"))
                logdet = logdet + ld
            if i < len(self._layout) - 1:
                prior = self._sub(params, level["prior"]) if level["prior"] else None
                h, z, lp = layers.split_prior(h, prior)
            else:
                z = h
                mean, logs = self._top_prior(params)
                lp = layers.gaussian_logp(z, mean, logs)
            zs.append(z)
            logps.append(lp)
        if init:
            self.initialized = True
        return zs, logdet, logps

    def inverse(
        self,
        zs: Sequence[Tensor | None],
        params,
        *,
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
        n: int | None = None,
        standardized: bool = False,
    ):
        """Map latents back to flow space. Missing (None) latents are drawn from the prior.

        Returns ``(x, logdet, logps)`` where ``logdet`` is the forward (x -> z)
        log-determinant, so ``sum(logps) + logdet`` is ``log p(x)``. With
        ``standardized`` the latents are whitened by their priors: each level
        is ``mean + exp(logs) * eps`` and an all-zero stack decodes the modes.
        """
        if not self.initialized:
            raise ModelNotInitializedError("actnorm is uninitialized; call initialize() with a data batch")
        if len(zs) != len(self._layout):
            raise T.ShapeError(f"expected {len(self._layout)} latents, got {len(zs)}")
        if n is None:
            n = next((z.shape[0] for z in zs if z is not None), 1)
        for z, shape in zip(zs, self.latent_shapes()):
            if z is not None and z.shape[1:] != shape:
                raise T.ShapeError(f"latent shape {z.shape[1:]} does not match {shape}")
        logps: list[Tensor | None] = [None] * len(zs)
        top = zs[-1]
        mean, logs = self._top_prior(params)
        if top is None:
            shape = (n,) + self.latent_shapes()[-1]
            m = mean.data if mean is not None else 0.0
            s = np.exp(logs.data) if logs is not None else 1.0
            noise = rng.standard_normal(shape) if (rng is not None and temperature > 0) else np.zeros(shape)
            top = Tensor(m + temperature * s * noise)
        elif standardized and mean is not None:
            top = mean + T.exp(logs) * top
        logps[-1] = layers.gaussian_logp(top, mean, logs)
        rev_logdet = Tensor(np.zeros(n))
        h = top
        for i in reversed(range(len(self._layout))):
            level = self._layout[i]
            if i < len(self._layout) - 1:
                prior = self._sub(params, level["prior"]) if level["prior"] else None
                h, logps[i] = layers.merge_prior(h, zs[i], prior, temperature, rng, standardized)
            for pre in reversed(level["steps"]):
                h, ld = layers.affine_coupling(h, self._sub(params, f"{pre}.coupling"), reverse=True)
                rev_logdet = rev_logdet + ld
                h, ld = layers.inv_conv(h, self._sub(params, f"{pre}.invconv"), reverse=True)
                rev_logdet = rev_logdet + ld
                h, ld = layers.actnorm(h, self._sub(params, f"{pre}.actnorm"), reverse=True)
                rev_logdet = rev_logdet + ld
            h = layers.squeeze3d(h, reverse=True)
        return h, -rev_logdet, logps

    def log_prob(self, x: Tensor, params) -> Tensor:
        """Per-sample log-density of flow-space ``x``."""
        _, logdet, logps = self.forward(x, params)
        total = logdet
        for lp in logps:
            total = total + lp
        return total

    def top_log_prob(self, z_top: Tensor, params) -> Tensor:
        mean, logs = self._top_prior(params)
        return layers.gaussian_logp(z_top, mean, logs)

    # -- array-level conveniences ------------------------------------------------
    def _batch(self, y) -> tuple[np.ndarray, bool]:
        y = np.asarray(y, dtype=np.float64)
        single = y.shape == self.config.shape
        return (y[None] if single else y), single

    def initialize(self, y: np.ndarray, noise: np.ndarray | None = None) -> None:
        """Data-dependent actnorm initialisation from an intensity batch."""
        batch, _ = self._batch(y)
        self.forward(Tensor(to_flow_space(batch, noise)), self.tensors(False), init=True)

    def encode(self, y: np.ndarray) -> tuple[list[np.ndarray], np.ndarray | float]:
        batch, single = self._batch(y)
        zs, logdet, _ = self.forward(Tensor(to_flow_space(batch)), self.tensors(False))
        zs = [z.data[0] if single else z.data for z in zs]
        return zs, (float(logdet.data[0]) if single else logdet.data)

    def decode(self, zs: Sequence[np.ndarray]) -> np.ndarray:
        single = zs[-1].shape == self.latent_shapes()[-1]
        batch = [Tensor(z[None] if single else z) for z in zs]
        x, _, _ = self.inverse(batch, self.tensors(False))
        y = to_intensity(x.data)
        return y[0] if single else y

    def log_prob_volume(self, y: np.ndarray) -> np.ndarray | float:
        """log p of the flow-space image of ``y`` (nats), no dequantisation noise."""
        batch, single = self._batch(y)
        lp = self.log_prob(Tensor(to_flow_space(batch)), self.tensors(False)).data
        return float(lp[0]) if single else lp

    def bits_per_dim(self, log_prob) -> np.ndarray | float:
        return bits_per_dim(log_prob, self.config.dim)

    def sample(self, temperature: float = 0.7, seed: int = 0, n: int = 1) -> np.ndarray:
        """Draw ``n`` volumes with latents ~ N(prior mean, (T * prior scale)^2)."""
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        rng = np.random.default_rng(seed)
        zs = [None] * len(self._layout)
        x, _, _ = self.inverse(zs, self.tensors(False), temperature=temperature, rng=rng, n=n)
        y = to_intensity(x.data)
        return y[0] if n == 1 else y


def bits_per_dim(log_prob, dim: int):
    """Negative log-likelihood in bits per voxel on the 256-level intensity scale."""
    return -np.asarray(log_prob) / (dim * math.log(2.0)) + 8.0


def log_prob_latent(z: np.ndarray | Tensor) -> float:
    """Standard-normal log-density of one latent level."""
    return layers.standard_normal_logp(z)


# -- checkpoint format ------------------------------------------------------------
MAGIC = b"FLW3"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: FlowModel, path: str | Path) -> None:
    buf = io.BytesIO()
    cfg_bytes = model.config.to_json().encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(model.config.digest())
    buf.write(struct.pack("<BI", int(model.initialized), len(model.params)))
    for name, arr in model.params.items():
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> FlowModel:
    data = Path(path).read_bytes()
    view = io.BytesIO(data)

    def read(n: int) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated checkpoint")
        return chunk

    if read(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", read(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (cfg_len,) = struct.unpack("<I", read(4))
    config = ModelConfig.from_json(read(cfg_len).decode())
    if read(16) != config.digest():
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected is not None and expected.digest() != config.digest():
        raise CheckpointError(f"{path}: checkpoint config does not match the requested model config")
    initialized, count = struct.unpack("<BI", read(5))
    model = FlowModel(config)
    if count != len(model.params):
        raise CheckpointError(f"{path}: expected {len(model.params)} tensors, found {count}")
    for name, arr in model.params.items():
        (klen,) = struct.unpack("<H", read(2))
        key = read(klen).decode()
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        if key != name or tuple(shape) != arr.shape:
            raise CheckpointError(f"{path}: tensor {key}{shape} does not match {name}{arr.shape}")
        arr[...] = np.frombuffer(read(8 * arr.size), dtype="<f8").reshape(shape)
    model.initialized = bool(initialized)
    return model
