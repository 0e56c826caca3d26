"""Maximum-likelihood training of the flow with Adam."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import glow
from .glow import FlowModel
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    # (first epoch, batch size) pairs; each applies until the next start epoch
    batch_schedule: tuple[tuple[int, int], ...] = ((0, 8),)
    lr: float = 1e-3
    warmup_epochs: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 50.0
    seed: int = 0
    dequantize: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if any(b < 1 for _, b in self.batch_schedule):
            raise ValueError("batch sizes must be >= 1")

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        """1,040 epochs: batch 16, then 4 from epoch 1,000, then 1 from epoch 1,010."""
        base = dict(epochs=1040, batch_schedule=((0, 16), (1000, 4), (1010, 1)))
        base.update(overrides)
        return cls(**base)

    def batch_size(self, epoch: int) -> int:
        size = self.batch_schedule[0][1]
        for start, b in self.batch_schedule:
            if epoch >= start:
                size = b
        return size


@dataclass
class EpochRecord:
    epoch: int
    nll: float
    bits_per_dim: float
    seconds: float = field(compare=False)


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    checksum: str = ""

    def log_lines(self) -> list[str]:
        return [f"{r.epoch}\t{r.nll:.10g}\t{r.bits_per_dim:.10g}\t{r.seconds:.3f}" for r in self.records]


def nll_loss(model: FlowModel, x: Tensor, params) -> Tensor:
    """Mean negative log-likelihood over a flow-space batch (N, D, H, W, C)."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return -model.log_prob(x, params).mean()


def volume_nll(model: FlowModel, volumes: Sequence[np.ndarray]) -> float:
    """nll_loss on intensity volumes without dequantisation noise."""
    batch = np.stack([np.asarray(v, dtype=np.float64) for v in volumes])
    return float(nll_loss(model, Tensor(glow.to_flow_space(batch)), model.tensors(False)).data)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr:
                params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _find_nonfinite(model: FlowModel, x: np.ndarray) -> str:
    """Name the first level/step whose output stops being finite."""
    params = model.tensors(False)
    h = Tensor(x)
    from . import layers

    for i, level in enumerate(model._layout):
        h = layers.squeeze3d(h)
        for pre in level["steps"]:
            for kind, fn in (("actnorm", layers.actnorm), ("invconv", layers.inv_conv), ("coupling", layers.affine_coupling)):
                h, ld = fn(h, model._sub(params, f"{pre}.{kind}"))
                if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(ld.data))):
                    return f"{pre}.{kind}"
        if i < len(model._layout) - 1:
            h = h[..., : h.shape[-1] // 2]
    return "prior"


def train(
    model: FlowModel,
    dataset: Sequence[np.ndarray],
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainReport:
    """Fit ``model`` to intensity volumes by minimising the mean NLL."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    data = np.stack([np.asarray(v, dtype=np.float64) for v in dataset])
    if data.shape[1:] != model.config.shape:
        raise ValueError(f"volume shape {data.shape[1:]} does not match model {model.config.shape}")
    rng = np.random.default_rng(config.seed)
    dim = model.config.dim

    def noise(shape):
        return rng.uniform(0.0, 1.0, size=shape) if config.dequantize else None

    if not model.initialized:
        init_idx = rng.permutation(len(data))[: config.batch_size(0)]
        model.initialize(data[init_idx], noise(data[init_idx].shape))

    opt = Adam(model.params, config.beta1, config.beta2, config.eps)
    steps_per_epoch = {e: math.ceil(len(data) / config.batch_size(e)) for e in range(config.epochs)}
    warmup_steps = config.warmup_epochs * steps_per_epoch.get(0, 1)
    report = TrainReport()
    step = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        bs = config.batch_size(epoch)
        order = rng.permutation(len(data))
        total = 0.0
        for b in range(0, len(data), bs):
            idx = order[b : b + bs]
            batch = data[idx]
            x = glow.to_flow_space(batch, noise(batch.shape))
            params = model.tensors(True)
            loss = nll_loss(model, Tensor(x), params)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}; first bad layer: {_find_nonfinite(model, x)}")
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
            if config.clip_norm:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > config.clip_norm:
                    grads = {k: g * (config.clip_norm / norm) for k, g in grads.items()}
            lr = config.lr * min(1.0, (step + 1) / warmup_steps) if warmup_steps > 0 else config.lr
            opt.step(model.params, grads, lr)
            step += 1
            total += float(loss.data) * len(idx)
        mean_nll = total / len(data)
        record = EpochRecord(epoch, mean_nll, float(glow.bits_per_dim(-mean_nll, dim)), time.perf_counter() - start)
        report.records.append(record)
        log.info("epoch %d nll %.3f bpd %.4f (%.1fs)", epoch, record.nll, record.bits_per_dim, record.seconds)
        if on_epoch is not None:
            on_epoch(record)
        if config.checkpoint_every and config.checkpoint_dir and (epoch + 1) % config.checkpoint_every == 0:
            Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            glow.save_checkpoint(model, Path(config.checkpoint_dir) / f"epoch_{epoch + 1:04d}.flw3")
    report.checksum = model.checksum()
    return report


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing-free moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
