"""Projection-consistent reconstruction by gradient descent on the deepest latent.

The trained flow is held fixed. Shallow latents stay at zero; only the top
latent ``z_L`` is updated, starting from zero, until every active projection
matches its target to within the per-pixel MSE threshold or the iteration cap
is reached.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import glow, layers
from . import tensor as T
from .glow import FlowModel
from .projection import Projection, project_depth, project_width
from .tensor import Tensor

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("iter", "loss", "C_d", "C_w", "C_l", "logp_zL", "logp_y")


class ReconstructionDivergedError(FloatingPointError):
    def __init__(self, message: str, trajectory: list[tuple]):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class ReconConfig:
    lambda_d: float = 1.0
    lambda_w: float = 1.0
    lambda_l: float = 0.01
    # target log-density of z_L in nats; None disables the likelihood term
    log_p0: float | None = None
    alpha: float = 0.2
    max_iter: int = 5000
    mse_threshold: float = 9.0
    # "gd": plain z <- z - alpha * grad; "adam": Adam steps of size alpha
    step_mode: str = "gd"
    # optimise whitened latents eps (z = prior mean + prior scale * eps) instead of raw z
    whiten: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if min(self.lambda_d, self.lambda_w, self.lambda_l) < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.mse_threshold < 0:
            raise ValueError("mse_threshold must be >= 0")
        if self.step_mode not in ("gd", "adam"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")

    @property
    def biplanar(self) -> bool:
        return self.lambda_w > 0

    @property
    def targets_likelihood(self) -> bool:
        return self.lambda_l > 0 and self.log_p0 is not None


@dataclass
class ReconResult:
    volume: np.ndarray
    mse_depth: float
    mse_width: float | None
    iterations: int
    converged: bool
    logp_top: float
    logp_volume: float
    trajectory: list[tuple] = field(default_factory=list)
    z_top: np.ndarray | None = None
    log_p0: float | None = None
    error: str | None = None

    def trajectory_lines(self) -> list[str]:
        rows = ["\t".join(TRAJECTORY_COLUMNS)]
        for row in self.trajectory:
            rows.append("\t".join([str(row[0])] + [f"{v:.10g}" for v in row[1:]]))
        return rows


def _pixels(x) -> np.ndarray | None:
    if x is None:
        return None
    return np.asarray(x.pixels if isinstance(x, Projection) else x, dtype=np.float64)


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def _decode_terms(model: FlowModel, params, zs: Sequence[Tensor], x_d, x_w, cfg: ReconConfig):
    x, logdet, logps = model.inverse(zs, params, standardized=cfg.whiten)
    y = glow.to_intensity(x)
    comps: dict[str, Tensor | float] = {}
    c_d = T.mean((project_depth(y) - x_d) ** 2, axis=(1, 2))
    loss = c_d * cfg.lambda_d
    comps["C_d"] = c_d
    if cfg.biplanar:
        c_w = T.mean((project_width(y) - x_w) ** 2, axis=(1, 2))
        loss = loss + c_w * cfg.lambda_w
        comps["C_w"] = c_w
    logp_top = layers.gaussian_logp(zs[-1]) if cfg.whiten else logps[-1]
    if cfg.targets_likelihood:
        c_l = (logp_top - cfg.log_p0) ** 2
        loss = loss + c_l * cfg.lambda_l
        comps["C_l"] = c_l
    logp_x = logdet
    for lp in logps:
        logp_x = logp_x + lp
    return loss, comps, y, logp_top, logp_x


def _latents(model: FlowModel, z_top, requires_grad: bool) -> list[Tensor]:
    shapes = model.latent_shapes()
    zs = [Tensor(np.zeros((1,) + s)) for s in shapes[:-1]]
    zs.append(Tensor(np.asarray(z_top, dtype=np.float64).reshape((1,) + shapes[-1]), requires_grad))
    return zs


def recon_loss(
    z_top: np.ndarray,
    x_d,
    x_w,
    cfg: ReconConfig,
    model: FlowModel,
    with_grad: bool = False,
):
    """Composite reconstruction loss at ``z_top`` with shallow latents at zero.

    Returns ``(loss, components)``; with ``with_grad`` also the gradient with
    respect to ``z_top``.
    """
    if cfg.biplanar and x_w is None:
        raise ValueError("a sagittal projection is required when lambda_w > 0")
    zs = _latents(model, z_top, with_grad)
    loss, comps, _, logp_top, _ = _decode_terms(model, model.tensors(False), zs, _pixels(x_d), _pixels(x_w), cfg)
    out = {k: float(v.data[0]) for k, v in comps.items()}
    out["logp_zL"] = float(logp_top.data[0])
    value = float(loss.data[0])
    if not with_grad:
        return value, out
    T.tsum(loss).backward()
    return value, out, zs[-1].grad.reshape(np.shape(z_top))


def recon_loss_volume(y, x_d, x_w, cfg: ReconConfig, logp_top: float = 0.0) -> float:
    """The same loss evaluated directly on a volume (likelihood term from ``logp_top``)."""
    y = np.asarray(y, dtype=np.float64)
    loss = cfg.lambda_d * _mse(project_depth(y), _pixels(x_d))
    if cfg.biplanar:
        loss += cfg.lambda_w * _mse(project_width(y), _pixels(x_w))
    if cfg.targets_likelihood:
        loss += cfg.lambda_l * (logp_top - cfg.log_p0) ** 2
    return loss


def _plane_mses(y: np.ndarray, x_d, x_w, cfg: ReconConfig) -> tuple[float, float | None]:
    mse_d = _mse(project_depth(y), x_d)
    mse_w = _mse(project_width(y), x_w) if cfg.biplanar else None
    return mse_d, mse_w


def _satisfied(mse_d: float, mse_w: float | None, cfg: ReconConfig) -> bool:
    return mse_d <= cfg.mse_threshold and (mse_w is None or mse_w <= cfg.mse_threshold)


def reconstruct(x_d, x_w, model: FlowModel, cfg: ReconConfig | None = None) -> ReconResult:
    """Recover a volume whose projections match ``x_d`` (and ``x_w`` if biplanar)."""
    cfg = cfg or ReconConfig()
    x_d = _pixels(x_d)
    if x_d.shape != model.config.shape[1:3]:
        raise ValueError(f"coronal projection shape {x_d.shape} does not match model {model.config.shape[1:3]}")
    if cfg.biplanar:
        x_w = _pixels(x_w)
        if x_w is None:
            raise ValueError("a sagittal projection is required when lambda_w > 0")
        if x_w.shape != model.config.shape[0:2]:
            raise ValueError(f"sagittal projection shape {x_w.shape} does not match model {model.config.shape[0:2]}")
    else:
        x_w = None

    params = model.tensors(False)
    z = np.zeros((1,) + model.latent_shapes()[-1])
    alpha = cfg.alpha
    halved = False
    adam_m = np.zeros_like(z)
    adam_v = np.zeros_like(z)
    trajectory: list[tuple] = []
    n = 0
    while True:
        zs = _latents(model, z, True)
        loss, comps, y, logp_top, logp_x = _decode_terms(model, params, zs, x_d, x_w, cfg)
        volume = np.clip(y.data[0], 0.0, 255.0)
        mse_d, mse_w = _plane_mses(volume, x_d, x_w, cfg)
        row = (
            n,
            float(loss.data[0]),
            float(comps["C_d"].data[0]),
            float(comps["C_w"].data[0]) if "C_w" in comps else 0.0,
            float(comps["C_l"].data[0]) if "C_l" in comps else 0.0,
            float(logp_top.data[0]),
            float(logp_x.data[0]),
        )
        if not all(math.isfinite(v) for v in row[1:]):
            raise ReconstructionDivergedError(f"non-finite loss at iteration {n}", trajectory)
        trajectory.append(row)
        converged = _satisfied(mse_d, mse_w, cfg)
        if converged or n >= cfg.max_iter:
            break
        T.tsum(loss).backward()
        grad = zs[-1].grad
        if not np.all(np.isfinite(grad)):
            if halved:
                raise ReconstructionDivergedError(f"non-finite gradient at iteration {n}", trajectory)
            log.warning("non-finite gradient at iteration %d; halving alpha", n)
            alpha *= 0.5
            halved = True
            continue
        if cfg.step_mode == "gd":
            step = alpha * grad
        else:
            t = n + 1
            adam_m = 0.9 * adam_m + 0.1 * grad
            adam_v = 0.999 * adam_v + 0.001 * grad * grad
            step = alpha * (adam_m / (1 - 0.9**t)) / (np.sqrt(adam_v / (1 - 0.999**t)) + 1e-8)
        candidate = z - step
        if not np.all(np.isfinite(candidate)):
            if halved:
                raise ReconstructionDivergedError(f"non-finite iterate at iteration {n}", trajectory)
            alpha *= 0.5
            halved = True
            continue
        z = candidate
        n += 1
    return ReconResult(
        volume=volume,
        mse_depth=mse_d,
        mse_width=mse_w,
        iterations=n,
        converged=converged,
        logp_top=row[5],
        logp_volume=row[6],
        trajectory=trajectory,
        z_top=z[0].copy(),
        log_p0=cfg.log_p0 if cfg.targets_likelihood else None,
    )


def per_dimension_target(value_per_2048: float, model: FlowModel) -> float:
    """Rescale a target quoted for a 2048-dimensional top latent to this model's top latent."""
    return value_per_2048 * model.latent_dims()[-1] / 2048.0


def reconstruct_family(
    x_d,
    x_w,
    model: FlowModel,
    base_cfg: ReconConfig,
    targets: Sequence[float],
) -> list[ReconResult]:
    """One independent reconstruction per likelihood target, in the given order."""
    if not targets:
        raise ValueError("targets must be nonempty")
    lam = base_cfg.lambda_l if base_cfg.lambda_l > 0 else 0.01
    results = []
    for target in targets:
        cfg = replace(base_cfg, lambda_l=lam, log_p0=float(target))
        try:
            results.append(reconstruct(x_d, x_w, model, cfg))
        except (ReconstructionDivergedError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("target %g failed: %s", target, exc)
            traj = getattr(exc, "trajectory", [])
            nan_vol = np.full(model.config.shape, np.nan)
            results.append(
                ReconResult(nan_vol, math.nan, None, len(traj), False, math.nan, math.nan, traj, None, float(target), str(exc))
            )
    return results
