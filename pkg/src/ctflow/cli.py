"""Batch command line: phantoms, train, sample, reconstruct, evaluate.

Settings come from defaults, then a key=value ``--config`` file, then
``X2CT_<KEY>`` environment variables, then command-line flags. Every command
writes the fully resolved configuration to ``<out>/config.resolved``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, glow, metrics, solver, train
from .glow import FlowModel, ModelConfig
from .projection import Projection, DEPTH, WIDTH

log = logging.getLogger("ctflow")

ENV_PREFIX = "X2CT_"


class CLIError(Exception):
    category = "error"


class ConfigError(CLIError):
    category = "config"


class InputError(CLIError):
    category = "io"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    # model
    size: int = 16
    levels: int = 3
    depth: int = 4
    width: int = 64
    prior: str = "learned"
    # phantoms
    data_dir: str = "data"
    phantom_count: int = 250
    test_fraction: float = 0.2
    nodule_max: int = 3
    smoothing: float = 0.6
    # training
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    warmup_epochs: float = 2.0
    clip_norm: float = 50.0
    checkpoint_every: int = 0
    # sampling
    checkpoint: str = ""
    temperature: float = 0.7
    n_samples: int = 4
    # reconstruction
    lambda_d: float = 1.0
    lambda_w: float = 1.0
    lambda_l: float = 0.01
    log_p0: str = ""
    logp0_units: str = "nats"
    alpha: float = 0.2
    max_iter: int = 5000
    mse_threshold: float = 9.0
    step_mode: str = "gd"
    volume: str = ""
    depth_image: str = ""
    width_image: str = ""
    cxr_image: str = ""
    # evaluation
    eval_cases: int = 0

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("int", int):
                value = int(raw)
            elif kind in ("float", float):
                value = float(raw)
            else:
                value = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        setattr(self, key, value)

    def dump(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in self.keys())

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            levels=self.levels,
            depth=self.depth,
            width=self.width,
            shape=(self.size, self.size, self.size, 1),
            prior=self.prior,
            seed=self.seed,
        )

    def phantom_spec(self, seed: int | None = None) -> data.PhantomSpec:
        return data.PhantomSpec(
            seed=self.seed if seed is None else seed,
            size=self.size,
            nodule_count=(0, self.nodule_max),
            smoothing=self.smoothing,
        )

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(
            epochs=self.epochs,
            batch_schedule=((0, self.batch_size),),
            lr=self.lr,
            warmup_epochs=self.warmup_epochs,
            clip_norm=self.clip_norm or None,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=str(Path(self.out) / "checkpoints") if self.checkpoint_every else None,
        )

    def recon_config(self) -> solver.ReconConfig:
        return solver.ReconConfig(
            lambda_d=self.lambda_d,
            lambda_w=self.lambda_w,
            lambda_l=self.lambda_l,
            alpha=self.alpha,
            max_iter=self.max_iter,
            mse_threshold=self.mse_threshold,
            step_mode=self.step_mode,
        )

    def targets(self, model: FlowModel) -> list[float]:
        if not self.log_p0.strip():
            return []
        try:
            values = [float(v) for v in self.log_p0.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad log_p0 list {self.log_p0!r}") from exc
        if self.logp0_units == "per_dim":
            return [v * model.latent_dims()[-1] for v in values]
        if self.logp0_units != "nats":
            raise ConfigError(f"logp0_units must be 'nats' or 'per_dim', got {self.logp0_units!r}")
        return values


def read_config_file(path: str | Path, cfg: RunConfig) -> None:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    if args.config:
        read_config_file(args.config, cfg)
    for key in cfg.keys():
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            cfg.set(key, environ[env_key])
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    if getattr(args, "planes", None) == "uniplanar":
        cfg.lambda_w = 0.0
    elif getattr(args, "planes", None) == "biplanar":
        cfg.lambda_w = 1.0
    if getattr(args, "logp0_list", None):
        cfg.log_p0 = args.logp0_list
    if getattr(args, "lambda_l", None) is not None:
        cfg.lambda_l = args.lambda_l
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dump())
    return out


def _load_model(cfg: RunConfig) -> FlowModel:
    if not cfg.checkpoint:
        raise ConfigError("a checkpoint is required (--checkpoint or checkpoint=)")
    try:
        model = glow.load_checkpoint(cfg.checkpoint)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {cfg.checkpoint}: {exc}") from exc
    if model.config.shape[:3] != (cfg.size,) * 3:
        raise ConfigError(f"checkpoint shape {model.config.shape} does not match size={cfg.size}")
    return model


def slice_sheet(y: np.ndarray) -> np.ndarray:
    """Mid-coronal | mid-sagittal | mid-axial slices side by side, 1-pixel gaps."""
    y = np.asarray(y, dtype=np.float64)[..., 0]
    d, h, w = y.shape
    views = [y[d // 2], y[:, :, w // 2], y[:, h // 2, :]]  # (H,W), (D,H), (D,W)
    rows = max(v.shape[0] for v in views)
    parts = []
    for v in views:
        pad = np.zeros((rows, v.shape[1]))
        pad[: v.shape[0]] = v
        parts.extend([pad, np.zeros((rows, 1))])
    return np.concatenate(parts[:-1], axis=1)


def _write_volume_artifacts(out: Path, stem: str, y: np.ndarray, truth: np.ndarray | None = None) -> None:
    data.save_volume(out / f"{stem}.vol3", np.clip(y, 0.0, 255.0))
    data.save_image(out / f"{stem}_slices.pgm", slice_sheet(y))
    if truth is not None:
        diff = np.clip(np.abs(np.asarray(y) - truth), 0.0, 255.0)
        data.save_image(out / f"{stem}_diff_slices.pgm", slice_sheet(diff))


# -- commands ---------------------------------------------------------------------
def cmd_phantoms(cfg: RunConfig) -> None:
    out = _prepare_out(cfg)
    ds = data.write_dataset(out, cfg.phantom_spec(), cfg.phantom_count, cfg.test_fraction)
    log.info("wrote %d phantoms to %s", len(ds.entries), out)


def _dataset(cfg: RunConfig) -> data.Dataset:
    root = Path(cfg.data_dir)
    if not (root / "manifest.tsv").exists():
        raise InputError(f"no manifest.tsv in {root}; run 'phantoms' first")
    return data.read_manifest(root)


def cmd_train(cfg: RunConfig) -> None:
    out = _prepare_out(cfg)
    volumes = _dataset(cfg).volumes("train")
    if not volumes:
        raise InputError("training split is empty")
    model = FlowModel(cfg.model_config())
    if volumes[0].shape != model.config.shape:
        raise ConfigError(f"data shape {volumes[0].shape} does not match model {model.config.shape}")
    log_path = out / "train_log.tsv"
    log_path.write_text("epoch\tmean_nll_nats\tbits_per_dim\tseconds\n")

    def on_epoch(rec: train.EpochRecord) -> None:
        with log_path.open("a") as fh:
            fh.write(f"{rec.epoch}\t{rec.nll:.10g}\t{rec.bits_per_dim:.10g}\t{rec.seconds:.3f}\n")

    report = train.train(model, volumes, cfg.train_config(), on_epoch=on_epoch)
    glow.save_checkpoint(model, out / "model.flw3")
    (out / "checksum.txt").write_text(report.checksum + "\n")


def cmd_sample(cfg: RunConfig) -> None:
    out = _prepare_out(cfg)
    model = _load_model(cfg)
    rows = ["index\tlog_p\tbits_per_dim"]
    for i in range(cfg.n_samples):
        y = model.sample(cfg.temperature, seed=cfg.seed + i)
        _write_volume_artifacts(out, f"sample_{i:03d}", y)
        lp = model.log_prob_volume(y)
        rows.append(f"{i}\t{lp:.10g}\t{float(model.bits_per_dim(lp)):.10g}")
    (out / "samples.tsv").write_text("\n".join(rows) + "\n")


def _recon_inputs(cfg: RunConfig, model: FlowModel):
    """(x_d, x_w, ground truth or None) from the configured input source."""
    if cfg.volume:
        truth = data.load_volume(cfg.volume)
        if truth.shape != model.config.shape:
            raise ConfigError(f"volume shape {truth.shape} does not match model {model.config.shape}")
        x_d, x_w = data.make_drr_pair(truth)
        return x_d, x_w, truth
    if cfg.cxr_image:
        reference = data.DRRStats.from_images(
            data.make_drr_pair(v)[0].pixels for v in _dataset(cfg).volumes("train")
        )
        x_d = data.rescale_external_cxr(data.load_image(cfg.cxr_image), model.config.shape[1:3], reference)
        return x_d, None, None
    if cfg.depth_image:
        x_d = Projection(data.load_image(cfg.depth_image), DEPTH)
        x_w = Projection(data.load_image(cfg.width_image), WIDTH) if cfg.width_image else None
        return x_d, x_w, None
    raise ConfigError("reconstruct needs volume=, depth_image= or cxr_image=")


def cmd_reconstruct(cfg: RunConfig) -> None:
    out = _prepare_out(cfg)
    model = _load_model(cfg)
    x_d, x_w, truth = _recon_inputs(cfg, model)
    base = cfg.recon_config()
    if base.biplanar and x_w is None:
        raise ConfigError("biplanar reconstruction needs a sagittal input; use --uniplanar")
    targets = cfg.targets(model)
    if targets:
        results = solver.reconstruct_family(x_d, x_w, model, base, targets)
    else:
        results = [solver.reconstruct(x_d, x_w, model, dataclasses.replace(base, log_p0=None))]
    data.save_image(out / "input_depth.pgm", x_d.pixels)
    if base.biplanar:
        data.save_image(out / "input_width.pgm", x_w.pixels)
    rows = ["index\tlog_p0\tconverged\titerations\tmse_depth\tmse_width\tlogp_zL\tlogp_y\tssim\tpsnr_db\terror"]
    for i, res in enumerate(results):
        stem = f"recon_{i:03d}"
        (out / f"{stem}_trajectory.tsv").write_text("\n".join(res.trajectory_lines()) + "\n")
        score = ("", "")
        if res.error is None:
            _write_volume_artifacts(out, stem, res.volume, truth)
            if truth is not None:
                score = (f"{metrics.ssim(res.volume, truth):.6f}", f"{metrics.psnr(res.volume, truth):.6f}")
        rows.append(
            "\t".join(
                [
                    str(i),
                    "" if res.log_p0 is None else f"{res.log_p0:.10g}",
                    str(int(res.converged)),
                    str(res.iterations),
                    f"{res.mse_depth:.10g}",
                    "" if res.mse_width is None else f"{res.mse_width:.10g}",
                    f"{res.logp_top:.10g}",
                    f"{res.logp_volume:.10g}",
                    *score,
                    res.error or "",
                ]
            )
        )
    (out / "summary.tsv").write_text("\n".join(rows) + "\n")


def evaluate_cases(model: FlowModel, volumes: Sequence[np.ndarray], base: solver.ReconConfig):
    """Uniplanar and biplanar reconstructions (no likelihood term) scored against truth."""
    uni = metrics.MetricReport("uniplanar (lambda_l = 0)")
    bi = metrics.MetricReport("biplanar (lambda_l = 0)")
    converged = {"uniplanar": [], "biplanar": []}
    for truth in volumes:
        x_d, x_w = data.make_drr_pair(truth)
        for label, rep, lam_w in (("uniplanar", uni, 0.0), ("biplanar", bi, 1.0)):
            cfg = dataclasses.replace(base, lambda_w=lam_w, lambda_l=0.0, log_p0=None)
            res = solver.reconstruct(x_d, x_w, model, cfg)
            rep.add(res.volume, truth)
            converged[label].append(res.converged)
    return uni, bi, converged


def cmd_evaluate(cfg: RunConfig) -> None:
    out = _prepare_out(cfg)
    model = _load_model(cfg)
    volumes = _dataset(cfg).volumes("test")
    if cfg.eval_cases:
        volumes = volumes[: cfg.eval_cases]
    if not volumes:
        raise InputError("test split is empty")
    uni, bi, converged = evaluate_cases(model, volumes, cfg.recon_config())
    (out / "metrics.tsv").write_text(metrics.format_table([uni, bi]))
    lines = ["method\tconverged\tcases"]
    lines += [f"{k}\t{sum(v)}\t{len(v)}" for k, v in converged.items()]
    (out / "convergence.tsv").write_text("\n".join(lines) + "\n")
    sys.stdout.write(uni.summary() + "\n" + bi.summary() + "\n")


COMMANDS = {
    "phantoms": cmd_phantoms,
    "train": cmd_train,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "reconstruct", "evaluate"):
            p.add_argument("--checkpoint")
        if name in ("train", "evaluate", "reconstruct"):
            p.add_argument("--data", help="phantom dataset directory")
        if name in ("reconstruct", "evaluate"):
            planes = p.add_mutually_exclusive_group()
            planes.add_argument("--uniplanar", dest="planes", action="store_const", const="uniplanar")
            planes.add_argument("--biplanar", dest="planes", action="store_const", const="biplanar")
        if name == "reconstruct":
            p.add_argument("--logp0-list", help="comma-separated likelihood targets")
            p.add_argument("--lambda-l", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except CLIError as exc:
        sys.stderr.write(f"error\t{exc.category}\t{exc}\n")
        return 2
    except (data.VolumeFormatError, glow.CheckpointError, OSError) as exc:
        sys.stderr.write(f"error\tio\t{exc}\n")
        return 2
    except (ValueError, FloatingPointError) as exc:
        sys.stderr.write(f"error\t{type(exc).__name__}\t{exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
