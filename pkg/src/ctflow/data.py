"""CT windowing, synthetic chest phantoms, DRR synthesis and file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .projection import DEPTH, WIDTH, Projection, project_depth, project_width

# lung window: -1000 HU -> 0, +600 HU -> 255
WINDOW_LOW = -1000.0
WINDOW_WIDTH = 1600.0


def window_ct(hu) -> np.ndarray:
    hu = np.asarray(hu, dtype=np.float64)
    return np.clip(255.0 * (hu - WINDOW_LOW) / WINDOW_WIDTH, 0.0, 255.0)


# -- phantoms ---------------------------------------------------------------------
@dataclass(frozen=True)
class PhantomSpec:
    """Randomisation ranges for a coarse chest phantom.

    Geometry is in normalised coordinates, each axis spanning [-1, 1];
    intensities are on the 0-255 windowed scale.
    """

    seed: int = 0
    size: int = 16
    body_intensity: tuple[float, float] = (150.0, 190.0)
    body_radii: tuple[tuple[float, float], ...] = ((0.55, 0.75), (0.80, 0.95), (0.75, 0.92))
    lung_count: int = 2
    lung_intensity: tuple[float, float] = (15.0, 45.0)
    lung_radii: tuple[tuple[float, float], ...] = ((0.30, 0.45), (0.50, 0.70), (0.25, 0.35))
    nodule_count: tuple[int, int] = (0, 3)
    nodule_radius: tuple[float, float] = (0.10, 0.18)
    nodule_intensity: tuple[float, float] = (120.0, 200.0)
    smoothing: float = 0.6

    def validate(self) -> None:
        if self.size < 2:
            raise ValueError("phantom grid must be at least 2 voxels")
        for lo, hi in (self.body_intensity, self.lung_intensity, self.nodule_intensity):
            if not (0.0 <= lo <= hi <= 255.0):
                raise ValueError("intensities must lie in [0, 255]")
        for lo, hi in tuple(self.body_radii) + tuple(self.lung_radii) + (self.nodule_radius,):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError("radii must be positive and within the grid")
        if self.nodule_count[0] < 0 or self.nodule_count[1] < self.nodule_count[0]:
            raise ValueError("bad nodule count range")
        if self.lung_count not in (0, 1, 2):
            raise ValueError("lung_count must be 0, 1 or 2")


class DegenerateGeometryError(ValueError):
    pass


def _ellipsoid(grid, center, radii) -> np.ndarray:
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec, with_masks: bool = False):
    """Body ellipsoid with low-intensity lung cavities and random nodules.

    Returns a (size, size, size, 1) volume; with ``with_masks`` also a dict of
    boolean region masks (``body``, ``lungs``, ``nodules``) before smoothing.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    axis = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    grid = np.meshgrid(axis, axis, axis, indexing="ij")

    def uniform(bounds):
        return rng.uniform(bounds[0], bounds[1])

    body_center = rng.uniform(-0.05, 0.05, size=3)
    body_radii = [uniform(b) for b in spec.body_radii]
    body = _ellipsoid(grid, body_center, body_radii)
    if not body.any():
        raise DegenerateGeometryError("body ellipsoid does not intersect the grid")

    vol = np.zeros((n, n, n))
    vol[body] = uniform(spec.body_intensity)

    lungs = np.zeros_like(body)
    for side in (-1.0, 1.0)[: spec.lung_count]:
        radii = [uniform(b) * br for b, br in zip(spec.lung_radii, body_radii)]
        center = body_center + np.array(
            [
                rng.uniform(-0.3, 0.3) * body_radii[0],
                rng.uniform(-0.15, 0.15) * body_radii[1],
                side * rng.uniform(0.38, 0.50) * body_radii[2],
            ]
        )
        lung = _ellipsoid(grid, center, radii) & body
        if not lung.any():
            raise DegenerateGeometryError("lung ellipsoid falls outside the body")
        vol[lung] = uniform(spec.lung_intensity)
        lungs |= lung

    nodules = np.zeros_like(body)
    count = int(rng.integers(spec.nodule_count[0], spec.nodule_count[1] + 1))
    lung_voxels = np.argwhere(lungs)
    for _ in range(count if len(lung_voxels) else 0):
        idx = lung_voxels[rng.integers(len(lung_voxels))]
        center = axis[idx]
        radius = uniform(spec.nodule_radius)
        blob = _ellipsoid(grid, center, (radius,) * 3) & lungs
        vol[blob] = uniform(spec.nodule_intensity)
        nodules |= blob

    if spec.smoothing > 0:
        vol = gaussian_filter(vol, spec.smoothing, mode="constant")
    vol = np.clip(vol, 0.0, 255.0)[..., None]
    if with_masks:
        return vol, {"body": body & ~lungs, "lungs": lungs & ~nodules, "nodules": nodules}
    return vol


def make_drr_pair(y: np.ndarray) -> tuple[Projection, Projection]:
    """Coronal (depth-averaged) and sagittal (width-averaged) DRRs of a volume."""
    return Projection(project_depth(y), DEPTH), Projection(project_width(y), WIDTH)


# -- external radiograph normalisation ---------------------------------------------
@dataclass(frozen=True)
class DRRStats:
    p1: float
    p99: float
    median: float

    @classmethod
    def from_images(cls, images) -> "DRRStats":
        pix = np.concatenate([np.asarray(im, dtype=np.float64).ravel() for im in images])
        p1, med, p99 = np.percentile(pix, [1, 50, 99])
        return cls(float(p1), float(p99), float(med))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells by their overlap with each output cell."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def area_resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _area_weights(img.shape[0], shape[0]) @ img @ _area_weights(img.shape[1], shape[1]).T


def rescale_external_cxr(img, shape: tuple[int, int], reference: DRRStats) -> Projection:
    """Area-downsample a grayscale radiograph and match its 1st/99th percentiles to DRRs.

    A constant image has no percentile spread and maps to the reference median.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {img.shape}")
    small = area_resize(img, shape)
    p1, p99 = np.percentile(small, [1, 99])
    if p99 - p1 <= 1e-12:
        out = np.full(shape, reference.median)
    else:
        out = reference.p1 + (small - p1) * (reference.p99 - reference.p1) / (p99 - p1)
    return Projection(np.clip(out, 0.0, 255.0), DEPTH)


# -- file formats -----------------------------------------------------------------
VOL_MAGIC = b"VOL3"
VOL_VERSION = 1
VOL_HEADER = struct.Struct("<4sI4I")
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    pass


def save_volume(path, y: np.ndarray) -> None:
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[..., None]
    if y.ndim != 4:
        raise VolumeFormatError(f"volume must be (D, H, W, C), got {y.shape}")
    if y.size and (np.nanmin(y) < 0.0 or np.nanmax(y) > 255.0 or not np.all(np.isfinite(y))):
        raise VolumeFormatError("voxel values must lie in [0, 255]")
    payload = np.ascontiguousarray(y, dtype="<f4").tobytes()
    Path(path).write_bytes(VOL_HEADER.pack(VOL_MAGIC, VOL_VERSION, *y.shape) + payload)


def load_volume(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < VOL_HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, *dims = VOL_HEADER.unpack_from(data)
    if magic != VOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    count = int(np.prod(dims, dtype=np.int64))
    if count > MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {dims} overflow")
    if len(data) - VOL_HEADER.size != 4 * count:
        raise VolumeFormatError(f"{path}: payload holds {len(data) - VOL_HEADER.size} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=VOL_HEADER.size).reshape(dims).astype(np.float64)


def to_bytes_image(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)


def save_image(path, img) -> None:
    """Binary PGM, maxval 255, values rounded to nearest and clipped."""
    pix = to_bytes_image(img)
    if pix.ndim != 2:
        raise ValueError(f"image must be 2D, got {pix.shape}")
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def load_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pix.reshape(h, w).astype(np.float64)


# -- datasets -------------------------------------------------------------------
@dataclass
class ManifestEntry:
    path: str
    split: str
    seed: int


@dataclass
class Dataset:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def volumes(self, split: str) -> list[np.ndarray]:
        return [load_volume(self.root / e.path) for e in self.entries if e.split == split]


def split_seeds(count: int, base_seed: int = 0, test_fraction: float = 0.2) -> list[tuple[int, str]]:
    """Deterministic 80/20 train/test partition of phantom seeds."""
    n_test = int(round(count * test_fraction))
    seeds = [base_seed + i for i in range(count)]
    return [(s, "train" if i < count - n_test else "test") for i, s in enumerate(seeds)]


def write_dataset(root, spec: PhantomSpec, count: int, test_fraction: float = 0.2) -> Dataset:
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    entries = []
    for seed, split in split_seeds(count, spec.seed, test_fraction):
        vol = generate_phantom(PhantomSpec(**{**spec.__dict__, "seed": seed}))
        rel = f"volumes/phantom_{seed:06d}.vol3"
        save_volume(root / rel, vol)
        entries.append(ManifestEntry(rel, split, seed))
    lines = "".join(f"{e.path}\t{e.split}\t{e.seed}\n" for e in entries)
    (root / "manifest.tsv").write_text(lines)
    return Dataset(entries, root)


def read_manifest(root) -> Dataset:
    root = Path(root)
    entries = []
    for line in (root / "manifest.tsv").read_text().splitlines():
        if not line.strip():
            continue
        path, split, seed = line.split("\t")
        entries.append(ManifestEntry(path, split, int(seed)))
    return Dataset(entries, root)
