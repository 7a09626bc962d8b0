"""Synthetic lesion images with pixel ground truth, image-folder ingestion, normalisation."""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ._validation import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass
class LabeledSample:
    image: np.ndarray  # (C, H, W) float
    label: int
    sample_id: str
    group_id: str = ""
    lesion_mask: np.ndarray | None = None  # (H, W) bool
    lesion_markers: list = field(default_factory=list)  # [(row, col), ...]


@dataclass(frozen=True)
class SynthConfig:
    """Geometry of the synthetic scans: a bright curved band over textured background,
    with diseased images carrying small bright bumps centred on the band."""

    side: int = 128
    band_center: float = 0.5  # fraction of image height
    band_amplitude: float = 10.0  # pixels
    band_period: float = 1.5  # in image widths
    band_thickness: float = 10.0  # pixels, Gaussian FWHM of the band profile
    band_intensity: float = 0.45
    lesion_count: tuple = (1, 3)
    lesion_radius: tuple = (2, 4)
    lesion_contrast: float = 0.4
    background: float = 0.15
    texture: float = 0.08
    noise: float = 0.03
    balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesion_count", tuple(self.lesion_count))
        object.__setattr__(self, "lesion_radius", tuple(self.lesion_radius))

    def validate(self, receptive_field=None):
        if self.side < 8:
            raise ConfigError("side must be >= 8")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad lesion_count range {self.lesion_count}")
        r_min, r_max = self.lesion_radius
        if r_min < 1 or r_max < r_min:
            raise ConfigError(f"bad lesion_radius range {self.lesion_radius}")
        if not 0.0 <= self.balance <= 1.0:
            raise ConfigError("balance must be in [0, 1]")
        center = self.band_center * self.side
        half = self.band_amplitude + self.band_thickness / 2 + r_max
        if center - half < 0 or center + half > self.side:
            raise ConfigError(
                f"band (center {center:.1f}, amplitude {self.band_amplitude}, thickness {self.band_thickness}) "
                f"does not fit in a {self.side}px image"
            )
        if 2 * r_max + 2 >= self.side:
            raise ConfigError("lesions wider than the image")
        if receptive_field is not None and r_max >= receptive_field:
            raise ConfigError(f"lesion radius {r_max} must stay below the receptive field {receptive_field}")
        return self

    def to_dict(self):
        return asdict(self)


def band_rows(cfg, rng_phase, cols):
    return cfg.band_center * cfg.side + cfg.band_amplitude * np.sin(
        2 * np.pi * cols / (cfg.band_period * cfg.side) + rng_phase
    )


def _render(cfg, index, label):
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.side
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)

    texture = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=2.0)
    texture /= texture.std() + 1e-12
    img = cfg.background + cfg.texture * texture

    phase = rng.uniform(0, 2 * np.pi)
    centre = band_rows(cfg, phase, cols[0])
    sigma = cfg.band_thickness / 2.355
    img += cfg.band_intensity * np.exp(-0.5 * ((rows - centre[None, :]) / sigma) ** 2)

    mask = np.zeros((n, n), dtype=bool)
    markers = []
    if label == 1:
        lo, hi = cfg.lesion_count
        count = int(rng.integers(max(lo, 1), hi + 1))
        r_max = cfg.lesion_radius[1]
        placed = []
        for _ in range(200):
            if len(placed) == count:
                break
            radius = float(rng.uniform(*cfg.lesion_radius))
            c0 = float(rng.uniform(r_max + 1, n - r_max - 2))
            r0 = float(band_rows(cfg, phase, c0) + rng.uniform(-1.0, 1.0))
            if any(abs(c0 - c) < 2 * r_max + 3 for c, _, _ in placed):
                continue
            placed.append((c0, r0, radius))
        for c0, r0, radius in placed:
            d = np.hypot(rows - r0, cols - c0)
            disk = d <= radius
            img += cfg.lesion_contrast * disk
            # soft rim outside the mask so the bump has no hard edge
            rim = (d > radius) & (d <= radius + 1.0)
            img += cfg.lesion_contrast * 0.5 * rim
            mask |= disk
            markers.append(tuple(int(v) for v in np.round(ndimage.center_of_mass(disk))))

    img += cfg.noise * rng.standard_normal((n, n))
    return img[None].astype(np.float32), mask, markers


def generate_synthetic_dataset(cfg: SynthConfig, n, prefix="synth"):
    """``n`` samples with exactly ``round(n * balance)`` diseased ones, deterministic in ``cfg.seed``."""
    cfg.validate()
    if n < 1:
        raise ConfigError("n must be >= 1")
    n_pos = int(round(n * cfg.balance)) if cfg.lesion_count[1] > 0 else 0
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    np.random.default_rng([cfg.seed, 0xBA1A]).shuffle(labels)
    samples = []
    for i, label in enumerate(labels):
        img, mask, markers = _render(cfg, i, int(label))
        sid = f"{prefix}-{cfg.seed}-{i:05d}"
        samples.append(LabeledSample(img, int(label), sid, group_id=sid, lesion_mask=mask, lesion_markers=markers))
    return samples


def stack(samples):
    """Images ``(n, C, H, W)`` and labels ``(n,)`` from a sample list."""
    if not samples:
        raise DataError("empty dataset")
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


def masks_of(samples):
    return [s.lesion_mask for s in samples]


def markers_of(samples):
    return [s.lesion_markers for s in samples]


def normalize(image, mean, std):
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std must be > 0")
    mean = np.asarray(mean, dtype=np.float64)
    shape = (-1, 1, 1)
    return ((image - mean.reshape(shape)) / std.reshape(shape)).astype(image.dtype)


def denormalize(image, mean, std):
    shape = (-1, 1, 1)
    return (image * np.asarray(std).reshape(shape) + np.asarray(mean).reshape(shape)).astype(image.dtype)


def channel_stats(images):
    """Per-channel mean and standard deviation of an ``(n, C, H, W)`` stack."""
    images = np.asarray(images, dtype=np.float64)
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def _to_uint8(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def export_dataset(samples, root):
    """Write 8-bit PNGs, mask PNGs and ``manifest.csv`` (path,label,group)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "group", "mask"])
        for s in samples:
            rel = f"images/{s.sample_id}.png"
            Image.fromarray(_to_uint8(s.image[0])).save(root / rel)
            mrel = ""
            if s.lesion_mask is not None:
                mrel = f"masks/{s.sample_id}.png"
                Image.fromarray((s.lesion_mask * 255).astype(np.uint8)).save(root / mrel)
            writer.writerow([rel, s.label, s.group_id, mrel])
    return root / "manifest.csv"


def read_manifest(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        missing = {"path", "label", "group"} - set(row)
        if missing:
            raise DataError(f"manifest {path} lacks columns {sorted(missing)}")
    return rows


def check_group_disjoint(splits):
    """Raise if any group id appears in more than one split."""
    owner = {}
    for split, rows in splits.items():
        for row in rows:
            g = row["group"]
            if owner.setdefault(g, split) != split:
                raise DataError(f"group {g!r} appears in both {owner[g]!r} and {split!r} splits")


def load_png(path, side):
    img = Image.open(path).convert("L")
    if side is not None and img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32)[None] / 255.0


def load_image_folder(root, manifest="manifest.csv", side=None, split=None):
    """Load samples listed in a manifest CSV relative to ``root``.

    A ``split`` column, when present, is checked for group leakage and can be
    used to select one split. Unreadable files are reported together.
    """
    root = Path(root)
    rows = read_manifest(root / manifest if not Path(manifest).is_absolute() else manifest)
    if rows and "split" in rows[0]:
        by_split = {}
        for row in rows:
            by_split.setdefault(row["split"], []).append(row)
        check_group_disjoint(by_split)
        if split is not None:
            rows = by_split.get(split, [])
    samples, errors = [], []
    for row in rows:
        try:
            image = load_png(root / row["path"], side)
        except (OSError, ValueError) as exc:
            errors.append(f"{row['path']}: {exc}")
            continue
        mask = None
        if row.get("mask"):
            try:
                mask = load_png(root / row["mask"], side)[0] > 0.5
            except (OSError, ValueError) as exc:
                errors.append(f"{row['mask']}: {exc}")
                continue
        markers = []
        if mask is not None and mask.any():
            lab, count = ndimage.label(mask)
            markers = [tuple(int(v) for v in np.round(c)) for c in ndimage.center_of_mass(mask, lab, range(1, count + 1))]
        samples.append(
            LabeledSample(image, int(row["label"]), Path(row["path"]).stem, row["group"], mask, markers)
        )
    if errors:
        raise DataError("could not load:\n  " + "\n  ".join(errors))
    return samples
