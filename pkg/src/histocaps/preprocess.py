"""Stain normalization, rotation augmentation and random patch datasets.

Images are ``uint8`` arrays shaped ``[height, width, 3]`` (RGB).  Color
normalization follows Reinhard's color transfer: convert to the decorrelated
l-alpha-beta space, match per-channel mean and standard deviation to a
target, convert back.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from .capsnet import CLASS_NAMES
from .tensor import derive_seed, make_rng

log = logging.getLogger(__name__)

ROTATIONS = (0, 90, 180)
MANIFEST_COLUMNS = ("patch_id", "source_image", "class_label", "rotation_deg", "origin_x", "origin_y", "patch_path")

# RGB -> LMS cone space, then log10, then the orthogonal l-alpha-beta transform
_RGB2LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]]
)
_LAB2LOG = np.linalg.inv(_LOG2LAB)
LOG_EPS = 1.0 / 255.0
ZERO_SPREAD = 1e-12


# --------------------------------------------------------------------------
# image I/O


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary PPM (P6) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3).copy()


def _write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit RGB image (binary PPM natively, anything else via Pillow)."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return _read_ppm(path)
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    path = Path(path)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("images must be uint8")
    if path.suffix.lower() in (".ppm", ".pnm"):
        if image.ndim != 3:
            raise ValueError("PPM output requires an RGB image")
        _write_ppm(path, image)
    else:
        PILImage.fromarray(image).save(path)


# --------------------------------------------------------------------------
# color transfer


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """8-bit RGB -> float64 l-alpha-beta, shape preserved."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    lms = rgb @ _RGB2LMS.T
    return np.log10(lms + LOG_EPS) @ _LOG2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`, rounded and clipped to uint8."""
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ _LAB2LOG.T) - LOG_EPS
    rgb = lms @ _LMS2RGB.T * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class LabStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(s < 0 for s in self.std):
            raise ValueError("standard deviations must be non-negative")


def channel_stats(lab: np.ndarray) -> LabStats:
    """Population mean and standard deviation of each channel."""
    flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    return LabStats(tuple(flat.mean(axis=0).tolist()), tuple(flat.std(axis=0).tolist()))


def pooled_stats(images: Iterable[np.ndarray]) -> LabStats:
    """l-alpha-beta statistics over all pixels of all images ("dataset mean" target)."""
    count = 0
    total = np.zeros(3)
    total_sq = np.zeros(3)
    for image in images:
        flat = rgb_to_lab(image).reshape(-1, 3)
        count += flat.shape[0]
        total += flat.sum(axis=0)
        total_sq += (flat * flat).sum(axis=0)
    if count == 0:
        raise ValueError("no images to pool")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return LabStats(tuple(mean.tolist()), tuple(np.sqrt(var).tolist()))


def transfer_lab(lab: np.ndarray, target: LabStats, source: LabStats | None = None) -> np.ndarray:
    """Shift/scale each channel to the target statistics (no quantization).

    A channel with zero spread (up to round-off) maps to the target mean
    everywhere.
    """
    source = source or channel_stats(lab)
    out = np.empty_like(lab, dtype=np.float64)
    for ch in range(3):
        if source.std[ch] <= ZERO_SPREAD:
            out[..., ch] = target.mean[ch]
        else:
            scale = target.std[ch] / source.std[ch]
            out[..., ch] = (lab[..., ch] - source.mean[ch]) * scale + target.mean[ch]
    return out


def reinhard_transfer(image: np.ndarray, target: LabStats) -> np.ndarray:
    return lab_to_rgb(transfer_lab(rgb_to_lab(image), target))


# --------------------------------------------------------------------------
# augmentation and patches


def rotate(image: np.ndarray, deg: int) -> np.ndarray:
    """Counter-clockwise rotation by 0, 90 or 180 degrees."""
    if deg not in ROTATIONS:
        raise ValueError(f"unsupported rotation {deg}; allowed: {ROTATIONS}")
    return np.ascontiguousarray(np.rot90(image, k=deg // 90, axes=(0, 1)))


def extract_random_patches(
    image: np.ndarray, count: int, size: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """``count`` square patches at origins drawn uniformly with replacement.

    Origins are ``(x, y)`` = (column, row) of the top-left corner.
    """
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} is smaller than patch size {size}")
    xs = rng.integers(0, w - size + 1, size=count)
    ys = rng.integers(0, h - size + 1, size=count)
    return [(image[y : y + size, x : x + size].copy(), (int(x), int(y))) for x, y in zip(xs, ys)]


@dataclass(frozen=True)
class LabeledImage:
    image_id: str
    label: str
    image: np.ndarray

    def __post_init__(self):
        if self.label not in CLASS_NAMES:
            raise ValueError(f"unknown class label {self.label!r}; expected one of {CLASS_NAMES}")


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    source_image: str
    class_label: str
    rotation_deg: int
    origin_x: int
    origin_y: int
    patch_path: str

    @property
    def class_index(self) -> int:
        return CLASS_NAMES.index(self.class_label)


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    patch_size: int | None = None
    seed: int | None = None
    root: Path = Path(".")

    def path_of(self, record: PatchRecord) -> Path:
        return self.root / record.patch_path

    def images(self) -> dict[str, str]:
        """source image id -> class label, in first-appearance order."""
        out: dict[str, str] = {}
        for rec in self.records:
            out.setdefault(rec.source_image, rec.class_label)
        return out

    def subset(self, image_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(image_ids)
        return DatasetManifest([r for r in self.records if r.source_image in keep], self.patch_size, self.seed, self.root)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, delimiter="\t", lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.patch_id, r.source_image, r.class_label, r.rotation_deg, r.origin_x, r.origin_y, r.patch_path]
                )

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f, delimiter="\t")
            header = next(reader, None)
            if header is None or tuple(header) != MANIFEST_COLUMNS:
                raise ValueError(f"{path}: manifest header must be {'/'.join(MANIFEST_COLUMNS)}")
            records = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(MANIFEST_COLUMNS):
                    raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
                if row[2] not in CLASS_NAMES:
                    raise ValueError(f"{path}:{lineno}: unknown class label {row[2]!r}")
                records.append(PatchRecord(row[0], row[1], row[2], int(row[3]), int(row[4]), int(row[5]), row[6]))
        manifest = cls(records, root=path.parent)
        if records:
            manifest.patch_size = read_image(manifest.path_of(records[0])).shape[0]
        return manifest


def build_manifest(
    images: Sequence[LabeledImage],
    out_dir: str | os.PathLike,
    *,
    rotations: Sequence[int] = ROTATIONS,
    patches_per_image: int = 100,
    size: int = 256,
    seed: int = 0,
    target: LabStats | None = None,
    normalize: str = "before",
    patch_format: str = "png",
    write_patches: bool = True,
) -> DatasetManifest:
    """Rotate, cut and write patches for every image; emit ``manifest.tsv``.

    With a ``target``, images are color-normalized either whole (``"before"``
    patching) or patch by patch (``"after"``).  Each (image, rotation) pair
    draws origins from its own sub-seed of ``seed``, so results do not depend
    on processing order.  ``write_patches=False`` only plans the records.
    """
    if not rotations:
        raise ValueError("at least one rotation is required")
    if normalize not in ("before", "after"):
        raise ValueError("normalize must be 'before' or 'after'")
    if patches_per_image < 1:
        raise ValueError("patches_per_image must be positive")
    for deg in rotations:
        rotate(np.zeros((1, 1, 3), np.uint8), deg)
    ids = [im.image_id for im in images]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    for im in images:
        h, w = im.image.shape[:2]
        if min(h, w) < size:
            raise ValueError(f"image {im.image_id} ({w}x{h}) is smaller than patch size {size}")

    out_dir = Path(out_dir)
    records: list[PatchRecord] = []
    for im in images:
        pixels = im.image
        if write_patches and target is not None and normalize == "before":
            pixels = reinhard_transfer(pixels, target)
        if write_patches:
            (out_dir / "patches" / im.label).mkdir(parents=True, exist_ok=True)
        for deg in rotations:
            rng = make_rng(derive_seed(seed, im.image_id, deg))
            for n, (patch, (x, y)) in enumerate(extract_random_patches(rotate(pixels, deg), patches_per_image, size, rng)):
                patch_id = f"{im.image_id}_r{deg}_{n:03d}"
                rel = Path("patches") / im.label / f"{patch_id}.{patch_format}"
                if write_patches:
                    if target is not None and normalize == "after":
                        patch = reinhard_transfer(patch, target)
                    write_image(out_dir / rel, patch)
                records.append(PatchRecord(patch_id, im.image_id, im.label, deg, x, y, rel.as_posix()))
    manifest = DatasetManifest(records, size, seed, out_dir)
    if write_patches:
        manifest.write(out_dir / "manifest.tsv")
    log.info("wrote %d patch records for %d images to %s", len(records), len(images), out_dir)
    return manifest


# --------------------------------------------------------------------------
# synthetic corpus

# background RGB and nucleus RGB per class; textures are rotation-invariant
_SYNTH_STYLE = {
    "normal": ((238, 204, 222), (150, 90, 160)),
    "benign": ((220, 156, 204), (110, 60, 150)),
    "insitu": ((172, 142, 216), (70, 50, 140)),
    "invasive": ((168, 88, 146), (70, 20, 80)),
}


def _disc(canvas: np.ndarray, cy: float, cx: float, radius: float, color, alpha: float, ring: float = 0.0) -> None:
    h, w = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(yy - cy, xx - cx)
    mask = d <= radius if ring <= 0 else np.abs(d - radius) <= ring
    canvas[mask] = (1 - alpha) * canvas[mask] + alpha * np.asarray(color, dtype=np.float64)


def synthesize_image(label: str, side: int, rng: np.random.Generator) -> np.ndarray:
    background, nucleus = _SYNTH_STYLE[label]
    jitter = rng.normal(0, 4, size=3)
    canvas = np.empty((side, side, 3))
    canvas[:] = np.asarray(background) + jitter
    area = side * side / 4096.0
    if label == "normal":
        for _ in range(max(1, int(round(5 * area)))):
            _disc(canvas, *rng.uniform(0, side, 2), rng.uniform(7, 11), (250, 235, 240), 0.5)
    elif label == "benign":
        for _ in range(max(1, int(round(16 * area)))):
            _disc(canvas, *rng.uniform(0, side, 2), rng.uniform(2.5, 3.5), nucleus + jitter, 0.8)
    elif label == "insitu":
        for _ in range(max(1, int(round(8 * area)))):
            _disc(canvas, *rng.uniform(0, side, 2), rng.uniform(5, 8), nucleus + jitter, 0.85, ring=1.2)
    else:
        for _ in range(max(1, int(round(70 * area)))):
            _disc(canvas, *rng.uniform(0, side, 2), rng.uniform(1.0, 1.8), nucleus + jitter, 0.9)
    canvas += rng.normal(0, 5, size=canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def synthesize_dataset(images_per_class: int, side: int, seed: int, classes: Sequence[str] = CLASS_NAMES) -> list[LabeledImage]:
    """Procedural stand-in corpus: per-class color and nucleus texture."""
    out = []
    for label in classes:
        for i in range(images_per_class):
            image_id = f"{label}_{i:03d}"
            rng = make_rng(derive_seed(seed, image_id))
            out.append(LabeledImage(image_id, label, synthesize_image(label, side, rng)))
    return out
