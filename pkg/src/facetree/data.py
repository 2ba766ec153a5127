"""Dataset creation and file formats.

Covers the synthetic planted-signal generator used for desk-scale
experiments, the landmark CSV (`label,x0,y0,...`) and pixel CSV
(`label,pixels,usage`) loaders, stratified splits, and the on-disk
dataset directory layout (manifest.json + CSVs).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .graph import LandmarkSet

__all__ = [
    "FormatError",
    "Sample",
    "DatasetManifest",
    "SynthConfig",
    "synth_generate",
    "split",
    "write_landmark_csv",
    "load_landmark_csv",
    "write_fer_csv",
    "load_fer_csv",
    "attach_landmarks",
    "save_dataset",
    "load_dataset",
]

SPLIT_TAGS = ("train", "val", "test")
MANIFEST_FORMAT = "landmark-dataset/1"

_USAGE_TO_TAG = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
_TAG_TO_USAGE = {tag: usage for usage, tag in _USAGE_TO_TAG.items()}


class FormatError(ValueError):
    """Malformed dataset file; the message carries file and line context."""


@dataclass
class Sample:
    landmarks: LandmarkSet | None
    image: np.ndarray | None
    label: int


class DatasetManifest:
    """In-memory dataset: samples plus class count and per-sample split tags.

    Landmark counts are constant across samples; images are all present or
    all absent. Tags default to "train" for every sample until `split` is
    applied.
    """

    def __init__(self, samples, class_count: int, tags=None) -> None:
        samples = list(samples)
        if not samples:
            raise ValueError("dataset must contain at least one sample")
        if class_count < 1:
            raise ValueError("class count must be positive")
        has_lm = samples[0].landmarks is not None
        has_img = samples[0].image is not None
        n = samples[0].landmarks.n if has_lm else 0
        for k, s in enumerate(samples):
            if (s.landmarks is not None) != has_lm:
                raise ValueError(f"sample {k}: landmarks present in some samples but not others")
            if has_lm and s.landmarks.n != n:
                raise ValueError(f"sample {k}: landmark count {s.landmarks.n} differs from {n}")
            if (s.image is not None) != has_img:
                raise ValueError(f"sample {k}: images present in some samples but not others")
            if not 0 <= s.label < class_count:
                raise ValueError(f"sample {k}: label {s.label} out of range for {class_count} classes")
        if tags is None:
            tags = ["train"] * len(samples)
        tags = list(tags)
        if len(tags) != len(samples):
            raise ValueError("tags must align with samples")
        for t in tags:
            if t not in SPLIT_TAGS:
                raise ValueError(f"unknown split tag {t!r}")
        self.samples = samples
        self.class_count = class_count
        self.landmark_count = n
        self.tags = tags

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def has_images(self) -> bool:
        return self.samples[0].image is not None

    @property
    def has_landmarks(self) -> bool:
        return self.samples[0].landmarks is not None

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def coords(self) -> np.ndarray:
        """(m, n, 2) stack of landmark coordinates."""
        if not self.has_landmarks:
            raise ValueError("dataset has no landmarks")
        return np.stack([s.landmarks.coords for s in self.samples])

    def images(self) -> np.ndarray:
        if not self.has_images:
            raise ValueError("dataset has no images")
        return np.stack([s.image for s in self.samples])

    def indices(self, tag: str | None = None) -> np.ndarray:
        if tag is None:
            return np.arange(self.size)
        if tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {tag!r}")
        return np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=np.int64)

    def subset(self, tag: str) -> "DatasetManifest":
        idx = self.indices(tag)
        if idx.size == 0:
            raise ValueError(f"no samples tagged {tag!r}")
        return DatasetManifest([self.samples[i] for i in idx], self.class_count,
                               [self.tags[i] for i in idx])

    def class_counts(self, tag: str | None = None) -> np.ndarray:
        labels = self.labels()[self.indices(tag)]
        return np.bincount(labels, minlength=self.class_count)


def split(manifest: DatasetManifest, fractions, seed: int) -> DatasetManifest:
    """Stratified split; re-tags samples as train/val/test per `fractions`.

    Fractions map positionally to (train, val, test), must sum to 1, and
    are honored per class to within one sample.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.ndim != 1 or not 1 <= fr.size <= len(SPLIT_TAGS):
        raise ValueError("fractions must list 1 to 3 values (train, val, test)")
    if np.any(fr < 0):
        raise ValueError("fractions must be nonnegative")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fr.sum()}")
    rng = np.random.default_rng(seed)
    labels = manifest.labels()
    tags: list[str | None] = [None] * manifest.size
    for c in range(manifest.class_count):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        bounds = np.round(np.cumsum(fr) * idx.size).astype(int)
        start = 0
        for tag, stop in zip(SPLIT_TAGS, bounds):
            for i in idx[start:stop]:
                tags[i] = tag
            start = stop
    return DatasetManifest(manifest.samples, manifest.class_count, tags)


@dataclass(frozen=True)
class SynthConfig:
    """Planted-signal synthetic data.

    The class signal lives in the relative displacement of designated
    landmark pairs: both members of a pair share a per-sample common shift
    (which hides the class in any single absolute position), while the
    second member is additionally displaced by a class-specific offset.
    Trees that keep a signal pair adjacent make the offset visible to a
    sequence model in one step. Signal landmarks also carry a
    class-dependent blob brightness in the rendered image.
    """

    classes: int = 3
    landmarks: int = 10
    per_class: int = 200
    signal_pairs: tuple[tuple[int, int], ...] = ((1, 6), (3, 8))
    displacement: float = 0.08
    pair_jitter: float = 0.10
    noise: float = 0.015
    image_size: int = 48
    blob_sigma: float = 2.2
    blob_amplitude: float = 0.55
    texture_contrast: float = 0.5
    image_noise: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.landmarks < 2:
            raise ValueError("need at least two landmarks")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")
        if self.noise <= 0:
            raise ValueError("noise sigma must be positive")
        if self.image_size < 8:
            raise ValueError("image size too small")
        for i, j in self.signal_pairs:
            if not (0 <= i < self.landmarks and 0 <= j < self.landmarks) or i == j:
                raise ValueError(f"invalid signal pair ({i}, {j}) for n={self.landmarks}")


def _base_layout(n: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered grid layout inside the unit square, away from the borders."""
    side = math.ceil(math.sqrt(n))
    ticks = np.linspace(0.18, 0.82, side)
    gx, gy = np.meshgrid(ticks, ticks)
    base = np.stack([gx.ravel(), gy.ravel()], axis=1)[:n]
    return base + rng.uniform(-0.03, 0.03, size=base.shape)


def _class_offsets(cfg: SynthConfig) -> np.ndarray:
    """(classes, pairs, 2) displacement applied to the second pair member."""
    P = max(1, len(cfg.signal_pairs))
    out = np.zeros((cfg.classes, len(cfg.signal_pairs), 2))
    for c in range(cfg.classes):
        for p in range(len(cfg.signal_pairs)):
            angle = 2.0 * math.pi * c / cfg.classes + math.pi * p / P
            out[c, p] = cfg.displacement * np.array([math.cos(angle), math.sin(angle)])
    return out


def _render_image(pts: np.ndarray, amplitudes: np.ndarray, cfg: SynthConfig,
                  rng: np.random.Generator) -> np.ndarray:
    H = W = cfg.image_size
    rows = np.arange(H, dtype=float)[:, None, None]
    cols = np.arange(W, dtype=float)[None, :, None]
    px = pts[:, 0] * (W - 1)
    py = pts[:, 1] * (H - 1)
    d2 = (rows - py[None, None, :]) ** 2 + (cols - px[None, None, :]) ** 2
    blobs = amplitudes[None, None, :] * np.exp(-d2 / (2.0 * cfg.blob_sigma ** 2))
    img = blobs.sum(axis=2)
    img += rng.normal(0.0, cfg.image_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(cfg: SynthConfig) -> DatasetManifest:
    """Generate the planted-signal dataset; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    base = _base_layout(cfg.landmarks, rng)
    offsets = _class_offsets(cfg)
    signal_nodes = sorted({v for pair in cfg.signal_pairs for v in pair})
    samples = []
    for c in range(cfg.classes):
        amp = np.full(cfg.landmarks, cfg.blob_amplitude)
        if signal_nodes and cfg.classes > 1:
            swing = cfg.texture_contrast * (2.0 * c / (cfg.classes - 1) - 1.0)
            amp[signal_nodes] = cfg.blob_amplitude * (1.0 + swing)
        for _ in range(cfg.per_class):
            pts = base.copy()
            for p, (i, j) in enumerate(cfg.signal_pairs):
                shift = rng.normal(0.0, cfg.pair_jitter, size=2)
                pts[i] += shift
                pts[j] += shift + offsets[c, p]
            pts += rng.normal(0.0, cfg.noise, size=pts.shape)
            np.clip(pts, 0.0, 1.0, out=pts)
            img = _render_image(pts, amp, cfg, rng)
            samples.append(Sample(LandmarkSet(pts), img, c))
    return DatasetManifest(samples, cfg.classes)


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def write_landmark_csv(manifest: DatasetManifest, path) -> None:
    """Rows of `label,x0,y0,...,x{n-1},y{n-1}` with a header line."""
    if not manifest.has_landmarks:
        raise ValueError("dataset has no landmarks to write")
    n = manifest.landmark_count
    header = "label," + ",".join(f"x{k},y{k}" for k in range(n))
    lines = [header]
    for s in manifest.samples:
        coords = ",".join(repr(float(v)) for v in s.landmarks.coords.ravel())
        lines.append(f"{s.label},{coords}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_landmark_csv(path) -> DatasetManifest:
    """Parse a landmark CSV into a dataset (no images).

    Coordinates already inside the unit square are taken as-is; otherwise
    the whole dataset is renormalized by its per-axis bounding box, which
    preserves inter-sample geometry.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if len(header) < 5 or header[0] != "label" or (len(header) - 1) % 2 != 0:
        raise FormatError(f"{path}: line 1: bad header {lines[0]!r}")
    n = (len(header) - 1) // 2
    labels = []
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise FormatError(f"{path}: line {ln}: blank row")
        parts = line.split(",")
        if len(parts) != 1 + 2 * n:
            raise FormatError(
                f"{path}: line {ln}: expected {1 + 2 * n} columns, got {len(parts)}"
            )
        try:
            labels.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}: line {ln}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no data rows")
    coords = np.asarray(rows, dtype=float).reshape(len(rows), n, 2)
    if coords.min() < -1e-9 or coords.max() > 1.0 + 1e-9:
        for axis in range(2):
            vals = coords[:, :, axis]
            lo, hi = vals.min(), vals.max()
            span = hi - lo
            coords[:, :, axis] = (vals - lo) / span if span > 0 else 0.5
    if min(labels) < 0:
        raise FormatError(f"{path}: negative class label")
    class_count = max(labels) + 1
    samples = [Sample(LandmarkSet(coords[i]), None, labels[i]) for i in range(len(rows))]
    return DatasetManifest(samples, class_count)


def write_fer_csv(manifest: DatasetManifest, path) -> None:
    """Rows of `label,pixels,usage`; pixels are space-separated 8-bit values."""
    if not manifest.has_images:
        raise ValueError("dataset has no images to write")
    lines = ["label,pixels,usage"]
    for s, tag in zip(manifest.samples, manifest.tags):
        pixels = np.rint(np.clip(s.image, 0.0, 1.0) * 255).astype(int).ravel()
        lines.append(f"{s.label},{' '.join(map(str, pixels))},{_TAG_TO_USAGE[tag]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_fer_csv(path) -> DatasetManifest:
    """Parse a pixel CSV into a dataset of images and labels (no landmarks).

    Each row carries a square image as space-separated 8-bit intensities
    (2304 tokens for the standard 48x48 layout) plus a usage column that
    maps onto split tags.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    if lines[0].split(",") != ["label", "pixels", "usage"]:
        raise FormatError(f"{path}: line 1: bad header {lines[0]!r}")
    labels, images, tags = [], [], []
    side = None
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{path}: line {ln}: expected 3 columns, got {len(parts)}")
        raw_label, raw_pixels, usage = parts
        if usage not in _USAGE_TO_TAG:
            raise FormatError(f"{path}: line {ln}: unknown usage {usage!r}")
        try:
            label = int(raw_label)
            pixels = np.array(raw_pixels.split(), dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}: line {ln}: {exc}") from exc
        row_side = math.isqrt(pixels.size)
        if row_side * row_side != pixels.size:
            raise FormatError(
                f"{path}: line {ln}: {pixels.size} pixel tokens do not form a square image"
            )
        if side is None:
            side = row_side
        elif row_side != side:
            raise FormatError(f"{path}: line {ln}: image size changed mid-file")
        if pixels.min() < 0 or pixels.max() > 255:
            raise FormatError(f"{path}: line {ln}: pixel value outside 0..255")
        labels.append(label)
        images.append(pixels.reshape(side, side) / 255.0)
        tags.append(_USAGE_TO_TAG[usage])
    if not labels:
        raise FormatError(f"{path}: no data rows")
    if min(labels) < 0:
        raise FormatError(f"{path}: negative class label")
    class_count = max(labels) + 1
    samples = [Sample(None, images[i], labels[i]) for i in range(len(labels))]
    return DatasetManifest(samples, class_count, tags)


def attach_landmarks(images: DatasetManifest, landmarks: DatasetManifest) -> DatasetManifest:
    """Pair an image-only dataset with a landmark-only one, row by row."""
    if images.size != landmarks.size:
        raise FormatError(
            f"cannot pair {images.size} images with {landmarks.size} landmark rows"
        )
    if images.labels().tolist() != landmarks.labels().tolist():
        raise FormatError("image and landmark files disagree on labels")
    samples = [
        Sample(lm.landmarks, img.image, img.label)
        for img, lm in zip(images.samples, landmarks.samples)
    ]
    class_count = max(images.class_count, landmarks.class_count)
    return DatasetManifest(samples, class_count, images.tags)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_dataset(manifest: DatasetManifest, out_dir) -> None:
    """Write manifest.json plus landmarks.csv / images.csv."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    if manifest.has_landmarks:
        files["landmarks"] = "landmarks.csv"
        write_landmark_csv(manifest, os.path.join(out_dir, "landmarks.csv"))
    if manifest.has_images:
        files["images"] = "images.csv"
        write_fer_csv(manifest, os.path.join(out_dir, "images.csv"))
    meta = {
        "format": MANIFEST_FORMAT,
        "classes": manifest.class_count,
        "landmarks": manifest.landmark_count,
        "samples": manifest.size,
        "files": files,
        "tags": manifest.tags,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> DatasetManifest:
    """Load a dataset directory written by `save_dataset`."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{path}: not a dataset directory (missing manifest.json)") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if meta.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest_path}: unsupported format {meta.get('format')!r}")
    files = meta.get("files", {})
    lm = None
    if "landmarks" in files:
        lm = load_landmark_csv(os.path.join(path, files["landmarks"]))
    img = None
    if "images" in files:
        img = load_fer_csv(os.path.join(path, files["images"]))
    if lm is not None and img is not None:
        merged = attach_landmarks(img, lm)
    elif lm is not None:
        merged = lm
    elif img is not None:
        merged = img
    else:
        raise FormatError(f"{manifest_path}: no data files listed")
    tags = meta.get("tags")
    if tags is not None and len(tags) != merged.size:
        raise FormatError(f"{manifest_path}: tag list does not match sample count")
    return DatasetManifest(merged.samples, int(meta["classes"]), tags or merged.tags)
