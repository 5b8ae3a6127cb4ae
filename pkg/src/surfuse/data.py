"""Paired vision/tactile datasets: directory loading, preprocessing, splitting,
and a procedural texture generator for desk-scale experiments.

Directory layout::

    root/<class>/vision/<id>.png
    root/<class>/tactile/<id>.png

Pairs are matched by identical ``<id>`` stems; classes are sorted
lexicographically and the sorted order is the label order.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import ConfigError, make_rng

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
IMAGE_SIZE = 224
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)
MATERIALS = ("concrete", "wood", "brick", "synthetic_fabric", "grass")


class DatasetError(RuntimeError):
    pass


class StratificationError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


class DatasetWarning(UserWarning):
    pass


@dataclass
class PairedSample:
    """One (vision, tactile, label) triple.

    ``vision`` and ``tactile`` are either file paths or uint8 arrays [3, H, W].
    """

    vision: Path | np.ndarray
    tactile: Path | np.ndarray
    label: int
    class_name: str
    sample_id: str = ""


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[PairedSample]
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError(f"duplicate class names in {self.classes}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.classes))

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(list(self.classes), [self.samples[i] for i in indices], dict(self.source))

    def to_json(self) -> dict:
        samples = []
        for s in self.samples:
            entry = {"id": s.sample_id, "label": s.label, "class": s.class_name}
            if isinstance(s.vision, Path):
                entry["vision"] = str(s.vision)
                entry["tactile"] = str(s.tactile)
            samples.append(entry)
        return {"classes": self.classes, "source": self.source, "samples": samples}


# ---------------------------------------------------------------------------
# images


def load_rgb(src: Path | str | np.ndarray) -> np.ndarray:
    """Decode to uint8 [3, H, W]. Arrays pass through (HWC arrays are transposed)."""
    if isinstance(src, np.ndarray):
        arr = src
        if arr.dtype != np.uint8:
            raise ImageDecodeError(f"raw image arrays must be uint8, got {arr.dtype}")
        if arr.ndim == 3 and arr.shape[0] != 3 and arr.shape[-1] == 3:
            arr = arr.transpose(2, 0, 1)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ImageDecodeError(f"expected an RGB image, got shape {arr.shape}")
        return arr
    path = Path(src)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def resize_rgb(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of a uint8 [3, H, W] image; identity when already size x size."""
    if img.shape[1:] == (size, size):
        return img
    im = Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0)))
    out = np.asarray(im.resize((size, size), Image.Resampling.BILINEAR))
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def standardize(img_u8: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=np.float32) -> np.ndarray:
    """uint8 [..., 3, H, W] -> (x / 255 - mean) / std per channel."""
    m = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    return ((img_u8.astype(np.float64) / 255.0 - m) / s).astype(dtype)


def preprocess_image(
    raw: Path | str | np.ndarray, size: int = IMAGE_SIZE, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=np.float32
) -> np.ndarray:
    """Decode, bilinear-resize to size x size and standardize -> [3, size, size]."""
    return standardize(resize_rgb(load_rgb(raw), size), mean, std, dtype)


# ---------------------------------------------------------------------------
# directory loading


def _is_decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError):
        return False


def _scan_images(folder: Path) -> dict[str, Path]:
    found = {}
    if not folder.is_dir():
        return found
    for p in sorted(folder.iterdir()):
        if not p.is_file():
            continue
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            warnings.warn(f"skipping non-image file {p}", DatasetWarning, stacklevel=3)
            continue
        if not _is_decodable(p):
            warnings.warn(f"skipping undecodable image {p}", DatasetWarning, stacklevel=3)
            continue
        if p.stem in found:
            warnings.warn(f"duplicate id {p.stem!r} in {folder}; keeping {found[p.stem].name}", DatasetWarning, stacklevel=3)
            continue
        found[p.stem] = p
    return found


def load_directory(root: Path | str) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    classes: list[str] = []
    per_class: list[list[tuple[str, Path, Path]]] = []
    for cdir in class_dirs:
        vision = _scan_images(cdir / "vision")
        tactile = _scan_images(cdir / "tactile")
        for stem in sorted(set(vision) ^ set(tactile)):
            side = "vision" if stem in vision else "tactile"
            warnings.warn(f"{cdir.name}/{side}/{stem} has no paired image; excluded", DatasetWarning, stacklevel=2)
        pairs = [(stem, vision[stem], tactile[stem]) for stem in sorted(set(vision) & set(tactile))]
        if pairs:
            classes.append(cdir.name)
            per_class.append(pairs)
        elif vision or tactile:
            warnings.warn(f"class {cdir.name!r} has no complete pair; dropped", DatasetWarning, stacklevel=2)
    if not classes:
        raise DatasetError(f"no complete vision/tactile pair found under {root}")
    samples = [
        PairedSample(v, t, label, name, stem)
        for label, (name, pairs) in enumerate(zip(classes, per_class))
        for stem, v, t in pairs
    ]
    return DatasetManifest(classes, samples, {"kind": "directory", "root": str(root)})


def materialize(manifest: DatasetManifest, size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode and resize every pair once -> (vision [N,3,size,size], tactile [N,3,size,size], labels)."""
    vision = np.stack([resize_rgb(load_rgb(s.vision), size) for s in manifest.samples])
    tactile = np.stack([resize_rgb(load_rgb(s.tactile), size) for s in manifest.samples])
    return vision, tactile, manifest.labels


# ---------------------------------------------------------------------------
# splitting


def stratified_split(
    manifest: DatasetManifest, train_ratio: float = 0.8, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Per class: seeded shuffle, first round-half-up(train_ratio * n_c) go to train.

    Each side keeps at least one sample per class.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ConfigError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    labels = manifest.labels
    rng = make_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for c, name in enumerate(manifest.classes):
        members = np.flatnonzero(labels == c)
        n = members.size
        if n < 2:
            raise StratificationError(f"class {name!r} has {n} sample(s); need at least 2 to split")
        order = members[rng.permutation(n)]
        k = int(np.floor(train_ratio * n + 0.5))
        k = min(max(k, 1), n - 1)
        train_idx.extend(order[:k].tolist())
        test_idx.extend(order[k:].tolist())
    return manifest.subset(sorted(train_idx)), manifest.subset(sorted(test_idx))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the procedural generator; recorded into the manifest."""

    size: int = IMAGE_SIZE
    pixel_noise: float = 0.04
    orientation_jitter: float = 0.12
    frequency_jitter: float = 0.12
    tint_jitter: float = 0.06
    noise_modality: str | None = None  # "vision" or "tactile": replace with class-independent noise


def class_names(n_classes: int) -> list[str]:
    if n_classes <= len(MATERIALS):
        return list(MATERIALS[:n_classes])
    return [f"texture_{c:02d}" for c in range(n_classes)]


def _bandpass_noise(rng, size: int, freq: float, theta: float, bandwidth: float) -> np.ndarray:
    """White noise filtered around spatial frequency ``freq`` (cycles/pixel) along ``theta``."""
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    u = fx * np.cos(theta) + fy * np.sin(theta)
    v = -fx * np.sin(theta) + fy * np.cos(theta)
    # two lobes at +-freq along the orientation axis, narrow across it
    g = np.exp(-(((np.abs(u) - freq) / bandwidth) ** 2 + (v / (0.6 * bandwidth)) ** 2))
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * g))
    return (field - field.mean()) / (field.std() + 1e-12)


def _vision_image(rng, c: int, n_classes: int, spec: SynthSpec) -> np.ndarray:
    theta = np.pi * c / n_classes + rng.normal(0.0, spec.orientation_jitter)
    freq = (0.03 + 0.1 * c / max(1, n_classes - 1)) * (1.0 + rng.normal(0.0, spec.frequency_jitter))
    pattern = _bandpass_noise(rng, spec.size, freq, theta, bandwidth=0.015)
    hue = 2.0 * np.pi * c / n_classes
    tint = 0.55 + 0.3 * np.cos(hue + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0]))
    tint = tint + rng.normal(0.0, spec.tint_jitter, size=3)
    img = tint[:, None, None] * (0.75 + 0.22 * pattern[None]) + rng.normal(0.0, spec.pixel_noise, (3, spec.size, spec.size))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _tactile_image(rng, c: int, n_classes: int, spec: SynthSpec) -> np.ndarray:
    size = spec.size
    frac = c / max(1, n_classes - 1)
    density = 0.0015 + 0.012 * frac  # bumps per pixel
    amplitude = 0.55 - 0.3 * frac
    sigma = 4.5 - 2.5 * frac
    n_bumps = rng.poisson(density * size * size)
    impulses = np.zeros((size, size))
    ys = rng.integers(0, size, n_bumps)
    xs = rng.integers(0, size, n_bumps)
    np.add.at(impulses, (ys, xs), amplitude * rng.uniform(0.7, 1.3, n_bumps))
    f = np.fft.fftfreq(size)
    kernel = np.exp(-2.0 * (np.pi * sigma) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    # unit-sum blur scaled so an isolated bump peaks at its amplitude
    height = np.real(np.fft.ifft2(np.fft.fft2(impulses) * kernel)) * (2.0 * np.pi * sigma**2)
    base = 0.35 + 0.1 * frac + rng.normal(0.0, 0.02)
    gray = base + height + rng.normal(0.0, spec.pixel_noise, (size, size))
    # elastomer-style tint, identical for every class
    rgb = np.stack([gray * 1.05, gray, gray * 0.9])
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def synth_generate(n_classes: int, per_class: int, seed: int, spec: SynthSpec | None = None) -> DatasetManifest:
    """Deterministic in-memory paired texture dataset with ``per_class`` pairs per class."""
    spec = spec or SynthSpec()
    if n_classes < 2 or per_class < 10:
        raise ConfigError(f"need n_classes >= 2 and per_class >= 10, got {n_classes}, {per_class}")
    if spec.noise_modality not in (None, "vision", "tactile"):
        raise ConfigError(f"noise_modality must be None, 'vision' or 'tactile', got {spec.noise_modality!r}")
    if spec.size < 8:
        raise ConfigError(f"image size {spec.size} too small")
    names = class_names(n_classes)
    streams = np.random.SeedSequence(seed).spawn(n_classes)
    samples = []
    for c in range(n_classes):
        rng = make_rng(streams[c])
        for i in range(per_class):
            vision = _vision_image(rng, c, n_classes, spec)
            tactile = _tactile_image(rng, c, n_classes, spec)
            if spec.noise_modality == "vision":
                vision = rng.integers(0, 256, vision.shape, dtype=np.uint8)
            elif spec.noise_modality == "tactile":
                tactile = rng.integers(0, 256, tactile.shape, dtype=np.uint8)
            samples.append(PairedSample(vision, tactile, c, names[c], f"{c:02d}_{i:05d}"))
    source = {
        "kind": "synthetic",
        "seed": seed,
        "n_classes": n_classes,
        "per_class": per_class,
        "spec": spec.__dict__.copy(),
    }
    return DatasetManifest(names, samples, source)


def write_dataset(manifest: DatasetManifest, out: Path | str) -> Path:
    """Write in-memory pairs as PNGs in the directory layout, plus manifest.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in manifest.samples:
        for side, img in (("vision", s.vision), ("tactile", s.tactile)):
            folder = out / s.class_name / side
            folder.mkdir(parents=True, exist_ok=True)
            path = folder / f"{s.sample_id}.png"
            Image.fromarray(np.ascontiguousarray(load_rgb(img).transpose(1, 2, 0))).save(path, optimize=False)
        written.append(PairedSample(out / s.class_name / "vision" / f"{s.sample_id}.png",
                                    out / s.class_name / "tactile" / f"{s.sample_id}.png",
                                    s.label, s.class_name, s.sample_id))
    on_disk = DatasetManifest(manifest.classes, written, manifest.source)
    doc = on_disk.to_json()
    for entry in doc["samples"]:
        entry["vision"] = str(Path(entry["vision"]).relative_to(out))
        entry["tactile"] = str(Path(entry["tactile"]).relative_to(out))
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"
