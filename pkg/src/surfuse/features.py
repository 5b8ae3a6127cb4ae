"""Handcrafted tactile descriptors and their dataset-level standardization.

The descriptor is a fixed 7-vector computed from the grayscale image:

    0 mean intensity
    1 standard deviation
    2 skewness
    3 excess kurtosis
    4 Shannon entropy of a 256-bin histogram over [0, 1], in bits
    5 edge density: fraction of interior pixels with Sobel magnitude > threshold
    6 mean Sobel gradient magnitude

The order is part of the checkpoint format and must not change.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .tensor import ShapeError, make_rng

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "mean",
    "std",
    "skewness",
    "excess_kurtosis",
    "entropy_bits",
    "edge_density",
    "mean_gradient",
)
N_FEATURES = len(FEATURE_NAMES)
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
EDGE_THRESHOLD = 0.1
HIST_BINS = 256
STD_FLOOR = 1e-6
FIT_CAP = 1000

_MOMENT_EPS = 1e-12


class ImageFormatError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def to_grayscale(rgb: np.ndarray, channels_first: bool | None = None) -> np.ndarray:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B of an image in [0, 1].

    Accepts [3, H, W] or [H, W, 3]; ``channels_first=None`` picks whichever
    axis has extent 3 (leading axis wins if both do).
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3:
        raise ImageFormatError(f"expected a 3-D RGB image, got shape {rgb.shape}")
    if channels_first is None:
        channels_first = rgb.shape[0] == 3
    if channels_first:
        if rgb.shape[0] != 3:
            raise ImageFormatError(f"expected 3 channels, got {rgb.shape[0]}")
        r, g, b = rgb[0], rgb[1], rgb[2]
    else:
        if rgb.shape[-1] != 3:
            raise ImageFormatError(f"expected 3 channels, got {rgb.shape[-1]}")
        r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    wr, wg, wb = GRAY_WEIGHTS
    return wr * r + wg * g + wb * b


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude on the (H-2) x (W-2) interior (valid mode)."""
    g = gray
    # horizontal derivative: [[-1,0,1],[-2,0,2],[-1,0,1]]
    dx = (g[:-2, 2:] - g[:-2, :-2]) + 2.0 * (g[1:-1, 2:] - g[1:-1, :-2]) + (g[2:, 2:] - g[2:, :-2])
    dy = (g[2:, :-2] - g[:-2, :-2]) + 2.0 * (g[2:, 1:-1] - g[:-2, 1:-1]) + (g[2:, 2:] - g[:-2, 2:])
    return np.sqrt(dx * dx + dy * dy)


def histogram_entropy(gray: np.ndarray, bins: int = HIST_BINS) -> float:
    counts, _ = np.histogram(gray, bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / gray.size
    return float(-(p * np.log2(p)).sum())


def extract_features(gray: np.ndarray, edge_threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Raw (unnormalized) 7-feature descriptor of a grayscale image in [0, 1]."""
    g = np.ascontiguousarray(gray, dtype=np.float64)
    if g.ndim != 2:
        raise ImageFormatError(f"expected a 2-D grayscale image, got shape {g.shape}")
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ShapeError(f"image must be at least 3x3 for Sobel filtering, got {g.shape}")

    mu = g.mean()
    centered = g - mu
    var = (centered * centered).mean()
    sd = np.sqrt(var)
    if sd > _MOMENT_EPS:
        z = centered / sd
        z2 = z * z
        skew = (z2 * z).mean()
        kurt = (z2 * z2).mean() - 3.0
    else:
        # flat frame: higher moments are defined as zero
        sd, skew, kurt = 0.0, 0.0, 0.0

    mag = sobel_magnitude(g)
    return np.array(
        [
            mu,
            sd,
            skew,
            kurt,
            histogram_entropy(g),
            float((mag > edge_threshold).mean()),
            mag.mean(),
        ],
        dtype=np.float64,
    )


def image_features(rgb_u8: np.ndarray) -> np.ndarray:
    """Raw descriptor straight from an 8-bit RGB tactile frame ([3,H,W] or [H,W,3])."""
    return extract_features(to_grayscale(np.asarray(rgb_u8, dtype=np.float64) / 255.0))


@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray
    n_fitted: int
    cap: int = FIT_CAP
    seed: int | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_FEATURES,) or self.std.shape != (N_FEATURES,):
            raise ShapeError(f"normalizer needs {N_FEATURES} means and stds")

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return normalize(v, self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = [float(x) for x in self.mean]
        d["std"] = [float(x) for x in self.std]
        d["feature_order"] = list(FEATURE_NAMES)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalizer":
        order = d.get("feature_order", list(FEATURE_NAMES))
        if list(order) != list(FEATURE_NAMES):
            raise ValueError(f"feature order {order} does not match {list(FEATURE_NAMES)}")
        return cls(mean=d["mean"], std=d["std"], n_fitted=d["n_fitted"], cap=d.get("cap", FIT_CAP), seed=d.get("seed"))


def fit_normalizer_from_features(
    raw: np.ndarray, cap: int = FIT_CAP, seed: int = 0, std_floor: float = STD_FLOOR
) -> FeatureNormalizer:
    """Fit on precomputed raw feature rows [N, 7], subsampling at most ``cap`` rows."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != N_FEATURES:
        raise ShapeError(f"expected raw features of shape [N, {N_FEATURES}], got {raw.shape}")
    n = raw.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to fit the normalizer, got {n}")
    take = min(cap, n)
    idx = np.sort(make_rng(seed).choice(n, size=take, replace=False))
    chosen = raw[idx]
    return FeatureNormalizer(
        mean=chosen.mean(axis=0),
        std=np.maximum(chosen.std(axis=0), std_floor),
        n_fitted=take,
        cap=cap,
        seed=seed,
    )


def fit_normalizer(
    train_samples: Sequence[np.ndarray] | Iterable[np.ndarray], cap: int = FIT_CAP, seed: int = 0
) -> FeatureNormalizer:
    """Fit per-feature mean/std on up to ``cap`` randomly chosen grayscale images.

    Only the chosen images are featurized.
    """
    samples = list(train_samples)
    n = len(samples)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to fit the normalizer, got {n}")
    take = min(cap, n)
    idx = np.sort(make_rng(seed).choice(n, size=take, replace=False))
    raw = np.stack([extract_features(samples[i]) for i in idx])
    # idx already covers every chosen row, so refit without resampling
    norm = fit_normalizer_from_features(raw, cap=take, seed=seed)
    norm.cap = cap
    return norm


def normalize(v: np.ndarray, norm: FeatureNormalizer) -> np.ndarray:
    """(v - mean) / std, row-wise for a [N, 7] batch or a single 7-vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != N_FEATURES:
        raise ShapeError(f"expected {N_FEATURES} features, got shape {v.shape}")
    return (v - norm.mean) / norm.std
