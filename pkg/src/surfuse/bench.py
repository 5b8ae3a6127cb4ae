"""Batch-1 inference latency for the vision, tactile and fused paths."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import PairedSample, load_rgb, resize_rgb, standardize
from .features import extract_features, normalize, to_grayscale
from .model import SurformerModel, fuse, predict
from .tensor import ConfigError, get_default_dtype

SCOPES = ("full", "model")
PATHS = ("vision", "tactile", "fused")


@dataclass
class LatencyStats:
    """Per-sample milliseconds over the timed iterations."""

    mean: float
    median: float
    p95: float
    min: float
    iters: int

    @classmethod
    def from_ns(cls, samples_ns: np.ndarray) -> "LatencyStats":
        ms = np.asarray(samples_ns, dtype=np.float64) / 1e6
        return cls(float(ms.mean()), float(np.median(ms)), float(np.percentile(ms, 95)), float(ms.min()), ms.size)


@dataclass
class LatencyReport:
    scope: str
    warmup_iters: int
    timed_iters: int
    vision: LatencyStats
    tactile: LatencyStats
    fused: LatencyStats

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _time(fn: Callable[[int], object], n_samples: int, warmup: int, iters: int) -> np.ndarray:
    for i in range(warmup):
        fn(i % n_samples)
    out = np.empty(iters, dtype=np.int64)
    for i in range(iters):
        k = i % n_samples
        t0 = time.perf_counter_ns()
        fn(k)
        out[i] = time.perf_counter_ns() - t0
    return out


def bench_inference(
    model: SurformerModel,
    samples: Sequence[PairedSample],
    warmup: int = 20,
    iters: int = 200,
    scope: str = "full",
    threads: int = 1,
) -> LatencyReport:
    """Time single-sample inference of each path.

    ``full`` starts from the stored image (path or uint8 array) and includes decoding,
    resizing, standardization and, for the tactile path, grayscale conversion plus
    feature extraction. ``model`` starts from prepared input tensors.
    """
    if iters < 10:
        raise ConfigError(f"iters must be >= 10, got {iters}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    if scope not in SCOPES:
        raise ConfigError(f"scope must be one of {SCOPES}, got {scope!r}")
    if not samples:
        raise ConfigError("no samples to benchmark")
    if model.normalizer is None:
        raise ConfigError("model has no fitted feature normalizer")
    size = model.vision_cfg.input_size
    dtype = get_default_dtype()
    norm = model.normalizer

    def vision_input(s: PairedSample) -> np.ndarray:
        return standardize(resize_rgb(load_rgb(s.vision), size)[None], dtype=dtype)

    def tactile_input(s: PairedSample) -> np.ndarray:
        rgb = resize_rgb(load_rgb(s.tactile), size)
        raw = extract_features(to_grayscale(rgb.astype(np.float64) / 255.0))
        return normalize(raw, norm)[None].astype(dtype)

    if scope == "full":
        get_v = lambda k: vision_input(samples[k])  # noqa: E731
        get_t = lambda k: tactile_input(samples[k])  # noqa: E731
    else:
        cached_v = [vision_input(s) for s in samples]
        cached_t = [tactile_input(s) for s in samples]
        get_v = cached_v.__getitem__
        get_t = cached_t.__getitem__

    def run_vision(k):
        return model.vision(get_v(k))

    def run_tactile(k):
        return model.tactile(get_t(k))

    def run_fused(k):
        return predict(fuse(model.vision(get_v(k)), model.tactile(get_t(k)), model.fusion))

    was_training = model.training
    model.eval()
    try:
        with threadpool_limits(limits=threads):
            timings = {
                name: _time(fn, len(samples), warmup, iters)
                for name, fn in (("vision", run_vision), ("tactile", run_tactile), ("fused", run_fused))
            }
    finally:
        model.train(was_training)
    return LatencyReport(
        scope, warmup, iters, *(LatencyStats.from_ns(timings[name]) for name in PATHS)
    )
