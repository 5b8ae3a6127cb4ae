"""Checkpoint file: magic, manifest length, JSON manifest, little-endian tensor blob.

Layout::

    b"SURFCKPT" | uint64 LE manifest length | manifest (UTF-8 JSON) | blob

The manifest lists every parameter with its shape, dtype, byte offset into the blob,
byte length and trainable flag, plus both branch configs and the feature normalizer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .features import FeatureNormalizer
from .model import SurformerModel, TactileBranchConfig, VisionBranchConfig

MAGIC = b"SURFCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sQ")


class IntegrityError(ValueError):
    """Checkpoint bytes are truncated, malformed or inconsistent with the manifest."""


def to_bytes(model: SurformerModel) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
                "trainable": bool(p.trainable),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config_dict(),
        "normalizer": model.normalizer.to_dict() if model.normalizer is not None else None,
        "tensors": tensors,
        "blob_nbytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, len(head)) + head + b"".join(chunks)


def save(model: SurformerModel, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    tmp.replace(path)
    return path


def read_manifest(buf: bytes) -> tuple[dict, memoryview]:
    if len(buf) < _HEADER.size:
        raise IntegrityError(f"checkpoint is {len(buf)} bytes, shorter than its header")
    magic, n_manifest = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    end = _HEADER.size + n_manifest
    if end > len(buf):
        raise IntegrityError(f"manifest declares {n_manifest} bytes but only {len(buf) - _HEADER.size} remain")
    try:
        manifest = json.loads(bytes(buf[_HEADER.size : end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {manifest.get('format_version')!r}")
    blob = memoryview(buf)[end:]
    if len(blob) != manifest.get("blob_nbytes"):
        raise IntegrityError(f"blob holds {len(blob)} bytes, manifest declares {manifest.get('blob_nbytes')}")
    return manifest, blob


def _decode_tensor(entry: dict, blob: memoryview) -> np.ndarray:
    dtype = np.dtype(entry["dtype"])
    shape = tuple(entry["shape"])
    start, nbytes = entry["offset"], entry["nbytes"]
    if start < 0 or start + nbytes > len(blob):
        raise IntegrityError(f"{entry['name']}: byte range [{start}, {start + nbytes}) outside blob")
    if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise IntegrityError(f"{entry['name']}: {nbytes} bytes do not fit shape {shape} of {dtype}")
    arr = np.frombuffer(blob[start : start + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def from_bytes(buf: bytes) -> SurformerModel:
    manifest, blob = read_manifest(buf)
    cfg = manifest["config"]
    norm = manifest.get("normalizer")
    model = SurformerModel(
        VisionBranchConfig(**cfg["vision"]),
        TactileBranchConfig(**cfg["tactile"]),
        seed=cfg.get("seed", 0),
        normalizer=FeatureNormalizer.from_dict(norm) if norm is not None else None,
    )
    params = dict(model.named_parameters())
    names = [e["name"] for e in manifest["tensors"]]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise IntegrityError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for entry in manifest["tensors"]:
        p = params[entry["name"]]
        arr = _decode_tensor(entry, blob)
        if arr.shape != p.shape:
            raise IntegrityError(f"{entry['name']}: stored shape {arr.shape} != model shape {p.shape}")
        p.data = arr
        p.grad = None
        p.zero_grad()
        p.trainable = bool(entry["trainable"])
    model.eval()
    return model


def load(path: Path | str) -> SurformerModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
