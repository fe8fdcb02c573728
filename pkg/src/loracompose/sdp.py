"""Stochastic delta pruning: seeded Bernoulli masks, survivor rescale, norm restore.

Mask bits come from a counter-based SplitMix64 stream so any implementation can
reproduce them:

* key = first 8 bytes (little-endian) of SHA-256 over the UTF-8 string
  ``f"{seed}\\x00{adapter_id}\\x00{tensor_name}"``
* word j (j = 0, 1, ...) = splitmix64_mix(key + (j + 1) * 0x9E3779B97F4A7C15 mod 2**64)
* u_j = (word_j >> 11) * 2**-53; entry j (row-major) survives iff u_j >= drop_rate
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor_store import AdapterBundle, BundleFormatError, ShapeError, TensorBlob, decode_container, encode_container

DEFAULT_SEEDS = (42, 52, 133, 3407)

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class SdpConfig:
    drop_rate: float
    seed: int = 42
    survivor_rescale: bool = True
    norm_preserve: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def stream_key(seed: int, adapter_id: str, tensor_name: str) -> int:
    digest = hashlib.sha256(f"{seed}\x00{adapter_id}\x00{tensor_name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def splitmix64(key: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 sequence started at ``key``."""
    z = np.uint64(key) + np.arange(1, n + 1, dtype=np.uint64) * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform_stream(key: int, n: int) -> np.ndarray:
    return (splitmix64(key, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def sample_mask(adapter_id: str, tensor_name: str, shape: tuple[int, ...], cfg: SdpConfig) -> np.ndarray:
    """Boolean keep-mask with independent Bernoulli(1 - p) entries."""
    n = math.prod(shape)
    if n <= 0:
        raise ShapeError(f"invalid shape {shape}")
    if cfg.drop_rate == 0.0:
        return np.ones(shape, dtype=bool)
    u = uniform_stream(stream_key(cfg.seed, adapter_id, tensor_name), n)
    return (u >= cfg.drop_rate).reshape(shape)


def apply_sdp(tensor: TensorBlob, mask: np.ndarray, cfg: SdpConfig) -> TensorBlob:
    theta = tensor.array().astype(np.float64)
    if mask.shape != theta.shape:
        raise ShapeError(f"{tensor.name}: mask shape {mask.shape} != tensor shape {theta.shape}")
    out = np.where(mask, theta, 0.0)
    if cfg.survivor_rescale:
        out = out / (1.0 - cfg.drop_rate)
    if cfg.norm_preserve:
        before = float(np.linalg.norm(theta))
        after = float(np.linalg.norm(out))
        if before > 0.0 and after > 0.0:
            out = out * (before / after)
    return TensorBlob.from_array(tensor.name, out)


def sdp_bundle(bundle: AdapterBundle, cfg: SdpConfig) -> tuple[AdapterBundle, dict[str, np.ndarray]]:
    """Mask every tensor of one adapter; returns the sparsified bundle and its masks."""
    masks, tensors = {}, {}
    for name, blob in bundle.tensors.items():
        m = sample_mask(bundle.adapter_id, name, blob.shape, cfg)
        masks[name] = m
        tensors[name] = apply_sdp(blob, m, cfg)
    return AdapterBundle(bundle.adapter_id, tensors, dict(bundle.scaling)), masks


def save_masks(masks: Mapping[str, np.ndarray], path: str | os.PathLike, adapter_id: str = "", cfg: SdpConfig | None = None) -> None:
    """Write masks as a bit-packed sidecar (container format, dtype ``"bits"``, little bit order)."""
    entries = [
        (name, tuple(m.shape), "bits", np.packbits(m.reshape(-1).astype(np.uint8), bitorder="little").tobytes())
        for name, m in masks.items()
    ]
    meta: dict = {"adapter_id": adapter_id}
    if cfg is not None:
        meta["sdp"] = {"drop_rate": cfg.drop_rate, "seed": cfg.seed}
    Path(path).write_bytes(encode_container(entries, meta))


def load_masks(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    _, entries = decode_container(buf)
    out = {}
    for name, (entry, raw) in entries.items():
        if entry.get("dtype") != "bits":
            raise BundleFormatError(f"{name}: expected dtype 'bits'", 0)
        n = math.prod(entry["shape"])
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=n)
        out[name] = bits.astype(bool).reshape(entry["shape"])
    return out
