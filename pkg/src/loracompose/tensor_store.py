"""Adapter tensor bundles: in-memory types, the on-disk container, block vectors.

Container layout::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][payload]

The header maps tensor name -> ``{"shape", "dtype": "f32", "offset", "nbytes"}``
with offsets relative to the payload start and aligned to 8 bytes. A reserved
``__metadata__`` entry carries the adapter id and per-tensor scaling factors.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

METADATA_KEY = "__metadata__"
ALIGNMENT = 8
_LEN = struct.Struct("<Q")
_MAX_HEADER = 100 * 1024 * 1024


class ShapeError(ValueError):
    """Tensor shapes or dimensions are incompatible."""


class BundleFormatError(ValueError):
    """A container file is malformed; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TensorBlob:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray  # flat float32, row-major

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s <= 0 for s in shape):
            raise ShapeError(f"{self.name}: shape must be non-empty positive integers, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != math.prod(shape):
            raise ShapeError(f"{self.name}: {data.size} values for shape {shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{self.name}: non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, name: str, array) -> TensorBlob:
        arr = np.asarray(array, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(name, arr.shape, arr.reshape(-1))

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size


@dataclass
class AdapterBundle:
    """Effective updates of one adapter, keyed by module id."""

    adapter_id: str
    tensors: dict[str, TensorBlob]
    scaling: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, blob in self.tensors.items():
            if name != blob.name:
                raise ValueError(f"tensor key {name!r} does not match blob name {blob.name!r}")
            if name == METADATA_KEY:
                raise ValueError(f"{METADATA_KEY!r} is a reserved name")
        for name in self.tensors:
            self.scaling.setdefault(name, 1.0)

    @classmethod
    def from_arrays(cls, adapter_id: str, arrays: Mapping[str, np.ndarray], scale: float = 1.0) -> AdapterBundle:
        tensors = {name: TensorBlob.from_array(name, arr) for name, arr in arrays.items()}
        return cls(adapter_id, tensors, {name: float(scale) for name in tensors})

    def names(self) -> list[str]:
        return list(self.tensors)

    def array(self, name: str) -> np.ndarray:
        return self.tensors[name].array()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: blob.shape for name, blob in self.tensors.items()}

    def norm(self) -> float:
        """Frobenius norm over all tensors, accumulated in float64."""
        total = 0.0
        for name in sorted(self.tensors):
            d = self.tensors[name].data.astype(np.float64)
            total += float(np.dot(d, d))
        return math.sqrt(total)

    def equals(self, other: AdapterBundle) -> bool:
        if self.adapter_id != other.adapter_id or list(self.tensors) != list(other.tensors):
            return False
        if self.scaling != other.scaling:
            return False
        return all(
            self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].data.tobytes() == other.tensors[n].data.tobytes()
            for n in self.tensors
        )


@dataclass(frozen=True)
class LowRankPair:
    A: TensorBlob  # r x d_in
    B: TensorBlob  # d_out x r
    scale: float = 1.0


def effective_update(pair: LowRankPair, name: str | None = None) -> TensorBlob:
    """Dense ``scale * B @ A``, computed in float64 and stored as float32."""
    a, b = pair.A.array(), pair.B.array()
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"low-rank factors must be 2-D, got A{a.shape} B{b.shape}")
    if b.shape[1] != a.shape[0]:
        raise ShapeError(f"inner dimensions disagree: B{b.shape} @ A{a.shape}")
    dense = float(pair.scale) * (b.astype(np.float64) @ a.astype(np.float64))
    return TensorBlob.from_array(name or pair.B.name, dense)


def materialize(adapter_id: str, pairs: Mapping[str, LowRankPair]) -> AdapterBundle:
    tensors = {name: effective_update(pair, name) for name, pair in pairs.items()}
    return AdapterBundle(adapter_id, tensors, {name: float(p.scale) for name, p in pairs.items()})


# -- container ---------------------------------------------------------------


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def encode_container(entries: Sequence[tuple[str, tuple[int, ...], str, bytes]], metadata: dict | None = None) -> bytes:
    """Serialize ``(name, shape, dtype, raw bytes)`` entries into the container format."""
    header: dict = {}
    if metadata is not None:
        header[METADATA_KEY] = metadata
    chunks: list[bytes] = []
    offset = 0
    for name, shape, dtype, raw in entries:
        pad = _align(offset) - offset
        if pad:
            chunks.append(b"\0" * pad)
            offset += pad
        header[name] = {"shape": list(shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # pad the header with spaces so the payload starts on an aligned byte
    text += b" " * (_align(_LEN.size + len(text)) - _LEN.size - len(text))
    return _LEN.pack(len(text)) + text + b"".join(chunks)


def decode_container(buf: bytes) -> tuple[dict, dict[str, tuple[dict, memoryview]]]:
    """Parse a container; return (metadata, name -> (entry, raw payload slice))."""
    size = len(buf)
    if size < _LEN.size:
        raise BundleFormatError(f"file too small for length prefix ({size} bytes)", 0)
    (hlen,) = _LEN.unpack_from(buf, 0)
    if hlen > _MAX_HEADER:
        raise BundleFormatError(f"header length {hlen} exceeds limit", 0)
    start = _LEN.size + hlen
    if start > size:
        raise BundleFormatError(f"header declares {hlen} bytes but file has {size - _LEN.size}", _LEN.size)
    try:
        header = json.loads(bytes(buf[_LEN.size:start]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"invalid JSON header: {exc}", _LEN.size) from exc
    if not isinstance(header, dict):
        raise BundleFormatError("header is not a JSON object", _LEN.size)
    payload = memoryview(buf)[start:]
    metadata = header.pop(METADATA_KEY, {}) or {}
    out: dict[str, tuple[dict, memoryview]] = {}
    spans: list[tuple[int, int, str]] = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise BundleFormatError(f"{name}: entry is not an object", _LEN.size)
        shape, off, nbytes = entry.get("shape"), entry.get("offset"), entry.get("nbytes")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape) or not shape:
            raise BundleFormatError(f"{name}: invalid shape {shape!r}", _LEN.size)
        if not isinstance(off, int) or not isinstance(nbytes, int) or off < 0 or nbytes < 0:
            raise BundleFormatError(f"{name}: invalid offset/nbytes", _LEN.size)
        if off % ALIGNMENT:
            raise BundleFormatError(f"{name}: offset {off} not {ALIGNMENT}-byte aligned", start + off)
        if off + nbytes > len(payload):
            raise BundleFormatError(
                f"{name}: payload truncated, needs {off + nbytes} bytes but only {len(payload)} present",
                start + len(payload),
            )
        spans.append((off, off + nbytes, name))
        out[name] = (entry, payload[off:off + nbytes])
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise BundleFormatError(f"tensors {an!r} and {bn!r} overlap", start + b0)
    return metadata, out


def bundle_to_bytes(bundle: AdapterBundle) -> bytes:
    entries = [
        (name, blob.shape, "f32", blob.data.astype("<f4", copy=False).tobytes())
        for name, blob in bundle.tensors.items()
    ]
    meta = {"adapter_id": bundle.adapter_id, "scaling": {n: bundle.scaling[n] for n in bundle.tensors}}
    return encode_container(entries, meta)


def bundle_from_bytes(buf: bytes) -> AdapterBundle:
    metadata, entries = decode_container(buf)
    start = _LEN.size + _LEN.unpack_from(buf, 0)[0]
    tensors: dict[str, TensorBlob] = {}
    for name, (entry, raw) in entries.items():
        if entry.get("dtype") != "f32":
            raise BundleFormatError(f"{name}: unsupported dtype {entry.get('dtype')!r}", start + entry["offset"])
        if entry["nbytes"] != 4 * math.prod(entry["shape"]):
            raise BundleFormatError(
                f"{name}: nbytes {entry['nbytes']} inconsistent with shape {entry['shape']}", start + entry["offset"]
            )
        data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise BundleFormatError(f"{name}: non-finite values", start + entry["offset"])
        tensors[name] = TensorBlob(name, tuple(entry["shape"]), data)
    scaling = {k: float(v) for k, v in (metadata.get("scaling") or {}).items() if k in tensors}
    return AdapterBundle(str(metadata.get("adapter_id", "")), tensors, scaling)


def save_bundle(bundle: AdapterBundle, path: str | os.PathLike) -> None:
    Path(path).write_bytes(bundle_to_bytes(bundle))


def load_bundle(path: str | os.PathLike) -> AdapterBundle:
    return bundle_from_bytes(Path(path).read_bytes())


# -- blocks ------------------------------------------------------------------

BlockMap = dict[str, list[str]]


def default_block_of(name: str) -> str:
    """``"block3.attn.q"`` -> ``"block3"``."""
    return name.split(".", 1)[0]


def build_block_map(names: Iterable[str], block_of: Callable[[str], str] = default_block_of) -> BlockMap:
    """Group tensor names by block; names inside a block sorted lexicographically."""
    blocks: dict[str, list[str]] = {}
    for name in names:
        blocks.setdefault(block_of(name), []).append(name)
    return {b: sorted(blocks[b]) for b in sorted(blocks)}


def check_block_map(blocks: BlockMap, names: Iterable[str]) -> None:
    seen: dict[str, str] = {}
    for b, members in blocks.items():
        for n in members:
            if n in seen:
                raise ValueError(f"tensor {n!r} appears in blocks {seen[n]!r} and {b!r}")
            seen[n] = b
    missing = set(names) - set(seen)
    if missing:
        raise ValueError(f"block map does not cover tensors: {sorted(missing)}")


def block_vector(bundle: AdapterBundle, names: Sequence[str]) -> np.ndarray:
    """Concatenate the flattened tensors ``names`` in the given order."""
    missing = [n for n in names if n not in bundle.tensors]
    if missing:
        raise KeyError(f"adapter {bundle.adapter_id!r} lacks tensors {missing}")
    if not names:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([bundle.tensors[n].data for n in names])


def split_block(vector: np.ndarray, names: Sequence[str], shapes: Mapping[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    """Inverse of :func:`block_vector`."""
    sizes = [math.prod(shapes[n]) for n in names]
    if sum(sizes) != vector.size:
        raise ShapeError(f"block vector of length {vector.size} does not match tensor sizes {sizes}")
    out, pos = {}, 0
    for n, s in zip(names, sizes):
        out[n] = vector[pos:pos + s].reshape(shapes[n])
        pos += s
    return out


def check_pool(bundles: Sequence[AdapterBundle]) -> dict[str, tuple[int, ...]]:
    """Verify a pool shares one tensor name set and shapes; return the shapes."""
    if not bundles:
        raise ValueError("empty adapter pool")
    ref = bundles[0].shapes()
    ids = set()
    for b in bundles:
        if b.adapter_id in ids:
            raise ValueError(f"duplicate adapter id {b.adapter_id!r}")
        ids.add(b.adapter_id)
        shapes = b.shapes()
        if set(shapes) != set(ref):
            raise ShapeError(f"adapter {b.adapter_id!r} tensor names differ from {bundles[0].adapter_id!r}")
        for n, s in shapes.items():
            if s != ref[n]:
                raise ShapeError(f"{b.adapter_id}:{n} has shape {s}, expected {ref[n]}")
    return ref
