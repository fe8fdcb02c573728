"""Pool manifest, deterministic support selection and cosine retrieval per view."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tensor_store import AdapterBundle, ShapeError, decode_container, encode_container, load_bundle

DEFAULT_K = 5
DEFAULT_OFFSET = 10
DEFAULT_GLOBAL_K = 20
DEFAULT_LOCAL_K = 20


@dataclass(frozen=True)
class AdapterEntry:
    adapter_id: str
    source_task: str
    bundle_path: str


@dataclass
class PoolManifest:
    adapters: list[AdapterEntry]
    view_indexes: dict[str, dict[str, np.ndarray]]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        ids = [a.adapter_id for a in self.adapters]
        if len(set(ids)) != len(ids):
            raise ValueError("adapter ids in the manifest are not unique")
        for view, index in self.view_indexes.items():
            dims = {v.shape for v in index.values()}
            if len(dims) > 1:
                raise ShapeError(f"view {view!r}: embeddings have differing shapes {sorted(dims)}")
            for aid, v in index.items():
                if v.ndim != 1 or not np.all(np.isfinite(v)):
                    raise ValueError(f"view {view!r}: embedding for {aid!r} must be a finite 1-D vector")

    @property
    def adapter_ids(self) -> list[str]:
        return [a.adapter_id for a in self.adapters]

    @property
    def views(self) -> list[str]:
        return list(self.view_indexes)

    def entry(self, adapter_id: str) -> AdapterEntry:
        for a in self.adapters:
            if a.adapter_id == adapter_id:
                return a
        raise KeyError(f"unknown adapter {adapter_id!r}")

    def bundle_path(self, adapter_id: str) -> Path:
        p = Path(self.entry(adapter_id).bundle_path)
        return p if p.is_absolute() else self.root / p

    def load_bundles(self, adapter_ids: Sequence[str] | None = None) -> list[AdapterBundle]:
        ids = self.adapter_ids if adapter_ids is None else list(adapter_ids)
        return [load_bundle(self.bundle_path(a)) for a in ids]


def load_manifest(path: str | os.PathLike) -> PoolManifest:
    """Read a manifest; embeddings are inline lists or a sidecar container file.

    ``{"adapters": [{"adapter_id", "source_task", "bundle_path"}],
       "views": {view_id: {"embeddings": {adapter_id: [...]}} | {"sidecar": "file"}}}``
    """
    path = Path(path)
    data = json.loads(path.read_text())
    root = path.parent
    adapters = [
        AdapterEntry(str(a["adapter_id"]), str(a.get("source_task", "")), str(a.get("bundle_path", "")))
        for a in data.get("adapters", [])
    ]
    views: dict[str, dict[str, np.ndarray]] = {}
    for view_id, spec in data.get("views", {}).items():
        if "sidecar" in spec:
            views[view_id] = read_embedding_sidecar(root / spec["sidecar"])
        else:
            views[view_id] = {k: np.asarray(v, dtype=np.float32) for k, v in spec["embeddings"].items()}
    return PoolManifest(adapters, views, root)


def save_manifest(manifest: PoolManifest, path: str | os.PathLike, sidecar: bool = False) -> None:
    path = Path(path)
    views = {}
    for view_id, index in manifest.view_indexes.items():
        if sidecar:
            name = f"{path.stem}.{view_id}.emb"
            write_embedding_sidecar(index, path.parent / name)
            views[view_id] = {"sidecar": name}
        else:
            views[view_id] = {"embeddings": {k: [float(x) for x in v] for k, v in index.items()}}
    data = {
        "adapters": [
            {"adapter_id": a.adapter_id, "source_task": a.source_task, "bundle_path": a.bundle_path}
            for a in manifest.adapters
        ],
        "views": views,
    }
    path.write_text(json.dumps(data, indent=1) + "\n")


def write_embedding_sidecar(index: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    entries = [
        (k, tuple(v.shape), "f32", np.asarray(v, dtype="<f4").tobytes()) for k, v in index.items()
    ]
    Path(path).write_bytes(encode_container(entries))


def read_embedding_sidecar(path: str | os.PathLike) -> dict[str, np.ndarray]:
    _, entries = decode_container(Path(path).read_bytes())
    return {k: np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"]) for k, (e, raw) in entries.items()}


# -- support / queries -------------------------------------------------------


@dataclass
class SupportSet:
    task_id: str
    examples: list[dict]
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)  # view -> (K, dim)

    def __post_init__(self) -> None:
        ids = [e["example_id"] for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError(f"task {self.task_id}: duplicate support example ids")

    @property
    def K(self) -> int:
        return len(self.examples)

    @property
    def example_ids(self) -> list[str]:
        return [e["example_id"] for e in self.examples]

    def centroid(self, view_id: str) -> np.ndarray:
        if view_id not in self.embeddings:
            raise KeyError(f"support set of task {self.task_id!r} has no embeddings for view {view_id!r}")
        return np.asarray(self.embeddings[view_id], dtype=np.float64).mean(axis=0)


@dataclass
class QueryRecord:
    task_id: str
    query_id: str
    input_text: str
    reference_text: str | None = None
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)


def build_support(task_examples: Sequence[Mapping], K: int = DEFAULT_K, offset: int = DEFAULT_OFFSET, task_id: str = "") -> SupportSet:
    """Take examples ``[offset, offset + K)``; example embeddings are carried along per view."""
    if K < 0 or offset < 0:
        raise ValueError("K and offset must be non-negative")
    if len(task_examples) < offset + K:
        raise IndexError(f"task {task_id!r}: need {offset + K} examples, have {len(task_examples)}")
    chosen = [dict(e) for e in task_examples[offset:offset + K]]
    embeddings: dict[str, np.ndarray] = {}
    if chosen and all("embeddings" in e for e in chosen):
        views = set.intersection(*(set(e["embeddings"]) for e in chosen))
        for v in sorted(views):
            embeddings[v] = np.array([e["embeddings"][v] for e in chosen], dtype=np.float32)
    examples = [{k: e[k] for k in ("example_id", "input_text", "reference_text") if k in e} for e in chosen]
    return SupportSet(task_id, examples, embeddings)


def cosine_topk(query: np.ndarray, index: Mapping[str, np.ndarray], k: int) -> list[tuple[str, float]]:
    """Top-``k`` ``(adapter_id, similarity)`` pairs; ties by id, zero vectors score -inf."""
    if k < 0 or k > len(index):
        raise ValueError(f"k={k} outside [0, {len(index)}]")
    q = np.asarray(query, dtype=np.float64)
    qn = float(np.linalg.norm(q))
    scored = []
    for aid, v in index.items():
        v = np.asarray(v, dtype=np.float64)
        if v.shape != q.shape:
            raise ShapeError(f"query dimension {q.shape} != embedding dimension {v.shape} for {aid!r}")
        vn = float(np.linalg.norm(v))
        sim = float(q @ v) / (qn * vn) if qn > 0 and vn > 0 else -np.inf
        scored.append((aid, sim))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def retrieve_view(
    manifest: PoolManifest,
    support: SupportSet,
    view_id: str,
    global_k: int = DEFAULT_GLOBAL_K,
    local_k: int = DEFAULT_LOCAL_K,
    query: QueryRecord | None = None,
) -> list[str]:
    """Union of global (support centroid) and local (query) candidates, global first."""
    if view_id not in manifest.view_indexes:
        raise LookupError(f"unknown view {view_id!r}; manifest has {manifest.views}")
    index = manifest.view_indexes[view_id]
    n = len(index)
    centroid = support.centroid(view_id)
    if query is not None and view_id in query.embeddings:
        local_vec = np.asarray(query.embeddings[view_id], dtype=np.float64)
    else:
        local_vec = centroid
    out: list[str] = []
    for aid, _ in cosine_topk(centroid, index, min(global_k, n)) + cosine_topk(local_vec, index, min(local_k, n)):
        if aid not in out:
            out.append(aid)
    return out


def load_tasks(path: str | os.PathLike) -> dict[str, dict]:
    """Task file: ``{"tasks": [{"task_id", "examples": [...], "queries": [...]}]}``."""
    data = json.loads(Path(path).read_text())
    return {t["task_id"]: t for t in data["tasks"]}


def queries_of(task: Mapping) -> list[QueryRecord]:
    out = []
    seen = set()
    for q in task.get("queries", []):
        qid = str(q["query_id"])
        if qid in seen:
            raise ValueError(f"task {task['task_id']}: duplicate query id {qid!r}")
        seen.add(qid)
        out.append(
            QueryRecord(
                task["task_id"], qid, q.get("input_text", ""), q.get("reference_text"),
                {v: np.asarray(e, dtype=np.float32) for v, e in q.get("embeddings", {}).items()},
            )
        )
    return out
