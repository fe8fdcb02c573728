"""Toy adapter pools and affine toy tasks with exactly computable support loss.

The toy backbone is an affine map ``x -> W0 x``; a composed bundle adds the
row-stack of its tensors (canonical name order) as an update matrix. Answers
are class labels ``str(argmax(y))`` so exact match applies unchanged.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .lasrc import LasrcConfig, lasrc_merge
from .merge import linear_merge
from .retrieval import AdapterEntry, PoolManifest, build_support, save_manifest
from .tensor_store import AdapterBundle, LowRankPair, TensorBlob, materialize, save_bundle

OVERLAP_MODES = ("orthogonal", "duplicated", "mixed")


class SpecError(ValueError):
    """A toy pool specification cannot be realised."""


@dataclass(frozen=True)
class ToyPoolSpec:
    n_adapters: int = 8
    rank: int = 2
    overlap_mode: str = "mixed"
    angle_deg: float = 60.0
    noise_level: float = 0.0
    seed: int = 0
    n_blocks: int = 2
    tensors_per_block: tuple[str, ...] = ("attn", "mlp")
    rows: int = 3
    d_in: int = 6
    n_tasks: int = 4
    n_views: int = 3
    emb_dim: int = 16
    n_examples: int = 20
    n_queries: int = 12
    K: int = 5
    offset: int = 10

    def __post_init__(self) -> None:
        if self.overlap_mode not in OVERLAP_MODES:
            raise SpecError(f"overlap_mode must be one of {OVERLAP_MODES}")
        if self.n_adapters < 1 or self.rank < 1 or self.n_blocks < 1:
            raise SpecError("n_adapters, rank and n_blocks must be positive")
        if self.rank > min(self.d_in, self.rows * len(self.tensors_per_block)):
            raise SpecError(f"rank {self.rank} exceeds block dimensions")
        if self.n_examples < self.offset + self.K:
            raise SpecError("n_examples must cover offset + K")

    @classmethod
    def from_kv(cls, text: str) -> ToyPoolSpec:
        """Parse ``"seed=7,n_adapters=10,overlap_mode=orthogonal"``."""
        kwargs = {}
        fields = cls.__dataclass_fields__
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            key = key.strip()
            if key not in fields:
                raise SpecError(f"unknown toy parameter {key!r}")
            default = fields[key].default
            if isinstance(default, bool):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(val)
            elif isinstance(default, float):
                kwargs[key] = float(val)
            elif isinstance(default, tuple):
                kwargs[key] = tuple(val.split("+"))
            else:
                kwargs[key] = val
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tensor_names(self) -> list[str]:
        return sorted(f"block{b}.{t}" for b in range(self.n_blocks) for t in self.tensors_per_block)

    @property
    def d_out(self) -> int:
        return self.rows * self.n_blocks * len(self.tensors_per_block)


@dataclass
class ToyTask:
    task_id: str
    base: np.ndarray  # W0, d_out x d_in
    target: np.ndarray  # W*, the update that fits the task exactly
    examples: list[dict]
    queries: list[dict]
    K: int = 5
    offset: int = 10
    names: list[str] = field(default_factory=list)

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        s = build_support(self.examples, self.K, self.offset, self.task_id)
        ids = set(s.example_ids)
        chosen = [e for e in self.examples if e["example_id"] in ids]
        return np.array([e["x"] for e in chosen]), np.array([e["y"] for e in chosen])

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "examples": self.examples,
            "queries": self.queries,
            "toy": {"base": self.base.tolist(), "target": self.target.tolist(), "K": self.K,
                    "offset": self.offset, "names": self.names},
        }

    @classmethod
    def from_json(cls, data: dict) -> ToyTask:
        toy = data["toy"]
        return cls(
            data["task_id"], np.array(toy["base"]), np.array(toy["target"]), data["examples"],
            data["queries"], toy["K"], toy["offset"], list(toy["names"]),
        )


def update_matrix(bundle: AdapterBundle, names: Sequence[str] | None = None) -> np.ndarray:
    """Row-stack of the bundle's tensors in canonical (sorted) name order."""
    names = sorted(bundle.tensors) if names is None else names
    return np.vstack([bundle.array(n).astype(np.float64) for n in names])


def toy_support_loss(task: ToyTask, composed: AdapterBundle) -> float:
    """Mean squared error of ``(W0 + dW) x`` against the support targets."""
    x, y = task.support()
    dw = update_matrix(composed, task.names or None)
    if dw.shape != task.base.shape:
        raise ValueError(f"composed update {dw.shape} does not match toy backbone {task.base.shape}")
    err = x @ (task.base + dw).T - y
    return float(np.mean(np.sum(err**2, axis=1)))


def toy_predict(task: ToyTask, composed: AdapterBundle | None, xs: np.ndarray) -> list[str]:
    w = task.base.copy()
    if composed is not None:
        w = w + update_matrix(composed, task.names or None)
    return [str(int(i)) for i in np.argmax(xs @ w.T, axis=1)]


def _gram(spec: ToyPoolSpec) -> np.ndarray:
    n = spec.n_adapters
    if spec.overlap_mode == "orthogonal":
        return np.eye(n)
    if spec.overlap_mode == "duplicated":
        return np.ones((n, n))
    rho = math.cos(math.radians(spec.angle_deg))
    if n > 1 and rho < -1.0 / (n - 1) - 1e-12:
        raise SpecError(f"{n} vectors cannot share pairwise angle {spec.angle_deg} degrees")
    return (1 - rho) * np.eye(n) + rho * np.ones((n, n))


def _gram_factor(g: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(g)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _orthonormal(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, k)))
    return q * np.sign(np.diag(r))


def gen_adapters(spec: ToyPoolSpec, rng: np.random.Generator) -> list[AdapterBundle]:
    """Rank-``spec.rank`` adapters whose block vectors have the requested Gram matrix."""
    n, r, nt = spec.n_adapters, spec.rank, len(spec.tensors_per_block)
    b_dim = nt * spec.rows * r
    if spec.overlap_mode != "duplicated" and n > b_dim:
        raise SpecError(f"{n} adapters need {n} orthogonal directions but blocks only offer {b_dim}")
    L = np.eye(n) if spec.overlap_mode == "orthogonal" else _gram_factor(_gram(spec))
    pairs: list[dict[str, LowRankPair]] = [{} for _ in range(n)]
    for b in range(spec.n_blocks):
        a = _orthonormal(rng, spec.d_in, r).T  # r x d_in, orthonormal rows
        if spec.overlap_mode == "duplicated":
            basis = _orthonormal(rng, b_dim, 1)
            coords = np.ones((n, 1))
        else:
            basis = _orthonormal(rng, b_dim, n)
            coords = L
        for i in range(n):
            bmat = (basis @ coords[i]).reshape(nt * spec.rows, r)
            for t, tname in enumerate(spec.tensors_per_block):
                name = f"block{b}.{tname}"
                rows = bmat[t * spec.rows:(t + 1) * spec.rows]
                pairs[i][name] = LowRankPair(TensorBlob.from_array(f"{name}.A", a), TensorBlob.from_array(name, rows), 1.0)
    return [materialize(f"adapter{i:02d}", pairs[i]) for i in range(n)]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def gen_toy_pool(spec: ToyPoolSpec) -> tuple[PoolManifest, list[AdapterBundle], list[ToyTask]]:
    rng = np.random.default_rng(spec.seed)
    bundles = gen_adapters(spec, rng)
    names = spec.tensor_names
    flat = {b.adapter_id: update_matrix(b, names).reshape(-1) for b in bundles}
    dim = spec.d_out * spec.d_in
    projections = {f"view{v}": rng.standard_normal((spec.emb_dim, dim)) / math.sqrt(dim) for v in range(spec.n_views)}
    views = {
        vid: {aid: _unit(P @ vec).astype(np.float32) for aid, vec in flat.items()}
        for vid, P in projections.items()
    }
    manifest = PoolManifest(
        [AdapterEntry(b.adapter_id, f"source{i % 3}", f"adapters/{b.adapter_id}.bundle") for i, b in enumerate(bundles)],
        views,
    )
    base = rng.standard_normal((spec.d_out, spec.d_in)) * 0.5
    ids = sorted(flat)
    tasks = []
    for t in range(spec.n_tasks):
        picks = rng.choice(len(ids), size=min(2, len(ids)), replace=False)
        coef = rng.uniform(0.4, 1.0, size=picks.size)
        target = sum(c * flat[ids[p]].reshape(spec.d_out, spec.d_in) for c, p in zip(coef, sorted(picks)))
        target = target + 0.1 * rng.standard_normal(target.shape)
        full = base + target
        tvec = target.reshape(-1)

        def embed() -> dict:
            return {vid: [float(x) for x in _unit(P @ tvec + 0.05 * rng.standard_normal(spec.emb_dim))]
                    for vid, P in projections.items()}

        examples = []
        for j in range(spec.n_examples):
            x = rng.standard_normal(spec.d_in)
            y = full @ x + spec.noise_level * rng.standard_normal(spec.d_out)
            examples.append({
                "example_id": f"task{t}-ex{j:02d}", "input_text": "", "reference_text": str(int(np.argmax(full @ x))),
                "x": x.tolist(), "y": y.tolist(), "embeddings": embed(),
            })
        queries = []
        for j in range(spec.n_queries):
            x = rng.standard_normal(spec.d_in)
            queries.append({
                "query_id": f"q{j:03d}", "input_text": "", "reference_text": str(int(np.argmax(full @ x))),
                "x": x.tolist(), "embeddings": embed(),
            })
        tasks.append(ToyTask(f"task{t}", base, target, examples, queries, spec.K, spec.offset, names))
    return manifest, bundles, tasks


def write_toy_pool(out_dir: str | os.PathLike, manifest: PoolManifest, bundles: Sequence[AdapterBundle], tasks: Sequence[ToyTask], spec: dict | None = None) -> list[Path]:
    """Write manifest.json, adapters/*.bundle and tasks.json; returns written paths."""
    out = Path(out_dir)
    (out / "adapters").mkdir(parents=True, exist_ok=True)
    written = []
    for b in bundles:
        p = out / manifest.entry(b.adapter_id).bundle_path
        save_bundle(b, p)
        written.append(p)
    save_manifest(manifest, out / "manifest.json")
    written.append(out / "manifest.json")
    payload = {"tasks": [t.to_json() for t in tasks]}
    if spec is not None:
        payload["spec"] = spec
    (out / "tasks.json").write_text(json.dumps(payload) + "\n")
    written.append(out / "tasks.json")
    return written


def load_toy_tasks(path: str | os.PathLike) -> list[ToyTask]:
    data = json.loads(Path(path).read_text())
    return [ToyTask.from_json(t) for t in data["tasks"]]


# -- interference scenario --------------------------------------------------


def interference_scenario(seed: int, kind: str = "conflict", cfg: LasrcConfig | None = None) -> dict:
    """Two adapters, fixed unit weights, linear vs residual merge on one toy task.

    ``conflict``: both adapters are ``3D + R_i`` with a shared dominant
    direction ``D`` and orthogonal residual directions; the target is
    ``3D + R_1 + R_2``, so linear merging double-counts ``D``.
    ``orthogonal``: adapters are ``R_1`` and ``R_2``.
    ``duplicated``: both adapters are ``3D``.
    Support inputs are the standard basis, so the loss is ``||error||_F^2 / d_in``.
    """
    rng = np.random.default_rng(seed)
    rows, d_in, n_blocks = 4, 6, 2
    names = [f"block{b}.proj" for b in range(n_blocks)]
    a0, a1, target = {}, {}, []
    for name in names:
        q = _orthonormal(rng, rows * d_in, 3)
        d, r1, r2 = (3.0 * q[:, 0]).reshape(rows, d_in), q[:, 1].reshape(rows, d_in), q[:, 2].reshape(rows, d_in)
        if kind == "conflict":
            a0[name], a1[name], tgt = d + r1, d + r2, d + r1 + r2
        elif kind == "orthogonal":
            a0[name], a1[name], tgt = r1, 2.0 * r2, r1 + r2
        elif kind == "duplicated":
            a0[name], a1[name], tgt = d, d.copy(), d
        else:
            raise ValueError(f"unknown scenario kind {kind!r}")
        target.append(tgt)
    bundles = [AdapterBundle.from_arrays("adapter00", a0), AdapterBundle.from_arrays("adapter01", a1)]
    weights = {"adapter00": 1.0, "adapter01": 1.0}
    base = rng.standard_normal((rows * n_blocks, d_in)) * 0.5
    tgt = np.vstack(target)
    eye = np.eye(d_in)
    examples = [
        {"example_id": f"ex{j:02d}", "x": eye[j % d_in].tolist(), "y": ((base + tgt) @ eye[j % d_in]).tolist()}
        for j in range(d_in)
    ]
    task = ToyTask(f"scenario-{kind}", base, tgt, examples, [], K=d_in, offset=0, names=names)
    lin = linear_merge(bundles, weights)
    las, comps = lasrc_merge(bundles, weights, cfg=cfg)
    return {
        "kind": kind,
        "seed": seed,
        "weights": weights,
        "bundles": bundles,
        "task": task,
        "linear": lin,
        "lasrc": las,
        "compositions": comps,
        "linear_loss": toy_support_loss(task, lin),
        "lasrc_loss": toy_support_loss(task, las),
    }
