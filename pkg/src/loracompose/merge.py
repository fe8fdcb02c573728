"""Weighted composition of adapter bundles: linear, TIES, DARE and the dispatcher.

All operators sum in float64 over a canonical adapter order so that results do
not depend on the order in which bundles are passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from .lasrc import BlockComposition, LasrcConfig, lasrc_merge
from .sdp import SdpConfig, sdp_bundle
from .tensor_store import AdapterBundle, BlockMap, TensorBlob, check_pool
from .weight_search import as_weight_dict

OPERATORS = ("linear", "lasrc", "ties", "dare_add", "dare_ties")


def _prepare(bundles: Sequence[AdapterBundle], weights) -> tuple[list[AdapterBundle], dict[str, float], dict]:
    w = as_weight_dict(weights)
    shapes = check_pool(bundles)
    missing = [b.adapter_id for b in bundles if b.adapter_id not in w]
    if missing:
        raise KeyError(f"no weight for adapters {missing}")
    return list(bundles), w, shapes


def canonical_order(bundles: Sequence[AdapterBundle], weights: Mapping[str, float]) -> list[AdapterBundle]:
    """Descending ``|w_i| * ||bundle_i||``, ties by adapter id."""
    return sorted(bundles, key=lambda b: (-abs(weights[b.adapter_id]) * b.norm(), b.adapter_id))


def _assemble(adapter_id: str, arrays: Mapping[str, np.ndarray]) -> AdapterBundle:
    return AdapterBundle(
        adapter_id,
        {n: TensorBlob.from_array(n, arrays[n]) for n in sorted(arrays)},
        {n: 1.0 for n in arrays},
    )


def linear_merge(bundles: Sequence[AdapterBundle], weights, adapter_id: str = "merged") -> AdapterBundle:
    bundles, w, shapes = _prepare(bundles, weights)
    order = canonical_order(bundles, w)
    out = {}
    for name in sorted(shapes):
        acc = np.zeros(shapes[name], dtype=np.float64)
        for b in order:
            acc += w[b.adapter_id] * b.array(name).astype(np.float64)
        out[name] = acc
    return _assemble(adapter_id, out)


def _flat(bundle: AdapterBundle, names: Sequence[str]) -> np.ndarray:
    return np.concatenate([bundle.tensors[n].data.astype(np.float64) for n in names])


def ties_merge(
    bundles: Sequence[AdapterBundle],
    weights,
    trim_fraction: float = 0.2,
    tie_sign: int = 1,
    adapter_id: str = "merged",
) -> AdapterBundle:
    """Trim each weighted adapter to its largest entries, elect signs, take the disjoint mean."""
    if not 0.0 < trim_fraction <= 1.0:
        raise ValueError(f"trim_fraction must lie in (0, 1], got {trim_fraction}")
    if tie_sign not in (1, -1):
        raise ValueError("tie_sign must be +1 or -1")
    bundles, w, shapes = _prepare(bundles, weights)
    names = sorted(shapes)
    order = canonical_order(bundles, w)
    trimmed = []
    for b in order:
        tau = w[b.adapter_id] * _flat(b, names)
        k = min(tau.size, max(1, math.ceil(trim_fraction * tau.size - 1e-9)))
        keep = np.argsort(-np.abs(tau), kind="stable")[:k]
        t = np.zeros_like(tau)
        t[keep] = tau[keep]
        trimmed.append(t)
    stacked = np.stack(trimmed)
    total = np.zeros(stacked.shape[1])
    for t in trimmed:
        total += t
    elected = np.where(total > 0, 1.0, np.where(total < 0, -1.0, float(tie_sign)))
    agree = (stacked != 0) & (np.sign(stacked) == elected)
    counts = agree.sum(axis=0)
    summed = np.zeros(stacked.shape[1])
    for t, a in zip(trimmed, agree):
        summed += np.where(a, t, 0.0)
    merged = np.divide(summed, counts, out=np.zeros_like(summed), where=counts > 0)
    out, pos = {}, 0
    for n in names:
        size = math.prod(shapes[n])
        out[n] = merged[pos:pos + size].reshape(shapes[n])
        pos += size
    return _assemble(adapter_id, out)


def dare_merge(
    bundles: Sequence[AdapterBundle],
    weights,
    drop_rate: float = 0.5,
    seed: int = 42,
    with_ties: bool = False,
    trim_fraction: float = 0.2,
    adapter_id: str = "merged",
) -> AdapterBundle:
    """Drop-and-rescale every adapter, then merge linearly or with TIES."""
    cfg = SdpConfig(drop_rate=drop_rate, seed=seed, survivor_rescale=True, norm_preserve=False)
    dropped = [sdp_bundle(b, cfg)[0] for b in bundles]
    if with_ties:
        return ties_merge(dropped, weights, trim_fraction, adapter_id=adapter_id)
    return linear_merge(dropped, weights, adapter_id=adapter_id)


@dataclass
class MergeConfig:
    operator: str = "lasrc"
    lasrc: LasrcConfig = field(default_factory=LasrcConfig)
    trim_fraction: float = 0.2
    drop_rate: float = 0.5
    seed: int = 42

    def __post_init__(self) -> None:
        self.operator = self.operator.replace("-", "_")
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown merge operator {self.operator!r}; choose from {OPERATORS}")
        if isinstance(self.lasrc, Mapping):
            self.lasrc = LasrcConfig(**self.lasrc)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> MergeConfig:
        data = dict(data)
        if "method" in data and "operator" not in data:
            data["operator"] = data.pop("method")
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def merge(
    bundles: Sequence[AdapterBundle],
    weights,
    cfg: MergeConfig,
    blocks: BlockMap | None = None,
    adapter_id: str = "merged",
) -> tuple[AdapterBundle, list[BlockComposition]]:
    """Run the configured operator; block diagnostics are only produced by LASRC."""
    op = cfg.operator
    if op == "linear":
        return linear_merge(bundles, weights, adapter_id), []
    if op == "lasrc":
        return lasrc_merge(bundles, weights, blocks, cfg.lasrc, adapter_id)
    if op == "ties":
        return ties_merge(bundles, weights, cfg.trim_fraction, adapter_id=adapter_id), []
    return dare_merge(
        bundles, weights, cfg.drop_rate, cfg.seed, with_ties=(op == "dare_ties"),
        trim_fraction=cfg.trim_fraction, adapter_id=adapter_id,
    ), []
