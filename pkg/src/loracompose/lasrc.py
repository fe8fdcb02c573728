"""Block-wise residual composition around the linear merge anchor.

Per block, the weighted block vectors are residualized by modified Gram-Schmidt
in descending ``|w| * ||d||`` order, the residual sum is rescaled to the norm
of the linear anchor, and the block output interpolates between the two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor_store import (
    AdapterBundle,
    BlockMap,
    TensorBlob,
    block_vector,
    build_block_map,
    check_block_map,
    check_pool,
    split_block,
)
from .weight_search import as_weight_dict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LasrcConfig:
    gamma_base: float = 0.5
    gamma_floor: float = 0.05
    norm_guard: float = 0.3
    prune_threshold: float = 0.0
    consensus_scale: float = 1.0
    alignment_scale: float = 0.0
    overlap_adaptive: bool = True
    # residual/input norm ratios at or below this are numerically zero
    residual_tol: float = 1e-10
    reorthogonalize: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma_floor <= self.gamma_base <= 1.0:
            raise ValueError(
                f"need 0 <= gamma_floor <= gamma_base <= 1, got floor={self.gamma_floor} base={self.gamma_base}"
            )
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ValueError(f"prune_threshold must lie in [0, 1), got {self.prune_threshold}")
        if not 0.0 <= self.norm_guard <= 1.0:
            raise ValueError(f"norm_guard must lie in [0, 1], got {self.norm_guard}")
        if self.residual_tol < 0:
            raise ValueError("residual_tol must be non-negative")

    @property
    def experimental(self) -> bool:
        return self.consensus_scale != 1.0 or self.alignment_scale != 0.0


@dataclass
class BlockComposition:
    block_id: str
    linear_anchor: np.ndarray
    residual_sum: np.ndarray
    gamma_b: float
    retained_ids: list[str]
    pruned_ids: list[str]
    order: list[str] = field(default_factory=list)
    overlap: float = 0.0
    rescaled_norm: float | None = None
    guard_fired: bool = False
    interpolated: bool = False
    basis: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    warning: str | None = None

    @property
    def anchor_norm(self) -> float:
        return float(np.linalg.norm(self.linear_anchor))

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residual_sum))

    def orthonormality_error(self) -> float:
        """Max deviation of the retained basis Gram matrix from the identity."""
        if self.basis.shape[0] == 0:
            return 0.0
        gram = self.basis @ self.basis.T
        return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))

    def to_record(self) -> dict:
        return {
            "block_id": self.block_id,
            "anchor_norm": self.anchor_norm,
            "residual_norm": self.residual_norm,
            "rescaled_norm": self.rescaled_norm,
            "gamma_b": self.gamma_b,
            "overlap": self.overlap,
            "order": self.order,
            "retained_ids": self.retained_ids,
            "pruned_ids": self.pruned_ids,
            "guard_fired": self.guard_fired,
            "interpolated": self.interpolated,
            "warning": self.warning,
        }


def gamma_schedule(weighted_energy: float, residual_energy: float, cfg: LasrcConfig) -> tuple[float, float]:
    """Return ``(gamma_b, overlap)``.

    ``overlap = clamp(1 - residual_energy / weighted_energy, 0, 1)`` is the share
    of weighted energy removed by residualization; gamma grows with it and never
    drops below the floor.
    """
    if weighted_energy > 0.0:
        overlap = min(1.0, max(0.0, 1.0 - residual_energy / weighted_energy))
    else:
        overlap = 0.0
    if not cfg.overlap_adaptive:
        return cfg.gamma_base, overlap
    return max(cfg.gamma_floor, cfg.gamma_base * overlap), overlap


def _mean_pairwise_cosine(vectors: Sequence[np.ndarray]) -> float:
    vals = []
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            ni, nj = np.linalg.norm(vectors[i]), np.linalg.norm(vectors[j])
            if ni > 0 and nj > 0:
                vals.append(float(vectors[i] @ vectors[j]) / (ni * nj))
    return float(np.mean(vals)) if vals else 0.0


def compose_block(
    block_id: str,
    vectors: dict[str, np.ndarray],
    weights: dict[str, float],
    cfg: LasrcConfig,
) -> tuple[np.ndarray, BlockComposition]:
    """Compose one block from raw block vectors ``d_i`` (float64)."""
    length = next(iter(vectors.values())).size if vectors else 0
    active = [a for a in vectors if weights[a] != 0.0]
    if not active:
        msg = f"block {block_id}: no adapter with nonzero weight; emitting zero block"
        log.warning(msg)
        zero = np.zeros(length)
        return zero, BlockComposition(block_id, zero, zero.copy(), 0.0, [], [], warning=msg)

    z = {a: weights[a] * vectors[a] for a in active}
    znorm = {a: float(np.linalg.norm(z[a])) for a in active}
    order = sorted(active, key=lambda a: (-znorm[a], a))
    cut = max(cfg.prune_threshold, cfg.residual_tol)

    basis: list[np.ndarray] = []
    residuals: list[np.ndarray] = []
    retained, pruned = [], []
    weighted_energy = residual_energy = 0.0
    for a in order:
        r = z[a].copy()
        for _ in range(2 if cfg.reorthogonalize else 1):
            for q in basis:
                r -= (r @ q) * q
        rn = float(np.linalg.norm(r))
        weighted_energy += znorm[a] ** 2
        if znorm[a] == 0.0 or rn == 0.0 or rn / znorm[a] <= cut:
            pruned.append(a)
            continue
        basis.append(r / rn)
        residuals.append(r)
        retained.append(a)
        residual_energy += rn**2

    anchor = np.zeros(length)
    for a in order:
        anchor += z[a]
    rsum = np.zeros(length)
    for r in residuals:
        rsum += r

    gamma, overlap = gamma_schedule(weighted_energy, residual_energy, cfg)
    comp = BlockComposition(
        block_id, anchor, rsum, gamma, retained, pruned, order=order, overlap=overlap,
        basis=np.array(basis) if basis else np.zeros((0, length)),
    )
    an, rn = comp.anchor_norm, comp.residual_norm
    out = anchor.copy()
    if an > 0.0 and rn > 0.0:
        rescaled = rsum * (an / rn)
        comp.rescaled_norm = float(np.linalg.norm(rescaled))
        if rn < cfg.norm_guard * an:
            comp.guard_fired = True
        else:
            out = (1.0 - gamma) * anchor + gamma * rescaled
            comp.interpolated = True
    if cfg.alignment_scale != 0.0:
        out = out + cfg.alignment_scale * _mean_pairwise_cosine([z[a] for a in order]) * anchor
    if cfg.consensus_scale != 1.0:
        out = cfg.consensus_scale * out
    return out, comp


def lasrc_merge(
    bundles: Sequence[AdapterBundle],
    weights,
    blocks: BlockMap | None = None,
    cfg: LasrcConfig | None = None,
    adapter_id: str = "merged",
) -> tuple[AdapterBundle, list[BlockComposition]]:
    cfg = cfg or LasrcConfig()
    w = as_weight_dict(weights)
    shapes = check_pool(bundles)
    missing = [b.adapter_id for b in bundles if b.adapter_id not in w]
    if missing:
        raise KeyError(f"no weight for adapters {missing}")
    blocks = blocks if blocks is not None else build_block_map(shapes)
    check_block_map(blocks, shapes)

    arrays: dict[str, np.ndarray] = {}
    comps = []
    for block_id, names in blocks.items():
        vectors = {b.adapter_id: block_vector(b, names).astype(np.float64) for b in bundles}
        out, comp = compose_block(block_id, vectors, w, cfg)
        comps.append(comp)
        arrays.update(split_block(out, names, shapes))
    merged = AdapterBundle(
        adapter_id,
        {n: TensorBlob.from_array(n, arrays[n]) for n in sorted(arrays)},
        {n: 1.0 for n in arrays},
    )
    return merged, comps


def max_orthonormality_error(comps: Sequence[BlockComposition]) -> float:
    return max((c.orthonormality_error() for c in comps), default=0.0)


def rescale_error(comp: BlockComposition) -> float | None:
    """Relative gap between the rescaled residual norm and the anchor norm."""
    if comp.rescaled_norm is None:
        return None
    return abs(comp.rescaled_norm - comp.anchor_norm) / comp.anchor_norm
