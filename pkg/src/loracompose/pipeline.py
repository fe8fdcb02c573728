"""End-to-end runs: retrieve, search weights, SDP, merge, aggregate, evaluate, audit."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .aggregate import aggregate_records, group_views, references_of, view_em
from .evaluation import audit, exact_match, write_jsonl
from .lasrc import BlockComposition, max_orthonormality_error
from .merge import MergeConfig, linear_merge, merge
from .report import plot_block_gammas, plot_view_em, write_audit, write_tsv
from .retrieval import PoolManifest, build_support, retrieve_view
from .sdp import SdpConfig, sdp_bundle
from .synthetic import ToyTask, toy_predict, toy_support_loss
from .tensor_store import AdapterBundle
from .weight_search import DEFAULT_CLIP, DEFAULT_LAMBDA, DEFAULT_STEPS, search_weights

ORTHONORMALITY_TOL = 1e-5


class InvariantError(RuntimeError):
    """A structural check on composed outputs failed."""


@dataclass
class PipelineConfig:
    merge: MergeConfig = field(default_factory=MergeConfig)
    p: float = 0.5
    seeds: list[int] = field(default_factory=lambda: [42])
    views: list[str] | None = None
    mode: str = "support"
    K: int = 5
    offset: int = 10
    global_k: int = 3
    local_k: int = 2
    steps: int = DEFAULT_STEPS
    lam: float = DEFAULT_LAMBDA
    clip: tuple[float, float] = DEFAULT_CLIP
    permutations: int = 20_000
    bootstrap: int = 10_000
    audit_seed: int = 0
    figures: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = list(self.clip)
        return d


def search_seed(seed: int, *parts: str) -> int:
    return (seed * 1_000_003 + zlib.crc32("/".join(parts).encode("utf-8"))) % (2**32)


def check_compositions(comps: Sequence[BlockComposition], where: str) -> None:
    err = max_orthonormality_error(comps)
    if err > ORTHONORMALITY_TOL:
        raise InvariantError(f"{where}: residual basis orthonormality error {err:.3g} exceeds {ORTHONORMALITY_TOL}")


def compose_view(
    task: ToyTask,
    candidates: Sequence[AdapterBundle],
    cfg: PipelineConfig,
    merge_cfg: MergeConfig,
    seed: int,
    view_id: str,
) -> tuple[AdapterBundle, dict[str, float], list[BlockComposition]]:
    """Search weights with a linear-merge support loss, then compose with the chosen operator."""
    ids = [b.adapter_id for b in candidates]

    def evaluator(w: np.ndarray) -> float:
        return toy_support_loss(task, linear_merge(candidates, dict(zip(ids, w))))

    wv = search_weights(evaluator, len(ids), cfg.steps, search_seed(seed, task.task_id, view_id), cfg.lam, cfg.clip, ids)
    composed, comps = merge(candidates, wv.weights, merge_cfg, adapter_id=f"{task.task_id}:{view_id}")
    check_compositions(comps, f"{task.task_id}/{view_id}")
    return composed, wv.weights, comps


def run_toy_pipeline(
    manifest: PoolManifest,
    bundles: Mapping[str, AdapterBundle],
    tasks: Sequence[ToyTask],
    cfg: PipelineConfig,
    out_dir: str | Path,
) -> dict:
    """Run every stage on a toy pool and write all artifacts under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = cfg.views or manifest.views
    support_examples = {t.task_id: t.examples for t in tasks}

    # single-view dense linear reference path (first view)
    baseline, retrieval_log, weight_log = [], [], []
    base_cfg = MergeConfig(operator="linear")
    for task in tasks:
        support = build_support(support_examples[task.task_id], cfg.K, cfg.offset, task.task_id)
        cands = retrieve_view(manifest, support, views[0], cfg.global_k, cfg.local_k)
        composed, weights, _ = compose_view(task, [bundles[a] for a in cands], cfg, base_cfg, 0, views[0])
        xs = np.array([q["x"] for q in task.queries])
        for q, pred in zip(task.queries, toy_predict(task, composed, xs)):
            baseline.append({"task_id": task.task_id, "query_id": q["query_id"], "prediction": pred, "reference": q["reference_text"]})
    write_jsonl(baseline, out / "baseline_predictions.jsonl")

    summary_rows = []
    result: dict = {"seeds": {}}
    for seed in cfg.seeds:
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        records, comp_log = [], []
        comps_by_path: dict[str, list[BlockComposition]] = {}
        sdp_cfg = SdpConfig(cfg.p, seed) if cfg.p > 0 else None
        merge_cfg = MergeConfig(**{**cfg.merge.__dict__, "seed": seed})
        for task in tasks:
            support = build_support(support_examples[task.task_id], cfg.K, cfg.offset, task.task_id)
            xs = np.array([q["x"] for q in task.queries])
            for view in views:
                cands = retrieve_view(manifest, support, view, cfg.global_k, cfg.local_k)
                retrieval_log.append({"seed": seed, "task_id": task.task_id, "view_id": view,
                                      "support_ids": support.example_ids, "candidates": cands})
                pool = [bundles[a] for a in cands]
                if sdp_cfg is not None:
                    pool = [sdp_bundle(b, sdp_cfg)[0] for b in pool]
                composed, weights, comps = compose_view(task, pool, cfg, merge_cfg, seed, view)
                weight_log.append({"seed": seed, "task_id": task.task_id, "view_id": view, "weights": weights})
                if comps:
                    comps_by_path[f"{task.task_id}/{view}"] = comps
                    comp_log.extend({"task_id": task.task_id, "view_id": view, **c.to_record()} for c in comps)
                loss = toy_support_loss(task, composed)
                for q, pred in zip(task.queries, toy_predict(task, composed, xs)):
                    records.append({
                        "task_id": task.task_id, "view_id": view, "query_id": q["query_id"],
                        "raw_prediction": pred, "support_loss": loss, "reference": q["reference_text"],
                    })
        write_jsonl(records, sdir / "predictions.jsonl")
        if comp_log:
            write_jsonl(comp_log, sdir / "compositions.jsonl")
        agg = aggregate_stage(records, cfg.mode, views, sdir, baseline, cfg)
        if cfg.figures and comps_by_path:
            (sdir / "figures").mkdir(exist_ok=True)
            plot_block_gammas(comps_by_path, sdir / "figures" / "block_gamma.png")
        summary_rows.append((seed, agg["em"].macro, agg["report"].delta_macro, agg["report"].p_value))
        result["seeds"][seed] = agg
    write_jsonl(retrieval_log, out / "retrieval.jsonl")
    write_jsonl(weight_log, out / "weights.jsonl")
    write_tsv(out / "summary.tsv", ["seed", "macro_em", "delta_vs_baseline", "p_value"], summary_rows)
    return result


def aggregate_stage(
    records: Sequence[Mapping],
    mode: str,
    views: Sequence[str] | None,
    out: Path,
    baseline: Sequence[Mapping] | None,
    cfg: PipelineConfig,
) -> dict:
    """Aggregate view predictions, score them, and audit against ``baseline`` when given."""
    decisions = aggregate_records(records, mode, views)
    write_jsonl(decisions, out / "decisions.jsonl")
    final = [
        {"task_id": d["task_id"], "query_id": d["query_id"], "prediction": d["final_answer"], "reference": d["reference"],
         **({"DIAGNOSTIC": True} if d.get("DIAGNOSTIC") else {})}
        for d in decisions
    ]
    write_jsonl(final, out / "final_predictions.jsonl")
    em = exact_match(final)
    grouped = group_views(records, views)
    refs = references_of(records)
    per_view = {t: {v.view_id: view_em(v, refs[t]) for v in vs} for t, vs in grouped.items() if t in refs}
    paths = len(next(iter(grouped.values()))) if grouped else 0
    summary = {
        "mode": mode,
        "paths": paths,
        "em": em.rounded(),
        "view_em": {t: {v: round(100 * x, 2) for v, x in ems.items()} for t, ems in per_view.items()},
    }
    if mode == "oracle":
        summary["DIAGNOSTIC"] = True
    (out / "eval.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_tsv(out / "eval.tsv", ["task_id", "em"], [(t, v) for t, v in sorted(em.per_task.items())])
    if cfg.figures and per_view:
        (out / "figures").mkdir(exist_ok=True)
        plot_view_em(per_view, out / "figures" / "view_em.png")
    result = {"em": em, "summary": summary}
    if baseline is not None:
        report = audit(baseline, final, cfg.permutations, cfg.bootstrap, cfg.audit_seed, label_a="baseline", label_b=mode)
        write_audit(report, out, cfg.figures)
        result["report"] = report
    return result
