"""Multi-view answer aggregation weighted by support-loss reliability."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .evaluation import normalize_answer

LOSS_EPS = 1e-8
MODES = ("support", "uniform", "oracle")
_TIE_TOL = 1e-12


class CoverageError(KeyError):
    """A view is missing a prediction for a query."""


@dataclass
class ViewRecord:
    view_id: str
    support_loss: float
    predictions: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.support_loss >= 0.0 or self.support_loss == float("inf"):
            raise ValueError(f"view {self.view_id}: support loss must be finite and non-negative, got {self.support_loss}")


def reliability_weights(losses: Mapping[str, float], mode: str = "support") -> dict[str, float]:
    """``w_v = phi(L_v) / sum_u phi(L_u)`` with ``phi(L) = 1 / max(L, 1e-8)``; uniform gives ``1/|V|``."""
    if not losses:
        raise ValueError("need at least one view")
    if mode == "uniform":
        return {v: 1.0 / len(losses) for v in losses}
    if mode != "support":
        raise ValueError(f"unknown weighting mode {mode!r}")
    phi = {v: 1.0 / max(float(L), LOSS_EPS) for v, L in losses.items()}
    total = sum(phi.values())
    return {v: p / total for v, p in phi.items()}


def _answer(view: ViewRecord, query_id: str) -> str:
    if query_id not in view.predictions:
        raise CoverageError(f"view {view.view_id!r} has no prediction for query {query_id!r}")
    return normalize_answer(view.predictions[query_id])


def score_answers(views: Sequence[ViewRecord], weights: Mapping[str, float], query_id: str) -> dict[str, float]:
    """Sum of view weights per normalized answer, keyed in order of first producing view."""
    scores: dict[str, float] = {}
    for v in views:
        a = _answer(v, query_id)
        scores[a] = scores.get(a, 0.0) + weights[v.view_id]
    return scores


def select_answer(scores: Mapping[str, float], view_order: Sequence[str], answers_by_view: Mapping[str, str]) -> str:
    """Highest-scoring answer; ties go to the earliest view producing a maximal answer."""
    if not scores:
        raise ValueError("no candidate answers")
    best = max(scores.values())
    top = {a for a, s in scores.items() if s >= best - _TIE_TOL}
    for v in view_order:
        if answers_by_view[v] in top:
            return answers_by_view[v]
    raise ValueError("no view produced a maximal answer")


def aggregate_task(views: Sequence[ViewRecord], mode: str = "support", query_ids: Iterable[str] | None = None) -> tuple[dict[str, float], list[dict]]:
    """Aggregate one task's views; returns (view weights, per-query decisions)."""
    weights = reliability_weights({v.view_id: v.support_loss for v in views}, mode)
    order = [v.view_id for v in views]
    qids = list(query_ids) if query_ids is not None else list(views[0].predictions)
    decisions = []
    for q in qids:
        answers = {v.view_id: _answer(v, q) for v in views}
        scores = score_answers(views, weights, q)
        decisions.append({"query_id": q, "final_answer": select_answer(scores, order, answers), "scores": scores})
    return weights, decisions


def view_em(view: ViewRecord, references: Mapping[str, str]) -> float:
    hits = [_answer(view, q) == normalize_answer(r) for q, r in references.items()]
    return sum(hits) / len(hits) if hits else 0.0


def oracle_select(views: Sequence[ViewRecord], references: Mapping[str, str]) -> tuple[str, dict[str, str], dict[str, float]]:
    """DIAGNOSTIC: pick the single view with the best EM against the references.

    Returns (best view id, its normalized answers, EM per view). Ties go to the
    earliest view.
    """
    ems = {v.view_id: view_em(v, references) for v in views}
    best = views[0]
    for v in views[1:]:
        if ems[v.view_id] > ems[best.view_id]:
            best = v
    return best.view_id, {q: _answer(best, q) for q in references}, ems


def group_views(records: Iterable[Mapping], view_order: Sequence[str] | None = None) -> dict[str, list[ViewRecord]]:
    """Group prediction JSONL records into per-task view lists.

    View order is ``view_order`` when given, else order of first appearance.
    """
    tasks: dict[str, dict[str, ViewRecord]] = {}
    for rec in records:
        task, view = str(rec["task_id"]), str(rec["view_id"])
        views = tasks.setdefault(task, {})
        loss = float(rec.get("support_loss", 0.0))
        if view not in views:
            views[view] = ViewRecord(view, loss)
        elif views[view].support_loss != loss:
            raise ValueError(f"task {task} view {view}: inconsistent support losses")
        qid = str(rec["query_id"])
        if qid in views[view].predictions:
            raise ValueError(f"task {task} view {view}: duplicate query {qid}")
        views[view].predictions[qid] = rec["raw_prediction"]
    out = {}
    for task, views in tasks.items():
        if view_order is not None:
            missing = [v for v in view_order if v not in views]
            if missing:
                raise CoverageError(f"task {task!r} lacks views {missing}")
            out[task] = [views[v] for v in view_order]
        else:
            out[task] = list(views.values())
    return out


def references_of(records: Iterable[Mapping]) -> dict[str, dict[str, str]]:
    refs: dict[str, dict[str, str]] = {}
    for rec in records:
        if rec.get("reference") is not None:
            refs.setdefault(str(rec["task_id"]), {})[str(rec["query_id"])] = rec["reference"]
    return refs


def aggregate_records(records: Sequence[Mapping], mode: str = "support", view_order: Sequence[str] | None = None) -> list[dict]:
    """Decision records for every (task, query) in a prediction JSONL.

    Oracle mode needs references and marks every record as a diagnostic.
    """
    if mode not in MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    grouped = group_views(records, view_order)
    refs = references_of(records)
    out = []
    for task in sorted(grouped):
        views = grouped[task]
        qids = list(views[0].predictions)
        task_refs = refs.get(task, {})
        if mode == "oracle":
            missing = [q for q in qids if q not in task_refs]
            if missing:
                raise CoverageError(f"oracle mode needs references; task {task!r} lacks {missing[:5]}")
            best, answers, ems = oracle_select(views, {q: task_refs[q] for q in qids})
            for q in qids:
                out.append({
                    "task_id": task, "query_id": q, "final_answer": answers[q], "mode": mode,
                    "oracle_view": best, "view_em": ems, "paths": len(views),
                    "reference": task_refs.get(q), "DIAGNOSTIC": True,
                })
            continue
        weights, decisions = aggregate_task(views, mode, qids)
        for d in decisions:
            out.append({
                "task_id": task, "query_id": d["query_id"], "final_answer": d["final_answer"],
                "scores": d["scores"], "view_weights": weights, "mode": mode, "paths": len(views),
                "reference": task_refs.get(d["query_id"]),
            })
    return out
