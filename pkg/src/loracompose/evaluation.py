"""Answer normalization, exact match, and the paired audit between two methods."""

from __future__ import annotations

import itertools
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_PERMUTATIONS = 20_000
DEFAULT_BOOTSTRAP = 10_000
_CHUNK = 1024

Key = tuple[str, str]


class AlignmentError(ValueError):
    """Two prediction sets do not cover the same (task_id, query_id) keys."""


def normalize_answer(s) -> str:
    return str(s).strip().lower().replace(".", "")


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(records: Iterable[Mapping], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _prediction(rec: Mapping) -> str:
    for key in ("prediction", "final_answer", "raw_prediction"):
        if key in rec:
            return rec[key]
    raise KeyError(f"record {rec.get('task_id')}/{rec.get('query_id')} has no prediction field")


def index_predictions(records: Iterable[Mapping]) -> dict[Key, tuple[str, str]]:
    """(task_id, query_id) -> (prediction, reference); rejects duplicate keys."""
    out: dict[Key, tuple[str, str]] = {}
    for rec in records:
        key = (str(rec["task_id"]), str(rec["query_id"]))
        if key in out:
            raise ValueError(f"duplicate prediction record for {key}")
        if rec.get("reference") is None:
            raise KeyError(f"record {key} has no reference")
        out[key] = (_prediction(rec), rec["reference"])
    return out


def correctness(records) -> dict[Key, bool]:
    idx = records if isinstance(records, dict) else index_predictions(records)
    return {k: normalize_answer(p) == normalize_answer(r) for k, (p, r) in idx.items()}


@dataclass
class EMResult:
    per_task: dict[str, float]  # percent
    macro: float
    micro: float
    n_queries: int

    def rounded(self) -> dict:
        return {
            "per_task": {t: round(v, 2) for t, v in self.per_task.items()},
            "macro": round(self.macro, 2),
            "micro": round(self.micro, 2),
            "n_queries": self.n_queries,
        }


def _em_from_correct(correct: Mapping[Key, bool]) -> EMResult:
    by_task: dict[str, list[bool]] = defaultdict(list)
    for (task, _), ok in sorted(correct.items()):
        by_task[task].append(ok)
    per_task = {t: 100.0 * sum(v) / len(v) for t, v in by_task.items()}
    macro = float(np.mean(list(per_task.values()))) if per_task else 0.0
    micro = 100.0 * sum(correct.values()) / len(correct) if correct else 0.0
    return EMResult(per_task, macro, micro, len(correct))


def exact_match(predictions, references: Mapping[Key, str] | None = None) -> EMResult:
    """Per-task normalized EM (percent) plus macro and micro averages.

    ``predictions`` is either a list of records carrying their references, or a
    mapping key -> prediction used together with ``references``.
    """
    if references is None:
        return _em_from_correct(correctness(predictions))
    pred = dict(predictions)
    _check_keys(set(pred), set(references), "predictions", "references")
    return _em_from_correct({k: normalize_answer(pred[k]) == normalize_answer(references[k]) for k in pred})


def _check_keys(a: set, b: set, name_a: str = "a", name_b: str = "b") -> None:
    if a != b:
        only_a, only_b = sorted(a - b), sorted(b - a)
        raise AlignmentError(f"misaligned keys: only in {name_a}: {only_a[:10]}; only in {name_b}: {only_b[:10]}")


@dataclass
class PairedTable:
    keys: list[Key]
    tasks: list[str]
    task_index: np.ndarray  # per query
    a: np.ndarray  # 0/1 correctness
    b: np.ndarray

    @property
    def diff(self) -> np.ndarray:
        return self.b.astype(np.float64) - self.a.astype(np.float64)

    def macro_coefficients(self) -> np.ndarray:
        """Per-query factor turning correctness into a macro-average percentage."""
        counts = np.bincount(self.task_index, minlength=len(self.tasks)).astype(np.float64)
        return 100.0 / (len(self.tasks) * counts[self.task_index])

    def task_diffs(self) -> np.ndarray:
        """Per-task EM difference b - a in percentage points."""
        counts = np.bincount(self.task_index, minlength=len(self.tasks))
        sums = np.bincount(self.task_index, weights=self.diff, minlength=len(self.tasks))
        return 100.0 * sums / counts


def pair(a, b) -> PairedTable:
    ca, cb = correctness(a), correctness(b)
    _check_keys(set(ca), set(cb))
    keys = sorted(ca)
    tasks = sorted({k[0] for k in keys})
    tpos = {t: i for i, t in enumerate(tasks)}
    return PairedTable(
        keys,
        tasks,
        np.array([tpos[k[0]] for k in keys], dtype=np.int64),
        np.array([ca[k] for k in keys], dtype=np.int8),
        np.array([cb[k] for k in keys], dtype=np.int8),
    )


def flip_counts(a, b=None) -> tuple[int, int, int]:
    """(incorrect->correct, correct->incorrect, unchanged) going from ``a`` to ``b``."""
    t = a if isinstance(a, PairedTable) else pair(a, b)
    plus = int(np.sum((t.a == 0) & (t.b == 1)))
    minus = int(np.sum((t.a == 1) & (t.b == 0)))
    return plus, minus, len(t.keys) - plus - minus


def paired_permutation_test(a, b=None, n_samples: int = DEFAULT_PERMUTATIONS, seed: int = 0, statistic: str = "macro") -> float:
    """Two-sided Monte Carlo sign-flip test on per-query correctness pairs.

    Each sample swaps the two methods' outcomes on every query independently
    with probability 1/2. Returns ``(1 + #{|stat*| >= |stat|}) / (1 + n_samples)``.
    Sample chunks draw from ``default_rng([seed, chunk])`` so chunked or
    parallel evaluation gives the same answer.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    t = a if isinstance(a, PairedTable) else pair(a, b)
    if statistic == "macro":
        coef = t.macro_coefficients()
    elif statistic == "micro":
        coef = np.full(len(t.keys), 100.0 / len(t.keys))
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    contrib = coef * t.diff
    contrib = contrib[t.diff != 0]
    observed = abs(float(contrib.sum()))
    if contrib.size == 0:
        return 1.0
    cutoff = observed - 1e-9 * max(1.0, observed)
    hits = 0
    for chunk, start in enumerate(range(0, n_samples, _CHUNK)):
        size = min(_CHUNK, n_samples - start)
        rng = np.random.default_rng([seed, chunk])
        signs = rng.integers(0, 2, size=(size, contrib.size), dtype=np.int8) * 2 - 1
        stats = signs @ contrib
        hits += int(np.sum(np.abs(stats) >= cutoff))
    return (1 + hits) / (1 + n_samples)


def bootstrap_distribution(task_diffs: np.ndarray, n_boot: int, seed: int, exhaustive: bool | None = None) -> tuple[np.ndarray, str]:
    """Macro-difference values over task resamples.

    With ``exhaustive=None`` every ordered resample is enumerated whenever
    ``T**T <= n_boot`` (each is equally likely), otherwise ``n_boot`` Monte Carlo
    resamples are drawn.
    """
    T = task_diffs.size
    if T == 0:
        raise ValueError("need at least one task")
    if exhaustive is None:
        exhaustive = T**T <= n_boot
    if exhaustive:
        idx = np.array(list(itertools.product(range(T), repeat=T)), dtype=np.int64)
        return task_diffs[idx].mean(axis=1), "exhaustive"
    values = np.empty(n_boot)
    for chunk, start in enumerate(range(0, n_boot, _CHUNK)):
        size = min(_CHUNK, n_boot - start)
        rng = np.random.default_rng([seed, chunk])
        idx = rng.integers(0, T, size=(size, T))
        values[start:start + size] = task_diffs[idx].mean(axis=1)
    return values, "monte_carlo"


def _tail_levels(level: float) -> list[float]:
    # 1 - 0.95 is not 0.05 in binary; round so the quantile levels are the intended ones
    tail = round((1.0 - level) / 2.0, 12)
    return [tail, 1.0 - tail]


def stratified_bootstrap_ci(
    a, b=None, n_boot: int = DEFAULT_BOOTSTRAP, seed: int = 0, level: float = 0.95, exhaustive: bool | None = None
) -> tuple[float, float]:
    """Percentile CI (percentage points) for the macro EM difference b - a, resampling tasks."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    t = a if isinstance(a, PairedTable) else pair(a, b)
    values, _ = bootstrap_distribution(t.task_diffs(), n_boot, seed, exhaustive)
    lo, hi = np.quantile(values, _tail_levels(level))
    return float(lo), float(hi)


@dataclass
class AuditReport:
    label_a: str
    label_b: str
    n_plus: int
    n_minus: int
    n_equal: int
    p_value: float
    p_value_micro: float
    ci_lo: float
    ci_hi: float
    level: float
    n_permutations: int
    n_bootstrap: int
    bootstrap_mode: str
    seed: int
    em_a: EMResult
    em_b: EMResult
    bootstrap_values: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def delta_macro(self) -> float:
        return self.em_b.macro - self.em_a.macro

    @property
    def delta_micro(self) -> float:
        return self.em_b.micro - self.em_a.micro

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("em_a", "em_b", "bootstrap_values")}
        d.update(
            delta_macro=self.delta_macro,
            delta_micro=self.delta_micro,
            em_a=self.em_a.rounded(),
            em_b=self.em_b.rounded(),
        )
        return d

    def per_task_rows(self) -> list[tuple[str, float, float, float]]:
        return [
            (t, self.em_a.per_task[t], self.em_b.per_task[t], self.em_b.per_task[t] - self.em_a.per_task[t])
            for t in sorted(self.em_a.per_task)
        ]

    def to_table(self) -> str:
        head = f"{'Comparison':<28} {'Avg. A':>7} {'Avg. B':>7} {'Delta':>7} {'+/-/=':>15} {'p':>8} {'CI':>18}"
        pm = f"{self.n_plus}/{self.n_minus}/{self.n_equal}"
        ci = f"[{self.ci_lo:.2f},{self.ci_hi:.2f}]"
        row = (
            f"{self.label_b + ' vs ' + self.label_a:<28} {self.em_a.macro:>7.2f} {self.em_b.macro:>7.2f} "
            f"{self.delta_macro:>+7.2f} {pm:>15} {self.p_value:>8.4f} {ci:>18}"
        )
        return head + "\n" + row + "\n"


def audit(
    a,
    b,
    n_permutations: int = DEFAULT_PERMUTATIONS,
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    level: float = 0.95,
    label_a: str = "A",
    label_b: str = "B",
) -> AuditReport:
    t = pair(a, b)
    plus, minus, equal = flip_counts(t)
    p = paired_permutation_test(t, n_samples=n_permutations, seed=seed, statistic="macro")
    p_micro = paired_permutation_test(t, n_samples=n_permutations, seed=seed, statistic="micro")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    values, mode = bootstrap_distribution(t.task_diffs(), n_bootstrap, seed)
    lo, hi = np.quantile(values, _tail_levels(level))
    em_a = _em_from_correct(dict(zip(t.keys, t.a.astype(bool))))
    em_b = _em_from_correct(dict(zip(t.keys, t.b.astype(bool))))
    return AuditReport(
        label_a, label_b, plus, minus, equal, p, p_micro, float(lo), float(hi), level,
        n_permutations, n_bootstrap, mode, seed, em_a, em_b, values,
    )
