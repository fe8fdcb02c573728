"""Support-set weight search with a (1+1) evolution strategy inside a box."""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_CLIP = (-1.5, 1.5)
DEFAULT_STEPS = 40
DEFAULT_LAMBDA = 0.05
STALL_LIMIT = 10
INITIAL_STEP_FRACTION = 0.3

LossEvaluator = Callable[[np.ndarray], float]


class EvaluationError(RuntimeError):
    """The loss evaluator failed or returned a non-finite value."""

    def __init__(self, message: str, weights: np.ndarray | None = None):
        super().__init__(message)
        self.weights = None if weights is None else np.array(weights, copy=True)


@dataclass
class WeightVector:
    weights: dict[str, float]
    clip_lo: float = DEFAULT_CLIP[0]
    clip_hi: float = DEFAULT_CLIP[1]
    objective: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.clip_lo >= self.clip_hi:
            raise ValueError(f"clip bounds must satisfy lo < hi, got [{self.clip_lo}, {self.clip_hi}]")
        for k, v in self.weights.items():
            if not self.clip_lo <= v <= self.clip_hi:
                raise ValueError(f"weight {k}={v} outside [{self.clip_lo}, {self.clip_hi}]")

    @property
    def ids(self) -> list[str]:
        return list(self.weights)

    @property
    def values(self) -> np.ndarray:
        return np.array([self.weights[k] for k in self.weights], dtype=np.float64)

    def to_json(self) -> str:
        return json.dumps(self.weights, indent=2)

    @classmethod
    def from_mapping(cls, data: dict, clip: tuple[float, float] = DEFAULT_CLIP) -> WeightVector:
        return cls({str(k): float(v) for k, v in data.items()}, clip[0], clip[1])


def as_weight_dict(weights) -> dict[str, float]:
    if isinstance(weights, WeightVector):
        weights = weights.weights
    return {str(k): float(v) for k, v in dict(weights).items()}


def search_weights(
    evaluator: LossEvaluator,
    n_adapters: int,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
    lam: float = DEFAULT_LAMBDA,
    clip: tuple[float, float] = DEFAULT_CLIP,
    adapter_ids: Sequence[str] | None = None,
) -> WeightVector:
    """Minimise ``evaluator(w) + lam * mean|w|`` over the clip box.

    Starts from the zero vector. Each step proposes a Gaussian perturbation of
    the incumbent, projected into the box; the step size halves after
    ``STALL_LIMIT`` consecutive rejections.
    """
    lo, hi = map(float, clip)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not lo < hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
    if n_adapters < 1:
        raise ValueError("need at least one adapter")
    ids = list(adapter_ids) if adapter_ids is not None else [f"a{i}" for i in range(n_adapters)]
    if len(ids) != n_adapters:
        raise ValueError(f"{len(ids)} adapter ids for {n_adapters} adapters")

    def objective(w: np.ndarray) -> float:
        try:
            loss = float(evaluator(w.copy()))
        except EvaluationError:
            raise
        except Exception as exc:
            raise EvaluationError(f"evaluator raised {exc!r} at w={w.tolist()}", w) from exc
        if not math.isfinite(loss):
            raise EvaluationError(f"evaluator returned {loss} at w={w.tolist()}", w)
        return loss + lam * float(np.mean(np.abs(w)))

    rng = np.random.default_rng(seed)
    best = np.clip(np.zeros(n_adapters), lo, hi)
    best_f = objective(best)
    sigma = INITIAL_STEP_FRACTION * (hi - lo)
    stalls = 0
    for _ in range(steps):
        cand = np.clip(best + sigma * rng.standard_normal(n_adapters), lo, hi)
        f = objective(cand)
        if f < best_f:
            best, best_f, stalls = cand, f, 0
        else:
            stalls += 1
            if stalls >= STALL_LIMIT:
                sigma *= 0.5
                stalls = 0
    return WeightVector({k: float(v) for k, v in zip(ids, best)}, lo, hi, objective=best_f)


class SubprocessEvaluator:
    """Run an external command per evaluation: JSON weights on stdin, scalar loss on stdout."""

    def __init__(self, command: str | Sequence[str], adapter_ids: Sequence[str], timeout: float | None = 600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.adapter_ids = list(adapter_ids)
        self.timeout = timeout

    def __call__(self, w: np.ndarray) -> float:
        payload = json.dumps({k: float(v) for k, v in zip(self.adapter_ids, w)})
        try:
            proc = subprocess.run(
                self.command, input=payload, capture_output=True, text=True, timeout=self.timeout, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise EvaluationError(f"evaluator command failed: {exc}", w) from exc
        if proc.returncode != 0:
            raise EvaluationError(f"evaluator exited {proc.returncode}: {proc.stderr.strip()}", w)
        try:
            return float(proc.stdout.strip())
        except ValueError as exc:
            raise EvaluationError(f"evaluator printed non-numeric output {proc.stdout!r}", w) from exc
