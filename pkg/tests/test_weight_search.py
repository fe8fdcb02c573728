import sys

import numpy as np
import pytest

from loracompose.weight_search import (
    EvaluationError,
    SubprocessEvaluator,
    WeightVector,
    search_weights,
)

CLIP = (-1.5, 1.5)


def grid_argmin(objective, n, step=0.005, clip=CLIP):
    """Dense grid minimiser of ``objective`` over the clip box (n <= 2)."""
    axis = np.arange(clip[0], clip[1] + step / 2, step)
    if n == 1:
        vals = [objective(np.array([a])) for a in axis]
        return np.array([axis[int(np.argmin(vals))]])
    g = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1).reshape(-1, 2)
    vals = np.array([objective(w) for w in g])
    return g[int(np.argmin(vals))]


def quad(center):
    c = np.asarray(center, dtype=float)
    return lambda w: float(np.sum((np.asarray(w) - c) ** 2))


def test_quadratic_interior():
    f = quad([0.2, 0.2])
    ref = grid_argmin(f, 2)
    np.testing.assert_allclose(ref, [0.2, 0.2], atol=1e-9)
    wv = search_weights(f, 2, steps=200, seed=0, lam=0.0)
    assert np.max(np.abs(wv.values - ref)) <= 0.05


def test_constant_with_penalty():
    lam = 0.05
    ref = grid_argmin(lambda w: 3.0 + lam * np.mean(np.abs(w)), 2)
    np.testing.assert_allclose(ref, 0.0, atol=1e-9)
    wv = search_weights(lambda w: 3.0, 2, seed=1, lam=lam)
    assert np.max(np.abs(wv.values - ref)) <= 0.05


def test_boundary_minimiser():
    f = quad([5.0])
    ref = grid_argmin(f, 1)
    assert ref[0] == pytest.approx(1.5)
    wv = search_weights(f, 1, seed=0, lam=0.0)
    assert abs(wv.values[0] - ref[0]) <= 0.05
    assert CLIP[0] <= wv.values[0] <= CLIP[1]


def test_deterministic():
    f = quad([0.7, -0.4])
    a = search_weights(f, 2, seed=11)
    b = search_weights(f, 2, seed=11)
    assert a.weights == b.weights and a.objective == b.objective


def test_seed_changes_path():
    f = quad([0.7, -0.4, 0.1])
    assert search_weights(f, 3, steps=5, seed=1).weights != search_weights(f, 3, steps=5, seed=2).weights


def test_never_worse_than_start():
    f = quad([0.3, 0.3, 0.3])
    wv = search_weights(f, 3, steps=10, seed=4)
    assert wv.objective <= f(np.zeros(3))


def test_clip_respected_everywhere():
    seen = []

    def f(w):
        seen.append(w.copy())
        return float(np.sum((w - 10) ** 2))

    search_weights(f, 3, steps=60, seed=0, clip=(-0.5, 0.5))
    assert np.all(np.array(seen) >= -0.5) and np.all(np.array(seen) <= 0.5)


def test_nonfinite_raises_with_weights():
    calls = []

    def f(w):
        calls.append(1)
        return float("nan") if len(calls) > 1 else 1.0

    with pytest.raises(EvaluationError) as exc:
        search_weights(f, 2, seed=0)
    assert exc.value.weights is not None and exc.value.weights.shape == (2,)


def test_ids_and_json():
    wv = search_weights(quad([0.1]), 1, steps=3, adapter_ids=["x"])
    assert wv.ids == ["x"]
    back = WeightVector.from_mapping({"x": wv.weights["x"]})
    assert back.weights == wv.weights


def test_bad_args():
    with pytest.raises(ValueError):
        search_weights(quad([0]), 1, clip=(1.0, -1.0))
    with pytest.raises(ValueError):
        search_weights(quad([0]), 0)


def test_subprocess_evaluator(tmp_path):
    script = tmp_path / "ev.py"
    script.write_text(
        "import json, sys\n"
        "w = json.load(sys.stdin)\n"
        "print((w['a'] - 0.5) ** 2 + (w['b'] + 0.25) ** 2)\n"
    )
    ev = SubprocessEvaluator([sys.executable, str(script)], ["a", "b"])
    assert ev(np.array([0.5, -0.25])) == pytest.approx(0.0)
    wv = search_weights(ev, 2, steps=25, seed=3, lam=0.0, adapter_ids=["a", "b"])
    assert wv.objective < 0.3125  # zero-start objective


def test_subprocess_failure(tmp_path):
    ev = SubprocessEvaluator([sys.executable, "-c", "import sys; sys.exit(4)"], ["a"])
    with pytest.raises(EvaluationError):
        ev(np.zeros(1))
