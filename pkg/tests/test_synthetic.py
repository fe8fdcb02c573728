import itertools

import numpy as np
import pytest

from loracompose.synthetic import (
    SpecError,
    ToyPoolSpec,
    ToyTask,
    gen_toy_pool,
    interference_scenario,
    load_toy_tasks,
    toy_support_loss,
    update_matrix,
    write_toy_pool,
)
from loracompose.tensor_store import AdapterBundle, block_vector, build_block_map, load_bundle
from loracompose.retrieval import load_manifest


def block_cosines(bundles):
    blocks = build_block_map(bundles[0].names())
    out = []
    for names in blocks.values():
        vecs = [block_vector(b, names).astype(np.float64) for b in bundles]
        for x, y in itertools.combinations(vecs, 2):
            out.append(float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y))))
    return np.array(out)


class TestPool:
    def test_orthogonal(self):
        _, bundles, _ = gen_toy_pool(ToyPoolSpec(n_adapters=3, overlap_mode="orthogonal"))
        np.testing.assert_allclose(block_cosines(bundles), 0.0, atol=1e-6)

    def test_duplicated(self):
        _, bundles, _ = gen_toy_pool(ToyPoolSpec(n_adapters=2, overlap_mode="duplicated"))
        np.testing.assert_allclose(block_cosines(bundles), 1.0, atol=1e-6)

    def test_mixed_sixty(self):
        for seed in range(5):
            _, bundles, _ = gen_toy_pool(ToyPoolSpec(n_adapters=5, seed=seed))
            np.testing.assert_allclose(block_cosines(bundles), 0.5, atol=1e-6)

    def test_low_rank(self):
        spec = ToyPoolSpec(rank=2)
        _, bundles, _ = gen_toy_pool(spec)
        for b in bundles:
            for n in b.names():
                assert np.linalg.matrix_rank(b.array(n).astype(np.float64), tol=1e-5) <= 2

    def test_infeasible_angle(self):
        # more than 2 vectors cannot all be 180 degrees apart
        with pytest.raises(SpecError):
            gen_toy_pool(ToyPoolSpec(n_adapters=3, angle_deg=180.0))

    def test_too_many_orthogonal(self):
        with pytest.raises(SpecError):
            gen_toy_pool(ToyPoolSpec(n_adapters=20, overlap_mode="orthogonal", rank=1))

    def test_kv_parse(self):
        spec = ToyPoolSpec.from_kv("seed=7, n_adapters=4,overlap_mode=orthogonal,angle_deg=45,tensors_per_block=q+v")
        assert (spec.seed, spec.n_adapters, spec.overlap_mode, spec.angle_deg) == (7, 4, "orthogonal", 45.0)
        assert spec.tensors_per_block == ("q", "v")
        with pytest.raises(SpecError):
            ToyPoolSpec.from_kv("bogus=1")

    def test_deterministic(self):
        m1, b1, t1 = gen_toy_pool(ToyPoolSpec(seed=3))
        m2, b2, t2 = gen_toy_pool(ToyPoolSpec(seed=3))
        assert all(x.equals(y) for x, y in zip(b1, b2))
        assert [t.to_json() for t in t1] == [t.to_json() for t in t2]

    def test_write_and_reload(self, tmp_path):
        m, bundles, tasks = gen_toy_pool(ToyPoolSpec(n_adapters=3, n_tasks=2))
        write_toy_pool(tmp_path, m, bundles, tasks)
        back = load_manifest(tmp_path / "manifest.json")
        assert back.adapter_ids == m.adapter_ids
        assert load_bundle(tmp_path / "adapters" / "adapter00.bundle").equals(bundles[0])
        reloaded = load_toy_tasks(tmp_path / "tasks.json")
        np.testing.assert_array_equal(reloaded[0].target, tasks[0].target)


def small_task(target):
    base = np.array([[1.0, 0.0], [0.0, 2.0]])
    xs = [np.array([1.0, 0.0]), np.array([0.5, -1.0]), np.array([2.0, 3.0])]
    ex = [{"example_id": f"e{i}", "x": x.tolist(), "y": ((base + target) @ x).tolist()} for i, x in enumerate(xs)]
    return ToyTask("t", base, target, ex, [], K=3, offset=0, names=["block0.a", "block1.a"])


def as_bundle(mat):
    return AdapterBundle.from_arrays("c", {"block0.a": mat[:1], "block1.a": mat[1:]})


class TestLoss:
    def test_exact_fit(self):
        target = np.array([[0.5, -1.0], [2.0, 0.25]])
        assert toy_support_loss(small_task(target), as_bundle(target)) == pytest.approx(0.0, abs=1e-12)

    def test_zero_composed(self):
        target = np.array([[0.5, -1.0], [2.0, 0.25]])
        task = small_task(target)
        xs = np.array([e["x"] for e in task.examples])
        want = np.mean([np.sum((target @ x) ** 2) for x in xs])
        assert toy_support_loss(task, as_bundle(np.zeros((2, 2)))) == pytest.approx(want, rel=1e-12)

    def test_update_matrix_order(self):
        b = AdapterBundle.from_arrays("c", {"block1.a": [[3.0, 4.0]], "block0.a": [[1.0, 2.0]]})
        np.testing.assert_array_equal(update_matrix(b), [[1, 2], [3, 4]])


class TestScenario:
    def test_orthogonal(self):
        for seed in range(10):
            s = interference_scenario(seed, "orthogonal")
            assert abs(s["linear_loss"] - s["lasrc_loss"]) <= 1e-6

    def test_duplicated(self):
        for seed in range(10):
            s = interference_scenario(seed, "duplicated")
            assert abs(s["linear_loss"] - s["lasrc_loss"]) <= 1e-6
            assert all(c.pruned_ids == ["adapter01"] for c in s["compositions"])

    def test_conflict(self):
        for seed in range(10):
            s = interference_scenario(seed, "conflict")
            assert s["lasrc_loss"] <= s["linear_loss"]

    def test_unknown(self):
        with pytest.raises(ValueError):
            interference_scenario(0, "chaos")
