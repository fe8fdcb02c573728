import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_bundle
from loracompose.lasrc import LasrcConfig, compose_block, gamma_schedule, lasrc_merge, max_orthonormality_error, rescale_error
from loracompose.merge import linear_merge


def vec_bundles(vectors, name="block0.t"):
    return [make_bundle(f"a{i}", {name: v}) for i, v in enumerate(vectors)]


def assert_bundles_close(x, y, rtol=1e-5):
    for n in x.names():
        a, b = x.array(n).astype(np.float64), y.array(n).astype(np.float64)
        scale = max(np.linalg.norm(b), 1e-30)
        assert np.linalg.norm(a - b) <= rtol * scale, n


class TestExamples:
    def test_single_adapter_fixpoint(self):
        for gamma in (0.0, 0.3, 0.5, 1.0):
            b = vec_bundles([[1.5, -2.0, 0.25]])
            cfg = LasrcConfig(gamma_base=gamma, gamma_floor=min(0.05, gamma))
            out, _ = lasrc_merge(b, {"a0": 0.7}, cfg=cfg)
            np.testing.assert_allclose(out.array("block0.t"), 0.7 * np.array([1.5, -2.0, 0.25]), rtol=1e-6)

    def test_duplicates(self):
        b = vec_bundles([[3.0, 4.0], [3.0, 4.0]])
        out, comps = lasrc_merge(b, {"a0": 1.0, "a1": 1.0})
        c = comps[0]
        assert c.retained_ids == ["a0"] and c.pruned_ids == ["a1"]
        np.testing.assert_allclose(c.linear_anchor, [6.0, 8.0])
        assert c.gamma_b == pytest.approx(0.25)
        np.testing.assert_allclose(out.array("block0.t"), [6.0, 8.0], rtol=1e-7)

    def test_orthogonal(self):
        b = vec_bundles([[2.0, 0.0], [0.0, -1.0]])
        out, comps = lasrc_merge(b, {"a0": 0.5, "a1": 1.0})
        c = comps[0]
        np.testing.assert_allclose(c.residual_sum, c.linear_anchor)
        assert c.gamma_b == pytest.approx(0.05)
        np.testing.assert_allclose(out.array("block0.t"), [1.0, -1.0], rtol=1e-7)

    def test_general_hand_oracle(self):
        # z1=[2,0], z2=[1,1]: r2=[0,1], anchor [3,1], residual sum [2,1], overlap 1/6
        b = vec_bundles([[2.0, 0.0], [1.0, 1.0]])
        out, comps = lasrc_merge(b, {"a0": 1.0, "a1": 1.0})
        c = comps[0]
        assert c.order == ["a0", "a1"]
        assert c.overlap == pytest.approx(1 / 6)
        g = 0.5 / 6
        assert c.gamma_b == pytest.approx(g)
        rescaled = np.array([2.0, 1.0]) * math.sqrt(10) / math.sqrt(5)
        want = (1 - g) * np.array([3.0, 1.0]) + g * rescaled
        np.testing.assert_allclose(out.array("block0.t"), want, rtol=1e-6)

    def test_norm_guard(self):
        # five duplicates: residual sum z against anchor 5z, ratio 0.2 < 0.3
        b = vec_bundles([[1.0, 2.0]] * 5)
        out, comps = lasrc_merge(b, {f"a{i}": 1.0 for i in range(5)})
        assert comps[0].guard_fired and not comps[0].interpolated
        np.testing.assert_allclose(out.array("block0.t"), comps[0].linear_anchor, rtol=1e-6)

    def test_zero_weights_warns(self):
        b = vec_bundles([[1.0, 2.0], [3.0, 4.0]])
        out, comps = lasrc_merge(b, {"a0": 0.0, "a1": 0.0})
        assert comps[0].warning
        assert not out.tensors["block0.t"].data.any()

    def test_prune_threshold(self):
        b = vec_bundles([[1.0, 0.0], [1.0, 0.05]])
        # a1 has the larger norm and goes first; a0 keeps ~5% of its norm
        _, comps = lasrc_merge(b, {"a0": 1.0, "a1": 1.0}, cfg=LasrcConfig(prune_threshold=0.1))
        assert comps[0].pruned_ids == ["a0"]
        _, comps = lasrc_merge(b, {"a0": 1.0, "a1": 1.0})
        assert comps[0].retained_ids == ["a1", "a0"]

    def test_blocks_independent(self):
        b = [make_bundle("a0", {"block0.x": [1.0, 0], "block1.x": [0, 1.0]}),
             make_bundle("a1", {"block0.x": [1.0, 0], "block1.x": [1.0, 0]})]
        _, comps = lasrc_merge(b, {"a0": 1.0, "a1": 1.0})
        assert [c.block_id for c in comps] == ["block0", "block1"]
        assert comps[0].pruned_ids == ["a1"] and comps[1].pruned_ids == []


class TestGamma:
    def test_no_overlap_floor(self):
        assert gamma_schedule(5.0, 5.0, LasrcConfig()) == (0.05, 0.0)

    def test_duplicates_quarter(self):
        g, o = gamma_schedule(2.0, 1.0, LasrcConfig())
        assert (g, o) == (0.25, 0.5)

    def test_non_adaptive(self):
        assert gamma_schedule(2.0, 0.1, LasrcConfig(overlap_adaptive=False))[0] == 0.5

    def test_degenerate(self):
        assert gamma_schedule(0.0, 0.0, LasrcConfig()) == (0.05, 0.0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            LasrcConfig(gamma_base=0.1, gamma_floor=0.2)


def random_pool(seed, n=None, blocks=2):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(1, 7))
    shapes = {f"block{b}.{t}": tuple(int(s) for s in r.integers(1, 5, size=int(r.integers(1, 3))))
              for b in range(blocks) for t in ("p", "q")}
    bundles = [make_bundle(f"a{i}", {k: r.standard_normal(s) for k, s in shapes.items()}) for i in range(n)]
    weights = {f"a{i}": float(r.uniform(-1.5, 1.5)) for i in range(n)}
    return bundles, weights


class TestStructure:
    def test_basis_orthonormal(self):
        for seed in range(50):
            b, w = random_pool(seed)
            _, comps = lasrc_merge(b, w)
            assert max_orthonormality_error(comps) <= 1e-5

    def test_rescale_matches_anchor(self):
        for seed in range(50):
            b, w = random_pool(seed)
            _, comps = lasrc_merge(b, w)
            for c in comps:
                err = rescale_error(c)
                assert err is None or err <= 1e-5

    def test_gamma_zero_is_linear(self):
        for seed in range(30):
            b, w = random_pool(seed)
            out, _ = lasrc_merge(b, w, cfg=LasrcConfig(gamma_base=0.0, gamma_floor=0.0))
            assert_bundles_close(out, linear_merge(b, w))

    def test_rank_deficient_pool(self):
        # small integers keep the dependent combinations exact in f32
        base = np.array([[1.0, 2, 0, -1, 3, 1], [0.0, 1, 1, 2, -2, 1]])
        vecs = [base[0], base[1], base[0] + base[1], 2 * base[0] - base[1]]
        _, comps = lasrc_merge(vec_bundles(vecs), {f"a{i}": 1.0 for i in range(4)})
        assert len(comps[0].retained_ids) == 2
        assert max_orthonormality_error(comps) <= 1e-5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.randoms(use_true_random=False))
    def test_input_order_invariant(self, seed, rnd):
        b, w = random_pool(seed)
        shuffled = list(b)
        rnd.shuffle(shuffled)
        x, _ = lasrc_merge(b, w)
        y, _ = lasrc_merge(shuffled, w)
        assert x.equals(y)


def test_compose_block_direct():
    out, comp = compose_block("b", {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0])}, {"x": 1.0, "y": 1.0}, LasrcConfig())
    np.testing.assert_allclose(out, [1.0, 1.0])
    assert comp.interpolated and not comp.guard_fired
