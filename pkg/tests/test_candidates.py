import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chyp.candidates import (
    CandidateSet,
    dedupe,
    fit_gmm,
    gmm_candidates,
    kmeans,
    kmeans_candidates,
    lloyd,
    quantization_floor,
    uniform_candidates,
    uniform_grid_side,
    wcss,
)
from chyp.core import chroma, inverse_chroma, is_unit_rgb, normalize_illuminant
from chyp.errors import DegenerateExtent, EmptyInput, TooFewDistinctPoints


def unit_points(rng, n):
    return normalize_illuminant(rng.uniform(0.1, 1.0, size=(n, 3)))


def brute_force_wcss(x, k):
    """Global optimum over every assignment of points to k non-empty clusters."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels.tolist())) == k:
            best = min(best, wcss(x, labels, k))
    return best


class TestKMeans:
    def test_k_equals_n(self):
        x = unit_points(np.random.default_rng(0), 6)
        cs = kmeans_candidates(x, 6, seed=1)
        got = sorted(map(tuple, np.round(cs.candidates, 12)))
        assert got == sorted(map(tuple, np.round(x, 12)))

    def test_k_one(self):
        x = unit_points(np.random.default_rng(1), 20)
        cs = kmeans_candidates(x, 1)
        np.testing.assert_allclose(cs.candidates[0], normalize_illuminant(x.mean(axis=0)))

    @pytest.mark.parametrize("seed", range(5))
    def test_eight_points_global(self, seed):
        x = unit_points(np.random.default_rng(seed), 8)
        res = kmeans(x, 3, seed)
        assert res.wcss == pytest.approx(brute_force_wcss(x, 3), rel=1e-9)

    def test_wcss_non_increasing(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            res = lloyd(unit_points(rng, 40), 5, rng)
            assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))

    def test_centers_are_means(self):
        x = unit_points(np.random.default_rng(4), 30)
        res = kmeans(x, 4, 0)
        for j in range(4):
            np.testing.assert_allclose(res.centers[j], x[res.labels == j].mean(axis=0))

    def test_deterministic_bytes(self):
        x = unit_points(np.random.default_rng(5), 50)
        a = kmeans_candidates(x, 7, seed=9, camera_id="c").to_json()
        b = kmeans_candidates(x, 7, seed=9, camera_id="c").to_json()
        assert a == b

    def test_too_few_distinct(self):
        x = np.repeat(normalize_illuminant([[1, 2, 3]]), 5, axis=0)
        with pytest.raises(TooFewDistinctPoints):
            kmeans_candidates(x, 2)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            kmeans_candidates(np.zeros((0, 3)), 1)

    def test_unit_and_unique(self):
        cs = kmeans_candidates(unit_points(np.random.default_rng(6), 100), 12)
        assert is_unit_rgb(cs.candidates)
        assert len(dedupe(cs.candidates)) == len(cs)


class TestUniform:
    def test_corners(self):
        pts = inverse_chroma(np.array([[0.5, 0.5], [1.5, 1.5], [1.0, 0.7]]))
        cs = uniform_candidates(pts, 2)
        got = sorted(map(tuple, np.round(chroma(cs.candidates), 12)))
        assert got == [(0.5, 0.5), (0.5, 1.5), (1.5, 0.5), (1.5, 1.5)]

    def test_121(self):
        cs = uniform_candidates(unit_points(np.random.default_rng(0), 30), uniform_grid_side(121))
        assert len(cs) == 121

    def test_non_square(self):
        with pytest.raises(ValueError):
            uniform_grid_side(120)

    def test_degenerate(self):
        pts = inverse_chroma(np.array([[0.5, 0.5], [0.5, 1.5]]))
        with pytest.raises(DegenerateExtent):
            uniform_candidates(pts, 3)

    @settings(max_examples=30)
    @given(st.integers(0, 2**16), st.integers(2, 6))
    def test_inside_box(self, seed, side):
        pts = unit_points(np.random.default_rng(seed), 10)
        p = chroma(pts)
        q = chroma(uniform_candidates(pts, side).candidates)
        assert np.all(q >= p.min(axis=0) - 1e-12) and np.all(q <= p.max(axis=0) + 1e-12)


class TestGmm:
    def test_one_component_mean(self):
        rng = np.random.default_rng(0)
        p = np.array([0.8, 0.6]) + rng.normal(0, 0.01, size=(200, 2))
        cs = gmm_candidates(inverse_chroma(p), n_components=1, n_samples=120, seed=3)
        s = chroma(cs.candidates)
        sigma = p.std(axis=0)
        assert np.all(np.abs(s.mean(axis=0) - p.mean(axis=0)) < 3 * sigma / np.sqrt(len(s)))

    def test_defaults(self):
        pts = unit_points(np.random.default_rng(1), 200)
        cs = gmm_candidates(pts, seed=0)
        assert len(cs) == 120 and cs.method == "gmm"
        assert is_unit_rgb(cs.candidates)

    def test_monotone_likelihood(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(c, 0.05, size=(60, 2)) for c in ([0.6, 0.5], [1.0, 0.9], [0.8, 1.2])])
        g = fit_gmm(x, 3, rng)
        ll = np.array(g.log_likelihoods)
        assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))
        assert g.weights.sum() == pytest.approx(1.0)


class TestFloor:
    def test_subset_zero(self):
        c = unit_points(np.random.default_rng(0), 5)
        stats = quantization_floor(c, c[:3])
        assert stats.mean == pytest.approx(0.0, abs=1e-6) and stats.worst25 < 1e-6

    def test_gray_vs_red(self):
        stats = quantization_floor(normalize_illuminant([[1, 1, 1]]), [[1, 0, 0]])
        assert stats.median == pytest.approx(54.7356, abs=1e-4)

    @settings(max_examples=30)
    @given(st.integers(0, 2**16))
    def test_monotone_nested(self, seed):
        rng = np.random.default_rng(seed)
        c = unit_points(rng, 8)
        t = unit_points(rng, 20)
        errs = [quantization_floor(c[:i], t).mean for i in range(1, 9)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        cs = kmeans_candidates(unit_points(np.random.default_rng(0), 40), 6, seed=2, camera_id="x")
        cs.save(tmp_path / "c.json")
        back = CandidateSet.load(tmp_path / "c.json")
        np.testing.assert_array_equal(back.candidates, cs.candidates)
        assert back.digest() == cs.digest()
        assert (back.camera_id, back.method, back.seed) == ("x", "kmeans", 2)

    def test_digest_order_sensitive(self):
        c = unit_points(np.random.default_rng(1), 3)
        a = CandidateSet("c", c, "kmeans")
        b = CandidateSet("c", c[::-1], "kmeans")
        assert a.digest() != b.digest()

    def test_bad_version(self):
        with pytest.raises(ValueError):
            CandidateSet.from_json('{"version": 9, "camera_id": "c", "method": "kmeans", "seed": 0, "candidates": []}')
