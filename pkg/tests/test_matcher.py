import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from densecl.errors import DegenerateInputError, ShapeError
from densecl.matcher import (
    DEFAULT_STRATEGY,
    MatchStrategy,
    argmax_match,
    cosine_similarity,
    extract_correspondence,
    mutual_matches,
    pooled_cells,
    similarity_matrix,
)


def _loop_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            dot = sum(float(x) * float(y) for x, y in zip(a[i], b[j]))
            na = math.sqrt(sum(float(x) ** 2 for x in a[i]))
            nb = math.sqrt(sum(float(y) ** 2 for y in b[j]))
            out[i, j] = dot / (na * nb)
    return out


def _row_scan(delta: np.ndarray) -> np.ndarray:
    out = []
    for row in delta:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        out.append(best)
    return np.array(out)


def _mutual_oracle(f1: np.ndarray, f2: np.ndarray, threshold: float):
    a = f1.reshape(f1.shape[0], -1).T
    b = f2.reshape(f2.shape[0], -1).T
    d = _loop_similarity(a, b)
    keep = []
    for i in range(len(a)):
        j = _row_scan(d[i:i + 1])[0]
        if _row_scan(d.T[j:j + 1])[0] == i and d[i, j] >= threshold:
            keep.append((i, int(j)))
    return keep


class TestCosine:
    def test_self(self):
        u = np.random.default_rng(0).standard_normal(5)
        assert cosine_similarity(u, u) == pytest.approx(1.0, abs=1e-12)

    def test_orthonormal(self):
        assert cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0

    def test_45_degrees(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2),
                                                                           abs=1e-12)

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(1)
        u, v = rng.standard_normal(4), rng.standard_normal(4)
        assert cosine_similarity(u, v) == pytest.approx(cosine_similarity(v, u), abs=1e-15)
        assert cosine_similarity(3 * u, 0.1 * v) == pytest.approx(cosine_similarity(u, v),
                                                                  abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])


class TestSimilarityMatrix:
    def test_orthonormal_rows_identity(self):
        q, _ = torch.linalg.qr(torch.randn(6, 6, dtype=torch.float64))
        torch.testing.assert_close(similarity_matrix(q, q), torch.eye(6, dtype=torch.float64))

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((81, 8))
        b = rng.standard_normal((81, 8))
        delta = similarity_matrix(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        np.testing.assert_allclose(delta, _loop_similarity(a, b), atol=1e-6, rtol=0)

    def test_float32_matches_double_loop(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((81, 8)).astype(np.float32)
        b = rng.standard_normal((81, 8)).astype(np.float32)
        delta = similarity_matrix(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        np.testing.assert_allclose(delta, _loop_similarity(a, b), atol=1e-6, rtol=0)

    def test_row_scaling_invariance(self):
        rng = np.random.default_rng(4)
        a = torch.from_numpy(rng.standard_normal((9, 5)))
        b = torch.from_numpy(rng.standard_normal((9, 5)))
        scale = torch.from_numpy(rng.uniform(0.01, 100, size=(9, 1)))
        torch.testing.assert_close(similarity_matrix(a * scale, b), similarity_matrix(a, b),
                                   atol=1e-6, rtol=0)

    def test_entries_in_range(self):
        a = torch.randn(49, 16)
        d = similarity_matrix(a, torch.randn(49, 16))
        assert d.abs().max() <= 1 + 1e-5

    def test_zero_row_strict(self):
        a = torch.randn(4, 3)
        a[2] = 0
        with pytest.raises(DegenerateInputError):
            similarity_matrix(a, torch.randn(4, 3))
        assert similarity_matrix(a, torch.randn(4, 3), strict=False)[2].abs().max() == 0

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            similarity_matrix(torch.randn(4, 3), torch.randn(4, 2))


class TestArgmaxMatch:
    def test_identity(self):
        np.testing.assert_array_equal(argmax_match(torch.eye(7)).numpy(), np.arange(7))

    def test_single_cell(self):
        assert argmax_match(torch.tensor([[0.3]])).tolist() == [0]

    def test_random_matches_row_scan(self):
        d = np.random.default_rng(5).uniform(-1, 1, (81, 81))
        np.testing.assert_array_equal(argmax_match(torch.from_numpy(d)).numpy(), _row_scan(d))

    def test_ties_lowest_index(self):
        d = torch.tensor([[0.5, 0.9, 0.9, 0.1], [1.0, 1.0, 1.0, 1.0], [0.0, 0.2, 0.1, 0.2]])
        assert argmax_match(d).tolist() == [1, 0, 1]

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 20))
    def test_invariant_under_increasing_transform(self, seed, n):
        # a coarse grid makes ties common, which exercises the lowest-index rule too
        d = np.round(np.random.default_rng(seed).uniform(-1, 1, (n, n)), 1)
        t = torch.from_numpy(d)
        expected = argmax_match(t)
        for f in (torch.exp, lambda x: 3 * x + 1, lambda x: torch.tanh(x) ** 3):
            torch.testing.assert_close(argmax_match(f(t)), expected, rtol=0, atol=0)


class TestExtractCorrespondence:
    def test_default_strategy(self):
        assert DEFAULT_STRATEGY is MatchStrategy.MAX_SIM_F

    def test_identical_views_identity(self):
        torch.manual_seed(0)
        f = torch.randn(2, 16, 8, 8)
        c = extract_correspondence(MatchStrategy.MAX_SIM_F, f, f.clone(), None, None, 7)
        np.testing.assert_array_equal(c.numpy(), np.tile(np.arange(49), (2, 1)))

    def test_max_sim_f_equals_pooled_oracle(self):
        torch.manual_seed(1)
        f1, f2 = torch.randn(1, 8, 8, 8), torch.randn(1, 8, 8, 8)
        c = extract_correspondence("max_sim_f", f1, f2, None, None, 4)[0].numpy()
        a = pooled_cells(f1, 4)[0].numpy().astype(np.float64)
        b = pooled_cells(f2, 4)[0].numpy().astype(np.float64)
        np.testing.assert_array_equal(c, _row_scan(_loop_similarity(a, b)))

    def test_max_sim_theta_uses_dense(self):
        torch.manual_seed(2)
        d1, d2 = torch.randn(3, 9, 4), torch.randn(3, 9, 4)
        f = torch.zeros(3, 4, 6, 6)
        c = extract_correspondence(MatchStrategy.MAX_SIM_THETA, f, f, d1, d2, 3)
        for b in range(3):
            np.testing.assert_array_equal(
                c[b].numpy(), _row_scan(_loop_similarity(d1[b].numpy(), d2[b].numpy())))

    def test_max_sim_theta_grid_mismatch(self):
        f = torch.zeros(1, 4, 6, 6)
        with pytest.raises(ShapeError):
            extract_correspondence("max_sim_theta", f, f, torch.randn(1, 4, 4),
                                   torch.randn(1, 4, 4), 3)

    def test_random_reproducible(self):
        f = torch.zeros(4, 2, 8, 8)
        a = extract_correspondence("random", f, f, None, None, 7, torch.Generator().manual_seed(3))
        b = extract_correspondence("random", f, f, None, None, 7, torch.Generator().manual_seed(3))
        torch.testing.assert_close(a, b, rtol=0, atol=0)
        assert a.shape == (4, 49) and a.min() >= 0 and a.max() < 49

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            MatchStrategy("nearest")


class TestMutualMatches:
    def test_identical_maps(self):
        torch.manual_seed(0)
        f = torch.randn(8, 3, 3)
        out = mutual_matches(f, f.clone(), 0.9)
        assert [(i, j) for i, j, _ in out] == [(i, i) for i in range(9)]
        np.testing.assert_allclose([s for _, _, s in out], 1.0, atol=1e-12)

    def test_default_threshold(self):
        f = torch.randn(4, 2, 2)
        assert mutual_matches(f, f) == mutual_matches(f, f, 0.9)

    def test_non_reciprocal_excluded(self):
        # view 1 cells: a, b, c ; view 2 cells: x, y, z
        # a -> x, but x's best in view 1 is b, so (a, x) is dropped
        a = [1.0, 0.0, 0.0]
        b = [0.95, 0.31, 0.0]
        c = [0.0, 0.0, 1.0]
        x = [0.96, 0.28, 0.0]
        y = [0.0, 1.0, 0.0]
        z = [0.0, 0.0, 1.0]
        f1 = torch.tensor([a, b, c], dtype=torch.float64).T.reshape(3, 1, 3)
        f2 = torch.tensor([x, y, z], dtype=torch.float64).T.reshape(3, 1, 3)
        got = [(i, j) for i, j, _ in mutual_matches(f1, f2, -1.0)]
        assert got == _mutual_oracle(f1.numpy(), f2.numpy(), -1.0)
        assert (0, 0) not in got
        assert (1, 0) in got and (2, 2) in got

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), side=st.integers(1, 4),
           thr=st.sampled_from([-1.0, 0.0, 0.5, 0.9]))
    def test_matches_oracle_and_symmetric(self, seed, side, thr):
        rng = np.random.default_rng(seed)
        f1 = torch.from_numpy(rng.standard_normal((5, side, side)))
        f2 = torch.from_numpy(rng.standard_normal((5, side, side)))
        fwd = mutual_matches(f1, f2, thr)
        bwd = mutual_matches(f2, f1, thr)
        assert [(i, j) for i, j, _ in fwd] == _mutual_oracle(f1.numpy(), f2.numpy(), thr)
        assert sorted((j, i) for i, j, _ in fwd) == sorted((i, j) for i, j, _ in bwd)
        for _, _, s in fwd:
            assert thr <= s <= 1 + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mutual_matches(torch.zeros(2, 3, 3), torch.zeros(2, 2, 2))
