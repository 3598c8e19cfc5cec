import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morlora.matcore import SplitMix64, matmul, rng_gaussian_matrix as gauss, softmax_stable
from morlora.rankops import block_reconstruct, block_split, numerical_rank, sparse_mix, truncation_curve


def test_single_block_is_whole():
    rng = SplitMix64(0)
    B, A = gauss(rng, 5, 4), gauss(rng, 4, 3)
    (Bi, Ai), = block_split(B, A, 1).blocks
    assert np.array_equal(Bi, B) and np.array_equal(Ai, A)


def test_rank_one_blocks_outer_products():
    rng = SplitMix64(1)
    B, A = gauss(rng, 5, 4), gauss(rng, 4, 3)
    split = block_split(B, A, 4)
    outer = sum(np.outer(B[:, i], A[i]) for i in range(4))
    assert all(Bi.shape == (5, 1) and Ai.shape == (1, 3) for Bi, Ai in split.blocks)
    assert np.linalg.norm(block_reconstruct(split) - outer) < 1e-13


def test_slab_shapes_and_indices():
    rng = SplitMix64(2)
    B, A = gauss(rng, 6, 8), gauss(rng, 8, 5)
    split = block_split(B, A, 4)
    for i, (Bi, Ai) in enumerate(split.blocks):
        assert Bi.shape == (6, 2) and Ai.shape == (2, 5)
        assert np.array_equal(Bi, B[:, 2 * i:2 * i + 2]) and np.array_equal(Ai, A[2 * i:2 * i + 2])


def test_non_divisor_rejected():
    with pytest.raises(ValueError):
        block_split(np.ones((3, 4)), np.ones((4, 2)), 3)


def test_zero_reconstruct():
    assert not np.any(block_reconstruct(block_split(np.zeros((3, 4)), np.zeros((4, 2)), 2)))


def test_random_reconstruct():
    rng = SplitMix64(3)
    B, A = gauss(rng, 6, 4), gauss(rng, 4, 5)
    assert np.linalg.norm(block_reconstruct(block_split(B, A, 2)) - matmul(B, A)) < 1e-13


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12))
def test_identity_for_every_divisor(seed, r):
    rng = SplitMix64(seed)
    B, A = gauss(rng, 7, r), gauss(rng, r, 6)
    for n in (n for n in range(1, r + 1) if r % n == 0):
        assert np.linalg.norm(block_reconstruct(block_split(B, A, n)) - matmul(B, A)) < 1e-13


class TestSparseMix:
    def test_full_uniform(self):
        rng = SplitMix64(4)
        B, A = gauss(rng, 6, 6), gauss(rng, 6, 4)
        out = sparse_mix(block_split(B, A, 3), np.full(3, 1 / 3), 3)
        assert np.allclose(out, matmul(B, A) / 3, rtol=1e-13, atol=1e-13)

    def test_top1(self):
        rng = SplitMix64(5)
        B, A = gauss(rng, 6, 6), gauss(rng, 6, 4)
        split = block_split(B, A, 3)
        out = sparse_mix(split, np.array([0.2, 0.5, 0.3]), 1)
        assert np.allclose(out, matmul(*split.blocks[1]), rtol=1e-14, atol=1e-14)

    def test_ties_pick_lowest_index(self):
        rng = SplitMix64(6)
        split = block_split(gauss(rng, 4, 4), gauss(rng, 4, 3), 4)
        out = sparse_mix(split, np.full(4, 0.25), 1)
        assert np.allclose(out, matmul(*split.blocks[0]), rtol=1e-14, atol=1e-14)

    def test_k_out_of_range(self):
        split = block_split(np.ones((3, 4)), np.ones((4, 2)), 2)
        with pytest.raises(ValueError):
            sparse_mix(split, np.array([0.5, 0.5]), 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 4), st.integers(1, 3))
    def test_rank_bounded_by_active_blocks(self, seed, n, w):
        rng = SplitMix64(seed)
        split = block_split(gauss(rng, 14, n * w), gauss(rng, n * w, 12), n)
        g = softmax_stable(rng.normal(n))
        for k in range(1, n + 1):
            assert numerical_rank(sparse_mix(split, g, k)) <= k * w

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 5))
    def test_full_activation_equals_dense_mixture(self, seed, n):
        rng = SplitMix64(seed)
        split = block_split(gauss(rng, 5, 2 * n), gauss(rng, 2 * n, 4), n)
        g = softmax_stable(rng.normal(n))
        dense = sum(g[i] * matmul(Bi, Ai) for i, (Bi, Ai) in enumerate(split.blocks))
        assert np.allclose(sparse_mix(split, g, n), dense, rtol=1e-13, atol=1e-13)


class TestTruncation:
    def test_rank_two_exact(self):
        rng = SplitMix64(7)
        M = np.outer(rng.normal(6), rng.normal(5)) + np.outer(rng.normal(6), rng.normal(5))
        assert truncation_curve(M).errors[2] < 1e-10

    def test_identity(self):
        assert np.allclose(truncation_curve(np.eye(5)).errors, [5, 4, 3, 2, 1, 0], rtol=0, atol=1e-12)

    def test_matches_explicit_reconstruction(self):
        M = gauss(SplitMix64(8), 8, 6)
        curve = truncation_curve(M)
        U, S, Vt = np.linalg.svd(M, full_matrices=False)  # independent oracle
        for r in range(7):
            best = U[:, :r] @ np.diag(S[:r]) @ Vt[:r]
            assert curve.errors[r] == pytest.approx(np.sum((M - best) ** 2), rel=1e-10, abs=1e-12)

    def test_wide_matrix_transposed(self):
        M = gauss(SplitMix64(9), 4, 7)
        assert len(truncation_curve(M).errors) == 5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 16), st.integers(1, 12))
    def test_nonincreasing_and_drops(self, seed, m, n):
        M = gauss(SplitMix64(seed), m, n)
        c = truncation_curve(M)
        assert np.all(np.diff(c.errors) <= 0)
        assert c.errors[-1] <= 1e-10 * np.sum(M * M)
        drops = c.errors[:-1] - c.errors[1:]
        assert np.allclose(drops, c.singular_values ** 2, rtol=1e-9, atol=0)
