"""Executable checks for rank decompositions of low-rank updates.

* slicing ``B @ A`` into ``n`` rank-``r/n`` blocks and summing them back,
* top-k gated mixtures of those blocks,
* Eckart-Young truncation error as a function of kept rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matcore import ShapeError, accumulate_product, as_matrix, as_vector, jacobi_svd


@dataclass(frozen=True)
class BlockSplit:
    blocks: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def shape(self) -> tuple[int, int]:
        B0, A0 = self.blocks[0]
        return B0.shape[0], A0.shape[1]


@dataclass(frozen=True)
class TruncationCurve:
    ranks: np.ndarray
    errors: np.ndarray
    singular_values: np.ndarray

    def rows(self):
        return zip(self.ranks.tolist(), self.errors.tolist())


def block_split(B, A, n: int) -> BlockSplit:
    B, A = as_matrix(B, "B"), as_matrix(A, "A")
    r = B.shape[1]
    if A.shape[0] != r:
        raise ShapeError(f"B {B.shape} and A {A.shape} disagree on rank")
    if n < 1 or r % n:
        raise ValueError(f"number of blocks {n} must be a positive divisor of rank {r}")
    w = r // n
    return BlockSplit(tuple((B[:, i * w:(i + 1) * w], A[i * w:(i + 1) * w, :]) for i in range(n)))


def block_reconstruct(split: BlockSplit) -> np.ndarray:
    """Sum of the block products, accumulated in the same order as ``B @ A``."""
    out = np.zeros(split.shape)
    for Bi, Ai in split.blocks:
        accumulate_product(out, Bi, Ai)
    return out


def sparse_mix(split: BlockSplit, g, k: int) -> np.ndarray:
    """Weighted sum of the k highest-gated blocks, gates renormalised to 1."""
    g = as_vector(g, "g")
    if g.shape[0] != split.n:
        raise ShapeError(f"gate vector has {g.shape[0]} entries for {split.n} blocks")
    if not 1 <= k <= split.n:
        raise ValueError(f"k={k} must lie in [1, {split.n}]")
    chosen = sorted(np.argsort(-g, kind="stable")[:k].tolist())
    total = g[chosen].sum()
    out = np.zeros(split.shape)
    for i in chosen:
        Bi, Ai = split.blocks[i]
        accumulate_product(out, (g[i] / total) * Bi, Ai)
    return out


def truncation_curve(delta_w) -> TruncationCurve:
    """``errors[r] = ||ΔW - best rank-r approximation||_F^2`` for r = 0..min(d, h)."""
    M = as_matrix(delta_w, "delta_w")
    if M.shape[0] < M.shape[1]:
        M = M.T
    _, S, _ = jacobi_svd(M)
    sq = S ** 2
    tail = np.zeros(len(S) + 1)
    for r in range(len(S) - 1, -1, -1):
        tail[r] = tail[r + 1] + sq[r]
    return TruncationCurve(np.arange(len(S) + 1), tail, S)


def numerical_rank(M, rel_tol: float = 1e-10) -> int:
    M = as_matrix(M)
    if M.shape[0] < M.shape[1]:
        M = M.T
    _, S, _ = jacobi_svd(M)
    if S[0] == 0:
        return 0
    return int(np.sum(S > rel_tol * S[0]))
