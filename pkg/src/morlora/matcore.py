"""Dense float64 linear algebra and seeded randomness.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 and vectors
are 1-D arrays. Products are accumulated in a fixed order (ascending inner
index) so results are bit-reproducible and match a naive triple loop exactly.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class SVDConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"one-sided Jacobi did not converge after {sweeps} sweeps "
            f"(max off-diagonal ratio {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {M.shape}")
    return M


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    return v


def accumulate_product(out: np.ndarray, M: np.ndarray, N: np.ndarray) -> np.ndarray:
    """``out += M @ N`` one rank-1 term at a time, inner index ascending."""
    for k in range(M.shape[1]):
        out += np.multiply.outer(M[:, k], N[k, :])
    return out


def matmul(M, N) -> np.ndarray:
    """Matrix product with a fixed k-ascending accumulation order."""
    M = np.asarray(M, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    if M.ndim != 2 or N.ndim != 2 or M.shape[1] != N.shape[0]:
        raise ShapeError(f"cannot multiply shape {M.shape} by shape {N.shape}")
    out = np.zeros((M.shape[0], N.shape[1]))
    return accumulate_product(out, M, N)


def matvec(M, x) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if M.ndim != 2 or x.ndim != 1 or M.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply shape {M.shape} by vector of shape {x.shape}")
    out = np.zeros(M.shape[0])
    for k in range(M.shape[1]):
        out += M[:, k] * x[k]
    return out


def softmax_stable(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise ShapeError(f"softmax needs a non-empty vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(H) -> np.ndarray:
    """Row-wise ``softmax_stable`` of a 2-D array."""
    H = np.asarray(H, dtype=np.float64)
    e = np.exp(H - H.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def jacobi_svd(M, tol: float = 1e-12, max_sweeps: int = 60):
    """Thin SVD of an m x n matrix (m >= n) by one-sided Jacobi rotations.

    Returns ``(U, S, V)`` with ``M ~= U @ diag(S) @ V.T``, S descending.
    """
    M = as_matrix(M)
    m, n = M.shape
    if m < n:
        raise ShapeError(f"jacobi_svd needs rows >= cols, got shape {M.shape}")
    U = M.copy()
    V = np.eye(n)

    for sweep in range(max_sweeps):
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = U[:, p], U[:, q]
                alpha = float(up @ up)
                beta = float(uq @ uq)
                gamma = float(up @ uq)
                if gamma == 0.0 or alpha == 0.0 or beta == 0.0:
                    continue
                ratio = abs(gamma) / math.sqrt(alpha * beta)
                if ratio <= tol:
                    continue
                worst = max(worst, ratio)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                U[:, q] = s * up + c * uq
                U[:, p] = new_p
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if worst == 0.0:
            break
    else:
        raise SVDConvergenceError(worst, max_sweeps)

    S = np.sqrt(np.einsum("ij,ij->j", U, U))
    order = np.argsort(-S, kind="stable")
    S, U, V = S[order], U[:, order], V[:, order]

    smax = S[0] if n else 0.0
    floor = max(smax * n * np.finfo(np.float64).eps, np.finfo(np.float64).tiny)
    deficient = []
    for j in range(n):
        if S[j] > floor:
            U[:, j] /= S[j]
        else:
            deficient.append(j)
    if deficient:
        _complete_orthonormal(U, [j for j in range(n) if j not in deficient], deficient)
    return U, S, V


def _complete_orthonormal(U: np.ndarray, good: list[int], missing: list[int]) -> None:
    """Fill columns ``missing`` of U with unit vectors orthogonal to the rest."""
    basis = [U[:, j] for j in good]
    m = U.shape[0]
    for j in missing:
        best, best_norm = None, -1.0
        for e in np.eye(m):
            w = e.copy()
            for _ in range(2):
                for b in basis:
                    w -= (b @ w) * b
            nrm = np.linalg.norm(w)
            if nrm > best_norm:
                best, best_norm = w, nrm
        U[:, j] = best / best_norm
        basis.append(U[:, j])


class SplitMix64:
    """Counter-based 64-bit generator (splitmix64) with Box-Muller normals.

    The k-th output mixes ``seed + k * GOLDEN_GAMMA`` through two
    xor-shift-multiply rounds and a final xor-shift, so the stream is fully
    determined by the integer seed.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def __repr__(self):
        return f"SplitMix64(state={self.state:#018x})"

    @staticmethod
    def mix(z: np.ndarray) -> np.ndarray:
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + k * np.uint64(GOLDEN_GAMMA)
            out = self.mix(states)
        self.state = (self.state + n * GOLDEN_GAMMA) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n]

    def spawn(self) -> "SplitMix64":
        """Independent child generator seeded from this stream."""
        return SplitMix64(int(self.next_u64(1)[0]))


def rng_gaussian_matrix(rng: SplitMix64, rows: int, cols: int, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    z = rng.normal(rows * cols).reshape(rows, cols)
    return mean + stddev * z
