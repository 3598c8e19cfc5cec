"""LoRA, MoE-style LoRA and Mixture-of-Ranks adapter layers (forward pass).

Diagonal scalings are stored as vectors and applied elementwise. Every layer
keeps its frozen base weight ``W`` as a read-only array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matcore import (
    ShapeError,
    SplitMix64,
    accumulate_product,
    as_matrix,
    as_vector,
    matmul,
    matvec,
    rng_gaussian_matrix,
    softmax_rows,
    softmax_stable,
)

ROUTER_KINDS = ("learnable", "mean_pool", "balanced")


@dataclass(frozen=True)
class RouterKind:
    kind: str = "learnable"
    aux_coefficient: float = 0.0

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise ValueError(f"unknown router kind {self.kind!r}; expected one of {ROUTER_KINDS}")
        if self.aux_coefficient < 0:
            raise ValueError("aux_coefficient must be >= 0")
        if self.kind != "balanced" and self.aux_coefficient != 0:
            raise ValueError("aux_coefficient only applies to the balanced router")

    @classmethod
    def learnable(cls):
        return cls("learnable")

    @classmethod
    def mean_pool(cls):
        return cls("mean_pool")

    @classmethod
    def balanced(cls, aux_coefficient: float):
        return cls("balanced", float(aux_coefficient))


def _frozen(W) -> np.ndarray:
    W = as_matrix(W, "W").copy()
    W.setflags(write=False)
    return W


def _check_rank(rank: int, d_in: int, d_out: int):
    if rank < 1 or rank > min(d_in, d_out):
        raise ShapeError(f"rank {rank} must lie in [1, min(d_in={d_in}, d_out={d_out})]")


def _expect(arr: np.ndarray, shape: tuple, name: str):
    if arr.shape != shape:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")


@dataclass
class LoRALayer:
    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        self.W = _frozen(self.W)
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        d_out, d_in = self.W.shape
        _check_rank(self.rank, d_in, d_out)
        _expect(self.A, (self.rank, d_in), "A")
        _expect(self.B, (d_out, self.rank), "B")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def trainable(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B}


@dataclass
class MoELoRALayer:
    """N independent LoRA experts mixed by a softmax router.

    ``A`` stacks the experts' down-projections as (N, r, d_in) and ``B`` the
    up-projections as (N, d_out, r).
    """

    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Wr: np.ndarray
    alpha: float

    def __post_init__(self):
        self.W = _frozen(self.W)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.Wr = as_matrix(self.Wr, "Wr")
        d_out, d_in = self.W.shape
        if self.A.ndim != 3 or self.A.shape[0] < 1:
            raise ShapeError(f"A must be (N, r, d_in), got {self.A.shape}")
        n, r = self.A.shape[:2]
        _check_rank(r, d_in, d_out)
        _expect(self.A, (n, r, d_in), "A")
        _expect(self.B, (n, d_out, r), "B")
        _expect(self.Wr, (n, d_in), "Wr")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def n_experts(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def trainable(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B, "Wr": self.Wr}


@dataclass
class MoRLayer:
    """Shared (A, B) specialised per expert by rows of ``omega_a``/``omega_b``."""

    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    omega_a: np.ndarray
    omega_b: np.ndarray
    Wr: np.ndarray
    alpha: float
    router: RouterKind = field(default_factory=RouterKind)

    def __post_init__(self):
        self.W = _frozen(self.W)
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        self.omega_a = as_matrix(self.omega_a, "omega_a")
        self.omega_b = as_matrix(self.omega_b, "omega_b")
        self.Wr = as_matrix(self.Wr, "Wr")
        d_out, d_in = self.W.shape
        r, n = self.rank, self.n_experts
        _check_rank(r, d_in, d_out)
        _expect(self.A, (r, d_in), "A")
        _expect(self.B, (d_out, r), "B")
        _expect(self.omega_a, (n, r), "omega_a")
        _expect(self.omega_b, (n, d_out), "omega_b")
        _expect(self.Wr, (n, d_in), "Wr")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def n_experts(self) -> int:
        return self.omega_a.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def trainable(self) -> dict[str, np.ndarray]:
        return {"A": self.A, "B": self.B, "omega_a": self.omega_a,
                "omega_b": self.omega_b, "Wr": self.Wr}


# -- initialisation ---------------------------------------------------------

def init_lora(W, rank: int, alpha: float, rng: SplitMix64) -> LoRALayer:
    W = as_matrix(W, "W")
    A = rng_gaussian_matrix(rng, rank, W.shape[1], 0.0, 1.0 / np.sqrt(rank))
    return LoRALayer(W, A, np.zeros((W.shape[0], rank)), alpha)


def init_moelora(W, rank: int, n_experts: int, alpha: float, rng: SplitMix64) -> MoELoRALayer:
    W = as_matrix(W, "W")
    d_out, d_in = W.shape
    A = rng_gaussian_matrix(rng, n_experts * rank, d_in, 0.0, 1.0 / np.sqrt(rank))
    Wr = rng_gaussian_matrix(rng, n_experts, d_in, 0.0, 0.02)
    return MoELoRALayer(W, A.reshape(n_experts, rank, d_in),
                        np.zeros((n_experts, d_out, rank)), Wr, alpha)


def init_mor(W, rank: int, n_experts: int, alpha: float, rng: SplitMix64,
             router: RouterKind | None = None) -> MoRLayer:
    """A Gaussian(1/sqrt(r)), B zero, scalings one, router Gaussian(0.02)."""
    W = as_matrix(W, "W")
    d_out, d_in = W.shape
    A = rng_gaussian_matrix(rng, rank, d_in, 0.0, 1.0 / np.sqrt(rank))
    Wr = rng_gaussian_matrix(rng, n_experts, d_in, 0.0, 0.02)
    return MoRLayer(W, A, np.zeros((d_out, rank)), np.ones((n_experts, rank)),
                    np.ones((n_experts, d_out)), Wr, alpha, router or RouterKind())


# -- forward passes -----------------------------------------------------------

def _check_x(x, d_in: int) -> np.ndarray:
    x = as_vector(x, "x")
    if x.shape[0] != d_in:
        raise ShapeError(f"input has length {x.shape[0]}, layer expects d_in={d_in}")
    return x


def _check_X(X, d_in: int) -> np.ndarray:
    X = as_matrix(X, "X")
    if X.shape[1] != d_in:
        raise ShapeError(f"input batch has shape {X.shape}, layer expects d_in={d_in}")
    return X


def lora_forward(layer: LoRALayer, x) -> np.ndarray:
    x = _check_x(x, layer.W.shape[1])
    return matvec(layer.W, x) + layer.scale * matvec(layer.B, matvec(layer.A, x))


def lora_forward_batch(layer: LoRALayer, X, mask=None) -> np.ndarray:
    """Row-batched LoRA; ``mask`` (if given) multiplies the adapter input."""
    X = _check_X(X, layer.W.shape[1])
    Xa = X if mask is None else X * mask
    Y = matmul(X, layer.W.T)
    return Y + layer.scale * matmul(matmul(Xa, layer.A.T), layer.B.T)


def mor_expert_apply(layer: MoRLayer, i: int, x) -> np.ndarray:
    """Apply expert direction i: (alpha/r) * lam_B * (B @ (lam_A * (A @ x)))."""
    if not 0 <= i < layer.n_experts:
        raise IndexError(f"expert index {i} out of range for {layer.n_experts} experts")
    x = _check_x(x, layer.d_in)
    u = layer.omega_a[i] * matvec(layer.A, x)
    return layer.scale * (layer.omega_b[i] * matvec(layer.B, u))


def router_weights(layer: MoRLayer | MoELoRALayer, x) -> np.ndarray:
    router = getattr(layer, "router", RouterKind())
    x = _check_x(x, layer.W.shape[1])
    if router.kind == "mean_pool":
        return np.full(layer.n_experts, 1.0 / layer.n_experts)
    return softmax_stable(matvec(layer.Wr, x))


def router_weights_batch(layer: MoRLayer | MoELoRALayer, X) -> np.ndarray:
    router = getattr(layer, "router", RouterKind())
    X = _check_X(X, layer.W.shape[1])
    if router.kind == "mean_pool":
        return np.full((X.shape[0], layer.n_experts), 1.0 / layer.n_experts)
    return softmax_rows(matmul(X, layer.Wr.T))


def mor_forward(layer: MoRLayer, x):
    """Per-expert loop form. Returns ``(y, g)``."""
    x = _check_x(x, layer.d_in)
    g = router_weights(layer, x)
    y = matvec(layer.W, x)
    for i in range(layer.n_experts):
        y = y + g[i] * mor_expert_apply(layer, i, x)
    return y, g


@dataclass
class MoRCache:
    """Intermediates of the stacked forward, reused by the backward pass."""

    Xa: np.ndarray  # adapter input (after dropout mask)
    U: np.ndarray  # (batch, r)    A x
    V: np.ndarray  # (batch, N, r) omega_a * u
    P: np.ndarray  # (batch, N, d_out) B v
    Q: np.ndarray  # (batch, N, d_out) omega_b * p
    G: np.ndarray  # (batch, N)


def mor_forward_stacked(layer: MoRLayer, X, mask=None, return_cache: bool = False):
    """All experts at once through the stacked scaling matrices.

    Returns ``(Y, G)`` or ``(Y, G, cache)``.
    """
    X = _check_X(X, layer.d_in)
    if mask is not None and mask.shape != X.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} does not match input {X.shape}")
    batch, n, r = X.shape[0], layer.n_experts, layer.rank
    Xa = X if mask is None else X * mask
    G = router_weights_batch(layer, X)
    U = matmul(Xa, layer.A.T)
    V = layer.omega_a[None, :, :] * U[:, None, :]
    P = matmul(V.reshape(batch * n, r), layer.B.T).reshape(batch, n, layer.d_out)
    Q = layer.omega_b[None, :, :] * P
    Y = matmul(X, layer.W.T)
    delta = np.zeros_like(Y)
    for i in range(n):
        delta += G[:, i:i + 1] * Q[:, i, :]
    Y = Y + layer.scale * delta
    if return_cache:
        return Y, G, MoRCache(Xa, U, V, P, Q, G)
    return Y, G


def moelora_forward(layer: MoELoRALayer, x):
    x = _check_x(x, layer.W.shape[1])
    g = router_weights(layer, x)
    y = matvec(layer.W, x)
    for i in range(layer.n_experts):
        y = y + g[i] * (layer.scale * matvec(layer.B[i], matvec(layer.A[i], x)))
    return y, g


def moelora_forward_batch(layer: MoELoRALayer, X, mask=None):
    X = _check_X(X, layer.W.shape[1])
    Xa = X if mask is None else X * mask
    G = router_weights_batch(layer, X)
    Y = matmul(X, layer.W.T)
    for i in range(layer.n_experts):
        Pi = matmul(matmul(Xa, layer.A[i].T), layer.B[i].T)
        Y = Y + G[:, i:i + 1] * (layer.scale * Pi)
    return Y, G


def forward_batch(layer, X, mask=None):
    """Dispatch to the batched forward of any adapter; returns ``(Y, G or None)``."""
    if isinstance(layer, MoRLayer):
        return mor_forward_stacked(layer, X, mask)
    if isinstance(layer, MoELoRALayer):
        return moelora_forward_batch(layer, X, mask)
    if isinstance(layer, LoRALayer):
        return lora_forward_batch(layer, X, mask), None
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


# -- routing losses and identities -------------------------------------------

def top_expert_fractions(G) -> np.ndarray:
    """Fraction of rows whose argmax is each expert (ties go to the lowest index)."""
    G = as_matrix(G, "G")
    counts = np.bincount(np.argmax(G, axis=1), minlength=G.shape[1])
    return counts / G.shape[0]


def balance_loss(G) -> float:
    """Switch-style load balancing loss ``N * sum_i f_i * P_i``."""
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("balance_loss needs a non-empty (batch, N) matrix")
    f = top_expert_fractions(G)
    P = G.mean(axis=0)
    return float(G.shape[1] * np.sum(f * P))


def highrank_transform_check(B, A, lam_a, lam_b) -> float:
    """Frobenius gap between the diagonal-scaled product and the absorbed form."""
    B, A = as_matrix(B, "B"), as_matrix(A, "A")
    lam_a, lam_b = as_vector(lam_a, "lam_a"), as_vector(lam_b, "lam_b")
    d_out, r = B.shape
    _expect(A, (r, A.shape[1]), "A")
    _expect(lam_a, (r,), "lam_a")
    _expect(lam_b, (d_out,), "lam_b")
    scaled = matmul(matmul(matmul(np.diag(lam_b), B), np.diag(lam_a)), A)
    absorbed = lam_b[:, None] * B
    absorbed_a = lam_a[:, None] * A
    out = np.zeros((d_out, A.shape[1]))
    accumulate_product(out, absorbed, absorbed_a)
    return float(np.linalg.norm(scaled - out))


def dropout_mask(rng: SplitMix64, shape: tuple, rate: float) -> np.ndarray | None:
    """Inverted-dropout multiplier; ``None`` when rate is zero."""
    if rate <= 0.0:
        return None
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = rng.uniform(int(np.prod(shape))).reshape(shape) >= rate
    return keep / (1.0 - rate)
