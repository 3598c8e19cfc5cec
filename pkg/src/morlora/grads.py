"""Hand-derived reverse-mode gradients for the adapters, plus a central
finite-difference checker.

The finite-difference losses below re-implement each forward pass with plain
numpy in extended precision (``np.longdouble``). They share no code with the
production forward, and the extra precision keeps cancellation error well below
the 1e-6 relative tolerance even for small gradient entries.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .adapters import (
    LoRALayer,
    MoRCache,
    MoELoRALayer,
    MoRLayer,
    lora_forward_batch,
    moelora_forward_batch,
    mor_forward_stacked,
    top_expert_fractions,
)
from .matcore import ShapeError, as_matrix, matmul


@dataclass
class LoRAGrads:
    A: np.ndarray
    B: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MoELoRAGrads:
    A: np.ndarray  # (N, r, d_in)
    B: np.ndarray  # (N, d_out, r)
    Wr: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MoRGrads:
    A: np.ndarray
    B: np.ndarray
    omega_a: np.ndarray
    omega_b: np.ndarray
    Wr: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_dY(X, dY, d_in: int, d_out: int):
    X = as_matrix(X, "X")
    dY = as_matrix(dY, "dY")
    if X.shape[1] != d_in or dY.shape != (X.shape[0], d_out):
        raise ShapeError(f"X {X.shape} / dY {dY.shape} inconsistent with layer (d_in={d_in}, d_out={d_out})")
    return X, dY


def _softmax_backward(G: np.ndarray, dG: np.ndarray) -> np.ndarray:
    return G * (dG - np.sum(G * dG, axis=1, keepdims=True))


def balance_loss_grad(G: np.ndarray) -> np.ndarray:
    """d(balance_loss)/dG with the top-expert fractions held constant."""
    f = top_expert_fractions(G)
    return np.broadcast_to(G.shape[1] * f / G.shape[0], G.shape).copy()


def lora_backward(layer: LoRALayer, X, dY, mask=None) -> LoRAGrads:
    d_out, d_in = layer.W.shape
    X, dY = _check_dY(X, dY, d_in, d_out)
    Xa = X if mask is None else X * mask
    U = matmul(Xa, layer.A.T)
    s = layer.scale
    dB = s * matmul(dY.T, U)
    dU = s * matmul(dY, layer.B)
    dA = matmul(dU.T, Xa)
    return LoRAGrads(dA, dB)


def moelora_backward(layer: MoELoRALayer, X, dY, mask=None) -> MoELoRAGrads:
    d_out, d_in = layer.W.shape
    X, dY = _check_dY(X, dY, d_in, d_out)
    Xa = X if mask is None else X * mask
    _, G = moelora_forward_batch(layer, X, mask)
    s = layer.scale
    dA = np.zeros_like(layer.A)
    dB = np.zeros_like(layer.B)
    dG = np.zeros_like(G)
    for i in range(layer.n_experts):
        Ui = matmul(Xa, layer.A[i].T)
        Pi = matmul(Ui, layer.B[i].T)
        dG[:, i] = s * np.sum(Pi * dY, axis=1)
        dPi = s * G[:, i:i + 1] * dY
        dB[i] = matmul(dPi.T, Ui)
        dA[i] = matmul(matmul(dPi, layer.B[i]).T, Xa)
    dWr = matmul(_softmax_backward(G, dG).T, X)
    return MoELoRAGrads(dA, dB, dWr)


def mor_backward(layer: MoRLayer, X, dY, mask=None, cache: MoRCache | None = None) -> MoRGrads:
    """Gradients of ``L(Y)`` (given ``dY = dL/dY``) for every trainable MoR tensor.

    With a balanced router the term ``aux_coefficient * balance_loss(G)`` is
    included, treating the top-expert fractions as constants. ``cache`` may
    carry the intermediates of a matching ``mor_forward_stacked`` call.
    """
    X, dY = _check_dY(X, dY, layer.d_in, layer.d_out)
    c = cache or mor_forward_stacked(layer, X, mask, return_cache=True)[2]
    G = c.G
    batch, n, r = X.shape[0], layer.n_experts, layer.rank
    s = layer.scale

    dQ = s * G[:, :, None] * dY[:, None, :]  # (batch, N, d_out)
    dG = s * np.einsum("bno,bo->bn", c.Q, dY)
    d_omega_b = np.sum(c.P * dQ, axis=0)
    dP = layer.omega_b[None] * dQ
    dP2 = dP.reshape(batch * n, layer.d_out)
    dB = matmul(dP2.T, c.V.reshape(batch * n, r))
    dV = matmul(dP2, layer.B).reshape(batch, n, r)
    d_omega_a = np.sum(c.U[:, None, :] * dV, axis=0)
    dU = np.sum(layer.omega_a[None] * dV, axis=1)
    dA = matmul(dU.T, c.Xa)

    if layer.router.kind == "mean_pool":
        dWr = np.zeros_like(layer.Wr)
    else:
        if layer.router.kind == "balanced" and layer.router.aux_coefficient > 0:
            dG = dG + layer.router.aux_coefficient * balance_loss_grad(G)
        dWr = matmul(_softmax_backward(G, dG).T, X)
    return MoRGrads(dA, dB, d_omega_a, d_omega_b, dWr)


def backward(layer, X, dY, mask=None, cache=None):
    if isinstance(layer, MoRLayer):
        return mor_backward(layer, X, dY, mask, cache)
    if isinstance(layer, MoELoRALayer):
        return moelora_backward(layer, X, dY, mask)
    if isinstance(layer, LoRALayer):
        return lora_backward(layer, X, dY, mask)
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


# -- finite differences -------------------------------------------------------

def finite_diff_check(forward, params, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``forward`` at ``params``.

    Arithmetic runs in the dtype of ``params`` (at least float64); the result
    is returned as float64.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    p = np.array(params, dtype=np.result_type(np.asarray(params).dtype, np.float64)).ravel()
    h = p.dtype.type(h)
    grads = np.empty(p.shape[0], dtype=p.dtype)
    for i in range(p.shape[0]):
        old = p[i]
        p[i] = old + h
        f_plus = forward(p)
        p[i] = old - h
        f_minus = forward(p)
        p[i] = old
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite loss while perturbing coordinate {i}")
        grads[i] = (f_plus - f_minus) / (2 * h)
    return grads.astype(np.float64)


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass
class GradReport:
    errors: dict[str, float]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(e < self.threshold for e in self.errors.values())

    def __str__(self):
        parts = ", ".join(f"{k}={v:.2e}" for k, v in self.errors.items())
        return f"{'PASS' if self.passed else 'FAIL'} ({parts}; threshold {self.threshold:g})"


def _softmax_ld(H):
    e = np.exp(H - H.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _oracle_loss(layer, X, tensors: dict[str, np.ndarray]):
    """½‖Y‖² (+ balance term) evaluated independently in extended precision."""
    ld = np.longdouble
    X = X.astype(ld)
    W = layer.W.astype(ld)
    Y = X @ W.T
    aux = ld(0)
    if isinstance(layer, LoRALayer):
        s = ld(layer.alpha) / ld(layer.rank)
        Y = Y + s * ((X @ tensors["A"].T) @ tensors["B"].T)
    elif isinstance(layer, MoELoRALayer):
        s = ld(layer.alpha) / ld(layer.rank)
        G = _softmax_ld(X @ tensors["Wr"].T)
        for i in range(layer.n_experts):
            Y = Y + G[:, i:i + 1] * (s * ((X @ tensors["A"][i].T) @ tensors["B"][i].T))
    else:
        s = ld(layer.alpha) / ld(layer.rank)
        n = layer.n_experts
        if layer.router.kind == "mean_pool":
            G = np.full((X.shape[0], n), ld(1) / ld(n), dtype=ld)
        else:
            G = _softmax_ld(X @ tensors["Wr"].T)
        A, B = tensors["A"], tensors["B"]
        for i in range(n):
            Di = (tensors["omega_b"][i][:, None] * B) @ (tensors["omega_a"][i][:, None] * A)
            Y = Y + G[:, i:i + 1] * (s * (X @ Di.T))
        if layer.router.kind == "balanced":
            f = np.bincount(np.argmax(G, axis=1), minlength=n).astype(ld) / ld(X.shape[0])
            aux = ld(layer.router.aux_coefficient) * ld(n) * np.sum(f * G.mean(axis=0))
    return ld(0.5) * np.sum(Y * Y) + aux


def gradient_report(layer, X, h: float = 1e-6, threshold: float = 1e-6) -> GradReport:
    """Compare analytic gradients of ``½‖Y‖²`` (+aux) against central differences."""
    X = as_matrix(X, "X")
    Y, _ = (mor_forward_stacked(layer, X) if isinstance(layer, MoRLayer)
            else moelora_forward_batch(layer, X) if isinstance(layer, MoELoRALayer)
            else (lora_forward_batch(layer, X), None))
    analytic = backward(layer, X, Y).as_dict()
    base = {k: v.astype(np.longdouble) for k, v in layer.trainable().items()}
    errors = {}
    for name, value in base.items():
        if isinstance(layer, MoRLayer) and name == "Wr" and layer.router.kind == "mean_pool":
            continue

        def loss(flat, name=name, shape=value.shape):
            tensors = dict(base)
            tensors[name] = flat.reshape(shape)
            return _oracle_loss(layer, X, tensors)

        numeric = finite_diff_check(loss, value.ravel(), h)
        errors[name] = float(np.max(relative_error(analytic[name].ravel(), numeric)))
    return GradReport(errors, threshold)
