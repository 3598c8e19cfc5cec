"""Self-check suites run by ``morlora verify``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accounting, adapters, grads, rankops
from .adapters import LoRALayer, MoELoRALayer, MoRLayer, RouterKind
from .matcore import SplitMix64, matmul, rng_gaussian_matrix as gauss


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail}"


def random_mor(rng: SplitMix64, d_in, d_out, r, n, router=None) -> MoRLayer:
    return MoRLayer(gauss(rng, d_out, d_in), gauss(rng, r, d_in), gauss(rng, d_out, r),
                    gauss(rng, n, r, 1.0, 0.5), gauss(rng, n, d_out, 1.0, 0.5),
                    gauss(rng, n, d_in), 2.0 * r, router or RouterKind())


def _dims(rng: SplitMix64, hi: int) -> int:
    return int(rng.integers(hi, 1)[0]) + 1


def stacked_vs_loop(seed: int, trials: int = 100) -> SuiteResult:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(trials):
        d_in, d_out = _dims(rng, 64), _dims(rng, 64)
        r = _dims(rng, min(16, d_in, d_out))
        layer = random_mor(rng, d_in, d_out, r, _dims(rng, 12))
        X = gauss(rng, _dims(rng, 32), d_in)
        Y, G = adapters.mor_forward_stacked(layer, X)
        for b in range(X.shape[0]):
            y, g = adapters.mor_forward(layer, X[b])
            worst = max(worst, np.max(np.abs(Y[b] - y)), np.max(np.abs(G[b] - g)))
    return SuiteResult("stacked-vs-loop", worst < 1e-12, f"max |stacked - loop| = {worst:.2e}")


def block_identity(seed: int, trials: int = 100) -> SuiteResult:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(trials):
        d, r, h = _dims(rng, 24), _dims(rng, 16), _dims(rng, 24)
        B, A = gauss(rng, d, r), gauss(rng, r, h)
        BA = matmul(B, A)
        for n in (n for n in range(1, r + 1) if r % n == 0):
            split = rankops.block_split(B, A, n)
            worst = max(worst, np.linalg.norm(rankops.block_reconstruct(split) - BA))
    return SuiteResult("block-decomposition", worst < 1e-13, f"max ||sum B_i A_i - BA||_F = {worst:.2e}")


def sparse_activation(seed: int, trials: int = 30) -> SuiteResult:
    rng = SplitMix64(seed)
    ok, worst_dense = True, 0.0
    for _ in range(trials):
        n = _dims(rng, 4)
        w = _dims(rng, 3)
        B, A = gauss(rng, 12, n * w), gauss(rng, n * w, 10)
        split = rankops.block_split(B, A, n)
        g = adapters.softmax_stable(gauss(rng, 1, n)[0])
        dense = sum(g[i] * matmul(Bi, Ai) for i, (Bi, Ai) in enumerate(split.blocks))
        worst_dense = max(worst_dense, np.linalg.norm(rankops.sparse_mix(split, g, n) - dense))
        for k in range(1, n + 1):
            ok &= rankops.numerical_rank(rankops.sparse_mix(split, g, k)) <= k * w
    ok &= worst_dense < 1e-12
    return SuiteResult("sparse-activation", bool(ok), f"rank bound held={ok}, k=n gap {worst_dense:.2e}")


def truncation(seed: int, trials: int = 50) -> SuiteResult:
    rng = SplitMix64(seed)
    ok = True
    for _ in range(trials):
        m, n = _dims(rng, 32), _dims(rng, 24)
        M = gauss(rng, m, n)
        curve = rankops.truncation_curve(M)
        e = curve.errors
        total = np.sum(M * M)
        ok &= bool(np.all(np.diff(e) <= 0))
        ok &= e[-1] <= 1e-10 * total
        ok &= abs(e[0] - total) <= 1e-9 * total
        ok &= bool(np.allclose(e[:-1] - e[1:], curve.singular_values ** 2, rtol=1e-9, atol=0))
    return SuiteResult("svd-truncation", bool(ok), f"{trials} random matrices")


def gradients(seed: int, trials: int = 20) -> SuiteResult:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(trials):
        W, X = gauss(rng, 5, 6), gauss(rng, 4, 6)
        layers = [
            LoRALayer(W, gauss(rng, 3, 6), gauss(rng, 5, 3), 6.0),
            MoELoRALayer(W, gauss(rng, 6, 6).reshape(2, 3, 6), gauss(rng, 10, 3).reshape(2, 5, 3),
                         gauss(rng, 2, 6), 6.0),
            random_mor(rng, 6, 5, 3, 2),
            random_mor(rng, 6, 5, 3, 3, RouterKind.balanced(0.5)),
        ]
        for layer in layers:
            worst = max(worst, max(grads.gradient_report(layer, X).errors.values()))
    return SuiteResult("gradients", worst < 1e-6, f"max relative error vs central FD = {worst:.2e}")


def router_invariants(seed: int, trials: int = 50) -> SuiteResult:
    rng = SplitMix64(seed)
    ok = True
    for _ in range(trials):
        n = _dims(rng, 8)
        layer = random_mor(rng, 7, 5, 3, n)
        X = gauss(rng, 6, 7, 0.0, 3.0)
        G = adapters.router_weights_batch(layer, X)
        ok &= bool(np.all(np.abs(G.sum(axis=1) - 1) <= 1e-9) and np.all(G > 0))
        pooled = MoRLayer(layer.W, layer.A, layer.B, layer.omega_a, layer.omega_b, layer.Wr,
                          layer.alpha, RouterKind.mean_pool())
        ok &= bool(np.all(adapters.router_weights_batch(pooled, X) == 1.0 / n))
    single = random_mor(rng, 7, 5, 3, 1)
    ok &= bool(np.all(adapters.router_weights_batch(single, gauss(rng, 4, 7)) == 1.0))
    ok &= adapters.balance_loss(np.full((6, 4), 0.25)) == 1.0
    ok &= adapters.balance_loss(np.tile([1.0, 0, 0, 0], (6, 1))) == 4.0
    return SuiteResult("router-invariants", bool(ok), "simplex, mean-pool, N=1, balance fixtures")


def absorbed_transform(seed: int, trials: int = 50) -> SuiteResult:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(trials):
        B, A = gauss(rng, 6, 4), gauss(rng, 4, 6)
        worst = max(worst, adapters.highrank_transform_check(B, A, gauss(rng, 1, 4)[0], gauss(rng, 1, 6)[0]))
    return SuiteResult("absorbed-transform", worst < 1e-13, f"max residual {worst:.2e}")


def parameter_counts(seed: int = 0) -> SuiteResult:
    geo = accounting.llama7b_geometry()
    lora = accounting.count_params(accounting.MethodSpec("lora", 8), geo)
    mor = accounting.count_params(accounting.MethodSpec("mor", 8, 8), geo)
    ok = lora == 11_599_872 and mor == 23_205_888
    return SuiteResult("parameter-counts", ok, f"LoRA R8 {lora:,}, MoR E8R8 {mor:,}")


SUITES = [stacked_vs_loop, block_identity, sparse_activation, truncation, gradients,
          router_invariants, absorbed_transform, parameter_counts]


def run_all(seed: int = 0) -> list[SuiteResult]:
    results = []
    for suite in SUITES:
        try:
            results.append(suite(seed))
        except Exception as exc:  # a crashing suite is a failing suite
            results.append(SuiteResult(suite.__name__, False, f"raised {type(exc).__name__}: {exc}"))
    return results
