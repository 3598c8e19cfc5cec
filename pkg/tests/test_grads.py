import numpy as np
import pytest

from morlora.adapters import LoRALayer, MoELoRALayer, RouterKind, dropout_mask, mor_forward_stacked
from morlora.grads import (
    balance_loss_grad,
    finite_diff_check,
    gradient_report,
    lora_backward,
    moelora_backward,
    mor_backward,
    relative_error,
    _softmax_backward,
)
from morlora.matcore import SplitMix64, rng_gaussian_matrix as gauss
from morlora.verify import random_mor


def rand_moelora(rng, n, d_in=6, d_out=5, r=3):
    return MoELoRALayer(gauss(rng, d_out, d_in), gauss(rng, n * r, d_in).reshape(n, r, d_in),
                        gauss(rng, n * d_out, r).reshape(n, d_out, r), gauss(rng, n, d_in), 6.0)


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_check(lambda p: 0.5 * np.sum(p * p), np.array([1.0, 2.0]), 1e-6)
        assert np.allclose(g, [1.0, 2.0], rtol=0, atol=1e-9)

    def test_constant(self):
        assert not np.any(finite_diff_check(lambda p: 3.0, np.ones(4), 1e-6))

    def test_non_finite_loss(self):
        with pytest.raises(FloatingPointError):
            finite_diff_check(lambda p: np.inf, np.ones(2), 1e-6)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda p: 0.0, np.ones(2), 0.0)

    def test_relative_error_floor(self):
        assert relative_error([0.0], [1e-10])[0] == pytest.approx(1e-2)


class TestMoRBackward:
    def test_zero_upstream(self):
        rng = SplitMix64(0)
        layer = random_mor(rng, 6, 5, 3, 2)
        g = mor_backward(layer, gauss(rng, 4, 6), np.zeros((4, 5)))
        assert all(not np.any(v) for v in g.as_dict().values())

    def test_single_expert_router_grad_zero(self):
        rng = SplitMix64(1)
        layer = random_mor(rng, 6, 5, 3, 1)
        X = gauss(rng, 4, 6)
        g = mor_backward(layer, X, gauss(rng, 4, 5))
        assert not np.any(g.Wr)

    def test_matches_finite_differences(self):
        rng = SplitMix64(2)
        layer = random_mor(rng, 6, 5, 3, 2)
        report = gradient_report(layer, gauss(rng, 4, 6))
        assert report.passed, str(report)

    def test_shapes_mirror_parameters(self):
        rng = SplitMix64(3)
        layer = random_mor(rng, 7, 4, 2, 3)
        g = mor_backward(layer, gauss(rng, 5, 7), gauss(rng, 5, 4))
        for name, value in layer.trainable().items():
            assert getattr(g, name).shape == value.shape

    def test_linearity(self):
        rng = SplitMix64(4)
        layer = random_mor(rng, 6, 5, 3, 3)
        X, d1, d2 = gauss(rng, 4, 6), gauss(rng, 4, 5), gauss(rng, 4, 5)
        g12 = mor_backward(layer, X, d1 + d2).as_dict()
        g1, g2 = mor_backward(layer, X, d1).as_dict(), mor_backward(layer, X, d2).as_dict()
        for k in g12:
            assert np.max(np.abs(g12[k] - (g1[k] + g2[k]))) < 1e-12

    def test_balanced_aux_gradient_nonzero(self):
        rng = SplitMix64(5)
        layer = random_mor(rng, 6, 5, 3, 3, RouterKind.balanced(1.0))
        X = gauss(rng, 6, 6)
        g = mor_backward(layer, X, np.zeros((6, 5)))
        assert np.any(g.Wr)
        assert report_passes(layer, X)

    def test_balance_gradient_at_uniform_routing(self):
        # With every row uniform, argmax ties send all mass of f to expert 0, so the
        # logit gradient is (N f - 1) / (N * batch) per row rather than zero.
        n, batch = 4, 6
        G = np.full((batch, n), 1.0 / n)
        dh = _softmax_backward(G, balance_loss_grad(G))
        f = np.array([1.0, 0, 0, 0])
        assert np.allclose(dh, np.tile((n * f - 1) / (n * batch), (batch, 1)), rtol=0, atol=1e-16)
        # it vanishes when the top-expert fractions are balanced
        f_bal = np.full(n, 1.0 / n)
        dG = np.broadcast_to(n * f_bal / batch, G.shape)
        assert not np.any(_softmax_backward(G, dG))

    def test_mean_pool_router_not_trained(self):
        rng = SplitMix64(6)
        layer = random_mor(rng, 6, 5, 3, 3, RouterKind.mean_pool())
        g = mor_backward(layer, gauss(rng, 4, 6), gauss(rng, 4, 5))
        assert not np.any(g.Wr)

    def test_dropout_mask_gradients(self):
        rng = SplitMix64(7)
        layer = random_mor(rng, 6, 5, 3, 2)
        X = gauss(rng, 4, 6)
        mask = dropout_mask(rng, X.shape, 0.3)
        Y, _ = mor_forward_stacked(layer, X, mask)
        g = mor_backward(layer, X, Y, mask).as_dict()
        for name in ("A", "omega_a", "Wr"):
            base = getattr(layer, name).copy()

            def loss(p, name=name, base=base):
                setattr(layer, name, p.reshape(base.shape))
                out = 0.5 * np.sum(mor_forward_stacked(layer, X, mask)[0] ** 2)
                setattr(layer, name, base)
                return out

            fd = finite_diff_check(loss, base.ravel(), 1e-5)
            assert np.allclose(g[name].ravel(), fd, rtol=1e-5, atol=1e-6)


def report_passes(layer, X):
    return gradient_report(layer, X).passed


class TestLoRABackward:
    def test_zero_upstream(self):
        rng = SplitMix64(10)
        layer = LoRALayer(gauss(rng, 5, 6), gauss(rng, 3, 6), gauss(rng, 5, 3), 6.0)
        g = lora_backward(layer, gauss(rng, 4, 6), np.zeros((4, 5)))
        assert not np.any(g.A) and not np.any(g.B)

    def test_zero_b_blocks_a_gradient(self):
        rng = SplitMix64(11)
        layer = LoRALayer(gauss(rng, 5, 6), gauss(rng, 3, 6), np.zeros((5, 3)), 6.0)
        g = lora_backward(layer, gauss(rng, 4, 6), gauss(rng, 4, 5))
        assert not np.any(g.A) and np.any(g.B)

    def test_finite_differences(self):
        rng = SplitMix64(12)
        layer = LoRALayer(gauss(rng, 5, 6), gauss(rng, 3, 6), gauss(rng, 5, 3), 6.0)
        assert report_passes(layer, gauss(rng, 4, 6))


class TestMoELoRABackward:
    def test_zero_upstream(self):
        rng = SplitMix64(20)
        layer = rand_moelora(rng, 3)
        g = moelora_backward(layer, gauss(rng, 4, 6), np.zeros((4, 5)))
        assert all(not np.any(v) for v in g.as_dict().values())

    def test_single_expert_reduces_to_lora(self):
        rng = SplitMix64(21)
        moe = rand_moelora(rng, 1)
        lora = LoRALayer(moe.W, moe.A[0], moe.B[0], moe.alpha)
        X, dY = gauss(rng, 4, 6), gauss(rng, 4, 5)
        gm, gl = moelora_backward(moe, X, dY), lora_backward(lora, X, dY)
        assert not np.any(gm.Wr)
        assert np.allclose(gm.A[0], gl.A, rtol=1e-14, atol=1e-14)
        assert np.allclose(gm.B[0], gl.B, rtol=1e-14, atol=1e-14)

    def test_finite_differences(self):
        rng = SplitMix64(22)
        assert report_passes(rand_moelora(rng, 3), gauss(rng, 4, 6))


@pytest.mark.parametrize("seed", range(20))
def test_all_adapters_against_fd(seed):
    rng = SplitMix64(1000 + seed)
    W, X = gauss(rng, 5, 6), gauss(rng, 4, 6)
    layers = [
        LoRALayer(W, gauss(rng, 3, 6), gauss(rng, 5, 3), 6.0),
        rand_moelora(rng, 2),
        random_mor(rng, 6, 5, 3, 2),
        random_mor(rng, 6, 5, 3, 3, RouterKind.balanced(0.8)),
    ]
    for layer in layers:
        report = gradient_report(layer, X, h=1e-6, threshold=1e-6)
        assert report.passed, f"{type(layer).__name__}: {report}"
