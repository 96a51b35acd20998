"""Reverse-mode differentiation: forward values, adjoints, finite differences."""

import numpy as np
import pytest

from sitepool import autodiff as ad
from sitepool import losses, nn
from sitepool.liegroup import DimensionError


def param(rng, shape, name="p"):
    return ad.Parameter(rng.normal(size=shape), name)


# ---------------------------------------------------------------------------
# forward values


class TestForward:
    def test_l2_normalize_three_four_five(self):
        out = ad.l2_normalize(ad.constant([3.0, 4.0]))
        assert np.allclose(out.value, [0.6, 0.8], atol=1e-15)

    def test_mat_inverse_of_identity(self):
        assert np.array_equal(ad.mat_inverse(ad.constant(np.eye(4))).value, np.eye(4))

    def test_frobenius_sq_hand_sum(self):
        out = ad.frobenius_sq(ad.constant([[1.0, 2.0], [3.0, 4.0]]))
        assert out.value == 30.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            ad.add(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))
        with pytest.raises(DimensionError):
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))

    def test_singular_inverse_raises_numeric_error(self):
        with pytest.raises(ad.NumericError):
            ad.mat_inverse(ad.constant(np.array([[1.0, 1.0], [1.0, 1.0]])))


class TestBackward:
    def test_sum_gradient_is_all_ones(self):
        x = ad.Parameter(np.arange(5.0), "x")
        ad.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones(5))

    def test_non_scalar_root_rejected(self):
        x = ad.Parameter(np.arange(5.0), "x")
        with pytest.raises(DimensionError):
            ad.backward(x)

    def test_gradients_are_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            w = param(rng, (4, 4), "w")
            x = param(rng, (4,), "x")
            ad.backward(ad.frobenius_sq(ad.matvec(w, x)))
            return w.grad.copy(), x.grad.copy()

        gw1, gx1 = run()
        gw2, gx2 = run()
        assert np.array_equal(gw1, gw2) and np.array_equal(gx1, gx2)

    def test_normalized_vector_has_constant_norm(self):
        # The squared norm of a normalized vector is identically 1, so its
        # gradient must vanish along every direction.
        x = ad.Parameter(np.array([0.3, -1.2, 2.0]), "x")
        ad.backward(ad.frobenius_sq(ad.l2_normalize(x)))
        assert np.abs(x.grad).max() < 1e-10

    def test_gradcheck_step_guard(self):
        x = ad.Parameter(np.ones(2), "x")
        with pytest.raises(ValueError):
            ad.gradcheck(lambda: ad.sum_all(x), [x], h=1e-8)
        with pytest.raises(ValueError):
            ad.gradcheck(lambda: ad.sum_all(x), [x], h=1e-2)


# ---------------------------------------------------------------------------
# per-op finite-difference checks, 10 random instances each


def check_op(build, n_instances=10, tol=1e-4):
    worst = 0.0
    for k in range(n_instances):
        rng = np.random.default_rng(1000 + k)
        f, params = build(rng)
        worst = max(worst, ad.gradcheck(f, params, rng_seed=k))
    assert worst < tol, f"max relative gradient error {worst:.3e}"


class TestOpGradients:
    @staticmethod
    def _binary(rng, op):
        a, b = param(rng, (3, 4), "a"), param(rng, (3, 4), "b")
        probe = np.random.default_rng(0).normal(size=(3, 4))
        return (lambda: ad.sum_all(ad.elementwise_mul(op(a, b),
                                                      ad.constant(probe)))), [a, b]

    def test_add(self):
        check_op(lambda rng: self._binary(rng, ad.add))

    def test_sub(self):
        check_op(lambda rng: self._binary(rng, ad.sub))

    def test_elementwise_mul(self):
        check_op(lambda rng: self._binary(rng, ad.elementwise_mul))

    @staticmethod
    def _unary(rng, op, shift=0.0):
        x = ad.Parameter(rng.normal(size=(4, 3)) + shift, "x")
        w = np.random.default_rng(1).normal(size=(4, 3))
        return (lambda: ad.sum_all(ad.elementwise_mul(op(x), ad.constant(w)))), [x]

    def test_scale(self):
        check_op(lambda rng: self._unary(rng, lambda x: ad.scale(x, -2.5)))

    def test_relu_away_from_kink(self):
        # Keep inputs away from zero so central differences are valid.
        def build(rng):
            x = ad.Parameter(rng.choice([-1.0, 1.0], size=(4, 3))
                             * rng.uniform(0.5, 2.0, size=(4, 3)), "x")
            return (lambda: ad.sum_all(ad.relu(x))), [x]

        check_op(build)

    def test_tanh(self):
        check_op(lambda rng: self._unary(rng, ad.tanh))

    def test_sigmoid(self):
        check_op(lambda rng: self._unary(rng, ad.sigmoid))

    def test_swish(self):
        check_op(lambda rng: self._unary(rng, ad.swish))

    def test_square(self):
        check_op(lambda rng: self._unary(rng, ad.square))

    def test_exp(self):
        check_op(lambda rng: self._unary(rng, ad.exp))

    def test_mean_all(self):
        def build(rng):
            x = param(rng, (5, 2), "x")
            return (lambda: ad.mean_all(x)), [x]

        check_op(build)

    def test_frobenius_sq(self):
        def build(rng):
            x = param(rng, (3, 3), "x")
            return (lambda: ad.frobenius_sq(x)), [x]

        check_op(build)

    def test_matmul(self):
        def build(rng):
            a, b = param(rng, (3, 4), "a"), param(rng, (4, 2), "b")
            return (lambda: ad.frobenius_sq(ad.matmul(a, b))), [a, b]

        check_op(build)

    def test_matvec(self):
        def build(rng):
            m, v = param(rng, (3, 4), "m"), param(rng, (4,), "v")
            return (lambda: ad.frobenius_sq(ad.matvec(m, v))), [m, v]

        check_op(build)

    def test_transpose(self):
        def build(rng):
            x = param(rng, (2, 5), "x")
            w = np.random.default_rng(2).normal(size=(5, 2))
            return (lambda: ad.sum_all(ad.elementwise_mul(
                ad.transpose(x), ad.constant(w)))), [x]

        check_op(build)

    def test_mat_inverse(self):
        def build(rng):
            x = ad.Parameter(rng.normal(size=(4, 4)) + 3.0 * np.eye(4), "x")
            return (lambda: ad.frobenius_sq(ad.mat_inverse(x))), [x]

        check_op(build)

    def test_bias_add(self):
        def build(rng):
            x, b = param(rng, (4, 3), "x"), param(rng, (3,), "b")
            return (lambda: ad.frobenius_sq(ad.bias_add(x, b))), [x, b]

        check_op(build)

    def test_l2_normalize_rows(self):
        def build(rng):
            x = param(rng, (4, 3), "x")
            w = np.random.default_rng(3).normal(size=(4, 3))
            return (lambda: ad.sum_all(ad.elementwise_mul(
                ad.l2_normalize(x), ad.constant(w)))), [x]

        check_op(build)

    def test_skew_cayley(self):
        def build(rng):
            coords = param(rng, (3, 6), "coords")
            w = np.random.default_rng(4).normal(size=(3, 16))
            return (lambda: ad.sum_all(ad.elementwise_mul(
                ad.skew_cayley(coords), ad.constant(w)))), [coords]

        check_op(build)

    def test_left_apply(self):
        def build(rng):
            from sitepool.liegroup import SkewCoords, algebra_dim, expm_so, skew_embed
            stack = np.stack([
                expm_so(skew_embed(SkewCoords(rng.normal(size=algebra_dim(3)), 3))).matrix
                for _ in range(4)])
            flats = param(rng, (4, 9), "flats")
            return (lambda: ad.frobenius_sq(ad.left_apply(stack, flats))), [flats]

        check_op(build)

    def test_rowwise_matvec_both_orientations(self):
        for transpose_mat in (False, True):
            def build(rng, t=transpose_mat):
                flats, vecs = param(rng, (4, 9), "flats"), param(rng, (4, 3), "vecs")
                return (lambda: ad.frobenius_sq(
                    ad.rowwise_matvec(flats, vecs, transpose_mat=t))), [flats, vecs]

            check_op(build)

    def test_pairwise_sqdist(self):
        def build(rng):
            x, y = param(rng, (4, 3), "x"), param(rng, (5, 3), "y")
            w = np.random.default_rng(5).normal(size=(4, 5))
            return (lambda: ad.sum_all(ad.elementwise_mul(
                ad.pairwise_sqdist(x, y), ad.constant(w)))), [x, y]

        check_op(build)

    def test_batch_norm(self):
        def build(rng):
            x = param(rng, (8, 3), "x")
            gamma = ad.Parameter(rng.uniform(0.5, 1.5, size=3), "gamma")
            beta = param(rng, (3,), "beta")
            w = np.random.default_rng(6).normal(size=(8, 3))
            return (lambda: ad.sum_all(ad.elementwise_mul(
                ad.batch_norm(x, gamma, beta), ad.constant(w)))), [x, gamma, beta]

        check_op(build)

    def test_softmax_cross_entropy(self):
        def build(rng):
            logits = param(rng, (6, 3), "logits")
            labels = np.random.default_rng(7).integers(0, 3, size=6)
            return (lambda: ad.softmax_cross_entropy(logits, labels)), [logits]

        check_op(build)


# ---------------------------------------------------------------------------
# composite graphs


class TestCompositeGradients:
    def test_quadratic_form_is_nearly_exact(self):
        # Central differences are exact for quadratics up to rounding.
        rng = np.random.default_rng(0)
        w = np.random.default_rng(1).normal(size=(5, 5))
        x = param(rng, (5,), "x")
        err = ad.gradcheck(lambda: ad.frobenius_sq(ad.matvec(ad.constant(w), x)), [x])
        assert err < 1e-8

    def test_two_layer_composition(self):
        rng = np.random.default_rng(1)
        w1, w2 = param(rng, (4, 6), "w1"), param(rng, (6, 2), "w2")
        x = np.random.default_rng(2).normal(size=(3, 4))

        def f():
            return ad.sum_all(ad.square(ad.matmul(ad.tanh(ad.matmul(
                ad.constant(x), w1)), w2)))

        assert ad.gradcheck(f, [w1, w2]) < 1e-5

    def test_normalize_after_matvec(self):
        rng = np.random.default_rng(2)
        w = param(rng, (4, 4), "w")
        v = np.random.default_rng(3).normal(size=4)
        probe = np.random.default_rng(4).normal(size=4)

        def f():
            out = ad.l2_normalize(ad.matvec(w, ad.constant(v)))
            return ad.sum_all(ad.elementwise_mul(out, ad.constant(probe)))

        assert ad.gradcheck(f, [w]) < 1e-5

    def test_through_rotation_head(self):
        rng = np.random.default_rng(3)
        coords = param(rng, (2, 6), "coords")
        assert ad.gradcheck(lambda: ad.frobenius_sq(ad.skew_cayley(coords)),
                            [coords]) < 1e-4

    def test_mmd_through_encoder_weights(self):
        rng = np.random.default_rng(4)
        enc = nn.Mlp(nn.MlpSpec((5, 8, 3), "tanh", "l2_normalize"), 9, "enc")
        x1 = rng.normal(size=(6, 5))
        x2 = rng.normal(size=(7, 5)) + 0.5

        def f():
            return losses.mmd2(enc(ad.constant(x1)), enc(ad.constant(x2)),
                               losses.KernelConfig(sigma=1.0))

        assert ad.gradcheck(f, enc.params) < 1e-4
