import numpy as np
import pytest

from fsalign import autodiff as ad


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def check_unary(op, x, tol=1e-7):
    t = ad.Tensor(x, requires_grad=True)
    out = ad.sum(op(t) * op(t))
    out.backward()
    num = numeric_grad(lambda v: float(np.sum(np.asarray(op(v)) ** 2)), x.copy())
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


class TestElementwise:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_add_mul_broadcast(self):
        a = ad.Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(self.rng.normal(size=(4,)), requires_grad=True)
        out = ad.sum((a + b) * (a * b))
        out.backward()
        fa = lambda v: float(np.sum((v + b.value) * (v * b.value)))
        fb = lambda v: float(np.sum((a.value + v) * (a.value * v)))
        np.testing.assert_allclose(a.grad, numeric_grad(fa, a.value.copy()), rtol=1e-6)
        np.testing.assert_allclose(b.grad, numeric_grad(fb, b.value.copy()), rtol=1e-6)

    def test_div(self):
        a = ad.Tensor(self.rng.normal(size=5), requires_grad=True)
        b = ad.Tensor(self.rng.normal(size=5) + 3.0, requires_grad=True)
        out = ad.sum(a / b)
        out.backward()
        np.testing.assert_allclose(
            a.grad, numeric_grad(lambda v: float(np.sum(v / b.value)), a.value.copy()),
            rtol=1e-6,
        )
        np.testing.assert_allclose(
            b.grad, numeric_grad(lambda v: float(np.sum(a.value / v)), b.value.copy()),
            rtol=1e-6,
        )

    def test_smooth_unaries(self):
        x = self.rng.normal(size=(2, 3)) * 0.5
        for op in (ad.exp, ad.tanh, ad.sigmoid):
            check_unary(op, x.copy())
        check_unary(ad.log, np.abs(x) + 0.5)

    def test_power(self):
        x = np.abs(self.rng.normal(size=6)) + 0.3
        t = ad.Tensor(x, requires_grad=True)
        out = ad.sum(ad.power(t, 2.5))
        out.backward()
        np.testing.assert_allclose(t.grad, 2.5 * x**1.5, rtol=1e-12)

    def test_power_zero_exponent_is_exactly_one(self):
        t = ad.Tensor([0.3, 0.9], requires_grad=True)
        out = ad.power(t, 0.0)
        assert np.all(out.value == 1.0)
        ad.sum(out).backward()
        assert np.all(t.grad == 0.0)

    def test_clip_gradient_masked(self):
        t = ad.Tensor([-2.0, 0.5, 2.0], requires_grad=True)
        ad.sum(ad.clip(t, 0.0, 1.0)).backward()
        np.testing.assert_array_equal(t.grad, [0.0, 1.0, 0.0])

    def test_abs(self):
        t = ad.Tensor([-3.0, 2.0], requires_grad=True)
        ad.sum(ad.absolute(t)).backward()
        np.testing.assert_array_equal(t.grad, [-1.0, 1.0])


class TestShapeOps:
    def setup_method(self):
        self.rng = np.random.default_rng(11)

    def test_matmul(self):
        a = ad.Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        b = ad.Tensor(self.rng.normal(size=(4, 2)), requires_grad=True)
        out = ad.sum(ad.matmul(a, b) ** 2.0)
        out.backward()
        fa = lambda v: float(np.sum((v @ b.value) ** 2))
        np.testing.assert_allclose(a.grad, numeric_grad(fa, a.value.copy()), rtol=1e-6)

    def test_mean_axis(self):
        a = ad.Tensor(self.rng.normal(size=(2, 3, 4)), requires_grad=True)
        out = ad.sum(ad.mean(a, axis=(1, 2)) ** 2.0)
        out.backward()
        f = lambda v: float(np.sum(np.mean(v, axis=(1, 2)) ** 2))
        np.testing.assert_allclose(a.grad, numeric_grad(f, a.value.copy()), rtol=1e-6)

    def test_concat_stack_take_rows(self):
        a = ad.Tensor(self.rng.normal(size=(2, 3)), requires_grad=True)
        b = ad.Tensor(self.rng.normal(size=(1, 3)), requires_grad=True)
        cat = ad.concat([a, b], axis=0)
        sel = ad.take_rows(cat, [0, 2, 2])
        out = ad.sum(sel * sel)
        out.backward()
        fa = lambda v: float(
            np.sum(np.concatenate([v, b.value])[np.array([0, 2, 2])] ** 2)
        )
        np.testing.assert_allclose(a.grad, numeric_grad(fa, a.value.copy()), rtol=1e-6)
        rows = [ad.Tensor(self.rng.normal(size=4), requires_grad=True) for _ in range(3)]
        out = ad.sum(ad.stack(rows) ** 2.0)
        out.backward()
        for r in rows:
            np.testing.assert_allclose(r.grad, 2 * r.value, rtol=1e-12)

    def test_crop(self):
        a = ad.Tensor(self.rng.normal(size=(2, 5, 6)), requires_grad=True)
        out = ad.sum(ad.crop(a, 1, 3, 2, 5))
        out.backward()
        expect = np.zeros((2, 5, 6))
        expect[:, 1:3, 2:5] = 1.0
        np.testing.assert_array_equal(a.grad, expect)

    def test_diamond_graph_accumulates(self):
        x = ad.Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
        y.backward()
        assert float(x.grad) == pytest.approx(7.0, abs=1e-12)


class TestStructuredOps:
    def setup_method(self):
        self.rng = np.random.default_rng(13)

    def test_conv2d_matches_finite_differences(self):
        x = ad.Tensor(self.rng.normal(size=(2, 6, 6)), requires_grad=True)
        w = ad.Tensor(self.rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
        b = ad.Tensor(self.rng.normal(size=3), requires_grad=True)
        out = ad.sum(ad.conv2d(x, w, b, stride=2, pad=1) ** 2.0)
        out.backward()
        fx = lambda v: float(np.sum(ad.conv2d(v, w.value, b.value, 2, 1) ** 2))
        fw = lambda v: float(np.sum(ad.conv2d(x.value, v, b.value, 2, 1) ** 2))
        fb = lambda v: float(np.sum(ad.conv2d(x.value, w.value, v, 2, 1) ** 2))
        np.testing.assert_allclose(x.grad, numeric_grad(fx, x.value.copy()), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(w.grad, numeric_grad(fw, w.value.copy()), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(b.grad, numeric_grad(fb, b.value.copy()), rtol=1e-5, atol=1e-7)

    def test_conv2d_output_shape(self):
        x = np.zeros((3, 32, 32))
        w = np.zeros((8, 3, 3, 3))
        b = np.zeros(8)
        assert ad.conv2d(x, w, b, stride=2, pad=1).shape == (8, 16, 16)

    def test_upsample2x(self):
        a = ad.Tensor(self.rng.normal(size=(1, 2, 2)), requires_grad=True)
        out = ad.upsample2x(a)
        assert out.value.shape == (1, 4, 4)
        ad.sum(out).backward()
        np.testing.assert_array_equal(a.grad, np.full((1, 2, 2), 4.0))

    def test_softmax_cross_entropy(self):
        logits = ad.Tensor(self.rng.normal(size=(5, 4)), requires_grad=True)
        labels = np.array([0, 3, 1, 2, 2])
        out = ad.softmax_cross_entropy(logits, labels)
        out.backward()
        f = lambda v: float(ad.softmax_cross_entropy(v, labels))
        np.testing.assert_allclose(
            logits.grad, numeric_grad(f, logits.value.copy()), rtol=1e-6, atol=1e-9
        )

    def test_smooth_l1(self):
        pred = ad.Tensor(self.rng.normal(size=(4, 4)) * 2.0, requires_grad=True)
        target = self.rng.normal(size=(4, 4))
        out = ad.smooth_l1(pred, target)
        out.backward()
        f = lambda v: float(ad.smooth_l1(v, target))
        np.testing.assert_allclose(
            pred.grad, numeric_grad(f, pred.value.copy()), rtol=1e-5, atol=1e-8
        )


class TestGRL:
    def test_forward_identity_bit_exact(self):
        x = ad.Tensor(np.array([1.0, -2.5, 3e-7]), requires_grad=True)
        y = ad.grl(x, 0.7)
        assert np.array_equal(y.value, x.value)

    def test_backward_scales_by_minus_lambda(self):
        x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.sum(ad.grl(x, 1.0) * 2.0).backward()
        np.testing.assert_array_equal(x.grad, [-2.0, -2.0])

    def test_lambda_zero_kills_gradient(self):
        x = ad.Tensor(np.array([4.0]), requires_grad=True)
        ad.sum(ad.grl(x, 0.0) * 5.0).backward()
        assert np.all(x.grad == 0.0)

    def test_exact_scaling_of_random_upstream(self):
        rng = np.random.default_rng(3)
        g_up = rng.normal(size=8)
        x = ad.Tensor(np.zeros(8), requires_grad=True)
        y = ad.grl(x, 0.1)
        y.backward(seed=g_up)
        np.testing.assert_array_equal(x.grad, -0.1 * g_up)


class TestFiniteGuard:
    def test_nan_raises(self):
        with pytest.raises(FloatingPointError):
            ad.Tensor([np.nan])

    def test_log_of_negative_raises(self):
        t = ad.Tensor([-1.0])
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError):
                ad.log(t)


class TestSGD:
    def test_momentum_trajectory(self):
        p = ad.parameter([1.0])
        opt = ad.SGD([p], lr=0.1, momentum=0.5)
        # constant gradient of 1: v_1 = 1, v_2 = 1.5
        for expected in (1.0 - 0.1, 0.9 - 0.15):
            p.grad = np.ones(1)
            opt.step()
            assert float(p.value[0]) == pytest.approx(expected, abs=1e-15)

    def test_generic_wrappers_passthrough(self):
        x = np.array([0.2, 0.4])
        assert isinstance(ad.log(x), np.ndarray)
        assert isinstance(ad.mean(x), np.floating)
        t = ad.Tensor(x)
        assert isinstance(ad.log(t), ad.Tensor)
