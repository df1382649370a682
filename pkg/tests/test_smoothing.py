import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relu_ocp import relu_net as rn
from relu_ocp import smoothing as sm
from oracles import random_net

PP, SP, QK = sm.PIECEWISE_POLYNOMIAL, sm.SOFTPLUS, sm.QUADRATIC_KNEE


def fam(kind=PP, eps=0.1):
    return sm.SmoothingFamily(kind, eps)


class TestSigma:
    def test_values(self):
        f = fam()
        assert sm.sigma_eps(f, -1.0) == 0.0
        # 0.05^3 / 0.01 - 0.05^4 / (2 * 0.001)
        assert sm.sigma_eps(f, 0.05) == pytest.approx(0.009375, abs=1e-15)
        assert sm.sigma_eps(f, 0.1) == pytest.approx(0.05, abs=1e-15)

    def test_seam_is_c2(self):
        e = 0.1
        f = fam(eps=e)
        for t0 in (0.0, e):
            lo, hi = t0 - 1e-9, t0 + 1e-9
            assert abs(sm.sigma_eps(f, hi) - sm.sigma_eps(f, lo)) < 1e-8
            assert abs(sm.sigma_eps_prime(f, hi) - sm.sigma_eps_prime(f, lo)) < 1e-7
            d2 = lambda t: (sm.sigma_eps_prime(f, t + 1e-7) - sm.sigma_eps_prime(f, t - 1e-7)) / 2e-7
            assert abs(d2(t0 + 2e-7) - d2(t0 - 2e-7)) < 1e-3

    def test_derivative_examples(self):
        for e in (0.1, 1e-3):
            assert sm.sigma_eps_prime(fam(eps=e), 2 * e) == 1.0
            assert sm.sigma_eps_prime(fam(eps=e), -e) == 0.0
        assert sm.sigma_eps_prime(fam(SP), 0.0) == 0.5

    def test_derivative_matches_fd(self):
        t = np.linspace(-0.3, 0.3, 97)
        for kind in sm.KINDS:
            f = fam(kind)
            fd = (sm.sigma_eps(f, t + 1e-7) - sm.sigma_eps(f, t - 1e-7)) / 2e-7
            np.testing.assert_allclose(sm.sigma_eps_prime(f, t), fd, atol=1e-6)

    def test_tails(self):
        e = 0.1
        t = np.concatenate([np.linspace(-5, -e, 50), np.linspace(e, 5, 50)])
        np.testing.assert_array_equal(sm.sigma_eps(fam(QK, e), t), np.maximum(t, 0.0))
        np.testing.assert_allclose(sm.sigma_eps(fam(PP, e), t), np.where(t > 0, t - e / 2, 0.0), rtol=0, atol=1e-15)

    def test_softplus_overflow_guard(self):
        f = fam(SP, 1e-3)
        with np.errstate(all="raise"):
            assert sm.sigma_eps(f, 10.0) == 10.0
            assert sm.sigma_eps(f, -10.0) == 0.0
            assert sm.sigma_eps_prime(f, 10.0) == 1.0

    def test_tiny_epsilon_no_warnings(self):
        f = fam(PP, 1e-120)
        with np.errstate(all="raise"):
            sm.sigma_eps(f, np.array([-1.0, 0.0, 1e-121, 1.0]))
            sm.sigma_eps_prime(f, np.array([-1.0, 0.0, 1e-121, 1.0]))

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_nonpositive_epsilon(self, bad):
        with pytest.raises(ValueError):
            sm.SmoothingFamily(PP, bad)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sm.SmoothingFamily("Tanh", 0.1)


@pytest.mark.parametrize("kind", sm.KINDS)
def test_family_shape(kind):
    f = fam(kind)
    t = np.linspace(-1, 1, 20001)
    v, d = sm.sigma_eps(f, t), sm.sigma_eps_prime(f, t)
    assert np.all(v >= 0)
    assert np.all(np.diff(v) >= -1e-15)
    assert np.all(np.diff(d) >= -1e-15)  # convex
    assert np.all((d >= 0) & (d <= 1))


@pytest.mark.parametrize("kind", [PP, QK])
def test_monotone_in_eps(kind):
    t = np.linspace(-1, 1, 4001)
    prev = None
    for e in (0.2, 0.1, 0.05, 0.01):
        dev = np.abs(sm.sigma_eps(fam(kind, e), t) - np.maximum(t, 0))
        if prev is not None:
            assert np.all(dev <= prev + 1e-15)
        prev = dev


def test_derivative_converges_away_from_zero():
    delta = 0.05
    right = np.linspace(delta, 3, 500)
    left = -right
    devs = []
    for e in (0.04, 0.02, 0.01, 0.005):
        f = fam(SP, e)
        devs.append(max(np.max(1 - sm.sigma_eps_prime(f, right)), np.max(sm.sigma_eps_prime(f, left))))
    assert all(b < a for a, b in zip(devs, devs[1:]))


class TestSmoothedNet:
    def test_single_neuron(self):
        f = fam()
        t = np.linspace(-1, 1, 101)
        np.testing.assert_allclose(sm.smoothed_net_eval(rn.max_net(), f, t), sm.sigma_eps(f, t), atol=0)

    def test_uniform_bound(self):
        net = rn.two_layer_net(-0.12)
        t = np.linspace(-20, 20, 8001)
        exact = rn.forward(net, t)[0]
        M = net.lipschitz_bound()
        for e in (0.1, 0.01):
            err = np.max(np.abs(sm.smoothed_net_eval(net, fam(PP, e), t) - exact))
            assert err <= M * e / 2

    def test_gradient_fd(self):
        net = rn.two_layer_net(-0.03)
        f = fam(PP, 0.5)
        t = np.linspace(-3, 8, 41)
        fd = (sm.smoothed_net_eval(net, f, t + 1e-6) - sm.smoothed_net_eval(net, f, t - 1e-6)) / 2e-6
        np.testing.assert_allclose(sm.smoothed_net_grad(net, f, t.reshape(-1, 1))[:, 0], fd, atol=1e-6)

    def test_gradient_l1_decay(self):
        net = rn.two_layer_net(-0.12)
        t = np.linspace(-10, 10, 20001)
        exact = rn.weak_gradient(net, t)[:, 0]
        errs = [np.mean(np.abs(sm.smoothed_net_grad(net, fam(PP, e), t.reshape(-1, 1))[:, 0] - exact))
                for e in (0.4, 0.2, 0.1, 0.05)]
        assert all(b < a for a, b in zip(errs, errs[1:]))


class TestDeps:
    def test_max_net_at_kink(self):
        f = fam()
        d = np.linspace(-1, 1, 41)
        np.testing.assert_allclose(sm.d_eps(rn.max_net(), f, np.zeros_like(d), d), sm.sigma_eps(f, d), atol=0)
        np.testing.assert_allclose(sm.d_eps_partial(rn.max_net(), f, np.zeros_like(d), d), sm.sigma_eps_prime(f, d))

    def test_max_net_active(self):
        f = fam()
        d = np.linspace(-1, 1, 41)
        np.testing.assert_array_equal(sm.d_eps(rn.max_net(), f, np.ones_like(d), d), d)
        np.testing.assert_array_equal(sm.d_eps_partial(rn.max_net(), f, np.full_like(d, 0.5), d), 1.0)

    def test_partial_fd(self):
        rng = np.random.default_rng(5)
        f = fam(PP, 0.3)
        for _ in range(30):
            y = rng.normal()
            net = random_net(rng, y=y)
            d = rng.normal()
            fd = (sm.d_eps(net, f, y, d + 1e-6) - sm.d_eps(net, f, y, d - 1e-6)) / 2e-6
            assert sm.d_eps_partial(net, f, y, d) == pytest.approx(fd, abs=1e-6)

    @pytest.mark.parametrize("net,y", [(rn.max_net(), 0.0), (rn.two_layer_net(-0.12), 6.0), (rn.two_layer_net(-0.03), -2.0)])
    def test_eps_halving(self, net, y):
        d = np.linspace(-10, 10, 4001)
        yy = np.full_like(d, y)
        exact = rn.directional_derivative(net, yy, d)
        sups = np.array([np.max(np.abs(exact - sm.d_eps(net, fam(PP, e), yy, d))) for e in 0.1 * 0.5 ** np.arange(4)])
        ratios = sups[:-1] / sups[1:]
        assert np.all((ratios >= 1.7) & (ratios <= 2.3))


class TestCounterexamples:
    def test_nets_vanish(self):
        t = np.linspace(-5, 5, 1001)
        for net, _ in sm.counterexample_fixtures():
            np.testing.assert_allclose(rn.forward(net, t)[0], 0.0, atol=1e-14)

    def test_fixture_a_sign_change(self):
        e = 0.1
        net, f = sm.counterexample_fixtures(e)[0]
        assert f.kind == QK
        t = np.linspace(-e / 8, e / 8, 401)[1:-1]
        g = sm.smoothed_net_grad(net, f, t.reshape(-1, 1))[:, 0]
        assert g.min() < 0 < g.max()
        # lambda_1^2 + lambda_2^2 - lambda_3^2 - lambda_4^2 = 4, so the slope is 4 t / eps
        np.testing.assert_allclose(g, 4 * t / e, atol=1e-12)

    def test_fixture_b_decreasing(self):
        e = 0.1
        net, f = sm.counterexample_fixtures(e)[1]
        assert f.kind == SP
        t = np.linspace(-10 * e, 10 * e, 2001)
        v = sm.smoothed_net_eval(net, f, t)
        assert np.all(np.diff(v) < 0)
        assert v[0] > v[-1] >= 0


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(sm.KINDS), st.floats(1e-4, 1.0), st.floats(-10, 10))
def test_derivative_bounds_property(kind, eps, t):
    d = sm.sigma_eps_prime(sm.SmoothingFamily(kind, eps), t)
    assert 0.0 <= d <= 1.0
