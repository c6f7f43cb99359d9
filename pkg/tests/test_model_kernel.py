import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial as Poly

from degenheat import model_kernel as mk
from degenheat import specfun as sf
from degenheat.numerics import Grid, SampledField, integrate_singular, kernel_y_max


def k_series_oracle(b, t, x, y, terms=120):
    """Direct summation of the psi-form kernel, independent of specfun."""
    z = x * y / t**2
    s = math.fsum(z**j / (math.factorial(j) * math.gamma(j + b)) for j in range(terms))
    return (y / t) ** b * math.exp(-(x + y) / t) * s / y


class TestKernelValues:
    def test_at_x_zero_is_gamma_density(self):
        # formula reduces to y^(b-1) e^(-y/t) / (t^b Gamma(b)) at x = 0
        k = mk.ModelKernel(2.0, 1.0)
        assert mk.k_model(k, 0.0, 1.0) == pytest.approx(math.exp(-1.0), rel=1e-12)
        k1 = mk.ModelKernel(1.0, 1.0)
        for y0 in (0.25, 1.0, 2.7):
            assert mk.k_model(k1, 0.0, y0) == pytest.approx(math.exp(-y0), rel=1e-12)

    def test_against_series_oracle(self):
        val = mk.k_model(mk.ModelKernel(1.5, 0.7), 0.4, 0.9)
        assert val == pytest.approx(k_series_oracle(1.5, 0.7, 0.4, 0.9), rel=1e-10)

    def test_positivity(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            b = rng.uniform(0.05, 4.0)
            t = rng.uniform(0.05, 2.0)
            x = rng.uniform(0.0, 3.0)
            y = rng.uniform(1e-6, 3.0)
            assert mk.k_model(mk.ModelKernel(b, t), x, y) > 0.0

    def test_b_zero_rejected(self):
        with pytest.raises(ValueError):
            mk.k_model(mk.ModelKernel(0.0, 1.0), 0.5, 0.5)

    def test_bad_time(self):
        with pytest.raises(ValueError):
            mk.ModelKernel(1.0, 0.0)


class TestDirichletKernel:
    def test_vanishes_at_x_zero(self):
        for y in (0.1, 1.0, 3.0):
            assert mk.k_dirichlet0(1.0, 0.0, y) == 0.0

    def test_value_via_bessel(self):
        # e^-2 I_1(2)
        expect = math.exp(-2.0) * sf.bessel_i(1.0, 2.0)
        assert mk.k_dirichlet0(1.0, 1.0, 1.0) == pytest.approx(expect, rel=1e-12)

    def test_b_to_zero_limit(self):
        # k_model(b -> 0) converges to the Dirichlet kernel at y > 0
        target = mk.k_dirichlet0(0.8, 1.2, 0.6)
        gaps = [
            abs(mk.k_model(mk.ModelKernel(b, 0.8), 1.2, 0.6) - target)
            for b in (0.1, 0.01, 0.001)
        ]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-3 * target


class TestApplyKernel:
    def test_mass_one(self):
        xs = np.linspace(0.0, 2.5, 9)
        rng = np.random.default_rng(11)
        for _ in range(8):
            b = rng.uniform(0.0, 4.0)
            t = rng.uniform(0.05, 1.0)
            sol = mk.apply_kernel(mk.ModelKernel(b, t), lambda y: 1.0, x_nodes=xs)
            assert np.abs(sol.values - 1.0).max() < 1e-9

    def test_linear_data(self):
        xs = np.linspace(0.0, 2.0, 9)
        b, t = 1.3, 0.4
        sol = mk.apply_kernel(mk.ModelKernel(b, t), lambda y: y, x_nodes=xs)
        assert np.abs(sol.values - (xs + b * t)).max() < 1e-10

    def test_square_data(self):
        xs = np.linspace(0.0, 2.0, 9)
        sol = mk.apply_kernel(mk.ModelKernel(1.0, 0.5), lambda y: y * y, x_nodes=xs)
        assert np.abs(sol.values - (xs**2 + 2.0 * xs + 0.5)).max() < 1e-9

    def test_matches_exp_poly(self):
        xs = np.linspace(0.0, 2.0, 8)
        rng = np.random.default_rng(2)
        for _ in range(4):
            b = rng.uniform(0.0, 3.0)
            t = rng.uniform(0.1, 0.8)
            for coef in ([1.0], [0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]):
                expect = mk.exp_poly(b, t, Poly(coef))(xs)
                sol = mk.apply_kernel(mk.ModelKernel(b, t), Poly(coef), x_nodes=xs)
                assert np.abs(sol.values - expect).max() < 1e-9 * max(1.0, np.abs(expect).max())

    def test_positivity_preserved(self):
        xs = np.linspace(0.0, 2.0, 9)
        sol = mk.apply_kernel(mk.ModelKernel(0.5, 0.3), lambda y: math.exp(-((y - 1) ** 2)), x_nodes=xs)
        assert (sol.values > 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            mk.apply_kernel(mk.ModelKernel(1.0, 1.0), lambda y: math.nan, x_nodes=np.linspace(0, 1, 9))

    def test_atom_bookkeeping(self):
        xs = np.linspace(0.0, 1.0, 9)
        sol = mk.apply_kernel(mk.ModelKernel(0.0, 0.5), lambda y: 1.0, x_nodes=xs)
        assert sol.atom_at_zero == 1.0
        # Dirichlet part carries 1 - exp(-x/t) of the mass
        assert np.abs(sol.field.values - (1.0 - np.exp(-xs / 0.5))).max() < 1e-9


class TestChapmanKolmogorov:
    @pytest.mark.parametrize("b,t,s,x,y", [
        (0.6, 0.3, 0.2, 0.8, 0.5),
        (1.7, 0.15, 0.4, 1.4, 0.2),
        (3.1, 0.25, 0.25, 0.1, 1.1),
    ])
    def test_composition(self, b, t, s, x, y):
        target = mk.k_model(mk.ModelKernel(b, t + s), x, y)

        def g(z):
            z = np.atleast_1d(z)
            kt = mk.kernel_regular(b, t, np.array([x]), z)[0]
            ks = mk.kernel_matrix(b, s, z, np.array([y]))[:, 0]
            return kt * ks

        upper = kernel_y_max(max(x, y) + 1.0, t + s)
        val = integrate_singular(g, b, upper, tol=1e-11)
        assert val == pytest.approx(target, rel=1e-7)


class TestExpPoly:
    def test_constant(self):
        assert mk.exp_poly(1.5, 0.7, Poly([1.0])).coef.tolist() == [1.0]

    def test_linear(self):
        out = mk.exp_poly(2.0, 0.3, Poly([0.0, 1.0]))
        assert np.allclose(out.coef, [0.6, 1.0])

    def test_cubic_b0(self):
        out = mk.exp_poly(0.0, 1.0, Poly([0.0, 0.0, 0.0, 1.0]))
        assert np.allclose(out.coef, [0.0, 6.0, 6.0, 1.0])

    def test_degree_preserved(self):
        out = mk.exp_poly(1.0, 2.0, Poly([1.0, -2.0, 0.0, 3.0]))
        assert out.degree() == 3


class TestDerivativeTransfer:
    def test_linear(self):
        xs = np.linspace(0.0, 2.0, 9)
        out = mk.derivative_transfer(mk.ModelKernel(1.0, 0.3), Poly([0, 1.0]), 1,
                                     x_nodes=xs, df=lambda y: 1.0)
        assert np.abs(out.values - 1.0).max() < 1e-9

    def test_square(self):
        xs = np.linspace(0.0, 2.0, 9)
        b, t = 0.7, 0.45
        out = mk.derivative_transfer(mk.ModelKernel(b, t), Poly([0, 0, 1.0]), 1,
                                     x_nodes=xs, df=lambda y: 2.0 * y)
        assert np.abs(out.values - 2.0 * (xs + (b + 1.0) * t)).max() < 1e-9

    def test_bump_second_derivative_vs_finite_differences(self):
        # C^3 bump supported in [0.3, 1.6]
        a, c = 0.3, 1.6

        def f(y):
            return (y - a) ** 4 * (c - y) ** 4 * 100.0 if a < y < c else 0.0

        def d2f(y):
            if not a < y < c:
                return 0.0
            return 100.0 * (12 * (y - a) ** 2 * (c - y) ** 4
                            - 32 * (y - a) ** 3 * (c - y) ** 3
                            + 12 * (y - a) ** 4 * (c - y) ** 2)

        b, t = 1.2, 0.08
        xs = np.linspace(0.2, 1.8, 8)
        out = mk.derivative_transfer(mk.ModelKernel(b, t), f, 2, x_nodes=xs, df=d2f)

        h = 1e-3
        fd = []
        for x in xs:
            pts = np.array([x - 2 * h, x - h, x, x + h, x + 2 * h])
            vals = [mk._apply_at(b, t, float(p), f, 1e-12) for p in pts]
            fd.append((-vals[4] + 16 * vals[3] - 30 * vals[2] + 16 * vals[1] - vals[0]) / (12 * h * h))
        fd = np.asarray(fd)
        scale = np.abs(out.values).max()
        assert np.abs(out.values - fd).max() < 1e-5 * scale

    def test_smoothness_guard(self):
        g = Grid(np.linspace(0, 2, 32), "half_line")
        f = SampledField(g, g.nodes**2, smoothness=1)
        with pytest.raises(ValueError):
            mk.derivative_transfer(mk.ModelKernel(1.0, 0.1), f, 2)


class TestDuhamel:
    def test_zero_source(self):
        xs = np.linspace(0, 2, 9)
        out = mk.duhamel(1.0, lambda y, s: 0.0, 0.5, xs)
        assert np.abs(out.values).max() == 0.0

    def test_constant_source(self):
        xs = np.linspace(0, 2, 9)
        out = mk.duhamel(1.0, lambda y, s: 1.0, 0.5, xs)
        assert np.abs(out.values - 0.5).max() < 1e-8

    def test_linear_source(self):
        xs = np.linspace(0, 2, 9)
        b, t = 0.8, 0.4
        out = mk.duhamel(b, lambda y, s: y, t, xs)
        assert np.abs(out.values - (t * xs + b * t * t / 2.0)).max() < 1e-8

    def test_horizon_guard(self):
        with pytest.raises(ValueError):
            mk.duhamel(1.0, lambda y, s: 1.0, 2.0, np.linspace(0, 1, 9), T=1.0)

    def test_residual_of_inhomogeneous_equation(self):
        # (d_t - L_b) K g = g, measured with finite differences
        b = 1.1
        g = lambda y, s: math.sin(y) * (1.0 + s)
        xs = np.linspace(0.05, 1.5, 13)
        t0, dt, dx = 0.3, 2e-3, 1e-3
        u = {}
        for k in (-1, 0, 1):
            u[k] = mk.duhamel(b, g, t0 + k * dt, xs).values
        dudt = (u[1] - u[-1]) / (2 * dt)
        um = mk.duhamel(b, g, t0, xs - dx).values
        u0 = mk.duhamel(b, g, t0, xs).values
        up = mk.duhamel(b, g, t0, xs + dx).values
        lap = xs * (up - 2 * u0 + um) / dx**2 + b * (up - um) / (2 * dx)
        resid = dudt - lap - np.asarray([g(x, t0) for x in xs])
        assert np.abs(resid).max() < 1e-4


class TestGradBound:
    def test_constant_data(self):
        rep = mk.grad_bound_check(1.0, 0.5, lambda y: 1.0)
        assert rep.measured_sup < 1e-12

    def test_bump_data_finite_and_stable(self):
        f = lambda y: math.tanh(3.0 * (y - 0.8))
        r1 = mk.grad_bound_check(1.0, 0.5, f)
        assert 0.0 < r1.fitted_C_b < 10.0

    def test_bounded_over_b_range(self):
        f = lambda y: math.tanh(3.0 * (y - 0.8))
        cs = [mk.grad_bound_check(b, 0.5, f).fitted_C_b for b in np.linspace(0.0, 3.0, 7)]
        assert max(cs) < 10.0


class TestOffDiagonalDecay:
    def test_gaussian_rate(self):
        # fit c in k ~ C y^(b-1) e^(-c/t); must reach at least 0.9 delta^2
        b, x, y = 1.4, 1.8, 0.4
        delta2 = (math.sqrt(x) - math.sqrt(y)) ** 2
        t1, t2 = 0.02, 0.01
        r1 = float(mk.kernel_regular(b, t1, np.array([x]), np.array([y]))[0, 0])
        r2 = float(mk.kernel_regular(b, t2, np.array([x]), np.array([y]))[0, 0])
        c_fit = (math.log(r1) - math.log(r2)) / (1.0 / t2 - 1.0 / t1)
        assert c_fit >= 0.9 * delta2
