import math

import numpy as np
import pytest

from degenheat import numerics as nm


class TestGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            nm.Grid(np.linspace(0, 1, 5))  # too few nodes
        with pytest.raises(ValueError):
            nm.Grid(np.array([0.0, 0.1, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
        with pytest.raises(ValueError):
            nm.Grid(np.linspace(-0.1, 1.0, 12))

    def test_unit_grid_clusters_toward_ends(self):
        g = nm.unit_interval_grid(81)
        d = np.diff(g.nodes)
        assert g.nodes[0] == 0.0 and g.nodes[-1] == pytest.approx(1.0)
        assert d[0] < d[len(d) // 2] and d[-1] < d[len(d) // 2]

    def test_field_validation(self):
        g = nm.unit_interval_grid(16)
        with pytest.raises(ValueError):
            nm.SampledField(g, np.full(16, np.nan))
        with pytest.raises(ValueError):
            nm.SampledField(g, np.zeros(15))


class TestIntegrateSingular:
    def test_gamma_two(self):
        val = nm.integrate_singular(lambda y: np.exp(-y), 2.0, np.inf)
        assert val == pytest.approx(1.0, abs=1e-9)

    def test_inverse_sqrt(self):
        val = nm.integrate_singular(lambda y: np.ones_like(np.atleast_1d(y)), 0.5, 1.0)
        assert val == pytest.approx(2.0, abs=1e-9)

    def test_gamma_three_halves(self):
        val = nm.integrate_singular(lambda y: np.exp(-y), 1.5, np.inf)
        assert val == pytest.approx(math.sqrt(math.pi) / 2.0, abs=1e-9)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            nm.integrate_singular(lambda y: y, 0.0, 1.0)

    def test_linearity_and_positivity(self):
        b, up = 0.7, 3.0
        f1 = lambda y: np.exp(-y)
        f2 = lambda y: np.cos(y) ** 2
        i1 = nm.integrate_singular(f1, b, up)
        i2 = nm.integrate_singular(f2, b, up)
        i12 = nm.integrate_singular(lambda y: 2.0 * f1(y) + 3.0 * f2(y), b, up)
        assert i12 == pytest.approx(2 * i1 + 3 * i2, rel=1e-9)
        assert i1 > 0 and i2 > 0

    def test_sampled_field_input(self):
        g = nm.half_line_grid(5.0, 192, ratio=1.04)
        fld = nm.SampledField(g, np.exp(-g.nodes))
        val = nm.integrate_singular(fld, 2.0, 5.0)
        exact = 1.0 - math.exp(-5.0) * 6.0  # int_0^5 y e^-y
        assert val == pytest.approx(exact, abs=1e-5)


class TestInterpolate:
    def test_linear_data(self):
        g = nm.Grid(np.linspace(0, 1, 16))
        f = nm.SampledField(g, 2.0 * g.nodes + 1.0)
        for x in (0.0, 0.123, 0.77, 1.0):
            assert nm.interpolate(f, x) == pytest.approx(2 * x + 1, abs=1e-13)

    def test_cubic_reproduction(self):
        nodes = 0.5 * (1 - np.cos(np.linspace(0, math.pi, 8)))  # Chebyshev-like
        g = nm.Grid(nodes)
        f = nm.SampledField(g, nodes**3)
        assert nm.interpolate(f, 0.37) == pytest.approx(0.050653, abs=1e-12)

    def test_sine_dense_grid(self):
        g = nm.Grid(np.linspace(0, 1, 64))
        f = nm.SampledField(g, np.sin(g.nodes))
        assert nm.interpolate(f, 0.5) == pytest.approx(math.sin(0.5), abs=1e-8)

    def test_extrapolation_rejected(self):
        g = nm.Grid(np.linspace(0, 1, 16))
        f = nm.SampledField(g, g.nodes)
        with pytest.raises(ValueError):
            nm.interpolate(f, 1.2)


class TestFiniteDiff:
    def test_second_derivative_of_square(self):
        g = nm.Grid(np.linspace(0, 1, 32))
        f = nm.SampledField(g, g.nodes**2)
        for x in (0.2, 0.5, 0.9):
            assert nm.finite_diff(f, 2, x) == pytest.approx(2.0, abs=1e-8)

    def test_first_derivative_of_identity(self):
        g = nm.Grid(np.linspace(0, 1, 32))
        f = nm.SampledField(g, g.nodes.copy())
        assert nm.finite_diff(f, 1, 0.31) == pytest.approx(1.0, abs=1e-12)

    def test_sine(self):
        g = nm.Grid(np.linspace(0, 1, 64))
        f = nm.SampledField(g, np.sin(g.nodes))
        assert nm.finite_diff(f, 1, 0.3) == pytest.approx(math.cos(0.3), abs=1e-7)

    def test_insufficient_nodes(self):
        g = nm.Grid(np.linspace(0, 1, 8))
        f = nm.SampledField(g, g.nodes)
        with pytest.raises(ValueError):
            nm.fd_weights(g.nodes[:2], 0.1, 2)


class TestHalflineRule:
    def test_gamma_integrals(self):
        for b in (0.3, 1.0, 2.5):
            rule = nm.halfline_rule(b, 40.0)
            val = float(rule.weights @ (rule.z ** (b - 1) * np.exp(-rule.z)))
            assert val == pytest.approx(math.gamma(b), rel=1e-12)

    def test_convergence_order_on_smooth_integrand(self):
        # order >= 4 under panel refinement (Gauss panels converge far faster)
        exact = nm.integrate_singular(lambda z: np.cos(z), 1.5, 4.0)
        errs = []
        for npan in (3, 6):
            rule = nm.halfline_rule(1.5, 4.0, n_panels=npan, pts=4)
            errs.append(abs(float(rule.weights @ (rule.z**0.5 * np.cos(rule.z))) - exact))
        order = math.log2(errs[0] / errs[1])
        assert order >= 4.0


class TestQuadWeights:
    def test_smooth_integral(self):
        g = nm.unit_interval_grid(161)
        w = nm.quad_weights(g.nodes)
        assert float(w @ np.sin(g.nodes)) == pytest.approx(1 - math.cos(1.0), abs=1e-9)
        assert float(w @ np.ones(g.n)) == pytest.approx(1.0, abs=1e-13)
