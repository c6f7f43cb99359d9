"""Closed-form heat kernels of the half-line model operators x d2/dx2 + b d/dx.

For b > 0 the kernel with the zero-flux boundary condition is

    k_t^b(x,y) = (y/t)^b e^{-(x+y)/t} psi_b(xy/t^2) / y,

strictly positive with unit mass in y.  At b = 0 the solution operator
decomposes into a delta at the origin plus the Dirichlet kernel

    k_t^0(x,y) = e^{-x/t} delta(y) + k_t^{0,D}(x,y),
    k_t^{0,D}(x,y) = (x/t^2) e^{-(x+y)/t} psi_2(xy/t^2).

All evaluation goes through the psi form (never the Bessel-ratio form), which
stays finite at x = 0 and y -> 0, and uses the exponentially scaled psi so the
Gaussian factor exp(-(sqrt x - sqrt y)^2 / t) is formed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial as Poly
from scipy.special import roots_legendre

from .numerics import (
    Grid,
    SampledField,
    finite_diff,
    half_line_grid,
    halfline_rule,
    integrate_singular,
    kernel_y_max,
)
from .specfun import psi_scaled

__all__ = [
    "ModelKernel",
    "HalfLineSolution",
    "Poly",
    "k_model",
    "k_dirichlet0",
    "kernel_matrix",
    "kernel_matrix_dx",
    "apply_kernel",
    "exp_poly",
    "derivative_transfer",
    "duhamel",
    "grad_bound_check",
]


@dataclass(frozen=True)
class ModelKernel:
    """Parameters (b, t) of the half-line kernel."""

    b: float
    t: float

    def __post_init__(self):
        if self.b < 0.0:
            raise ValueError(f"drift index b must be >= 0, got {self.b}")
        if self.t <= 0.0:
            raise ValueError(f"elapsed time t must be > 0, got {self.t}")


@dataclass
class HalfLineSolution:
    """Solution of the model problem: regular part plus the b=0 atom mode.

    The full solution is ``field(x) + atom_at_zero * initial_at_zero * exp(-x/t)``;
    ``atom_at_zero`` is 1 exactly on the b = 0 path and 0 otherwise.
    """

    field: SampledField
    atom_at_zero: float = 0.0
    initial_at_zero: float = 0.0
    t: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.atom_at_zero <= 1.0:
            raise ValueError("atom_at_zero must lie in [0,1]")

    @property
    def values(self) -> np.ndarray:
        if self.atom_at_zero == 0.0:
            return self.field.values
        atom = self.atom_at_zero * self.initial_at_zero * np.exp(-self.field.grid.nodes / self.t)
        return self.field.values + atom


# ---------------------------------------------------------------------------
# pointwise and vectorized kernel evaluation
# ---------------------------------------------------------------------------

def kernel_regular(b: float, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Kernel with the singular y**(b-1) weight stripped (b > 0 branch).

    ``k_t^b(x,y) = y**(b-1) * kernel_regular(b,t,x,y)``; the b = 0 branch
    returns the Dirichlet kernel itself, which is regular in y.
    """
    if t <= 0.0:
        raise ValueError("t must be > 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    y = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    gauss = np.exp(-((np.sqrt(x) - np.sqrt(y)) ** 2) / t)
    if b > 0.0:
        return gauss * psi_scaled(b, x * y / t**2) / t**b
    return (x / t**2) * gauss * psi_scaled(2.0, x * y / t**2)


def kernel_matrix(b: float, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """k_t^b(x_i, y_j) for b > 0, or the Dirichlet kernel k^{0,D} for b = 0."""
    reg = kernel_regular(b, t, x, y)
    if b == 0.0:
        return reg
    y = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    with np.errstate(divide="ignore"):
        weight = y ** (b - 1.0)
    return weight * reg


def kernel_matrix_dx(b: float, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d/dx of the kernel (psi_b' = psi_{b+1} keeps this closed-form)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    y = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    z = x * y / t**2
    gauss = np.exp(-((np.sqrt(x) - np.sqrt(y)) ** 2) / t)
    if b > 0.0:
        with np.errstate(divide="ignore"):
            weight = y ** (b - 1.0) / t**b
        bracket = (y / t**2) * psi_scaled(b + 1.0, z) - psi_scaled(b, z) / t
        return weight * gauss * bracket
    bracket = (1.0 / t**2) * psi_scaled(2.0, z) + (x / t**2) * (
        (y / t**2) * psi_scaled(3.0, z) - psi_scaled(2.0, z) / t
    )
    return gauss * bracket


def k_model(kernel: ModelKernel, x: float, y: float) -> float:
    """Transition density in y of the b > 0 model kernel.

    Raises:
        ValueError: for b = 0 (use :func:`k_dirichlet0` plus the atom weight
            exp(-x/t), per the delta decomposition of the b = 0 kernel).
    """
    if kernel.b == 0.0:
        raise ValueError("b=0 is handled by k_dirichlet0 plus the exp(-x/t) atom")
    if y < 0.0 or x < 0.0:
        raise ValueError("k_model requires x, y >= 0")
    if y == 0.0:
        # y^(b-1) weight: integrable singular limit for b < 1, finite at b = 1
        reg = float(kernel_regular(kernel.b, kernel.t, np.array([x]), np.array([0.0]))[0, 0])
        if kernel.b < 1.0:
            return math.inf
        return reg if kernel.b == 1.0 else 0.0
    return float(kernel_matrix(kernel.b, kernel.t, np.array([x]), np.array([y]))[0, 0])


def k_dirichlet0(t: float, x: float, y: float) -> float:
    """Dirichlet kernel k_t^{0,D}(x,y) = (x/t^2) e^{-(x+y)/t} psi_2(xy/t^2)."""
    if t <= 0.0:
        raise ValueError("t must be > 0")
    return float(kernel_matrix(0.0, t, np.array([x]), np.array([y]))[0, 0])


def atom_weight(x: float, t: float) -> float:
    """Weight of the delta at y = 0 in the b = 0 kernel."""
    return math.exp(-x / t)


# ---------------------------------------------------------------------------
# semigroup application
# ---------------------------------------------------------------------------

def _as_callable(f):
    if isinstance(f, SampledField):
        nodes = f.grid.nodes

        def wrapped(y: float) -> float:
            # hold the boundary values outside the grid (bounded data)
            if y <= nodes[0]:
                return float(f.values[0])
            if y >= nodes[-1]:
                return float(f.values[-1])
            return f(y)

        return wrapped, f.grid
    if callable(f):
        return f, None
    raise TypeError("initial data must be a SampledField or callable")


def _apply_at(b: float, t: float, x: float, fc, tol: float) -> float:
    """u(x) = int k_t^b(x,y) f(y) dy (regular part only when b = 0)."""
    upper = kernel_y_max(x, t)

    def g(y):
        y = np.atleast_1d(y)
        vals = np.asarray([fc(float(v)) for v in y])
        return kernel_regular(b, t, np.array([x]), y)[0] * vals

    return integrate_singular(g, b if b > 0.0 else 1.0, upper, tol=tol)


def apply_kernel(kernel: ModelKernel, f, x_nodes: np.ndarray | None = None,
                 tol: float = 1e-11) -> HalfLineSolution:
    """Apply the model semigroup to bounded continuous data.

    Args:
        f: SampledField (held constant beyond its grid) or callable.
        x_nodes: evaluation nodes; defaults to the field's grid or a
            clustered half-line grid sized to the kernel spread.

    Returns:
        HalfLineSolution; on the b = 0 path the field holds the Dirichlet
        part and the atom mode carries exp(-x/t) * f(0).
    """
    fc, fgrid = _as_callable(f)
    if not np.isfinite(fc(0.0)):
        raise ValueError("initial data must be finite")
    if x_nodes is None:
        if fgrid is not None:
            grid = fgrid
        else:
            grid = half_line_grid(kernel_y_max(1.0, kernel.t), 96)
    else:
        x_nodes = np.asarray(x_nodes, dtype=float)
        grid = Grid(x_nodes, "half_line", float(x_nodes[-1]))
    values = np.asarray([_apply_at(kernel.b, kernel.t, float(x), fc, tol) for x in grid.nodes])
    smooth = f.smoothness if isinstance(f, SampledField) else 0
    if kernel.b == 0.0:
        return HalfLineSolution(SampledField(grid, values, smooth), 1.0, fc(0.0), kernel.t)
    return HalfLineSolution(SampledField(grid, values, smooth), 0.0, 0.0, kernel.t)


def exp_poly(b: float, t: float, p) -> Poly:
    """Exact polynomial semigroup: e^{t L_b} p via the finite L_b power sum.

    L_b x^j = j (j - 1 + b) x^{j-1}, so the exponential series terminates.
    """
    if b < 0.0 or t < 0.0:
        raise ValueError("requires b >= 0 and t >= 0")
    coeffs = np.asarray(p.coef if isinstance(p, Poly) else p, dtype=float)
    total = coeffs.copy()
    current = coeffs.copy()
    factor = 1.0
    for ell in range(1, coeffs.size):
        # one application of L_b in the monomial basis
        j = np.arange(1, current.size, dtype=float)
        current = j * (j - 1.0 + b) * current[1:]
        factor *= t / ell
        if current.size == 0:
            break
        total[: current.size] += factor * current
    return Poly(np.trim_zeros(total, "b") if np.any(total) else np.zeros(1))


def derivative_transfer(kernel: ModelKernel, f, j: int, x_nodes: np.ndarray | None = None,
                        df=None, tol: float = 1e-11) -> SampledField:
    """d^j/dx^j of the solution via the index-shift identity.

    Differentiation passes through the kernel as
    ``d_x^j int k^b f = int k^{b+j} d_y^j f`` (valid when the first j
    derivatives of f vanish at 0), so the result is just the (b+j)-kernel
    applied to the j-th derivative of the data.

    Args:
        df: optional callable for d^j f; finite differences of the field are
            used otherwise (reduced accuracy).
    """
    if j < 0:
        raise ValueError("j must be >= 0")
    if isinstance(f, SampledField) and j > f.smoothness:
        raise ValueError(f"data is only asserted C^{f.smoothness}, cannot transfer j={j}")
    if df is None:
        if not isinstance(f, SampledField):
            raise ValueError("derivative callable required for non-sampled data")
        if j > 2:
            raise ValueError("finite-difference fallback supports j <= 2")
        dvals = np.asarray([finite_diff(f, j, float(x)) for x in f.grid.nodes])
        dfield = SampledField(f.grid, dvals, max(f.smoothness - j, 0))
        sol = apply_kernel(ModelKernel(kernel.b + j, kernel.t), dfield, x_nodes, tol=tol)
    else:
        sol = apply_kernel(ModelKernel(kernel.b + j, kernel.t), df, x_nodes, tol=tol)
    return sol.field if sol.atom_at_zero == 0.0 else SampledField(sol.field.grid, sol.values)


def duhamel(b: float, g, t: float, x_nodes: np.ndarray, T: float | None = None,
            tol: float = 1e-9) -> SampledField:
    """Inhomogeneous (Duhamel) operator K_t^b g at the given nodes.

    ``K_t^b g(x) = int_0^t int_0^inf k_{t-s}^b(x,y) g(y,s) dy ds``;
    g is a callable g(y, s) on the slab [0,inf) x [0,T].
    """
    if T is not None and t > T:
        raise ValueError(f"t={t} exceeds the slab horizon T={T}")
    if t <= 0.0:
        raise ValueError("t must be > 0")
    if not callable(g):
        if hasattr(g, "interp"):
            g = g.interp
        else:
            raise TypeError("g must be callable or provide .interp(y, s)")
    x_nodes = np.asarray(x_nodes, dtype=float)
    zeta_top = math.sqrt(float(x_nodes[-1]))

    def inner(sigma: float) -> np.ndarray:
        rule = _local_rule(b, sigma, zeta_top)
        gvals = np.asarray([g(float(z), t - sigma) for z in rule.z])
        vals = kernel_matrix(b, sigma, x_nodes, rule.z) @ (rule.weights * gvals)
        if b == 0.0:
            vals = vals + np.exp(-x_nodes / sigma) * g(0.0, t - sigma)
        return vals

    # integrate in sigma = t - s: geometric Gauss panels plus a trapezoid
    # head where the kernel concentrates (inner(0) = g(x, t) exactly)
    sigma_head = 0.03 * t
    xg, wg = roots_legendre(8)
    g_at_t = np.asarray([g(float(x), t) for x in x_nodes])
    total = 0.5 * sigma_head * (g_at_t + inner(sigma_head))
    edges = np.geomspace(sigma_head, t, 10)
    for a, c in zip(edges[:-1], edges[1:]):
        half, mid = 0.5 * (c - a), 0.5 * (a + c)
        for xx, w in zip(xg, wg):
            total += half * w * inner(mid + half * xx)
    grid = Grid(x_nodes, "half_line", float(x_nodes[-1]))
    return SampledField(grid, total)


def _local_rule(b: float, sigma: float, zeta_top: float, safety: float = 4.5,
                pts: int = 8, max_panels: int = 400):
    """Composite rule sized to resolve kernels of elapsed time sigma.

    The kernel is a Gaussian of width ~sqrt(sigma) in zeta = sqrt(z), so the
    panel width tracks sqrt(sigma); coverage extends `safety` widths past the
    largest evaluation point.
    """
    zeta_hi = zeta_top + safety * math.sqrt(sigma) + 3.0 * math.sqrt(sigma * max(b, 1.0))
    n_panels = min(max(int(zeta_hi * 4.0 / math.sqrt(sigma)) + 2, 6), max_panels)
    return halfline_rule(b, zeta_hi**2, n_panels=n_panels, pts=pts)


@dataclass(frozen=True)
class GradBoundReport:
    """Measured Lemma-type gradient bound sup |du/dz| (s + sqrt(zs)) / ||f||."""

    measured_sup: float
    fitted_C_b: float


def grad_bound_check(b: float, t: float, f, z_max: float = 4.0) -> GradBoundReport:
    """Measure the gradient-decay constant of the model semigroup on data f."""
    fc, _ = _as_callable(f)
    zs = np.linspace(0.0, z_max, 81)
    f_sup = max(abs(fc(float(z))) for z in np.linspace(0, z_max + 8.0 * t, 400))
    if f_sup == 0.0:
        return GradBoundReport(0.0, 0.0)
    times = np.geomspace(t / 64.0, t, 10)
    sup = 0.0
    for s in times:
        rule = _local_rule(b, s, math.sqrt(z_max))
        fy = np.asarray([fc(float(y)) for y in rule.z])
        du = kernel_matrix_dx(b, s, zs, rule.z) @ (rule.weights * fy)
        if b == 0.0:
            du += -np.exp(-zs / s) / s * fc(0.0)
        ratio = np.abs(du) * (s + np.sqrt(zs * s)) / f_sup
        sup = max(sup, float(ratio.max()))
    return GradBoundReport(sup, sup)
