"""Backward and forward Kolmogorov solvers for generalized Wright-Fisher
operators L = x(1-x) d2/dx2 + b(x) d/dx on [0,1].

Construction: near each endpoint the operator is pulled back through
y = sin^2(sqrt(x_chart)) to a half-line model x d2/dx2 + b_i d/dx plus the
compactly supported perturbation x c(x) d/dx, which the perturbation engine
solves by a truncated Neumann series.  The two chart solutions, pasted with
smooth cutoffs, form the N-term parametrix of one short time step; long times
are reached by composing steps, each accurate to O(tau^((N+1)/2)) plus
exponentially small pasting terms that the short default step renders
negligible.

One step restricted to a fixed grid of [0,1] is a dense matrix, built once
per (drift, step, N) and cached: backward evolution is then a matrix-vector
chain and the forward (density) evolution is the transpose chain in the
quadrature pairing, which makes backward/forward duality exact by
construction.  Endpoint atoms of the forward solution live in the endpoint
coefficients of the transposed functional whenever the corresponding drift
index vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial as Poly

from .numerics import (
    Grid,
    SampledField,
    fd_weights,
    interp_matrix,
    quad_weights,
    unit_interval_grid,
)
from .perturbation import (
    HalfLineEngine,
    PerturbationField,
    TruncationConstants,
    choose_N,
)

__all__ = [
    "DriftSpec",
    "GeneralCoefficients",
    "LocalChart",
    "SolutionMeasure",
    "SolverOptions",
    "CutoffConfig",
    "reduce_to_normal_form",
    "local_chart",
    "parametrix_kernel",
    "solve_backward",
    "evolve_backward",
    "solve_forward",
    "evolve_forward",
    "backward_derivative_check",
    "unit_discretization",
    "step_operator",
]

_QUARTER_PI_SQ = (math.pi / 2.0) ** 2


# ---------------------------------------------------------------------------
# drift specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftSpec:
    """Drift b(x) on [0,1] with endpoint indices b0 = b(0), b1 = -b(1).

    Three representations: monomial coefficients, the genetics triple
    (mu12, mu21, s) expanding to mu12 (1-x) - mu21 x + s x (1-x), or an
    arbitrary callable (used for reduced general operators).
    """

    b0: float
    b1: float
    kind: str  # "poly" | "genetics" | "callable"
    coeffs: tuple = ()
    genetics: tuple = ()
    func: object = None

    @classmethod
    def from_poly(cls, coeffs) -> "DriftSpec":
        coeffs = tuple(float(c) for c in np.trim_zeros(np.atleast_1d(coeffs), "b")) or (0.0,)
        b0 = coeffs[0]
        b1 = -float(np.polynomial.polynomial.polyval(1.0, coeffs))
        spec = cls(b0=b0, b1=b1, kind="poly", coeffs=coeffs)
        spec._validate()
        return spec

    @classmethod
    def from_genetics(cls, mu12: float, mu21: float, s: float = 0.0) -> "DriftSpec":
        spec = cls(b0=float(mu12), b1=float(mu21), kind="genetics",
                   genetics=(float(mu12), float(mu21), float(s)))
        spec._validate()
        return spec

    @classmethod
    def from_callable(cls, func, b0: float | None = None, b1: float | None = None) -> "DriftSpec":
        b0 = float(func(0.0)) if b0 is None else float(b0)
        b1 = -float(func(1.0)) if b1 is None else float(b1)
        spec = cls(b0=b0, b1=b1, kind="callable", func=func)
        spec._validate()
        return spec

    def _validate(self):
        # b(0) < 0 loses the maximum principle; reject at construction
        if self.b0 < 0.0 or self.b1 < 0.0:
            raise ValueError(
                f"drift must point inward: need b(0) >= 0 and b(1) <= 0, "
                f"got b0={self.b0}, b1={self.b1}"
            )

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            return np.polynomial.polynomial.polyval(x, self.coeffs)
        if self.kind == "genetics":
            mu12, mu21, s = self.genetics
            return mu12 * (1.0 - x) - mu21 * x + s * x * (1.0 - x)
        return np.vectorize(self.func)(x) if x.ndim else float(self.func(float(x)))

    @property
    def poly_coeffs(self) -> tuple | None:
        if self.kind == "poly":
            return self.coeffs
        if self.kind == "genetics":
            mu12, mu21, s = self.genetics
            return tuple(np.trim_zeros(np.array([mu12, -(mu12 + mu21) + s, -s]), "b")) or (0.0,)
        return None

    @property
    def is_linear(self) -> bool:
        pc = self.poly_coeffs
        return pc is not None and len(pc) <= 2

    def btilde(self, x):
        """Smooth part of b(x) = b0 (1-x) - b1 x + x (1-x) btilde(x)."""
        pc = self.poly_coeffs
        if pc is not None:
            num = np.polynomial.polynomial.polysub(
                pc, np.polynomial.polynomial.polysub([self.b0], [0.0, self.b0 + self.b1])
            )
            # num vanishes at 0 and 1, so division by x(1-x) is exact
            q1 = np.polynomial.polynomial.polydiv(num, [0.0, 1.0])[0]
            q2 = np.polynomial.polynomial.polydiv(q1, [1.0, -1.0])[0]
            return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), q2) \
                if q2.size else np.zeros_like(np.asarray(x, dtype=float))
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        xs = np.clip(x_arr, 1e-7, 1.0 - 1e-7)
        vals = (self(xs) - self.b0 * (1.0 - xs) + self.b1 * xs) / (xs * (1.0 - xs))
        return vals if np.asarray(x).ndim else float(vals[0])

    def reflected(self) -> "DriftSpec":
        """Drift of the x -> 1-x reflected operator."""
        if self.kind == "genetics":
            mu12, mu21, s = self.genetics
            return DriftSpec.from_genetics(mu21, mu12, -s)
        if self.kind == "poly":
            p = Poly(self.coeffs)(Poly([1.0, -1.0]))
            return DriftSpec.from_poly((-p).coef)
        f = self.func
        return DriftSpec.from_callable(lambda x: -f(1.0 - x), b0=self.b1, b1=self.b0)

    def key(self) -> tuple:
        if self.kind == "callable":
            return ("callable", id(self.func))
        return (self.kind, self.coeffs, self.genetics)


# ---------------------------------------------------------------------------
# reduction of general coefficients to normal form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneralCoefficients:
    """Operator a(x) d2/dx2 + b(x) d/dx on [A,B] with a = (x-A)(B-x) a~(x)."""

    a_tilde: object  # callable, positive on [A,B]
    b: object        # callable
    interval: tuple = (0.0, 1.0)

    def __post_init__(self):
        A, B = self.interval
        if not B > A:
            raise ValueError("interval must satisfy B > A")
        xs = np.linspace(A, B, 257)
        at = np.asarray([self.a_tilde(float(x)) for x in xs])
        if np.any(at <= 0.0):
            raise ValueError("a~ must be positive on the closed interval")
        if self.b(A) < 0.0 or self.b(B) > 0.0:
            raise ValueError("drift must be inward pointing: b(A) >= 0 and b(B) <= 0")

    def a(self, x: float) -> float:
        A, B = self.interval
        return (x - A) * (B - x) * self.a_tilde(x)


def reduce_to_normal_form(gc: GeneralCoefficients, n_quad: int = 4096):
    """Reduce to x(1-x) d2/dx2 + b~(x) d/dx via xi(x) = sin^2(eta(x)/2).

    Returns (DriftSpec for b~, time_scale, xi, xi_inverse); solving the
    normal-form problem to time time_scale * t reproduces the original
    solution at time t.
    """
    A, B = gc.interval

    def to_unit(x):
        return (x - A) / (B - A)

    def a_unit(u: float) -> float:
        return u * (1.0 - u) * gc.a_tilde(A + (B - A) * u)

    def b_unit(u: float) -> float:
        return gc.b(A + (B - A) * u) / (B - A)

    # eta(x) = int_0^x ds / sqrt(a); integrable endpoint singularities are
    # removed by the substitution u = sin^2(theta)
    thetas = np.linspace(0.0, math.pi / 2.0, n_quad)
    us = np.sin(thetas) ** 2
    integ = np.asarray([2.0 / math.sqrt(gc.a_tilde(A + (B - A) * u)) for u in us])
    # d u = 2 sin th cos th dth and sqrt(u(1-u)) = sin th cos th
    eta_cum = np.concatenate([[0.0], np.cumsum((integ[1:] + integ[:-1]) / 2.0 * np.diff(thetas))])
    total = float(eta_cum[-1])
    time_scale = (math.pi / total) ** 2

    def eta(u: float) -> float:
        th = math.asin(math.sqrt(min(max(u, 0.0), 1.0)))
        return float(np.interp(th, thetas, eta_cum)) * (math.pi / total)

    def xi(x: float) -> float:
        return math.sin(eta(to_unit(x)) / 2.0) ** 2

    # dense monotone table for the inverse
    u_table = np.sin(np.linspace(0.0, math.pi / 2.0, 2049)) ** 2
    xi_table = np.asarray([xi(A + (B - A) * u) for u in u_table])

    def xi_inv(v: float) -> float:
        u = float(np.interp(v, xi_table, u_table))
        return A + (B - A) * u

    def b_reduced(v: float) -> float:
        # b~(xi) = a_scaled * xi'' + b_scaled * xi' evaluated at x(v)
        v = min(max(v, 1e-9), 1.0 - 1e-9)
        u = float(np.interp(v, xi_table, u_table))
        e = eta(u)
        a_s = time_scale * a_unit(u)
        b_s = time_scale * b_unit(u)
        sqrt_a = math.sqrt(max(a_s, 1e-300))
        xi_p = math.sin(e) / (2.0 * sqrt_a)
        h = 1e-5
        ap = (math.sqrt(time_scale * a_unit(min(u + h, 1.0 - 1e-12)))
              - math.sqrt(time_scale * a_unit(max(u - h, 1e-12)))) / (2.0 * h)
        xi_pp = math.cos(e) / (2.0 * a_s) - math.sin(e) * ap / (2.0 * a_s)
        return a_s * xi_pp + b_s * xi_p

    b0 = gc.b(A) / ((B - A) * gc.a_tilde(A))
    b1 = -gc.b(B) / ((B - A) * gc.a_tilde(B))
    drift = DriftSpec.from_callable(b_reduced, b0=b0, b1=b1)
    return drift, time_scale, xi, xi_inv


# ---------------------------------------------------------------------------
# cutoffs and local charts
# ---------------------------------------------------------------------------

def _smoothstep(u):
    """C^3 step: 0 at 0, 1 at 1 (degree-7 integrated bump polynomial)."""
    u = np.clip(u, 0.0, 1.0)
    return u**4 * (35.0 - 84.0 * u + 70.0 * u**2 - 20.0 * u**3)


def cutoff_down(x, one_until: float, zero_from: float):
    """Smooth 1 -> 0 transition; equals 1 below one_until, 0 above zero_from."""
    return 1.0 - _smoothstep((np.asarray(x, dtype=float) - one_until) / (zero_from - one_until))


@dataclass(frozen=True)
class CutoffConfig:
    """Supports of the pasting cutoffs on [0,1].

    phi_left is 1 on [0, left_one] with support [0, left_zero]; phi_right is
    the mirror image; phi0 blends the two charts, 1 on [0, mid_one] with
    support [0, mid_zero].
    """

    left_one: float = 0.85
    left_zero: float = 0.94
    mid_one: float = 0.40
    mid_zero: float = 0.60

    def phi_left(self, y):
        return cutoff_down(y, self.left_one, self.left_zero)

    def phi_right(self, y):
        return cutoff_down(1.0 - np.asarray(y, dtype=float), self.left_one, self.left_zero)

    def phi0(self, x):
        return cutoff_down(x, self.mid_one, self.mid_zero)


#: the paper's verbatim cutoff supports, used by parametrix_kernel defaults
PAPER_CUTOFFS = CutoffConfig(left_one=11.0 / 16.0, left_zero=0.75,
                             mid_one=3.0 / 8.0, mid_zero=5.0 / 8.0)


@dataclass(frozen=True)
class LocalChart:
    """One endpoint's model data in the chart coordinate x = (arcsin sqrt y)^2."""

    end: str                  # "left" | "right"
    b_index: float
    c: object                 # callable, pullback drift remainder b_index + x c(x)
    h: PerturbationField      # cutoff perturbation coefficient c(x) phi(x)
    eta: float

    def to_unit(self, xc):
        y = np.sin(np.sqrt(np.asarray(xc, dtype=float))) ** 2
        return y if self.end == "left" else 1.0 - y

    def from_unit(self, y):
        y = np.asarray(y, dtype=float)
        yy = y if self.end == "left" else 1.0 - y
        return np.arcsin(np.sqrt(np.clip(yy, 0.0, 1.0))) ** 2

    def jacobian(self, y):
        """|d(chart)/d(unit)| = arcsin(sqrt y_side)/sqrt(y_side (1-y_side))."""
        y = np.asarray(y, dtype=float)
        yy = y if self.end == "left" else 1.0 - y
        yy = np.clip(yy, 1e-300, 1.0 - 1e-15)
        return np.arcsin(np.sqrt(yy)) / np.sqrt(yy * (1.0 - yy))


def _chart_beta(drift, xc: float) -> float:
    """First-order coefficient of the pulled-back operator at chart point xc."""
    m = math.sqrt(max(xc, 0.0))
    if m < 1e-6:
        # series: beta = b0 + x (2/3 + 2 b0 / 3 + b'(0)) + O(x^2)
        b0 = float(drift(0.0))
        bp = (float(drift(1e-6)) - float(drift(0.0))) / 1e-6
        return b0 + xc * (2.0 / 3.0 + 2.0 * b0 / 3.0 + bp)
    y = math.sin(m) ** 2
    return 0.5 - m / math.tan(2.0 * m) + 2.0 * m * float(drift(y)) / math.sin(2.0 * m)


def local_chart(d: DriftSpec, end: str, eta: float | None = None) -> LocalChart:
    """Extract the half-line model data of one endpoint.

    The pullback drift is b_index + x c(x) with c sampled from the analytic
    transformation formula; h = c * phi cuts c off inside the chart,
    phi = 1 on [0, (pi/2)^2 - 2 eta] and 0 beyond (pi/2)^2 - eta.
    """
    if end not in ("left", "right"):
        raise ValueError("end must be 'left' or 'right'")
    if eta is None:
        eta = _QUARTER_PI_SQ / 8.0
    drift = d if end == "left" else d.reflected()
    b_index = drift.b0
    support = _QUARTER_PI_SQ - eta
    lo, hi = _QUARTER_PI_SQ - 2.0 * eta, support

    def c(xc: float) -> float:
        xc = max(float(xc), 1e-8)
        if xc >= hi:
            return 0.0
        return (_chart_beta(drift, xc) - b_index) / xc

    def h(xc: float) -> float:
        xc = float(xc)
        if xc >= hi:
            return 0.0
        return c(xc) * float(cutoff_down(xc, lo, hi))

    pert = PerturbationField.from_callable(h, support)
    return LocalChart(end=end, b_index=b_index, c=c, h=pert, eta=eta)


# ---------------------------------------------------------------------------
# solver options, step operator, caching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverOptions:
    """Discretization knobs of the composed-step solver (defaults validated
    against the closed-form and stationarity acceptance targets)."""

    tau_max: float = 0.005
    n_grid: int = 161
    grid_ratio: float = 1.15
    cutoffs: CutoffConfig = field(default_factory=CutoffConfig)
    eta: float | None = None
    N: int | None = None          # fixed truncation level; None = from choose_N
    max_N: int = 8
    n_stored: int = 12
    pts: int = 10
    sigma_frac: float = 0.08
    res_factor: float = 3.0
    max_panels: int = 220
    tol_floor: float = 1e-9

    def key(self) -> tuple:
        return (self.tau_max, self.n_grid, self.grid_ratio,
                self.cutoffs.left_one, self.cutoffs.left_zero,
                self.cutoffs.mid_one, self.cutoffs.mid_zero,
                self.eta, self.N, self.max_N, self.n_stored, self.pts,
                self.sigma_frac, self.res_factor, self.max_panels)


DEFAULT_OPTIONS = SolverOptions()


@lru_cache(maxsize=8)
def _unit_grid_cached(n: int, ratio: float):
    grid = unit_interval_grid(n, ratio)
    return grid, quad_weights(grid.nodes)


def unit_discretization(opts: SolverOptions = DEFAULT_OPTIONS):
    """The solver's [0,1] grid and its quadrature weights."""
    return _unit_grid_cached(opts.n_grid, opts.grid_ratio)


@dataclass
class StepOperator:
    """One composed-solver step restricted to the unit grid."""

    matrix: np.ndarray
    grid: Grid
    weights: np.ndarray
    tau: float
    N: int
    drift: DriftSpec
    opts: SolverOptions


_step_cache: dict[tuple, StepOperator] = {}


def _chart_contribution(engine: HalfLineEngine, chart: LocalChart, grid: Grid,
                        cutoffs: CutoffConfig, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the step matrix contributed by one chart (before phi0 weight).

    Returns (selector, T) with T[k, :] the action on grid values producing
    the chart solution at the selected unit nodes.
    """
    nodes = grid.nodes
    n_g = nodes.size
    # data rows: f~(z_q) = phi_side(y(z_q)) * u(y(z_q))
    phi_side = cutoffs.phi_left if chart.end == "left" else cutoffs.phi_right
    y_q = chart.to_unit(engine.z)
    valid = engine.zeta < math.pi / 2.0 - 1e-9
    R = np.zeros((engine.n, n_g))
    mask = valid & (np.asarray(phi_side(y_q)) > 1e-15)
    if np.any(mask):
        R[mask] = np.asarray(phi_side(y_q[mask]))[:, None] * interp_matrix(nodes, y_q[mask], k=6)
    data0 = np.zeros(n_g)
    data0[0 if chart.end == "left" else -1] = 1.0

    levels = engine.neumann_iterates(R, data0, N)
    total = sum(lev[-1] for lev in levels)

    phi0_w = np.asarray(cutoffs.phi0(nodes))
    weight = phi0_w if chart.end == "left" else 1.0 - phi0_w
    sel = np.nonzero(weight > 1e-15)[0]
    zeta_t = np.sqrt(chart.from_unit(nodes[sel]))
    P = interp_matrix(engine.zeta, zeta_t, k=6)
    # the b = 0 atom mode is already part of the stored level-0 values
    T = P @ total
    return sel, weight[sel, None] * T


def step_operator(d: DriftSpec, tau: float, N: int,
                  opts: SolverOptions = DEFAULT_OPTIONS) -> StepOperator:
    """Build (or fetch) the dense one-step matrix for the given drift."""
    key = (d.key(), round(tau, 14), N, opts.key())
    cached = _step_cache.get(key)
    if cached is not None:
        return cached
    grid, W = unit_discretization(opts)
    B = np.zeros((grid.n, grid.n))
    for end in ("left", "right"):
        chart = local_chart(d, end, eta=opts.eta)
        engine = HalfLineEngine(chart.b_index, chart.h, tau,
                                n_stored=opts.n_stored, pts=opts.pts,
                                sigma_frac=opts.sigma_frac,
                                res_factor=opts.res_factor,
                                max_panels=opts.max_panels)
        sel, T = _chart_contribution(engine, chart, grid, opts.cutoffs, N)
        B[sel] += T
    op = StepOperator(B, grid, W, tau, N, d, opts)
    if len(_step_cache) >= 32:
        _step_cache.pop(next(iter(_step_cache)))
    _step_cache[key] = op
    return op


def _plan_steps(d: DriftSpec, t: float, tol: float, opts: SolverOptions,
                f_scale: float = 1.0) -> tuple[int, float, int]:
    """Pick (K, tau, N) so the truncation budget per step is tol/K."""
    if t <= 0.0:
        raise ValueError("t must be > 0")
    if tol < opts.tol_floor:
        raise ValueError(
            f"tol={tol} is below the solver floor {opts.tol_floor}; refine the "
            "grid/step options instead of tightening tol"
        )
    K = max(1, math.ceil(t / opts.tau_max - 1e-12))
    tau = t / K
    if opts.N is not None:
        return K, tau, opts.N
    charts = [local_chart(d, e, eta=opts.eta) for e in ("left", "right")]
    h_sup = max(c.h.sup_norm for c in charts)
    L = max(c.h.support for c in charts)
    consts = TruncationConstants(M=f_scale, C_b=2.0, L=L, h_sup=h_sup)
    N = choose_N(tau, tol / K, consts, n_max=opts.max_N)
    return K, tau, N


def _data_vector(f, grid: Grid) -> np.ndarray:
    if isinstance(f, SampledField):
        if f.grid.nodes.shape == grid.nodes.shape and np.allclose(f.grid.nodes, grid.nodes):
            return f.values.copy()
        return np.asarray([f(float(x)) for x in grid.nodes])
    if isinstance(f, Poly):
        return f(grid.nodes)
    if callable(f):
        return np.asarray([float(f(float(x))) for x in grid.nodes])
    arr = np.asarray(f, dtype=float)
    if arr.shape != grid.nodes.shape:
        raise ValueError("data vector does not match the solver grid")
    return arr


def evolve_backward(d: DriftSpec, f, times, tol: float = 1e-6,
                    opts: SolverOptions = DEFAULT_OPTIONS) -> list[SampledField]:
    """Backward solutions at the requested increasing times (one matrix chain)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= 0.0) or np.any(np.diff(times) <= 0.0):
        raise ValueError("times must be positive and increasing")
    t_end = float(times[-1])
    K, tau, N = _plan_steps(d, t_end, tol, opts)
    # snap times to whole steps (times are expected to be ~multiples of tau)
    steps = np.maximum(1, np.rint(times / tau).astype(int))
    K = int(steps[-1])
    tau = t_end / K
    op = step_operator(d, tau, N, opts)
    v = _data_vector(f, op.grid)
    out = []
    last = 0
    for target in steps:
        for _ in range(target - last):
            v = op.matrix @ v
        last = int(target)
        out.append(SampledField(op.grid, v.copy()))
    return out


def solve_backward(d: DriftSpec, f, t: float, tol: float = 1e-6,
                   opts: SolverOptions = DEFAULT_OPTIONS) -> SampledField:
    """Solution u(., t) of d_t u = L u, u(., 0) = f, on the solver grid."""
    return evolve_backward(d, f, [t], tol=tol, opts=opts)[-1]


# ---------------------------------------------------------------------------
# forward (density) evolution
# ---------------------------------------------------------------------------

@dataclass
class SolutionMeasure:
    """Forward state: density on (0,1) plus endpoint atoms."""

    density: SampledField
    atom0: float = 0.0
    atom1: float = 0.0

    def mass(self, weights: np.ndarray | None = None) -> float:
        w = quad_weights(self.density.grid.nodes) if weights is None else weights
        return float(w @ self.density.values) + self.atom0 + self.atom1

    def pair(self, f_values: np.ndarray, weights: np.ndarray) -> float:
        """<f, measure> = int f density + atom0 f(0) + atom1 f(1)."""
        return float(weights @ (f_values * self.density.values)) \
            + self.atom0 * float(f_values[0]) + self.atom1 * float(f_values[-1])


def _functional_vector(g, op: StepOperator) -> np.ndarray:
    if isinstance(g, SolutionMeasure):
        m = op.weights * _data_vector(g.density, op.grid)
        m[0] += g.atom0
        m[-1] += g.atom1
        return m
    vals = _data_vector(g, op.grid)
    if np.any(vals < -1e-12):
        raise ValueError("forward initial density must be nonnegative")
    return op.weights * vals


def _measure_from_functional(m: np.ndarray, op: StepOperator) -> SolutionMeasure:
    nodes = op.grid.nodes
    v = m / op.weights
    atom0 = atom1 = 0.0
    if op.drift.b0 == 0.0:
        w = fd_weights(nodes[1:4], 0.0, 0)
        v0 = float(w @ v[1:4])
        atom0 = float(m[0] - op.weights[0] * v0)
        v[0] = v0
    if op.drift.b1 == 0.0:
        w = fd_weights(nodes[-4:-1], 1.0, 0)
        v1 = float(w @ v[-4:-1])
        atom1 = float(m[-1] - op.weights[-1] * v1)
        v[-1] = v1
    return SolutionMeasure(SampledField(op.grid, v), atom0, atom1)


def evolve_forward(d: DriftSpec, g, times, tol: float = 1e-6,
                   opts: SolverOptions = DEFAULT_OPTIONS) -> list[SolutionMeasure]:
    """Forward (Kolmogorov) evolution of a density/measure at several times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= 0.0) or np.any(np.diff(times) <= 0.0):
        raise ValueError("times must be positive and increasing")
    t_end = float(times[-1])
    K, tau, N = _plan_steps(d, t_end, tol, opts)
    steps = np.maximum(1, np.rint(times / tau).astype(int))
    K = int(steps[-1])
    tau = t_end / K
    op = step_operator(d, tau, N, opts)
    m = _functional_vector(g, op)
    BT = op.matrix.T
    out = []
    last = 0
    for target in steps:
        for _ in range(target - last):
            m = BT @ m
        last = int(target)
        out.append(_measure_from_functional(m.copy(), op))
    return out


def solve_forward(d: DriftSpec, g, t: float, tol: float = 1e-6,
                  opts: SolverOptions = DEFAULT_OPTIONS) -> SolutionMeasure:
    """Density (plus absorption atoms when b0 and/or b1 vanish) at time t."""
    return evolve_forward(d, g, [t], tol=tol, opts=opts)[-1]


# ---------------------------------------------------------------------------
# pointwise parametrix kernel (paper cutoffs)
# ---------------------------------------------------------------------------

def parametrix_kernel(d: DriftSpec, t: float, x: float, y: float, N: int = 0,
                      cutoffs: CutoffConfig = PAPER_CUTOFFS,
                      opts: SolverOptions = DEFAULT_OPTIONS) -> float:
    """q_{t,N}(x, y): N-term Neumann kernel pasted with the standard cutoffs.

    Evaluated by running the chart engines on the kernel column of y (the
    model evolution of a point mass), transformed with the chart Jacobians.
    """
    from .model_kernel import kernel_matrix

    if t <= 0.0:
        raise ValueError("t must be > 0")
    total = 0.0
    phi0x = float(cutoffs.phi0(x))
    for end, wx in (("left", phi0x), ("right", 1.0 - phi0x)):
        if wx <= 1e-15:
            continue
        chart = local_chart(d, end, eta=opts.eta)
        phi_side = cutoffs.phi_left if end == "left" else cutoffs.phi_right
        wy = float(phi_side(y))
        if wy <= 1e-15:
            continue
        engine = HalfLineEngine(chart.b_index, chart.h, t,
                                n_stored=opts.n_stored, pts=opts.pts,
                                sigma_frac=opts.sigma_frac,
                                res_factor=opts.res_factor,
                                max_panels=opts.max_panels)
        y_c = float(chart.from_unit(y))
        x_c = float(chart.from_unit(x))
        # level 0 of the Neumann series for point data: the kernel column
        g0 = np.empty((engine.times.size, engine.n))
        col = kernel_matrix(chart.b_index, max(engine.times[1], 1e-300),
                            engine.z, np.array([y_c]))[:, 0]
        g0[0] = col  # s=0 slot never enters the quadratures below sigma*
        for i, s in enumerate(engine.times[1:], start=1):
            g0[i] = kernel_matrix(chart.b_index, s, engine.z, np.array([y_c]))[:, 0]
        levels = [g0]
        for _ in range(N):
            levels.append(engine.apply_A_stored(levels[-1]))
        P = interp_matrix(engine.zeta, np.array([math.sqrt(max(x_c, 0.0))]), k=6)
        val = float(P @ sum(lev[-1] for lev in levels))
        total += wx * val * wy * float(chart.jacobian(y))
    return total


# ---------------------------------------------------------------------------
# differentiated-equation residual report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DerivativeCheckReport:
    j: int
    residual_sup: float
    drift_of_differentiated_equation: object


def backward_derivative_check(d: DriftSpec, f, t: float, j: int = 0,
                              tol: float = 1e-6,
                              opts: SolverOptions = DEFAULT_OPTIONS) -> DerivativeCheckReport:
    """Measure the residual of the j-times differentiated backward equation.

    v = d^j u / dx^j satisfies d_t v = L_[j] v + c_j v + lower-order Leibniz
    terms, with L_[j] = x(1-x) d2 + (b + j(1-2x)) d and c_j = j b' - j(j-1).
    All derivatives are estimated by finite differences on the solver grid,
    so the report is meaningful for j <= 2.
    """
    if j < 0 or j > 2:
        raise ValueError("derivative check supports j in {0, 1, 2}")
    dt = max(1e-4, 5e-3 * t)
    fields = evolve_backward(d, f, [t - dt, t, t + dt], tol=tol, opts=opts)
    nodes = fields[0].grid.nodes
    inner = (nodes > 0.05) & (nodes < 0.95)
    xs = nodes[inner]

    from .numerics import finite_diff

    def d_j(field, x, order):
        return finite_diff(field, order, x) if order > 0 else field(x)

    resid = []
    for x in xs[:: max(1, xs.size // 40)]:
        x = float(x)
        vdot = (d_j(fields[2], x, j) - d_j(fields[0], x, j)) / (2.0 * dt)
        v1 = d_j(fields[1], x, j + 1) if j + 1 <= 2 else _fd_high(fields[1], x, j + 1)
        v2 = _fd_high(fields[1], x, j + 2)
        bx = float(d(x))
        bp = float((d(x + 1e-5) - d(x - 1e-5)) / 2e-5)
        bpp = float((d(x + 1e-4) - 2.0 * d(x) + d(x - 1e-4)) / 1e-8)
        rhs = x * (1.0 - x) * v2 + (bx + j * (1.0 - 2.0 * x)) * v1 \
            + (j * bp - j * (j - 1)) * d_j(fields[1], x, j)
        if j == 2:
            rhs += bpp * d_j(fields[1], x, 1)
        resid.append(vdot - rhs)
    drift_fn = (lambda x: d(x) + j * (1.0 - 2.0 * x))
    return DerivativeCheckReport(j, float(np.abs(resid).max()), drift_fn)


def _fd_high(field: SampledField, x: float, order: int) -> float:
    nodes = field.grid.nodes
    width = order + 4
    i = int(np.searchsorted(nodes, x))
    lo = max(0, min(i - width // 2, nodes.size - width))
    sl = slice(lo, lo + width)
    return float(fd_weights(nodes[sl], x, order) @ field.values[sl])
