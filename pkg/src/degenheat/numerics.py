"""Grids, singular-weight quadrature, interpolation and finite differences.

Everything here is deterministic plumbing shared by the kernel and solver
modules.  Two quadrature layers are provided:

* :func:`integrate_singular` -- adaptive panels for one-off integrals of
  ``y**(b-1) * g(y)`` with ``g`` continuous at 0, accurate to a requested
  absolute tolerance;
* :func:`halfline_rule` -- a fixed composite rule in the variable
  ``zeta = sqrt(z)`` whose first panel is Gauss-Jacobi, used to build the
  kernel matrices of the solvers (solutions of the degenerate equations are
  smooth functions of ``sqrt(z)``, so panels in ``zeta`` converge fast).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "Grid",
    "SampledField",
    "unit_interval_grid",
    "half_line_grid",
    "integrate_singular",
    "interpolate",
    "finite_diff",
    "fd_weights",
    "interp_weights",
    "interp_matrix",
    "deriv_matrix",
    "quad_weights",
    "halfline_rule",
    "kernel_y_max",
]


# ---------------------------------------------------------------------------
# grids and sampled fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Strictly increasing nodes on [0,1] or on a truncated half-line."""

    nodes: np.ndarray
    domain: str = "unit_interval"  # "unit_interval" | "half_line"
    truncation: float | None = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.size < 8:
            raise ValueError("grid needs at least 8 nodes")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("grid nodes must be strictly increasing")
        if nodes[0] < 0.0:
            raise ValueError("first node must be >= 0")
        if self.domain == "unit_interval":
            if nodes[-1] > 1.0 + 1e-12:
                raise ValueError("unit-interval grid exceeds 1")
        elif self.domain == "half_line":
            if self.truncation is None:
                object.__setattr__(self, "truncation", float(nodes[-1]))
            elif nodes[-1] > self.truncation + 1e-12:
                raise ValueError("nodes exceed the half-line truncation point")
        else:
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def n(self) -> int:
        return self.nodes.size


@dataclass
class SampledField:
    """Function samples on a grid, tagged with an asserted smoothness class."""

    grid: Grid
    values: np.ndarray
    smoothness: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.nodes.shape:
            raise ValueError("values length must match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        if self.smoothness < 0:
            raise ValueError("smoothness class must be >= 0")

    @classmethod
    def from_callable(cls, grid: Grid, f, smoothness: int = 0) -> "SampledField":
        return cls(grid, np.asarray([f(x) for x in grid.nodes], dtype=float), smoothness)

    def __call__(self, x: float) -> float:
        return interpolate(self, x)


def _clustered(n: int, left: float, right: float, ratio: float) -> np.ndarray:
    # geometric spacing shrinking by `ratio` toward both endpoints
    half = (n - 1) // 2
    steps = ratio ** np.arange(half, dtype=float)
    steps = np.concatenate([steps, steps[::-1]]) if (n - 1) % 2 == 0 else np.concatenate(
        [steps, [ratio**half], steps[::-1]]
    )
    x = np.concatenate([[0.0], np.cumsum(steps)])
    x /= x[-1]
    return left + (right - left) * x


def unit_interval_grid(n: int = 161, ratio: float = 1.15) -> Grid:
    """Grid on [0,1] geometrically clustered toward both endpoints.

    The clustering resolves the x**(b0-1), (1-x)**(b1-1) boundary behaviour
    of densities without a huge node count.
    """
    return Grid(_clustered(n, 0.0, 1.0, ratio), "unit_interval")


def half_line_grid(truncation: float, n: int = 129, ratio: float = 1.12) -> Grid:
    """Grid on [0, truncation] clustered toward 0."""
    steps = ratio ** np.arange(n - 1, dtype=float)
    x = np.concatenate([[0.0], np.cumsum(steps)])
    x *= truncation / x[-1]
    return Grid(x, "half_line", truncation)


# ---------------------------------------------------------------------------
# interpolation and finite differences (Fornberg weights)
# ---------------------------------------------------------------------------

def fd_weights(nodes: np.ndarray, x0: float, order: int) -> np.ndarray:
    """Fornberg weights reproducing d^order/dx^order at x0 from the nodes."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    if order >= n:
        raise ValueError("stencil too small for requested derivative order")
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            for k in range(mn, 0, -1):
                c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
            c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def _stencil(nodes: np.ndarray, x: float, width: int) -> slice:
    n = nodes.size
    if width > n:
        raise ValueError("not enough grid nodes for the stencil")
    i = int(np.searchsorted(nodes, x))
    lo = max(0, min(i - width // 2, n - width))
    return slice(lo, lo + width)


def interp_weights(nodes: np.ndarray, x: float, k: int = 4) -> tuple[slice, np.ndarray]:
    """Local k-point Lagrange interpolation weights at x."""
    sl = _stencil(nodes, x, k)
    return sl, fd_weights(nodes[sl], x, 0)


def interpolate(field: SampledField, x: float) -> float:
    """Piecewise-cubic (4-point local Lagrange) interpolation; exact on cubics."""
    nodes = field.grid.nodes
    if x < nodes[0] - 1e-12 or x > nodes[-1] + 1e-12:
        raise ValueError(f"x={x} outside the grid range [{nodes[0]}, {nodes[-1]}]")
    sl, w = interp_weights(nodes, x, 4)
    return float(w @ field.values[sl])


def interp_matrix(nodes: np.ndarray, targets: np.ndarray, k: int = 6) -> np.ndarray:
    """Dense matrix mapping samples at `nodes` to values at `targets`."""
    nodes = np.asarray(nodes, dtype=float)
    targets = np.asarray(targets, dtype=float)
    out = np.zeros((targets.size, nodes.size))
    for r, x in enumerate(targets):
        sl, w = interp_weights(nodes, float(x), min(k, nodes.size))
        out[r, sl] = w
    return out


def finite_diff(field: SampledField, order: int, x: float) -> float:
    """Derivative estimate of formal order >= 4 from a centered local stencil."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    nodes = field.grid.nodes
    width = order + 4
    sl = _stencil(nodes, x, width)
    w = fd_weights(nodes[sl], x, order)
    return float(w @ field.values[sl])


def deriv_matrix(nodes: np.ndarray, order: int = 1, width: int = 5) -> np.ndarray:
    """Dense differentiation matrix with local Fornberg stencils."""
    nodes = np.asarray(nodes, dtype=float)
    out = np.zeros((nodes.size, nodes.size))
    for r, x in enumerate(nodes):
        sl = _stencil(nodes, float(x), width)
        out[r, sl] = fd_weights(nodes[sl], float(x), order)
    return out


# ---------------------------------------------------------------------------
# adaptive quadrature with the y**(b-1) endpoint weight
# ---------------------------------------------------------------------------

_GL8 = roots_legendre(8)
_GL16 = roots_legendre(16)


def _panel(f, a: float, c: float) -> tuple[float, float]:
    # 16-point Gauss value with an 8-point error estimate
    half, mid = 0.5 * (c - a), 0.5 * (a + c)
    x16, w16 = _GL16
    x8, w8 = _GL8
    v16 = half * float(w16 @ f(mid + half * x16))
    v8 = half * float(w8 @ f(mid + half * x8))
    return v16, abs(v16 - v8)


def _adaptive(f, a: float, c: float, tol: float, depth: int = 48) -> float:
    stack = [(a, c, depth)]
    total = 0.0
    while stack:
        lo, hi, d = stack.pop()
        val, err = _panel(f, lo, hi)
        if err <= tol * max(1.0, abs(val)) * 0.1 + tol * (hi - lo) / max(c - a, 1e-300) or d == 0:
            total += val
        else:
            mid = 0.5 * (lo + hi)
            stack.append((lo, mid, d - 1))
            stack.append((mid, hi, d - 1))
    return total


def integrate_singular(g, b: float, upper: float, tol: float = 1e-10) -> float:
    """Integral of y**(b-1) * g(y) over (0, upper] with g continuous at 0.

    The weight is regularized by the substitution y = u**(1/b) on the first
    unit of the range (so the transformed integrand is continuous), the rest
    is handled by adaptive Gauss panels.  `upper` may be ``numpy.inf`` for
    integrands with eventual exponential decay.

    Raises:
        ValueError: if ``b <= 0``.
    """
    if b <= 0.0:
        raise ValueError(f"integrate_singular requires b > 0, got b={b}")
    if not (callable(g) or isinstance(g, SampledField)):
        raise TypeError("g must be callable or a SampledField")

    if isinstance(g, SampledField):
        def g_vec(y):
            return np.asarray([g(float(v)) for v in np.atleast_1d(y)])
    else:
        def g_vec(y):
            y = np.atleast_1d(y)
            try:
                out = np.asarray(g(y), dtype=float)
                if out.shape == y.shape:
                    return out
            except (TypeError, ValueError):
                pass
            return np.asarray([g(float(v)) for v in y])

    total = 0.0
    y0 = min(1.0, upper)
    if b < 1.0:
        # regularized first segment: (1/b) * int_0^{y0^b} g(u^(1/b)) du
        total += _adaptive(lambda u: g_vec(u ** (1.0 / b)) / b, 0.0, y0**b, tol)
    else:
        total += _adaptive(lambda y: y ** (b - 1.0) * g_vec(y), 0.0, y0, tol)
    if upper <= y0:
        return total

    def weighted(y):
        return y ** (b - 1.0) * g_vec(y)

    if math.isfinite(upper):
        total += _adaptive(weighted, y0, upper, tol)
        return total
    # march geometric panels until two consecutive contributions are negligible
    a, width, small_run = y0, 1.0, 0
    for _ in range(200):
        piece = _adaptive(weighted, a, a + width, tol)
        total += piece
        a += width
        width *= 2.0
        small_run = small_run + 1 if abs(piece) < 0.25 * tol * (abs(total) + 1.0) else 0
        if small_run >= 2 and a > 10.0:
            return total
    raise ValueError("integrand does not appear to decay on the half-line")


def kernel_y_max(x: float, t: float, margin: float = 40.0) -> float:
    """Truncation point beyond which the model-kernel tail mass is < 1e-14.

    Derived from the Gaussian-type off-diagonal bound exp(-(sqrt x - sqrt y)^2/t).
    """
    return x + t * (margin + 10.0 * math.sqrt(margin * x / t))


# ---------------------------------------------------------------------------
# fixed composite rules used by the solver engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HalflineRule:
    """Composite quadrature for ``int_0^Z F(z) dz`` with ``F ~ z^(b-1)``.

    Nodes live at z = zeta^2 on panels uniform in zeta; the first panel is
    Gauss-Jacobi with weight zeta^(2b-1), which integrates the endpoint
    singularity exactly.  The same nodes serve as collocation points for the
    space-time iterates of the perturbation series.
    """

    b: float
    zeta: np.ndarray
    z: np.ndarray = field(init=False)
    weights: np.ndarray  # weights for integrands including the z^(b-1) factor

    def __post_init__(self):
        object.__setattr__(self, "z", self.zeta**2)


def halfline_rule(b: float, z_max: float, n_panels: int = 24, pts: int = 10,
                  first_panel: float | None = None) -> HalflineRule:
    """Build the composite sqrt-variable rule on [0, z_max]."""
    if b < 0.0:
        raise ValueError("b must be >= 0")
    zeta_max = math.sqrt(z_max)
    if first_panel is None:
        first_panel = zeta_max / n_panels
    edges = np.linspace(first_panel, zeta_max, n_panels)
    # first panel: Gauss-Jacobi in zeta with weight zeta^(2b-1) (beta=2b-1);
    # the b=0 kernel path is regular in z, so it gets the plain-Jacobian rule
    b_eff = b if b > 0.0 else 1.0
    xj, wj = roots_jacobi(pts, 0.0, 2.0 * b_eff - 1.0)
    zeta1 = edges[0]
    zj = (zeta1 / 2.0) * (1.0 + xj)
    # weights valid for integrands containing the full z^(b_eff-1) factor
    wj_full = 2.0 * (zeta1 / 2.0) ** (2.0 * b_eff) * wj * zj ** (2.0 - 2.0 * b_eff)
    nodes = [zj]
    weights = [wj_full]
    xg, wg = roots_legendre(pts)
    for a, c in zip(edges[:-1], edges[1:]):
        half, mid = 0.5 * (c - a), 0.5 * (a + c)
        zg = mid + half * xg
        nodes.append(zg)
        weights.append(wg * half * 2.0 * zg)  # dz = 2 zeta dzeta
    zeta = np.concatenate(nodes)
    w = np.concatenate(weights)
    return HalflineRule(b=b, zeta=zeta, weights=w)


def quad_weights(nodes: np.ndarray, k: int = 6) -> np.ndarray:
    """Weights integrating the local k-point interpolant through the nodes.

    Order-k accurate on smooth data; endpoint nodes get small but nonzero
    weight.  Used for pairings and mass bookkeeping on [0,1] grids.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    k = min(k, n)
    w = np.zeros(n)
    xg, wg = roots_legendre(4)
    for i in range(n - 1):
        a, c = nodes[i], nodes[i + 1]
        half, mid = 0.5 * (c - a), 0.5 * (a + c)
        xs = mid + half * xg
        lo = max(0, min(i - (k - 2) // 2, n - k))
        stencil = slice(lo, lo + k)
        for x, wq in zip(xs, wg):
            w[stencil] += wq * half * fd_weights(nodes[stencil], float(x), 0)
    return w
