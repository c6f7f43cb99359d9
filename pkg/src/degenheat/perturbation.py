"""Perturbation operator A_t^b, its Neumann series and truncation bounds.

The operator

    A_t^b g(x) = int_0^t int_0^inf k_{t-s}^b(x,z) h(z) z dg/dz(z,s) dz ds

carries the first-order correction x h(x) d/dx of a Wright-Fisher chart past
the exactly solvable model operator.  Solutions of the chart equation are the
Neumann series sum_j (A_t^b)^j g~ with g~ the model evolution of the data.

Numerically everything is collocated on the nodes of a composite Gauss rule
in zeta = sqrt(z) (solutions are smooth functions of zeta, and the kernel is
a Gaussian of width sqrt(elapsed time) in zeta).  Time integrals use Gauss
panels in sqrt(s) plus two guarded regions sized by the resolution floor
sigma* = (res_factor * node spacing)^2 of the rule:

* s <= sigma*: the integrand is bridged by the semigroup Taylor expansion
  g~(s) ~ data + s L data (kernels of tiny elapsed time cannot be resolved,
  but there the propagator is within O(s^2) of the identity);
* t - s <= sigma*: Simpson cells in sigma = t - s ending at the exact limit
  value w(x, t) of the inner integral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    HalflineRule,
    SampledField,
    Grid,
    deriv_matrix,
    fd_weights,
    halfline_rule,
    interp_matrix,
)
from .model_kernel import kernel_matrix
from .specfun import gamma

__all__ = [
    "PerturbationField",
    "SpaceTimeField",
    "HalfLineEngine",
    "NeumannDivergence",
    "apply_A",
    "neumann_solve",
    "d_const",
    "D_const",
    "truncation_bound",
    "choose_N",
    "TruncationConstants",
]


@dataclass(frozen=True)
class PerturbationField:
    """Smooth coefficient h of the perturbation x h(x) d/dx, supported in [0, L]."""

    h: object  # callable z -> h(z)
    support: float
    sup_norm: float

    @classmethod
    def from_callable(cls, h, support: float, probe: int = 2001) -> "PerturbationField":
        zs = np.linspace(0.0, support, probe)
        vals = np.asarray([h(float(z)) for z in zs])
        if not np.all(np.isfinite(vals)):
            raise ValueError("perturbation field must be finite on its support")
        return cls(h=h, support=float(support), sup_norm=float(np.abs(vals).max()))

    def __call__(self, z):
        return self.h(z)


@dataclass
class SpaceTimeField:
    """Values on (stored times) x (rule nodes); axis 0 is time."""

    rule: HalflineRule
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.times.size or self.values.shape[1] != self.rule.z.size:
            raise ValueError("values must have shape (n_times, n_nodes, ...)")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must start at 0 and increase")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def interp(self, z: float, s: float) -> float:
        """Pointwise value, quintic in sqrt(s) and in zeta."""
        v = np.sqrt(np.maximum(self.times, 0.0))
        sl_t, wt = _local_weights(v, math.sqrt(max(s, 0.0)))
        field_at_s = np.tensordot(wt, self.values[sl_t], axes=(0, 0))
        sl_z, wz = _local_weights(self.rule.zeta, math.sqrt(max(z, 0.0)))
        return float(np.tensordot(wz, field_at_s[sl_z], axes=(0, 0)))


def _local_weights(nodes: np.ndarray, x: float, k: int = 6):
    k = min(k, nodes.size)
    i = int(np.searchsorted(nodes, x))
    lo = max(0, min(i - k // 2, nodes.size - k))
    sl = slice(lo, lo + k)
    return sl, fd_weights(nodes[sl], x, 0)


class NeumannDivergence(RuntimeError):
    """Iterate norms violate the predicted decay; the step is too long."""


# ---------------------------------------------------------------------------
# quantitative truncation machinery
# ---------------------------------------------------------------------------

def d_const(j: int) -> float:
    """d_j = pi^((j+1)/2) / Gamma((j+1)/2)."""
    if j < 0:
        raise ValueError("j must be >= 0")
    return math.pi ** ((j + 1) / 2.0) / gamma((j + 1) / 2.0)


def D_const(j: int) -> float:
    """D_0 = 1 and D_j = 2 D_{j-1} Gamma(j/2) / Gamma((j+1)/2)."""
    if j < 0:
        raise ValueError("j must be >= 0")
    val = 1.0
    for i in range(1, j + 1):
        val *= 2.0 * gamma(i / 2.0) / gamma((i + 1) / 2.0)
    return val


@dataclass(frozen=True)
class TruncationConstants:
    """Constants feeding the iterate bounds (C_b from grad_bound_check fits)."""

    M: float
    C_b: float
    L: float
    h_sup: float


def truncation_bound(j: int, M: float, C_b: float, L: float, h_norms, t: float,
                     ell: int = 0) -> float:
    """Right side of the iterate bound at level j.

    ell = 0: (2 d_{j-1}/j) M C_b^{j-1} (sqrt(L) ||h||)^j t^(j/2);
    ell >= 1: same shape with D-constants and the C^ell norm of h, where M
    should already include the C^ell norm of the data.
    """
    if j < 1:
        raise ValueError("bounds are defined for j >= 1")
    h_norms = np.atleast_1d(np.asarray(h_norms, dtype=float))
    if ell == 0:
        return (2.0 * d_const(j - 1) / j) * M * C_b ** (j - 1) * (
            math.sqrt(L) * h_norms[0]
        ) ** j * t ** (j / 2.0)
    h_ell = h_norms[min(ell, h_norms.size - 1)]
    return (2.0 * D_const(j - 1) / j) * M * (C_b * h_ell) ** j * t ** (j / 2.0)


def choose_N(t: float, tol: float, constants: TruncationConstants,
             n_max: int = 25) -> int:
    """Smallest N whose truncation tail sum is below tol.

    Raises:
        ValueError: if no N <= n_max suffices (advice: shrink the time step).
    """
    if t > 1.0:
        raise ValueError("choose_N expects a single short step, t <= 1")
    bounds = [
        truncation_bound(j, constants.M, constants.C_b, constants.L,
                         [constants.h_sup], t)
        for j in range(1, n_max + 40)
    ]
    tails = np.cumsum(bounds[::-1])[::-1]
    for N in range(0, n_max + 1):
        # tail after keeping j <= N starts at bound index N
        if tails[N] < tol:
            return N
    raise ValueError(
        f"no truncation level N <= {n_max} reaches tol={tol} at t={t}; "
        "use a smaller time step"
    )


# ---------------------------------------------------------------------------
# single-chart engine
# ---------------------------------------------------------------------------

class HalfLineEngine:
    """Collocation engine for one half-line chart x d2/dx2 + b d/dx + x h d/dx.

    Drives the Neumann iterates of the perturbation series for a fixed step
    length; kernel matrices are cached per elapsed time, so repeated
    applications (composed solver steps, transpose solves) cost only matrix
    products.
    """

    def __init__(self, b: float, pert: PerturbationField, t_step: float, *,
                 n_stored: int = 12, pts: int = 10, sigma_frac: float = 0.08,
                 res_factor: float = 3.0, zeta_pad: float = 0.35,
                 quad_panels: int = 2, quad_pts: int = 8,
                 max_panels: int = 220):
        if t_step <= 0.0:
            raise ValueError("t_step must be > 0")
        self.b = float(b)
        self.pert = pert
        self.t = float(t_step)
        zeta_top = math.sqrt(pert.support) + zeta_pad
        sigma_star = sigma_frac * t_step
        h_node = math.sqrt(sigma_star) / res_factor
        n_panels = min(max(int(zeta_top / (pts * h_node)) + 1, 10), max_panels)
        self.rule = halfline_rule(self.b, zeta_top**2, n_panels=n_panels, pts=pts)
        self.zeta = self.rule.zeta
        self.z = self.rule.z
        self.n = self.z.size
        # actual resolution floor given the realized node spacing
        h_real = zeta_top / (n_panels * pts)
        self.sigma_star = min((res_factor * h_real) ** 2, 0.2 * t_step)

        self.D1 = deriv_matrix(self.zeta, 1, 7)
        self.D2 = deriv_matrix(self.zeta, 2, 7)
        h_vals = np.asarray([pert(float(z)) for z in self.z])
        # w = h z dg/dz = (h zeta / 2) dg/dzeta
        self.M_w = (h_vals * self.zeta / 2.0)[:, None] * self.D1
        # L_b in zeta coordinates: z d2/dz2 + b d/dz
        with np.errstate(divide="ignore"):
            coef = (2.0 * self.b - 1.0) / (4.0 * self.zeta)
        self.L_mat = 0.25 * self.D2 + coef[:, None] * self.D1

        # stored times: 0 plus uniform-in-sqrt(s) nodes on [sigma*, t]
        v = np.linspace(math.sqrt(self.sigma_star), math.sqrt(t_step), n_stored)
        self.times = np.concatenate([[0.0], v**2])
        self._K_cache: dict[float, np.ndarray] = {}
        self._cn_cache: dict[float, tuple] = {}
        self.quad_panels = quad_panels
        self.quad_pts = quad_pts
        from scipy.special import roots_legendre

        self._gl = roots_legendre(quad_pts)

    # -- kernels -----------------------------------------------------------

    def K(self, sigma: float) -> np.ndarray:
        """Quadrature-weighted kernel matrix: (K w)(x_i) = int k_sigma(x_i, z) w(z) dz."""
        key = round(float(sigma), 15)
        mat = self._K_cache.get(key)
        if mat is None:
            mat = kernel_matrix(self.b, sigma, self.z, self.z) * self.rule.weights[None, :]
            self._K_cache[key] = mat
        return mat

    def propagate(self, sigma: float, w: np.ndarray) -> np.ndarray:
        """e^{sigma L_b} w at the nodes (no atom term; w(0) = 0 fields).

        Below the kernel resolution floor a Crank-Nicolson step is used: the
        discrete L has spurious grid-scale eigenvalues with positive real
        part, so the naive Taylor propagator would amplify rough content.
        """
        if sigma <= 0.0:
            return w
        if sigma < self.sigma_star * (1.0 - 1e-12):
            from scipy.linalg import lu_factor, lu_solve

            key = round(float(sigma), 15)
            lu = self._cn_cache.get(key)
            if lu is None:
                lu = lu_factor(np.eye(self.n) - 0.5 * sigma * self.L_mat)
                self._cn_cache[key] = lu
            return lu_solve(lu, w + 0.5 * sigma * (self.L_mat @ w))
        return self.K(sigma) @ w

    def model_evolution(self, data: np.ndarray, data0: float | np.ndarray):
        """g~ = model semigroup applied to the data, at the stored times.

        data: values at the rule nodes (n,) or (n, m); data0: the value(s) at
        z = 0, which feed the b = 0 atom mode.  All stored times are at or
        above the resolution floor, so only kernel products appear here.
        """
        out = np.empty((self.times.size,) + data.shape)
        out[0] = data
        for i, s in enumerate(self.times[1:], start=1):
            out[i] = self.K(s) @ data
            if self.b == 0.0:
                atom = np.exp(-self.z / s)
                out[i] += atom[:, None] * np.atleast_1d(data0)[None, :] if data.ndim == 2 \
                    else atom * data0
        return out

    # -- the A operator ----------------------------------------------------

    def _w_interp(self, w_stored: np.ndarray, s: float) -> np.ndarray:
        """w(., s) from stored times; linear bridge below sigma*."""
        if s <= self.times[1]:
            return w_stored[0] + (w_stored[1] - w_stored[0]) * (s / self.times[1])
        v_nodes = np.sqrt(self.times[1:])
        sl, wt = _local_weights(v_nodes, math.sqrt(s))
        return np.tensordot(wt, w_stored[1:][sl], axes=(0, 0))

    def apply_A_stored(self, g_stored: np.ndarray) -> np.ndarray:
        """One application of A, returning values at all stored times."""
        w_stored = np.einsum("ij,tj...->ti...", self.M_w, g_stored)
        out = np.zeros_like(g_stored)
        xg, wg = self._gl
        for i, t_i in enumerate(self.times[1:], start=1):
            out[i] = self._time_integral(w_stored, t_i, xg, wg)
        return out

    def _time_integral(self, w_stored: np.ndarray, t_i: float, xg, wg) -> np.ndarray:
        sig = self.sigma_star
        if t_i <= 4.0 * sig:
            # short target: int_0^t e^{(t-s)L} w(s) ds ~ int w + L K(sig) int (t-s) w,
            # with the kernel presmoothing keeping L away from raw grid modes
            ss = np.linspace(0.0, t_i, 5)
            sw = np.array([1, 4, 2, 4, 1], dtype=float) * (t_i / 12.0)
            acc0 = np.zeros(w_stored.shape[1:])
            acc1 = np.zeros(w_stored.shape[1:])
            for s, w_s in zip(ss, sw):
                wv = self._w_interp(w_stored, float(s))
                acc0 += w_s * wv
                acc1 += w_s * (t_i - s) * wv
            return acc0 + self.L_mat @ (self.K(sig) @ acc1)
        # main region: Gauss panels in v = sqrt(s) over [0, sqrt(t_i - sigma*)]
        acc = np.zeros(w_stored.shape[1:])
        v_hi = math.sqrt(t_i - sig)
        edges = np.linspace(0.0, v_hi, self.quad_panels + 1)
        for a, c in zip(edges[:-1], edges[1:]):
            half, mid = 0.5 * (c - a), 0.5 * (a + c)
            for xx, w_q in zip(xg, wg):
                v = mid + half * xx
                s = v * v
                wv = self._w_interp(w_stored, float(s))
                acc += (half * w_q * 2.0 * v) * self.propagate(t_i - s, wv)
        # concentration layer sigma = t_i - s in [0, sigma*]: composite Simpson
        # ending at the exact limit w(., t_i)
        w_top = self._w_interp(w_stored, t_i)
        nodes = [sig, 0.75 * sig, 0.5 * sig, 0.25 * sig, 0.0]
        vals = []
        for sigma in nodes:
            wv = w_top if sigma == 0.0 else self._w_interp(w_stored, t_i - sigma)
            vals.append(self.propagate(sigma, wv) if sigma > 0.0 else wv)
        simpson = (sig / 12.0) * (vals[0] + 4.0 * vals[1] + 2.0 * vals[2] + 4.0 * vals[3] + vals[4])
        return acc + simpson

    # -- Neumann series ----------------------------------------------------

    def neumann_iterates(self, data: np.ndarray, data0, N: int,
                         check_divergence: bool = True, c_b: float = 2.0):
        """Level-0 model evolution plus N perturbation iterates (stored times)."""
        levels = [self.model_evolution(data, data0)]
        for j in range(1, N + 1):
            nxt = self.apply_A_stored(levels[-1])
            levels.append(nxt)
            if check_divergence and j >= 2:
                lvl0 = float(np.abs(levels[0][-1]).max())
                prev = float(np.abs(levels[-2][-1]).max())
                curr = float(np.abs(nxt[-1]).max())
                # predicted per-level contraction from the iterate bounds
                ratio = (d_const(j - 1) / d_const(j - 2)) * (j - 1) / j * c_b * math.sqrt(
                    self.pert.support * self.t
                ) * self.pert.sup_norm
                if curr > 10.0 * max(ratio, 1e-3) * max(prev, 1e-300) \
                        and curr > 1e-8 * max(lvl0, 1e-300):
                    raise NeumannDivergence(
                        f"iterate {j} norm {curr:.3g} breaks the predicted decay "
                        f"(allowed ratio {10.0 * ratio:.3g}); shorten the step t={self.t}"
                    )
        return levels

    def eval_sum(self, levels, zeta_targets: np.ndarray) -> np.ndarray:
        """Sum of iterates at the final time, interpolated to chart targets.

        The b = 0 atom mode is already contained in the stored level-0 values.
        """
        P = interp_matrix(self.zeta, np.asarray(zeta_targets), k=6)
        return P @ sum(lev[-1] for lev in levels)


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------

def _engine_for(b: float, h: PerturbationField, t: float, **kw) -> HalfLineEngine:
    return HalfLineEngine(b, h, t, **kw)


def make_space_time_field(engine: HalfLineEngine, g) -> SpaceTimeField:
    """Sample a callable g(z, s) on the engine's collocation grid."""
    vals = np.empty((engine.times.size, engine.n))
    for i, s in enumerate(engine.times):
        vals[i] = np.asarray([g(float(z), float(s)) for z in engine.z])
    return SpaceTimeField(engine.rule, engine.times, vals)


def apply_A(b: float, h: PerturbationField, g, t: float,
            engine: HalfLineEngine | None = None) -> SampledField:
    """A_t^b g at the collocation nodes.

    g may be a callable g(z, s) or a SpaceTimeField sampled on the engine
    grid.  Raises ValueError when t exceeds the field's horizon.
    """
    if engine is None:
        engine = _engine_for(b, h, t)
    if callable(g):
        stf = make_space_time_field(engine, g)
    else:
        stf = g
        if t > stf.horizon + 1e-12:
            raise ValueError(f"t={t} exceeds the field horizon {stf.horizon}")
        if stf.values.shape[1] != engine.n:
            raise ValueError("field is not sampled on the engine grid")
    w_stored = np.einsum("ij,tj...->ti...", engine.M_w, stf.values)
    from scipy.special import roots_legendre

    xg, wg = roots_legendre(engine.quad_pts)
    vals = engine._time_integral(w_stored, t, xg, wg)
    grid = Grid(np.maximum(engine.z, 0.0), "half_line", float(engine.z[-1]))
    return SampledField(grid, vals)


def neumann_solve(b: float, h: PerturbationField, f, t: float, N: int,
                  engine: HalfLineEngine | None = None,
                  return_levels: bool = False):
    """Partial Neumann sum sum_{j<=N} (A_t^b)^j g~ evaluated at time t.

    f: callable initial data (bounded, continuous).  Returns a SampledField
    on the engine nodes; with return_levels=True also the list of iterate
    space-time arrays.
    """
    if engine is None:
        engine = _engine_for(b, h, t)
    data = np.asarray([f(float(z)) for z in engine.z])
    data0 = float(f(0.0))
    levels = engine.neumann_iterates(data, data0, N)
    total = sum(lev[-1] for lev in levels)
    grid = Grid(np.maximum(engine.z, 0.0), "half_line", float(engine.z[-1]))
    out = SampledField(grid, total)
    if return_levels:
        return out, levels
    return out
