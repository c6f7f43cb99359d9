"""Special functions for the degenerate half-line heat kernels.

The central object is the entire function

    psi_b(z) = sum_{j>=0} z^j / (j! * Gamma(j+b)),    b > 0,

which solves z*psi'' + b*psi' - psi = 0 and is related to the modified
Bessel function by I_nu(2*sqrt(w)) = w^(nu/2) * psi_{nu+1}(w).  Everything
else in the package reduces kernel evaluation to psi_b, so this module also
provides an exponentially scaled variant psi_b(z)*exp(-2*sqrt(z)) that stays
in float64 range for the very large arguments produced by short-time kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PsiEval",
    "gamma",
    "psi",
    "psi_value",
    "psi_prime",
    "psi_second",
    "psi_scaled",
    "bessel_i",
]

# Power series is cancellation-free (all terms positive), so it is preferred
# for every argument where exp(2*sqrt(z)) stays comfortably inside float64.
# Beyond the switch the large-argument expansion of I_{b-1} delivers ~1e-13
# relative accuracy for the b-range (b <= ~12) this package ever uses.
_Z_SWITCH = 2.0e4
_MAX_TERMS = 400
_MAX_ASY_TERMS = 40


@dataclass(frozen=True)
class PsiEval:
    """One evaluation of psi_b, tagged with the branch that produced it."""

    b: float
    z: float
    value: float
    regime: str  # "series" | "asymptotic"


def gamma(x: float) -> float:
    """Gamma function for positive real arguments.

    Raises:
        ValueError: if ``x <= 0`` (poles and the reflection region are not
            needed anywhere in this package).
    """
    if x <= 0.0:
        raise ValueError(f"gamma requires x > 0, got {x}")
    return math.gamma(x)


def _psi_series(b: float, z: float) -> float:
    # Term recurrence T_{j+1} = T_j * z / ((j+1)(j+b)); all terms positive.
    term = 1.0 / math.gamma(b)
    total = term
    for j in range(_MAX_TERMS):
        term *= z / ((j + 1.0) * (j + b))
        total += term
        if term < 1e-17 * total:
            break
    return total


def _asy_coeffs(nu: float) -> np.ndarray:
    """Coefficients a_k(nu) of the large-argument expansion of I_nu.

    a_k = prod_{m=1..k} (4 nu^2 - (2m-1)^2) / (k! 8^k); the expansion is
    I_nu(w) ~ e^w / sqrt(2 pi w) * sum_k (-1)^k a_k w^-k, truncated at the
    smallest term.
    """
    four_nu2 = 4.0 * nu * nu
    coeffs = [1.0]
    for m in range(1, _MAX_ASY_TERMS):
        coeffs.append(coeffs[-1] * (four_nu2 - (2 * m - 1) ** 2) / (m * 8.0))
    return np.asarray(coeffs)


def _psi_asym_scaled(b: float, z: float) -> float:
    # psi_b(z)*e^{-2 sqrt(z)} ~ z^{1/4 - b/2} / sqrt(4 pi) * sum (-1)^k a_k (2 sqrt z)^-k
    w = 2.0 * math.sqrt(z)
    coeffs = _asy_coeffs(b - 1.0)
    total = 1.0
    term = 1.0
    prev = abs(term)
    for k in range(1, len(coeffs)):
        if coeffs[k] == 0.0:
            break  # expansion terminates at half-integer orders
        term = term * (-coeffs[k] / coeffs[k - 1]) / w
        if abs(term) > prev:  # divergent tail reached; truncate at smallest term
            break
        total += term
        prev = abs(term)
        if abs(term) < 1e-18 * abs(total):
            break
    return z ** (0.25 - 0.5 * b) / math.sqrt(4.0 * math.pi) * total


def psi(b: float, z: float) -> PsiEval:
    """Evaluate psi_b(z) with the branch recorded.

    Args:
        b: order parameter, must be positive (the b=0 kernel is expressed
            through psi_2 elsewhere, never through psi_0).
        z: nonnegative argument.
    """
    if b <= 0.0:
        raise ValueError(f"psi requires b > 0, got b={b}")
    if z < 0.0:
        raise ValueError(f"psi requires z >= 0, got z={z}")
    if z <= _Z_SWITCH:
        return PsiEval(b, z, _psi_series(b, z), "series")
    value = _psi_asym_scaled(b, z) * math.exp(min(2.0 * math.sqrt(z), 709.0))
    return PsiEval(b, z, value, "asymptotic")


def psi_value(b: float, z: float) -> float:
    """psi_b(z) as a bare float."""
    return psi(b, z).value


def psi_prime(b: float, z: float) -> float:
    """Derivative of psi_b; termwise differentiation gives psi_b' = psi_{b+1}."""
    if b <= 0.0:
        raise ValueError(f"psi_prime requires b > 0, got b={b}")
    return psi(b + 1.0, z).value


def psi_second(b: float, z: float) -> float:
    """Second derivative, psi_b'' = psi_{b+2}."""
    if b <= 0.0:
        raise ValueError(f"psi_second requires b > 0, got b={b}")
    return psi(b + 2.0, z).value


def psi_scaled(b: float, z: np.ndarray | float) -> np.ndarray | float:
    """Exponentially scaled psi_b(z) * exp(-2 sqrt(z)), vectorized over z.

    This is the quantity kernels actually need: combined with the Gaussian
    factor exp(-(sqrt(x)-sqrt(y))^2/t) it never overflows.
    """
    if b <= 0.0:
        raise ValueError(f"psi_scaled requires b > 0, got b={b}")
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < 0.0):
        raise ValueError("psi_scaled requires z >= 0")
    scalar = z_arr.ndim == 0
    z_arr = np.atleast_1d(z_arr)
    out = np.empty_like(z_arr)

    small = z_arr <= _Z_SWITCH
    if np.any(small):
        zs = z_arr[small]
        term = np.full_like(zs, 1.0 / math.gamma(b))
        total = term.copy()
        active = np.ones(zs.shape, dtype=bool)
        for j in range(_MAX_TERMS):
            term[active] *= zs[active] / ((j + 1.0) * (j + b))
            total[active] += term[active]
            active &= term > 1e-17 * total
            if not active.any():
                break
        out[small] = total * np.exp(-2.0 * np.sqrt(zs))
    if np.any(~small):
        zl = z_arr[~small]
        w = 2.0 * np.sqrt(zl)
        coeffs = _asy_coeffs(b - 1.0)
        total = np.ones_like(zl)
        term = np.ones_like(zl)
        prev = np.abs(term)
        active = np.ones(zl.shape, dtype=bool)
        for k in range(1, len(coeffs)):
            if coeffs[k] == 0.0:
                break  # expansion terminates at half-integer orders
            # accumulate via the term ratio; avoids overflowing w**k
            new = term * (-coeffs[k] / coeffs[k - 1]) / w
            active &= np.abs(new) <= prev
            term = np.where(active, new, 0.0)
            total += term
            prev = np.where(active, np.abs(term), prev)
            if not active.any():
                break
        out[~small] = zl ** (0.25 - 0.5 * b) / math.sqrt(4.0 * math.pi) * total
    return float(out[0]) if scalar else out


def bessel_i(nu: float, x: float) -> float:
    """Modified Bessel function I_nu(x) for nu >= 0, x >= 0.

    Computed through the identity I_nu(2 sqrt(w)) = w^(nu/2) psi_{nu+1}(w)
    with w = (x/2)^2, so its accuracy is that of the psi evaluation.
    """
    if nu < 0.0:
        raise ValueError(f"bessel_i requires nu >= 0, got nu={nu}")
    if x < 0.0:
        raise ValueError(f"bessel_i requires x >= 0, got x={x}")
    if x == 0.0:
        return 1.0 if nu == 0.0 else 0.0
    w = (0.5 * x) ** 2
    return w ** (0.5 * nu) * psi_value(nu + 1.0, w)
