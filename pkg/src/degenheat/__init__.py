"""Heat kernels, Kolmogorov solvers and spectral tools for 1-D Wright-Fisher
type degenerate diffusions on [0,1] and their half-line models."""

__version__ = "0.1.0"
