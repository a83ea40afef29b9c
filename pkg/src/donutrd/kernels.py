"""Kernel densities, the boundary equivalent kernel and its asymptotic constants.

For a donut-to-bandwidth ratio ``c`` in [0, 1) the equivalent kernel is

    J(u, c) = e1' (int_c^1 (1, t)'(1, t) K(t) dt)^{-1} (1, u)'

and the constants that govern bias and variance of a local linear donut
estimator are

    B(c)  = int_c^1 J(u, c) K(u) u^2 du
    S(c)  = int_c^1 J(u, c)^2 K(u)^2 du
    S~(c) = int_c^1 J(u, c) J(u, 0) K(u)^2 du

All integrals use Gauss-Legendre quadrature on [c, 1]. For the built-in
kernels the integrands are polynomials of degree <= 4 on that interval, so
the default rule is exact up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .errors import (
    DegenerateKernelRangeError,
    DomainError,
    EmptyRangeError,
    InvalidInputError,
)

__all__ = [
    "Kernel",
    "KERNELS",
    "QuadratureSpec",
    "MomentMatrix",
    "KernelConstants",
    "get_kernel",
    "kernel_eval",
    "moment_matrix",
    "equiv_kernel",
    "bias_constant",
    "variance_constant",
    "cross_constant",
    "kernel_constants",
    "constants_table",
]

DET_THRESHOLD = 1e-14


@dataclass(frozen=True)
class Kernel:
    """A symmetric density supported on [-1, 1].

    ``density`` must accept a numpy array of points inside [-1, 1]; values
    outside the support are zeroed by :meth:`__call__`, so the callable does
    not need to handle them.
    """

    name: str
    density: Callable[[np.ndarray], np.ndarray] = field(compare=False)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        inside = np.abs(u) <= 1.0
        out = np.where(inside, self.density(np.where(inside, u, 0.0)), 0.0)
        return out if out.ndim else float(out)


def _uniform(u):
    return np.full_like(u, 0.5)


def _triangular(u):
    return 1.0 - np.abs(u)


def _epanechnikov(u):
    return 0.75 * (1.0 - u * u)


KERNELS = {
    "uniform": Kernel("uniform", _uniform),
    "triangular": Kernel("triangular", _triangular),
    "epanechnikov": Kernel("epanechnikov", _epanechnikov),
}

KernelLike = Union[str, Kernel]


def get_kernel(kernel: KernelLike) -> Kernel:
    if isinstance(kernel, Kernel):
        return kernel
    try:
        return KERNELS[str(kernel).lower()]
    except KeyError:
        raise InvalidInputError(
            f"unknown kernel {kernel!r}; expected one of {sorted(KERNELS)}"
        ) from None


@dataclass(frozen=True)
class QuadratureSpec:
    node_count: int = 200
    abs_tol: float = 1e-10

    def __post_init__(self):
        if self.node_count < 1:
            raise InvalidInputError("node_count must be a positive integer")
        if not self.abs_tol > 0:
            raise InvalidInputError("abs_tol must be positive")


DEFAULT_QUADRATURE = QuadratureSpec()


@lru_cache(maxsize=16)
def _legendre(node_count: int):
    return np.polynomial.legendre.leggauss(node_count)


def _nodes(lo: float, hi: float, quad: QuadratureSpec):
    x, w = _legendre(quad.node_count)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


@dataclass(frozen=True)
class MomentMatrix:
    """Entries of int_c^1 (1, t)'(1, t) K(t) dt."""

    m0: float
    m1: float
    m2: float

    @property
    def det(self) -> float:
        return self.m0 * self.m2 - self.m1 * self.m1

    def as_array(self) -> np.ndarray:
        return np.array([[self.m0, self.m1], [self.m1, self.m2]])


@dataclass(frozen=True)
class KernelConstants:
    c: float
    B: float
    S: float
    S_tilde: float


def kernel_eval(kernel: KernelLike, u):
    """Kernel density at ``u``; exactly zero for ``|u| > 1``."""
    k = get_kernel(kernel)
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("kernel argument must be finite")
    return k(arr)


def _check_c(c: float) -> float:
    c = float(c)
    if not math.isfinite(c) or c < 0:
        raise DomainError(f"donut ratio c must lie in [0, 1), got {c}")
    if c >= 1:
        raise EmptyRangeError(f"donut ratio c={c} leaves an empty range [c, 1]")
    return c


@lru_cache(maxsize=4096)
def _fit(kernel: Kernel, c: float, node_count: int):
    """Raw moments plus the centered representation used to evaluate J."""
    quad = QuadratureSpec(node_count=node_count)
    t, w = _nodes(c, 1.0, quad)
    kt = kernel(t) * w
    raw = MomentMatrix(float(kt.sum()), float(kt @ t), float(kt @ (t * t)))
    if not raw.det >= DET_THRESHOLD:
        raise DegenerateKernelRangeError(
            f"moment matrix on [{c}, 1] is numerically singular "
            f"(det={raw.det:.3e} < {DET_THRESHOLD:g})"
        )
    # Centering at the weighted mean keeps J accurate when [c, 1] is short.
    mean = raw.m1 / raw.m0
    v = t - mean
    central2 = float(kt @ (v * v))
    return raw, mean, central2


def moment_matrix(
    kernel: KernelLike, c: float, quad: QuadratureSpec = DEFAULT_QUADRATURE
) -> MomentMatrix:
    return _fit(get_kernel(kernel), _check_c(c), quad.node_count)[0]


def _J(kernel: Kernel, u, c: float, node_count: int):
    raw, mean, central2 = _fit(kernel, c, node_count)
    # With v = t - mean the moment matrix is diag(m0, central2), so
    # J(u, c) = 1/m0 + (-mean) (u - mean) / central2.
    return 1.0 / raw.m0 - mean * (np.asarray(u, dtype=float) - mean) / central2


def equiv_kernel(
    kernel: KernelLike, u, c: float, quad: QuadratureSpec = DEFAULT_QUADRATURE
):
    """Equivalent kernel J(u, c) for ``c <= u <= 1``."""
    c = _check_c(c)
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < c) or np.any(arr > 1):
        raise DomainError(f"u must lie in [c, 1] = [{c}, 1]")
    out = _J(get_kernel(kernel), arr, c, quad.node_count)
    return out if np.ndim(out) else float(out)


@lru_cache(maxsize=4096)
def _constants(kernel: Kernel, c: float, node_count: int) -> KernelConstants:
    quad = QuadratureSpec(node_count=node_count)
    u, w = _nodes(c, 1.0, quad)
    ku = kernel(u)
    jc = _J(kernel, u, c, node_count)
    j0 = _J(kernel, u, 0.0, node_count)
    B = float(w @ (jc * ku * u * u))
    S = float(w @ (jc * jc * ku * ku))
    S_tilde = float(w @ (jc * j0 * ku * ku))
    return KernelConstants(c=c, B=B, S=S, S_tilde=S_tilde)


def kernel_constants(
    kernel: KernelLike, c: float, quad: QuadratureSpec = DEFAULT_QUADRATURE
) -> KernelConstants:
    return _constants(get_kernel(kernel), _check_c(c), quad.node_count)


def bias_constant(kernel: KernelLike, c: float, quad=DEFAULT_QUADRATURE) -> float:
    """B_K(c). Negative for the built-in kernels."""
    return kernel_constants(kernel, c, quad).B


def variance_constant(kernel: KernelLike, c: float, quad=DEFAULT_QUADRATURE) -> float:
    """S_K(c)."""
    return kernel_constants(kernel, c, quad).S


def cross_constant(kernel: KernelLike, c: float, quad=DEFAULT_QUADRATURE) -> float:
    """S~_K(c), the covariance constant between donut and conventional fits."""
    return kernel_constants(kernel, c, quad).S_tilde


def constants_table(
    kernel: KernelLike,
    c_grid: Iterable[float],
    quad: QuadratureSpec = DEFAULT_QUADRATURE,
) -> list[KernelConstants]:
    k = get_kernel(kernel)
    rows = []
    for c in c_grid:
        try:
            rows.append(kernel_constants(k, c, quad))
        except (DomainError, EmptyRangeError, DegenerateKernelRangeError) as exc:
            exc.c = c
            exc.args = (f"at c={c}: {exc}",)
            raise
    return rows


def ratio_curves(kernel: KernelLike, c_grid: Sequence[float]):
    """(c, B(c)/B(0), S(c)/S(0)) triples, as plotted against donut size."""
    base = kernel_constants(kernel, 0.0)
    return [(r.c, r.B / base.B, r.S / base.S) for r in constants_table(kernel, c_grid)]
