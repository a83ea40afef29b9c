"""Local linear (donut) RD estimation in weight form.

Every estimator here is linear in the outcomes, ``tau_hat = sum_i w_i y_i``,
with weights that depend on the running variable only. The weights drive the
point estimate, the worst-case bias over the Hölder-type class with second
derivative bounded by ``M``, and the conditional variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InsufficientDataError,
    InsufficientNeighborsError,
    InsufficientSupportError,
    InvalidInputError,
    NoFeasibleBandwidthError,
)
from .kernels import Kernel, KernelLike, get_kernel

__all__ = [
    "Sample",
    "DesignSpec",
    "WeightVector",
    "FitResult",
    "VarianceEstimate",
    "BandwidthSearch",
    "ll_weights",
    "tau_hat",
    "worst_case_bias",
    "signed_bias_sum",
    "nn_variance",
    "variance_estimate",
    "se_hat",
    "bandwidth_grid",
    "bandwidth_search",
    "pooled_variance",
    "select_bandwidth",
]

RANK_TOL = 1e-12
GRID_SIZE = 64


def _sign(x):
    # sign(0) = +1, matching treatment T = 1{x >= 0}
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Sample:
    """Running variable (cutoff at 0) and outcomes."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape != y.shape:
            raise InvalidInputError(f"x and y differ in length ({x.size} vs {y.size})")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidInputError("x and y must be finite")
        if x.size < 4:
            raise InsufficientDataError(f"need at least 4 observations, got {x.size}")
        if not (np.any(x >= 0) and np.any(x < 0)):
            raise InsufficientDataError("need observations on both sides of the cutoff")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def treated(self) -> np.ndarray:
        return self.x >= 0

    def with_y(self, y) -> "Sample":
        return Sample(self.x, y)


@dataclass(frozen=True)
class DesignSpec:
    h: float
    d: float = 0.0
    kernel: KernelLike = "triangular"
    M: float = 0.0

    def __post_init__(self):
        h, d, M = float(self.h), float(self.d), float(self.M)
        if not (math.isfinite(h) and h > 0):
            raise InvalidInputError(f"bandwidth h must be positive, got {self.h}")
        if not (math.isfinite(d) and d >= 0):
            raise InvalidInputError(f"donut radius d must be nonnegative, got {self.d}")
        if d >= h:
            raise InvalidInputError(f"donut radius must satisfy d < h (d={d}, h={h})")
        if not (math.isfinite(M) and M >= 0):
            raise InvalidInputError(f"smoothness bound M must be nonnegative, got {self.M}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "kernel", get_kernel(self.kernel))

    @property
    def c(self) -> float:
        return self.d / self.h


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray
    eff_n_plus: int
    eff_n_minus: int


@dataclass(frozen=True)
class FitResult:
    tau_hat: float
    weights: WeightVector
    spec: DesignSpec
    intercept_plus: float
    slope_plus: float
    intercept_minus: float
    slope_minus: float


@dataclass(frozen=True)
class VarianceEstimate:
    sigma2: np.ndarray
    s_hat: float


def _side_moments(u, kv):
    """Weighted moments along the last axis; returns (m0, mean, central2)."""
    m0 = kv.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(m0 > 0, (kv * u).sum(axis=-1) / np.where(m0 > 0, m0, 1), 0.0)
    v = u - mean[..., None]
    central2 = (kv * v * v).sum(axis=-1)
    return m0, mean, central2


def _weights_matrix(
    x: np.ndarray,
    kernel: Kernel,
    hs: np.ndarray,
    d: float,
    strict_upper: bool = False,
):
    """Intercept-difference weights for every bandwidth in ``hs``.

    Returns ``(W, slope, ok)`` where ``W`` has shape (len(hs), n), ``slope``
    holds slope weights per side (2, len(hs), n) for the treated and control
    fits, and ``ok`` is a boolean array (2, len(hs)) flagging full-rank sides.
    Observations with ``|x| < d`` are dropped; with ``strict_upper`` so are
    those with ``|x| >= h``.
    """
    hs = np.asarray(hs, dtype=float)
    ax = np.abs(x)
    u = x[None, :] / hs[:, None]
    kv = kernel(u)
    keep = ax[None, :] >= d
    if strict_upper:
        keep = keep & (ax[None, :] < hs[:, None])
    kv = np.where(keep, kv, 0.0)

    W = np.zeros_like(u)
    slope = np.zeros((2,) + u.shape)
    ok = np.zeros((2, hs.size), dtype=bool)
    for j, (side, sgn) in enumerate(((x >= 0, 1.0), (x < 0, -1.0))):
        ks = np.where(side[None, :], kv, 0.0)
        m0, mean, central2 = _side_moments(u, ks)
        scale = np.max(np.where(ks > 0, u * u, 0.0), axis=-1)
        full = (m0 > 0) & (central2 > RANK_TOL * np.maximum(scale, 1e-300) * m0)
        ok[j] = full
        safe_m0 = np.where(full, m0, 1.0)
        safe_c2 = np.where(full, central2, 1.0)
        v = u - mean[:, None]
        # e1'(Z'KZ)^{-1} z_i k_i written with centered regressors
        a = ks * (1.0 / safe_m0[:, None] - mean[:, None] * v / safe_c2[:, None])
        b = ks * v / safe_c2[:, None] / hs[:, None]
        W += sgn * np.where(full[:, None], a, 0.0)
        slope[j] = np.where(full[:, None], b, 0.0)
    return W, slope, ok


def ll_weights(sample: Sample, spec: DesignSpec) -> WeightVector:
    """Local linear donut RD weights ``w_i(h, d)``.

    Treated-side weights sum to one, control-side weights to minus one, and
    both sides are orthogonal to ``x``.
    """
    return _fit(sample, spec)[0]


def _fit(sample: Sample, spec: DesignSpec, strict_upper: bool = False):
    W, slope, ok = _weights_matrix(
        sample.x, spec.kernel, np.array([spec.h]), spec.d, strict_upper
    )
    for j, side in enumerate(("treated (x >= 0)", "control (x < 0)")):
        if not ok[j, 0]:
            raise InsufficientSupportError(
                f"{side} side has fewer than 2 distinct support points with "
                f"positive kernel weight in d <= |x| <= h (h={spec.h}, d={spec.d})",
                side="plus" if j == 0 else "minus",
            )
    w = W[0]
    w.setflags(write=False)
    treated = sample.x >= 0
    nz = w != 0
    wv = WeightVector(
        w=w,
        eff_n_plus=int(np.count_nonzero(nz & treated)),
        eff_n_minus=int(np.count_nonzero(nz & ~treated)),
    )
    return wv, slope[:, 0, :]


def tau_hat(sample: Sample, spec: DesignSpec) -> FitResult:
    """Point estimate ``sum_i w_i(h, d) y_i``; ``d = 0`` is the conventional fit."""
    wv, slope = _fit(sample, spec)
    return _assemble(sample, spec, wv, slope)


def _assemble(sample, spec, wv, slope) -> FitResult:
    y = sample.y
    treated = sample.x >= 0
    w = wv.w
    ip = float(w[treated] @ y[treated])
    im = float(-(w[~treated] @ y[~treated]))
    return FitResult(
        tau_hat=float(w @ y),
        weights=wv,
        spec=spec,
        intercept_plus=ip,
        slope_plus=float(slope[0] @ y),
        intercept_minus=im,
        slope_minus=float(slope[1] @ y),
    )


def signed_bias_sum(w, x, M: float) -> float:
    """``-(M/2) sum_i w_i x_i^2 sign(x_i)`` without taking the magnitude."""
    x = np.asarray(x, dtype=float)
    return float(-0.5 * M * (np.asarray(w) @ (x * x * _sign(x))))


def worst_case_bias(weights, sample: Sample, M: float) -> float:
    """Worst-case conditional bias of a linear estimator over the class F(M).

    ``weights`` may be a :class:`WeightVector` or a plain array.
    """
    if not (math.isfinite(M) and M >= 0):
        raise InvalidInputError(f"M must be nonnegative, got {M}")
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, float)
    return abs(signed_bias_sum(w, sample.x, M))


def _nn_side(x: np.ndarray, y: np.ndarray, idx: np.ndarray, J: int) -> np.ndarray:
    m = x.size
    order = np.argsort(x, kind="stable")
    xs, ys, ids = x[order], y[order], idx[order]
    if np.unique(xs).size == m:
        # With distinct x the J nearest lie within J sorted positions.
        offsets = np.concatenate([np.arange(-J, 0), np.arange(1, J + 1)])
        pos = np.arange(m)[:, None] + offsets[None, :]
        valid = (pos >= 0) & (pos < m)
        pos = np.clip(pos, 0, m - 1)
        dist = np.where(valid, np.abs(xs[pos] - xs[:, None]), np.inf)
        pick = np.lexsort((ids[pos], dist), axis=-1)[:, :J]
        nbr = np.take_along_axis(pos, pick, axis=1)
    else:
        dist = np.abs(xs[None, :] - xs[:, None])
        np.fill_diagonal(dist, np.inf)
        tie = np.broadcast_to(ids, dist.shape)
        nbr = np.lexsort((tie, dist), axis=-1)[:, :J]
    resid = ys - ys[nbr].mean(axis=1)
    out = np.empty(m)
    out[order] = (J / (J + 1.0)) * resid * resid
    return out


def nn_variance(sample: Sample, J: int = 3) -> np.ndarray:
    """Nearest-neighbour estimates of the conditional variances.

    ``sigma2_i = J/(J+1) * (y_i - mean of its J nearest same-side
    neighbours)^2``; distance ties go to the smaller index.
    """
    J = int(J)
    if J < 1:
        raise InvalidInputError("J must be a positive integer")
    x, y = sample.x, sample.y
    out = np.empty(x.size)
    idx = np.arange(x.size)
    for side, label in ((x >= 0, "treated"), (x < 0, "control")):
        if np.count_nonzero(side) <= J:
            raise InsufficientNeighborsError(
                f"{label} side has {np.count_nonzero(side)} observations; "
                f"need more than J={J}"
            )
        out[side] = _nn_side(x[side], y[side], idx[side], J)
    return out


def se_hat(weights, sigma2) -> float:
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, float)
    s2 = np.asarray(sigma2, dtype=float)
    if w.shape != s2.shape:
        raise InvalidInputError("weights and sigma2 must be aligned")
    if np.any(s2 < 0):
        raise InvalidInputError("conditional variance estimates must be nonnegative")
    return math.sqrt(float((w * w) @ s2))


def variance_estimate(weights, sample: Sample, J: int = 3) -> VarianceEstimate:
    s2 = nn_variance(sample, J)
    s2.setflags(write=False)
    return VarianceEstimate(sigma2=s2, s_hat=se_hat(weights, s2))


def bandwidth_grid(sample: Sample, d: float = 0.0, size: int = GRID_SIZE) -> np.ndarray:
    """Geometric grid from a few local spacings (at least 1.05 d) to max |x|."""
    ax = np.sort(np.abs(sample.x))
    k = max(5, ax.size // 10)
    gaps = np.diff(ax[: k + 1])
    gaps = gaps[gaps > 0]
    spacing = float(np.median(gaps)) if gaps.size else 0.0
    lo = max(4.0 * spacing, 1.05 * d)
    hi = float(ax[-1])
    if not (lo > 0 and lo < hi):
        raise NoFeasibleBandwidthError(
            f"empty bandwidth search range [{lo:.6g}, {hi:.6g}]"
        )
    return np.geomspace(lo, hi, size)


def pooled_variance(x, sigma2) -> np.ndarray:
    """Replace each ``sigma2_i`` by the average over its side of the cutoff.

    Used only for bandwidth selection: with few points in the window the
    observation-level estimates can be close to zero and pull the criterion
    toward degenerate bandwidths.
    """
    s2 = np.asarray(sigma2, dtype=float)
    treated = np.asarray(x) >= 0
    return np.where(treated, s2[treated].mean(), s2[~treated].mean())


@dataclass(frozen=True)
class BandwidthSearch:
    grid: np.ndarray
    objective: np.ndarray  # inf where infeasible
    h: float
    index: int
    bias: np.ndarray = field(repr=False)
    se: np.ndarray = field(repr=False)


def bandwidth_search(
    sample: Sample,
    M: float,
    d: float,
    kernel: KernelLike = "triangular",
    sigma2: Optional[np.ndarray] = None,
    J: int = 3,
    grid: Optional[Sequence[float]] = None,
) -> BandwidthSearch:
    """Minimise worst-case MSE ``bbar(h, d)^2 + s_hat(h, d)^2`` over a grid.

    ``s_hat`` here uses side-wise averages of ``sigma2`` (see
    :func:`pooled_variance`).
    """
    if not (math.isfinite(M) and M > 0):
        raise InvalidInputError(f"bandwidth selection needs M > 0, got {M}")
    k = get_kernel(kernel)
    hs = bandwidth_grid(sample, d) if grid is None else np.asarray(grid, dtype=float)
    hs = hs[hs > d]
    if hs.size == 0:
        raise NoFeasibleBandwidthError("no grid bandwidth exceeds the donut radius")
    if sigma2 is None:
        sigma2 = nn_variance(sample, J)
    x = sample.x
    s2 = pooled_variance(x, sigma2)
    W, _, ok = _weights_matrix(x, k, hs, d)
    feasible = ok.all(axis=0)
    bias = np.abs(-0.5 * M * (W @ (x * x * _sign(x))))
    se = np.sqrt((W * W) @ s2)
    obj = np.where(feasible, bias * bias + se * se, np.inf)
    if not np.any(feasible):
        raise NoFeasibleBandwidthError("no bandwidth in the grid has support on both sides")
    i = int(np.argmin(obj))  # first minimiser, i.e. the smaller h on ties
    return BandwidthSearch(grid=hs, objective=obj, h=float(hs[i]), index=i, bias=bias, se=se)


def select_bandwidth(
    sample: Sample,
    M: float,
    d: float = 0.0,
    kernel: KernelLike = "triangular",
    sigma2: Optional[np.ndarray] = None,
    J: int = 3,
) -> float:
    return bandwidth_search(sample, M, d, kernel, sigma2=sigma2, J=J).h
