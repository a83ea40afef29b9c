"""Bias-aware ("honest") inference for linear RD estimators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import Optional

from .errors import DegenerateVarianceError, InvalidInputError
from .kernels import KernelLike, get_kernel, kernel_constants
from .rd import (
    DesignSpec,
    Sample,
    nn_variance,
    se_hat,
    select_bandwidth,
    signed_bias_sum,
    tau_hat,
)

__all__ = [
    "ConfidenceInterval",
    "IdentifiedSet",
    "EstimateReport",
    "norm_cdf",
    "norm_sf",
    "norm_ppf",
    "cv_folded_normal",
    "bias_aware_ci",
    "worst_case_pvalue",
    "ci_length_ratio",
    "identified_set",
    "estimate",
]

_SQRT2 = math.sqrt(2.0)
_STD = NormalDist()
CV_TOL = 1e-12


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / _SQRT2)


def norm_ppf(p: float) -> float:
    return _STD.inv_cdf(p)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def _folded_tail(c: float, r: float) -> float:
    # P(|N(r, 1)| > c)
    return norm_sf(c - r) + norm_sf(c + r)


def cv_folded_normal(r: float, alpha: float = 0.05) -> float:
    """``1 - alpha`` quantile of ``|N(r, 1)|`` by bisection.

    The root lies in ``[max(z_{1-alpha/2}, r + z_{1-alpha}), r + z_{1-alpha/2}]``:
    at the left end the tail probability is at least ``alpha``, at the right
    end at most ``alpha``.
    """
    alpha = _check_alpha(alpha)
    r = float(r)
    if not math.isfinite(r) or r < 0:
        raise InvalidInputError(f"bias-to-sd ratio must be finite and >= 0, got {r}")
    z2 = norm_ppf(1.0 - alpha / 2.0)
    if r == 0.0:
        return z2
    lo = max(z2, r + norm_ppf(1.0 - alpha))
    hi = r + z2
    while hi - lo > CV_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if _folded_tail(mid, r) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def worst_case_pvalue(t: float, r: float) -> float:
    """Largest p-value of ``t`` over ``N(b, 1)`` nulls with ``|b| <= r``."""
    t, r = float(t), float(r)
    if not (math.isfinite(t) and math.isfinite(r)):
        raise InvalidInputError("t and r must be finite")
    if r < 0:
        raise InvalidInputError(f"r must be nonnegative, got {r}")
    return min(1.0, _folded_tail(abs(t), r))


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    half_length: float
    alpha: float
    cv: float
    bias_ratio: float

    @property
    def lower(self) -> float:
        return self.center - self.half_length

    @property
    def upper(self) -> float:
        return self.center + self.half_length

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def bias_aware_ci(
    tau_hat: float, b_bar: float, s_hat: float, alpha: float = 0.05
) -> ConfidenceInterval:
    """``tau_hat +/- cv_{1-alpha}(b_bar / s_hat) * s_hat``."""
    if not (math.isfinite(b_bar) and b_bar >= 0):
        raise InvalidInputError(f"worst-case bias must be nonnegative, got {b_bar}")
    if not (math.isfinite(s_hat) and s_hat > 0):
        raise DegenerateVarianceError(f"standard error must be positive, got {s_hat}")
    r = b_bar / s_hat
    cv = cv_folded_normal(r, alpha)
    return ConfidenceInterval(float(tau_hat), cv * s_hat, float(alpha), cv, r)


def ci_length_ratio(kernel: KernelLike, c: float, alpha: float = 0.05) -> float:
    """Asymptotic length of the donut CI relative to the conventional one.

    Assumes the bandwidth minimises worst-case asymptotic MSE for the
    conventional estimator, so its bias-to-sd ratio is 1/2, and that the
    donut estimator reuses that bandwidth. Bias constants enter through
    ``|B(c)| / |B(0)|``.
    """
    k = get_kernel(kernel)
    base = kernel_constants(k, 0.0)
    cur = kernel_constants(k, c)
    s_ratio = math.sqrt(cur.S / base.S)
    r = 0.5 * abs(cur.B / base.B) / s_ratio
    return cv_folded_normal(r, alpha) / cv_folded_normal(0.5, alpha) * s_ratio


@dataclass(frozen=True)
class IdentifiedSet:
    """Interval ``midpoint +/- M d^2`` for the treatment effect at the cutoff
    when the donut is held fixed."""

    midpoint: float
    half_width: float

    @property
    def lower(self) -> float:
        return self.midpoint - self.half_width

    @property
    def upper(self) -> float:
        return self.midpoint + self.half_width


def identified_set(sample: Sample, spec: DesignSpec) -> IdentifiedSet:
    fit = tau_hat(sample, spec)
    return IdentifiedSet(fit.tau_hat, spec.M * spec.d * spec.d)


@dataclass(frozen=True)
class EstimateReport:
    tau_hat: float
    b_bar: float
    s_hat: float
    ci_lower: float
    ci_upper: float
    cv: float
    bias_ratio: float
    eff_n_plus: int
    eff_n_minus: int
    h_used: float
    d: float
    kernel: str
    M: float
    alpha: float
    p_upper: float
    bandwidth_selected: bool
    bias_sum_signed: float

    def to_dict(self) -> dict:
        return asdict(self)


def estimate(
    sample: Sample,
    M: float,
    d: float = 0.0,
    h: Optional[float] = None,
    kernel: KernelLike = "triangular",
    alpha: float = 0.05,
    J: int = 3,
    share_bandwidth: bool = False,
    sigma2=None,
) -> EstimateReport:
    """Point estimate, worst-case bias, standard error and bias-aware CI.

    Without ``h`` the bandwidth minimises worst-case MSE for the requested
    donut; with ``share_bandwidth`` it is the conventional (``d = 0``) choice.
    """
    k = get_kernel(kernel)
    alpha = _check_alpha(alpha)
    if sigma2 is None:
        sigma2 = nn_variance(sample, J)
    selected = h is None
    if selected:
        h = select_bandwidth(sample, M, 0.0 if share_bandwidth else d, k, sigma2=sigma2)
    spec = DesignSpec(h=h, d=d, kernel=k, M=M)
    fit = tau_hat(sample, spec)
    raw = signed_bias_sum(fit.weights.w, sample.x, M)
    b_bar = abs(raw)
    s = se_hat(fit.weights, sigma2)
    ci = bias_aware_ci(fit.tau_hat, b_bar, s, alpha)
    return EstimateReport(
        tau_hat=fit.tau_hat,
        b_bar=b_bar,
        s_hat=s,
        ci_lower=ci.lower,
        ci_upper=ci.upper,
        cv=ci.cv,
        bias_ratio=ci.bias_ratio,
        eff_n_plus=fit.weights.eff_n_plus,
        eff_n_minus=fit.weights.eff_n_minus,
        h_used=spec.h,
        d=spec.d,
        kernel=k.name,
        M=spec.M,
        alpha=alpha,
        p_upper=worst_case_pvalue(fit.tau_hat / s, ci.bias_ratio),
        bandwidth_selected=selected,
        bias_sum_signed=raw,
    )
