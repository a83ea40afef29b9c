"""Donut specification tests.

Both tests check whether the regression function inside the donut is
consistent with the one outside it. The Delta test compares the donut
estimate with the conventional estimate at the same bandwidth; the Gamma test
compares it with a conventional estimate that uses bandwidth ``d`` and hence
only data inside the donut. Each statistic is a difference of two linear
estimators, so its worst-case bias and variance follow from the difference of
their weight vectors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateTestError,
    InsufficientInnerSupportError,
    InsufficientSupportError,
)
from .inference import cv_folded_normal, worst_case_pvalue, _check_alpha
from .kernels import KernelLike, kernel_constants
from .rd import DesignSpec, Sample, _fit, ll_weights, nn_variance, signed_bias_sum

__all__ = [
    "SpecTestResult",
    "delta_test",
    "gamma_test",
    "delta_variance_theory",
]


@dataclass(frozen=True)
class SpecTestResult:
    method: str
    statistic: float
    estimate_diff: float
    s_diff: float
    bias_bound: float
    bias_ratio: float
    cv: float
    reject: bool
    p_upper: float
    alpha: float
    h: float
    d: float
    M: float
    kernel: str
    bias_sum_signed: float

    def to_dict(self) -> dict:
        return asdict(self)


def _decide(method, diff_w, y, x, var, spec: DesignSpec, alpha) -> SpecTestResult:
    s = math.sqrt(var)
    if not s > 0:
        raise DegenerateTestError(
            f"{method} test: variance of the difference is zero"
        )
    est = float(diff_w @ y)
    raw = signed_bias_sum(diff_w, x, spec.M)
    b = abs(raw)
    t = est / s
    r = b / s
    cv = cv_folded_normal(r, alpha)
    return SpecTestResult(
        method=method,
        statistic=t,
        estimate_diff=est,
        s_diff=s,
        bias_bound=b,
        bias_ratio=r,
        cv=cv,
        reject=bool(abs(t) > cv),
        p_upper=worst_case_pvalue(t, r),
        alpha=alpha,
        h=spec.h,
        d=spec.d,
        M=spec.M,
        kernel=spec.kernel.name,
        bias_sum_signed=raw,
    )


def delta_test(
    sample: Sample,
    spec: DesignSpec,
    alpha: float = 0.05,
    sigma2: Optional[np.ndarray] = None,
    J: int = 3,
) -> SpecTestResult:
    """Test based on ``tau_hat(h, d) - tau_hat(h, 0)``."""
    alpha = _check_alpha(alpha)
    if spec.d == 0:
        raise DegenerateTestError("delta test needs a donut radius d > 0")
    w_d = ll_weights(sample, spec).w
    w_0 = ll_weights(sample, DesignSpec(spec.h, 0.0, spec.kernel, spec.M)).w
    inside = (np.abs(sample.x) < spec.d) & (w_0 != 0)
    if not np.any(inside):
        raise DegenerateTestError(
            "delta test: no observation inside the donut carries conventional weight"
        )
    if sigma2 is None:
        sigma2 = nn_variance(sample, J)
    diff = w_d - w_0
    var = float((diff * diff) @ sigma2)
    return _decide("delta", diff, sample.y, sample.x, var, spec, alpha)


def inner_weights(sample: Sample, spec: DesignSpec) -> np.ndarray:
    """Weights of the conventional estimator with bandwidth ``d``.

    Only points with ``|x| < d`` enter, so the support is disjoint from the
    donut estimator's even when some ``|x|`` equals ``d`` exactly.
    """
    inner = DesignSpec(spec.d, 0.0, spec.kernel, spec.M)
    try:
        wv, _ = _fit(sample, inner, strict_upper=True)
    except InsufficientSupportError as exc:
        raise InsufficientInnerSupportError(
            f"within-donut fit: fewer than 2 distinct points with |x| < d={spec.d} "
            f"on the {exc.side} side",
            side=exc.side,
        ) from None
    return wv.w


def gamma_test(
    sample: Sample,
    spec: DesignSpec,
    alpha: float = 0.05,
    sigma2: Optional[np.ndarray] = None,
    J: int = 3,
) -> SpecTestResult:
    """Test based on ``tau_hat(h, d) - tau_hat(d, 0)``."""
    alpha = _check_alpha(alpha)
    if spec.d == 0:
        raise DegenerateTestError("gamma test needs a donut radius d > 0")
    w_in = inner_weights(sample, spec)
    w_d = ll_weights(sample, spec).w
    if sigma2 is None:
        sigma2 = nn_variance(sample, J)
    # disjoint supports: no covariance term
    var = float((w_d * w_d + w_in * w_in) @ sigma2)
    return _decide("gamma", w_d - w_in, sample.y, sample.x, var, spec, alpha)


def delta_variance_theory(kernel: KernelLike, c: float) -> float:
    """Small-donut variance factor ``S(c) + S(0) - 2 S~(c)`` of the Delta statistic."""
    cur = kernel_constants(kernel, c)
    base = kernel_constants(kernel, 0.0)
    return cur.S + base.S - 2.0 * cur.S_tilde
