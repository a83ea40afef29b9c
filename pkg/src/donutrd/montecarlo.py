"""Simulation study for donut RD estimation, inference and specification tests.

Design: ``X ~ U(-1, 1)``, ``Y = mu_L(X) + eps`` with Gaussian noise, and a
distortion of strength ``L`` confined to ``|x| < 0.1``. The target is the
jump of ``mu_0``, which is zero.

Reproducibility: replication ``r`` of a study with master seed ``s`` draws
from ``PCG64(SeedSequence([s, r]))``, independently of ``L`` and of how
replications are scheduled over worker processes. Aggregation reduces the
records in replication order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DonutRDError, InvalidInputError
from .inference import estimate
from .kernels import get_kernel, kernel_constants
from .rd import DesignSpec, Sample, nn_variance, select_bandwidth, tau_hat
from .spectests import delta_test, gamma_test

__all__ = [
    "READINGS",
    "DgpSpec",
    "TheoreticalMoments",
    "ReplicationRecord",
    "StudyResult",
    "mu_L",
    "rng_stream",
    "gen_sample",
    "theoretical_moments",
    "theoretical_bias_variance",
    "empirical_bias_variance",
    "run_replication",
    "run_study",
    "aggregate",
    "default_workers",
]

GENERATOR_NAME = "numpy.random.PCG64(SeedSequence([master_seed, rep_index]))"
DEFAULT_L_GRID = (0.0, 10.0, 20.0, 30.0, 40.0)

# How the distortion term is read:
#   printed            sign(x)x^2 - L sign(x)((x - .1 sign(x))^2 - .1^2 sign(x)) 1{|x| < .1}
#   unsigned_offset    same, with the inner offset "- .1^2" not multiplied by sign(x)
#   flipped_curvature  -sign(x)x^2 plus the printed distortion term
READINGS = ("printed", "unsigned_offset", "flipped_curvature")


def _sgn(x):
    return np.where(x >= 0, 1.0, -1.0)


def mu_L(x, L: float, reading: str = "printed"):
    """Conditional mean of the simulation design.

    ``sign(0)`` is taken as +1. Accepts scalars or arrays.
    """
    if reading not in READINGS:
        raise InvalidInputError(f"unknown reading {reading!r}; expected one of {READINGS}")
    xa = np.asarray(x, dtype=float)
    s = _sgn(xa)
    base = s * xa * xa
    offset = 0.01 if reading == "unsigned_offset" else 0.01 * s
    distortion = -L * s * ((xa - 0.1 * s) ** 2 - offset) * (np.abs(xa) < 0.1)
    if reading == "flipped_curvature":
        base = -base
    out = base + distortion
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DgpSpec:
    L: float = 0.0
    n: int = 1000
    noise_scale: float = 0.5
    noise_kind: str = "sd"  # or "variance"
    d: float = 0.1
    M: float = 2.0
    kernel: str = "triangular"
    alpha: float = 0.05
    reading: str = "flipped_curvature"
    nn_J: int = 3
    share_bandwidth: bool = True

    def __post_init__(self):
        if self.L < 0:
            raise InvalidInputError("L must be nonnegative")
        if self.n < 8:
            raise InvalidInputError("n must be at least 8")
        if not self.noise_scale > 0:
            raise InvalidInputError("noise_scale must be positive")
        if self.noise_kind not in ("sd", "variance"):
            raise InvalidInputError("noise_kind must be 'sd' or 'variance'")
        if self.reading not in READINGS:
            raise InvalidInputError(f"reading must be one of {READINGS}")
        if not (0 < self.d < 1):
            raise InvalidInputError("d must lie in (0, 1)")
        get_kernel(self.kernel)

    @property
    def noise_sd(self) -> float:
        return math.sqrt(self.noise_scale) if self.noise_kind == "variance" else self.noise_scale

    @property
    def noise_var(self) -> float:
        return self.noise_sd ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def rng_stream(seed: int, rep_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(rep_index)])))


def gen_sample(rng: np.random.Generator, dgp: DgpSpec) -> Sample:
    x = rng.uniform(-1.0, 1.0, dgp.n)
    eps = rng.normal(0.0, dgp.noise_sd, dgp.n)
    return Sample(x, mu_L(x, dgp.L, dgp.reading) + eps)


@dataclass(frozen=True)
class TheoreticalMoments:
    f_plus: float
    f_minus: float
    sigma2_plus: float
    sigma2_minus: float
    mu2_plus: float
    mu2_minus: float


def theoretical_moments(dgp: DgpSpec) -> TheoreticalMoments:
    curv = -2.0 if dgp.reading == "flipped_curvature" else 2.0
    return TheoreticalMoments(0.5, 0.5, dgp.noise_var, dgp.noise_var, curv, -curv)


def theoretical_bias_variance(dgp: DgpSpec, h: float, c: float, n: Optional[int] = None):
    """Leading-order bias and variance of ``tau_hat(h, c h)`` for ``mu_0``."""
    n = dgp.n if n is None else n
    tm = theoretical_moments(dgp)
    kc = kernel_constants(dgp.kernel, c)
    bias = h * h * kc.B * (tm.mu2_plus - tm.mu2_minus) / 2.0
    variance = kc.S * (tm.sigma2_plus / tm.f_plus + tm.sigma2_minus / tm.f_minus) / (n * h)
    return bias, variance


def empirical_bias_variance(
    dgp: DgpSpec, h: float, c: float, reps: int, seed: int = 0
) -> tuple:
    """Monte Carlo bias and variance of ``tau_hat(h, c h)`` at a fixed bandwidth.

    Uses the same per-replication streams as :func:`run_study`.
    """
    if reps < 2:
        raise InvalidInputError("reps must be >= 2")
    spec = DesignSpec(h, c * h, dgp.kernel, dgp.M)
    est = np.empty(reps)
    for r in range(reps):
        est[r] = tau_hat(gen_sample(rng_stream(seed, r), dgp), spec).tau_hat
    return float(est.mean()), float(est.var())


@dataclass(frozen=True)
class ReplicationRecord:
    rep_index: int
    L: float
    tau_regular: float = math.nan
    tau_donut: float = math.nan
    h_regular: float = math.nan
    h_donut: float = math.nan
    len_regular: float = math.nan
    len_donut: float = math.nan
    cover_regular: float = math.nan
    cover_donut: float = math.nan
    delta_reject: float = math.nan
    gamma_reject: float = math.nan
    failures: tuple = ()


def run_replication(seed: int, rep_index: int, dgp: DgpSpec) -> ReplicationRecord:
    """Estimates, CIs and both tests on one simulated sample.

    Estimation failures are recorded on the returned record, never raised.
    """
    sample = gen_sample(rng_stream(seed, rep_index), dgp)
    tau_star = 0.0
    k = get_kernel(dgp.kernel)
    out = {}
    failures = []
    try:
        sigma2 = nn_variance(sample, dgp.nn_J)
        h0 = select_bandwidth(sample, dgp.M, 0.0, k, sigma2=sigma2)
    except DonutRDError as exc:
        return ReplicationRecord(rep_index, dgp.L, failures=(f"setup:{exc.name}",))

    try:
        reg = estimate(sample, dgp.M, 0.0, h0, k, dgp.alpha, sigma2=sigma2)
        out.update(
            tau_regular=reg.tau_hat,
            h_regular=h0,
            len_regular=reg.ci_upper - reg.ci_lower,
            cover_regular=float(reg.ci_lower <= tau_star <= reg.ci_upper),
        )
    except DonutRDError as exc:
        failures.append(f"regular:{exc.name}")

    try:
        hd = h0 if dgp.share_bandwidth else select_bandwidth(sample, dgp.M, dgp.d, k, sigma2=sigma2)
        don = estimate(sample, dgp.M, dgp.d, hd, k, dgp.alpha, sigma2=sigma2)
        out.update(
            tau_donut=don.tau_hat,
            h_donut=hd,
            len_donut=don.ci_upper - don.ci_lower,
            cover_donut=float(don.ci_lower <= tau_star <= don.ci_upper),
        )
    except DonutRDError as exc:
        failures.append(f"donut:{exc.name}")
        hd = None

    if hd is not None:
        spec = DesignSpec(hd, dgp.d, k, dgp.M)
        for key, test in (("delta_reject", delta_test), ("gamma_reject", gamma_test)):
            try:
                out[key] = float(test(sample, spec, dgp.alpha, sigma2=sigma2).reject)
            except DonutRDError as exc:
                failures.append(f"{key.split('_')[0]}:{exc.name}")
    return ReplicationRecord(rep_index, dgp.L, failures=tuple(failures), **out)


def _run_block(args):
    seed, reps, dgps = args
    return [[run_replication(seed, r, g) for g in dgps] for r in reps]


def default_workers() -> int:
    env = os.environ.get("RD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidInputError(f"RD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class StudyResult:
    master_seed: int
    reps: int
    generator: str
    config: dict
    table1: list
    table2: list
    table3: list
    bandwidths: list
    failures: dict = field(default_factory=dict)

    def row(self, table: str, L: float) -> dict:
        for r in getattr(self, table):
            if r["L"] == L:
                return r
        raise KeyError(L)

    def manifest(self, version: str = "") -> dict:
        return {
            "master_seed": self.master_seed,
            "reps": self.reps,
            "generator": self.generator,
            "version": version,
            "config": self.config,
            "failures": self.failures,
            "bandwidths": self.bandwidths,
        }


def _cell(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return v


def aggregate(records_by_L: dict, seed: int, reps: int, config: dict) -> StudyResult:
    """Reduce per-replication records (already in replication order)."""
    t1, t2, t3, bw, fails = [], [], [], [], {}
    tau_star = 0.0
    d = config["d"]
    for L, recs in records_by_L.items():
        col = {name: _cell([getattr(r, name) for r in recs]) for name in (
            "tau_regular", "tau_donut", "h_regular", "h_donut", "len_regular",
            "len_donut", "cover_regular", "cover_donut", "delta_reject", "gamma_reject",
        )}
        row1 = {"L": L}
        for tag in ("regular", "donut"):
            err = col[f"tau_{tag}"] - tau_star
            row1[f"bias_{tag}"] = float(err.mean())
            row1[f"sd_{tag}"] = float(err.std())
            row1[f"rmse_{tag}"] = float(math.sqrt((err * err).mean()))
        t1.append({k: row1[k] for k in (
            "L", "bias_regular", "bias_donut", "sd_regular", "sd_donut",
            "rmse_regular", "rmse_donut")})
        t2.append({
            "L": L,
            "coverage_regular": float(col["cover_regular"].mean()),
            "coverage_donut": float(col["cover_donut"].mean()),
            "length_regular": float(col["len_regular"].mean()),
            "length_donut": float(col["len_donut"].mean()),
        })
        t3.append({
            "L": L,
            "delta_reject": float(col["delta_reject"].mean()),
            "gamma_reject": float(col["gamma_reject"].mean()),
        })
        bw.append({
            "L": L,
            "mean_h_regular": float(col["h_regular"].mean()),
            "mean_h_donut": float(col["h_donut"].mean()),
            "mean_c_donut": float((d / col["h_donut"]).mean()),
        })
        counts = {}
        for r in recs:
            for f in r.failures:
                counts[f] = counts.get(f, 0) + 1
        fails[str(L)] = dict(sorted(counts.items()))
    return StudyResult(seed, reps, GENERATOR_NAME, config, t1, t2, t3, bw, fails)


def run_study(
    master_seed: int,
    reps: int,
    L_grid: Sequence[float] = DEFAULT_L_GRID,
    dgp: DgpSpec = DgpSpec(),
    workers: Optional[int] = None,
    block_size: int = 50,
) -> StudyResult:
    """Run ``reps`` replications for every ``L`` and aggregate the tables."""
    if reps < 1:
        raise InvalidInputError("reps must be >= 1")
    L_grid = [float(L) for L in L_grid]
    dgps = [replace(dgp, L=L) for L in L_grid]
    workers = default_workers() if workers is None else max(1, int(workers))
    blocks = [
        (master_seed, range(s, min(s + block_size, reps)), dgps)
        for s in range(0, reps, block_size)
    ]
    if workers == 1:
        results = map(_run_block, blocks)
        rows = [row for block in results for row in block]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = [row for block in pool.map(_run_block, blocks) for row in block]
    by_L = {L: [row[j] for row in rows] for j, L in enumerate(L_grid)}
    config = dgp.to_dict()
    config.pop("L")
    config["L_grid"] = L_grid
    return aggregate(by_L, master_seed, reps, config)
