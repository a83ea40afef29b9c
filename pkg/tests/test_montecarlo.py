import math
from dataclasses import replace

import numpy as np
import pytest

from donutrd.errors import InvalidInputError
from donutrd.kernels import kernel_constants
from donutrd.montecarlo import (
    READINGS,
    DgpSpec,
    aggregate,
    default_workers,
    empirical_bias_variance,
    gen_sample,
    mu_L,
    rng_stream,
    run_replication,
    run_study,
    theoretical_bias_variance,
    theoretical_moments,
)


class TestMuL:
    @pytest.mark.parametrize("reading", READINGS)
    @pytest.mark.parametrize("L", [0, 10, 40])
    def test_outside_donut(self, reading, L):
        expected = 0.25 if reading != "flipped_curvature" else -0.25
        assert mu_L(0.5, L, reading) == pytest.approx(expected)

    def test_printed_inside(self):
        assert mu_L(-0.05, 10) == pytest.approx(0.1225, abs=1e-12)

    def test_no_distortion(self):
        x = np.linspace(-1, 1, 41)
        assert np.allclose(mu_L(x, 0), np.where(x >= 0, 1, -1) * x**2)
        assert mu_L(0.0, 0) == 0.0

    def test_unsigned_offset_vanishes_at_cutoff(self):
        for x in (1e-9, -1e-9):
            assert mu_L(x, 20, "unsigned_offset") == pytest.approx(0.0, abs=1e-6)
        # the printed offset leaves a jump of 0.02 L on the left
        assert mu_L(-1e-9, 20) == pytest.approx(0.4, abs=1e-6)

    def test_flipped_keeps_distortion(self):
        x = np.linspace(-0.099, 0.099, 25)
        printed = mu_L(x, 30) - np.where(x >= 0, 1, -1) * x**2
        flipped = mu_L(x, 30, "flipped_curvature") + np.where(x >= 0, 1, -1) * x**2
        assert np.allclose(printed, flipped)

    def test_unknown_reading(self):
        with pytest.raises(InvalidInputError):
            mu_L(0.1, 1, "typo")


class TestDgp:
    def test_validation(self):
        for bad in ({"L": -1}, {"n": 3}, {"noise_scale": 0}, {"noise_kind": "iqr"},
                    {"reading": "x"}, {"d": 1.5}, {"kernel": "gaussian"}):
            with pytest.raises(InvalidInputError):
                DgpSpec(**bad)

    def test_noise_readings(self):
        assert DgpSpec().noise_sd == 0.5
        assert DgpSpec(noise_kind="variance").noise_var == pytest.approx(0.5)

    def test_moments(self):
        tm = theoretical_moments(DgpSpec(reading="printed"))
        assert (tm.mu2_plus, tm.mu2_minus, tm.f_plus, tm.sigma2_plus) == (2, -2, 0.5, 0.25)
        assert theoretical_moments(DgpSpec()).mu2_plus == -2


class TestGenSample:
    def test_deterministic(self):
        a = gen_sample(rng_stream(5, 3), DgpSpec(L=10))
        b = gen_sample(rng_stream(5, 3), DgpSpec(L=10))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        c = gen_sample(rng_stream(5, 4), DgpSpec(L=10))
        assert not np.array_equal(a.x, c.x)

    def test_common_random_numbers(self):
        a = gen_sample(rng_stream(1, 0), DgpSpec(L=0))
        b = gen_sample(rng_stream(1, 0), DgpSpec(L=40))
        assert np.array_equal(a.x, b.x)
        out = np.abs(a.x) >= 0.1
        assert np.array_equal(a.y[out], b.y[out])

    @pytest.mark.parametrize("kind,var", [("sd", 0.25), ("variance", 0.5)])
    def test_large_sample_moments(self, kind, var):
        dgp = DgpSpec(L=20, n=1_000_000, noise_kind=kind, reading="printed")
        s = gen_sample(rng_stream(0, 0), dgp)
        assert abs(s.x.mean()) < 0.003
        resid = s.y - mu_L(s.x, 20, "printed")
        assert resid.var() == pytest.approx(var, rel=0.01)


class TestTheory:
    @pytest.mark.parametrize("c", [0.0, 0.1, 0.2])
    def test_formulas(self, c):
        dgp = DgpSpec(reading="printed")
        kc = kernel_constants("triangular", c)
        bias, var = theoretical_bias_variance(dgp, 0.4, c)
        assert bias == pytest.approx(2 * 0.16 * kc.B)
        assert var == pytest.approx(4 * 0.25 * kc.S / (1000 * 0.4))

    def test_flipped_sign(self):
        b1, v1 = theoretical_bias_variance(DgpSpec(reading="printed"), 0.5, 0.1)
        b2, v2 = theoretical_bias_variance(DgpSpec(), 0.5, 0.1)
        assert b1 == -b2 and v1 == v2

    def test_small_simulation_agrees(self):
        dgp = DgpSpec()
        bias, var = empirical_bias_variance(dgp, 0.49, 0.0, 600, seed=2)
        tb, tv = theoretical_bias_variance(dgp, 0.49, 0.0)
        assert abs(bias - tb) < 4 * math.sqrt(tv / 600)
        assert var == pytest.approx(tv, rel=0.2)


class TestReplication:
    def test_deterministic(self):
        dgp = DgpSpec(L=20)
        assert run_replication(3, 11, dgp) == run_replication(3, 11, dgp)

    def test_record_complete(self):
        rec = run_replication(0, 0, DgpSpec())
        assert rec.failures == ()
        for name in ("tau_regular", "tau_donut", "len_regular", "len_donut"):
            assert math.isfinite(getattr(rec, name))
        assert rec.h_donut == rec.h_regular
        assert rec.cover_regular in (0.0, 1.0) and rec.delta_reject in (0.0, 1.0)

    def test_donut_invariant_in_L(self):
        a = run_replication(4, 2, DgpSpec(L=0))
        b = run_replication(4, 2, DgpSpec(L=40))
        assert a.h_donut == b.h_donut
        assert a.tau_donut == b.tau_donut
        # edge points borrow nearest-neighbour residuals from inside the donut
        assert a.len_donut == pytest.approx(b.len_donut, rel=0.05)

    def test_separate_bandwidths(self):
        rec = run_replication(0, 1, DgpSpec(share_bandwidth=False))
        assert rec.h_donut != rec.h_regular

    def test_failures_are_recorded(self):
        rec = run_replication(0, 0, DgpSpec(n=8, d=0.5))
        assert rec.failures
        assert all(":" in f for f in rec.failures)


class TestStudy:
    @pytest.fixture(scope="class")
    @classmethod
    def small(cls):
        return run_study(9, 40, [0, 40], DgpSpec(), workers=1, block_size=7)

    def test_rmse_identity(self, small):
        for row in small.table1:
            for tag in ("regular", "donut"):
                lhs = row[f"rmse_{tag}"] ** 2
                assert lhs == pytest.approx(row[f"bias_{tag}"] ** 2 + row[f"sd_{tag}"] ** 2, rel=1e-12)

    def test_layout(self, small):
        assert [r["L"] for r in small.table3] == [0.0, 40.0]
        assert set(small.table2[0]) == {"L", "coverage_regular", "coverage_donut",
                                        "length_regular", "length_donut"}
        assert small.row("table1", 40.0)["L"] == 40.0
        m = small.manifest("x")
        assert m["master_seed"] == 9 and m["reps"] == 40 and "PCG64" in m["generator"]
        assert m["config"]["L_grid"] == [0.0, 40.0]

    def test_block_and_worker_independent(self, small):
        other = run_study(9, 40, [0, 40], DgpSpec(), workers=2, block_size=13)
        assert other.table1 == small.table1
        assert other.table2 == small.table2
        assert other.table3 == small.table3

    def test_aggregate_skips_nan(self, small):
        recs = [run_replication(9, r, DgpSpec()) for r in range(3)]
        broken = replace(recs[0], tau_regular=math.nan)
        res = aggregate({0.0: [broken] + recs[1:]}, 9, 3, DgpSpec().to_dict())
        expected = np.mean([r.tau_regular for r in recs[1:]])
        assert res.table1[0]["bias_regular"] == pytest.approx(expected)

    def test_bad_reps(self):
        with pytest.raises(InvalidInputError):
            run_study(1, 0)


def test_default_workers(monkeypatch):
    monkeypatch.setenv("RD_THREADS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("RD_THREADS", "many")
    with pytest.raises(InvalidInputError):
        default_workers()
    monkeypatch.delenv("RD_THREADS")
    assert default_workers() >= 1
