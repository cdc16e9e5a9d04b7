import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from artifact.errors import DomainError
from artifact.failure_prob import (
    CrackProcess,
    WeibullModel,
    eta_from_j,
    hazard_report,
    ks_statistic,
    sample_crack_counts,
    sample_first_failure,
    weibull_cdf,
    weibull_cumulative_hazard,
    weibull_hazard,
    weibull_quantile,
    write_report_csv,
)

J_OMEGA1, J_OMEGA2 = 1.2138e-11, 4.35948e-11


def test_cdf_at_scale():
    assert float(weibull_cdf(WeibullModel(3.0, 1.7), 3.0)) == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert float(weibull_cdf(WeibullModel(3.0, 1.7), -1.0)) == 0.0


def test_paper_quantile_row_omega1():
    q = float(weibull_quantile(WeibullModel(287024.0, 2.0), 0.05))
    assert abs(q - 65005) <= 1e-3 * 65005


def test_quantile_domain():
    with pytest.raises(DomainError):
        weibull_quantile(WeibullModel(1.0, 2.0), 1.0)
    with pytest.raises(DomainError):
        WeibullModel(0.0, 2.0)


def test_hazard_negative_time():
    assert float(weibull_hazard(WeibullModel(1.0, 2.0), -3.0)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 1e6), st.floats(0.3, 8.0), st.floats(0.0, 0.999))
def test_quantile_cdf_roundtrip(eta, m, p):
    w = WeibullModel(eta, m)
    assert abs(float(weibull_cdf(w, weibull_quantile(w, p))) - p) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 100.0), st.floats(1.0, 6.0), st.floats(0.01, 3.0))
def test_hazard_integral(eta, m, frac):
    w = WeibullModel(eta, m)
    s = frac * eta
    val, _ = quad(lambda t: float(weibull_hazard(w, t)), 0.0, s, epsabs=1e-13, epsrel=1e-12)
    assert abs(val - (s / eta) ** m) <= 1e-8
    assert float(weibull_cumulative_hazard(w, s)) == pytest.approx((s / eta) ** m, rel=1e-14)


def test_eta_from_j_paper_rows():
    assert float(f"{eta_from_j(J_OMEGA1, 2):.4g}") == float(f"{287024:.4g}")
    assert abs(eta_from_j(J_OMEGA2, 2) - 151454) <= 1
    assert eta_from_j(1.0, 3.7) == 1.0
    with pytest.raises(DomainError):
        eta_from_j(0.0, 2)


def test_rho_nondecreasing():
    p = CrackProcess(2.5, 1.5)
    r = p.rho(np.linspace(-1, 5, 50))
    assert np.all(r >= 0) and np.all(np.diff(r) >= 0)


def test_first_failure_exponential_mean():
    t = sample_first_failure(CrackProcess(1.0, 1.0, rng_seed=11), 200_000)
    assert abs(t.mean() - 1.0) <= 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_first_failure_ks(seed):
    proc = CrackProcess(J_OMEGA1, 2.0, rng_seed=seed)
    t = sample_first_failure(proc, 200_000)
    assert ks_statistic(t, lambda s: weibull_cdf(proc.weibull, s)) <= 0.005


def test_sampling_deterministic():
    p = CrackProcess(0.3, 2.0, rng_seed=2 ** 63 + 5)
    assert np.array_equal(sample_first_failure(p, 1000), sample_first_failure(p, 1000))
    assert np.array_equal(sample_crack_counts(p, 2.0, 1000), sample_crack_counts(p, 2.0, 1000))


def test_crack_counts():
    m, J = 2.0, 1e-10
    s = math.sqrt(3.0 / J)  # rho = 3
    proc = CrackProcess(J, m, rng_seed=4)
    assert not np.any(sample_crack_counts(proc, 0.0, 1000))
    c = sample_crack_counts(proc, s, 200_000)
    assert abs(c.mean() - 3.0) <= 0.03
    # P(count = 0) = e^-3 ~ 0.05 has ~1% relative standard error at 2e5 draws; use 2e6
    z = np.mean(sample_crack_counts(proc, s, 2_000_000) == 0)
    assert abs(z - math.exp(-3.0)) <= 0.01 * math.exp(-3.0)
    F = float(weibull_cdf(proc.weibull, s))
    assert abs((1 - z) - F) <= 0.01 * F


def test_hazard_report_ranking(tmp_path):
    probe = [1e4, 1e5, 3e5]
    rows = hazard_report([J_OMEGA2, J_OMEGA1, J_OMEGA1], 2.0, probe, names=["omega2", "omega1", "copy"])
    assert rows[1].rank < rows[0].rank
    assert all(a < b for a, b in zip(rows[1].cdf, rows[0].cdf))
    assert all(a < b for a, b in zip(rows[1].hazard, rows[0].hazard))
    assert (rows[1].eta, rows[1].cdf, rows[1].q05) == (rows[2].eta, rows[2].cdf, rows[2].q05)
    assert float(f"{rows[1].eta:.4g}") == float(f"{287024:.4g}")
    assert abs(rows[0].eta - 151454) <= 1
    write_report_csv(tmp_path / "r.csv", rows, s_star=1e5)
    with open(tmp_path / "r.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == ["design", "J", "eta", "q05", "q632", "F(s*)", "rank"]
    assert float(table[1]["eta"]) == pytest.approx(rows[1].eta, rel=1e-9)
