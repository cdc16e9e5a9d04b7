"""Weibull failure-time model induced by a Poisson crack-initiation process.

Cracks up to s cycles form a Poisson point process with mean
rho(s) = s^m J, so the first failure time T has F(s) = 1 - exp(-(s/eta)^m)
with eta = J^(-1/m).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class WeibullModel:
    eta: float
    m: float

    def __post_init__(self):
        if not (self.eta > 0 and self.m > 0):
            raise DomainError("Weibull scale and shape must be positive")


def weibull_cdf(model: WeibullModel, s):
    s = np.asarray(s, dtype=float)
    z = np.maximum(s, 0.0) / model.eta
    return np.where(s >= 0, -np.expm1(-(z ** model.m)), 0.0)


def weibull_hazard(model: WeibullModel, s):
    s = np.asarray(s, dtype=float)
    z = np.maximum(s, 0.0) / model.eta
    return np.where(s >= 0, model.m / model.eta * z ** (model.m - 1), 0.0)


def weibull_cumulative_hazard(model: WeibullModel, s):
    s = np.asarray(s, dtype=float)
    return np.where(s >= 0, (np.maximum(s, 0.0) / model.eta) ** model.m, 0.0)


def weibull_quantile(model: WeibullModel, p):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p >= 1):
        raise DomainError("quantile level must lie in [0, 1)")
    return model.eta * (-np.log1p(-p)) ** (1.0 / model.m)


def eta_from_j(j: float, m: float) -> float:
    if not j > 0:
        raise DomainError("functional value must be positive (J = 0 means infinite life)")
    return float(j ** (-1.0 / m))


@dataclass(frozen=True)
class CrackProcess:
    intensity_j: float
    m: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.intensity_j < 0 or self.m <= 0:
            raise DomainError("need J >= 0 and m > 0")

    def rho(self, s):
        return np.maximum(np.asarray(s, dtype=float), 0.0) ** self.m * self.intensity_j

    @property
    def weibull(self) -> WeibullModel:
        return WeibullModel(eta_from_j(self.intensity_j, self.m), self.m)


def sample_first_failure(process: CrackProcess, n_samples: int) -> np.ndarray:
    """Inverse-CDF samples T = eta (-ln U)^(1/m)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = make_rng(process.rng_seed)
    u = 1.0 - rng.random(n_samples)  # in (0, 1]
    return process.weibull.eta * (-np.log(u)) ** (1.0 / process.m)


def sample_crack_counts(process: CrackProcess, s: float, n_samples: int) -> np.ndarray:
    if s < 0:
        raise DomainError("load-cycle count must be >= 0")
    rng = make_rng(process.rng_seed)
    return rng.poisson(float(process.rho(s)), n_samples)


def ks_statistic(samples: np.ndarray, cdf) -> float:
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


@dataclass
class HazardRow:
    design: str
    j: float
    eta: float
    q05: float
    q632: float
    cdf: list[float]
    hazard: list[float]
    m: float = 2.0
    rank: int = 0


def hazard_report(j_values, m: float, probe_times, names=None) -> list[HazardRow]:
    """Per-design reliability summary; rank 1 is the most reliable (smallest J)."""
    j_values = [float(j) for j in j_values]
    names = list(names) if names is not None else [f"design{i}" for i in range(len(j_values))]
    probe = np.asarray(probe_times, dtype=float)
    rows = []
    for name, j in zip(names, j_values):
        w = WeibullModel(eta_from_j(j, m), m)
        rows.append(HazardRow(name, j, w.eta, float(weibull_quantile(w, 0.05)),
                              float(weibull_quantile(w, 1 - math.exp(-1))),
                              weibull_cdf(w, probe).tolist(), weibull_hazard(w, probe).tolist(), m))
    order = sorted(range(len(rows)), key=lambda k: (rows[k].j, k))
    for r, k in enumerate(order, start=1):
        rows[k].rank = r
    return rows


def write_report_csv(path, rows: list[HazardRow], s_star: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["design", "J", "eta", "q05", "q632", "F(s*)", "rank"])
        for r in rows:
            F = weibull_cdf(WeibullModel(r.eta, r.m), s_star) if s_star is not None else float("nan")
            wr.writerow([r.design, "%.9e" % r.j, "%.9e" % r.eta, "%.9e" % r.q05, "%.9e" % r.q632,
                         "%.9e" % float(F), r.rank])

