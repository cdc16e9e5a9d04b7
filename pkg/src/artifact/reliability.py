"""LCF life chain, failure densities and the reliability functionals.

The LCF density is N_det(sigma)^(-m) with
    N_det = CMB^-1 o RO o SD^-1 o VM o TF.
For derivatives the same density is evaluated through the squared chain
    f_lcf(sigma) = g(VM(TF sigma)^2),  g = CMB~^-1 o RO~ o SD~^-1,
which is smooth through the kernel of TF.  Every map is vectorized over
leading array axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError
from .fem import MaterialParams
from .quadrature import SphereQuadrature, sphere_rule

_I3 = np.eye(3)


# -- stress invariants -------------------------------------------------------------
def tf(sigma: np.ndarray) -> np.ndarray:
    """Trace-free part."""
    sigma = np.asarray(sigma, dtype=float)
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    return sigma - tr[..., None, None] / 3.0 * _I3


def vm(sigma_dev: np.ndarray) -> np.ndarray:
    """Von Mises comparison stress of a trace-free tensor."""
    s = np.asarray(sigma_dev, dtype=float)
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", s, s))


def vm2(sigma: np.ndarray) -> np.ndarray:
    d = tf(sigma)
    return 1.5 * np.einsum("...ij,...ij->...", d, d)


# -- scalar root finding in log space -----------------------------------------------
def _log_newton(h, lo, hi, start, tol, max_iter, what):
    """Safeguarded Newton for increasing or decreasing monotone h(l) = 0 on [lo, hi].

    ``h`` returns (value, derivative); arrays are solved elementwise.
    """
    l = start.copy()
    lo, hi = lo.copy(), hi.copy()
    active = np.ones(l.shape, dtype=bool)
    for _ in range(max_iter):
        val, der = h(l)
        pos = val > 0
        inc = der > 0
        # shrink bracket: root lies left of l where (val > 0) == increasing
        left = pos == inc
        hi = np.where(active & left, np.minimum(hi, l), hi)
        lo = np.where(active & ~left, np.maximum(lo, l), lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(der != 0, val / der, 0.0)
        new = l - step
        small = np.abs(step) <= tol * np.maximum(1.0, np.abs(l))
        bad = ~small & (~np.isfinite(new) | (new <= lo) | (new >= hi))
        new = np.where(bad, 0.5 * (lo + hi), new)
        done = active & ((np.abs(val) <= tol) | small)
        l = np.where(active, new, l)
        active &= ~done
        if not active.any():
            return l
    val, _ = h(l)
    if np.any(np.abs(val[active]) > 1e3 * tol):
        raise NumericError(f"{what}: Newton iteration did not converge")
    return l


@dataclass
class LcfChain:
    mat: MaterialParams = field(default_factory=MaterialParams)
    newton_tol: float = 1e-12
    newton_max_iter: int = 100

    # constants in log form
    @property
    def _p(self) -> float:
        return 1.0 + 1.0 / self.mat.n_hat

    @property
    def _logA(self) -> float:
        """log(E / K^(1/n))."""
        return math.log(self.mat.E) - math.log(self.mat.K) / self.mat.n_hat

    # -- plain chain ------------------------------------------------------------
    def sd(self, s):
        s = np.asarray(s, dtype=float)
        return np.sqrt(s * s + np.exp(self._logA) * s ** self._p)

    def sd_inverse(self, sigma_v):
        y = np.asarray(sigma_v, dtype=float)
        if np.any(y < 0):
            raise DomainError("sd_inverse needs sigma_v >= 0")
        out = np.zeros_like(y)
        pos = y > 0
        if not pos.any():
            return out
        ly = np.log(y[pos])
        A, p = self._logA, self._p

        def h(l):
            a, b = 2 * l, A + p * l
            v = np.logaddexp(a, b)
            w = np.exp(b - v)
            return v - 2 * ly, 2 * (1 - w) + p * w

        hi = ly.copy()
        lo = np.minimum(ly, (2 * ly - A) / p) - 1.0
        out[pos] = np.exp(_log_newton(h, lo, hi + 1e-12, hi, self.newton_tol * 1e-2, self.newton_max_iter, "SD^-1"))
        return out

    def ro(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise DomainError("ro needs sigma >= 0")
        return s / self.mat.E + (s / self.mat.K) ** (1.0 / self.mat.n_hat)

    def cmb(self, N):
        mt = self.mat
        x = 2.0 * np.asarray(N, dtype=float)
        return mt.sigma_f_prime / mt.E * x ** mt.b + mt.eps_f_prime * x ** mt.c

    def cmb_inverse(self, eps):
        e = np.asarray(eps, dtype=float)
        if np.any(e < 0):
            raise DomainError("cmb_inverse needs eps >= 0")
        out = np.full(e.shape, np.inf)
        pos = e > 0
        if not pos.any():
            return out
        mt = self.mat
        le = np.log(e[pos])
        a1, a2 = math.log(mt.sigma_f_prime / mt.E), math.log(mt.eps_f_prime)
        b, c = mt.b, mt.c

        def h(l):
            t1, t2 = a1 + b * l, a2 + c * l
            v = np.logaddexp(t1, t2)
            w = np.exp(t1 - v)
            return v - le, b * w + c * (1 - w)

        r1, r2 = (le - a1) / b, (le - a2) / c
        start = np.maximum(r1, r2)
        hi = np.maximum(r1 + math.log(2) / abs(b), r2 + math.log(2) / abs(c))
        l = _log_newton(h, start - 1e-12, hi, start, self.newton_tol * 1e-2, self.newton_max_iter, "CMB^-1")
        out[pos] = 0.5 * np.exp(l)
        return out

    def n_det(self, sigma):
        """Deterministic life; infinite on the kernel of TF."""
        sv = self.mat.amplitude_factor * vm(tf(sigma))
        return self.cmb_inverse(self.ro(self.sd_inverse(sv)))

    # -- squared chain ------------------------------------------------------------
    @property
    def _q(self) -> float:
        return (self.mat.n_hat + 1.0) / (2.0 * self.mat.n_hat)

    def sd_t(self, x):
        x = np.asarray(x, dtype=float)
        return x + np.exp(self._logA) * x ** self._q

    def sd_t_prime(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 + self._q * np.exp(self._logA + (self._q - 1) * np.log(np.maximum(x, 1e-300)))

    def sd_t_inverse(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        pos = y > 0
        if not pos.any():
            return out
        ly = np.log(y[pos])
        A, q = self._logA, self._q

        def h(l):
            b = A + q * l
            v = np.logaddexp(l, b)
            w = np.exp(b - v)
            return v - ly, (1 - w) + q * w

        hi = ly.copy()
        lo = np.minimum(ly, (ly - A) / q) - 1.0
        out[pos] = np.exp(_log_newton(h, lo, hi + 1e-12, hi, self.newton_tol * 1e-2, self.newton_max_iter, "SD~^-1"))
        return out

    def ro_t(self, x):
        x = np.asarray(x, dtype=float)
        mt = self.mat
        n = mt.n_hat
        return (x / mt.E ** 2 + 2.0 / (mt.E * mt.K ** (1 / n)) * x ** self._q
                + x ** (1 / n) / mt.K ** (2 / n))

    def ro_t_prime(self, x):
        x = np.asarray(x, dtype=float)
        mt = self.mat
        n, q = mt.n_hat, self._q
        lx = np.log(np.maximum(x, 1e-300))
        return (1.0 / mt.E ** 2
                + 2.0 * q * np.exp((q - 1) * lx - math.log(mt.E) - math.log(mt.K) / n)
                + (1 / n) * np.exp((1 / n - 1) * lx - 2 * math.log(mt.K) / n))

    def _cmb_t_terms(self):
        mt = self.mat
        m = mt.m
        coef = np.array([
            2 * (mt.b * math.log(2) + math.log(mt.sigma_f_prime / mt.E)),
            math.log(mt.sigma_f_prime * mt.eps_f_prime / mt.E) + (1 + mt.b + mt.c) * math.log(2),
            2 * mt.c * math.log(2) + 2 * math.log(mt.eps_f_prime),
        ])
        expo = np.array([-2 * mt.b / m, -(mt.b + mt.c) / m, -2 * mt.c / m])
        return coef, expo

    def cmb_t(self, y):
        y = np.asarray(y, dtype=float)
        coef, expo = self._cmb_t_terms()
        return sum(np.exp(coef[k]) * y ** expo[k] for k in range(3))

    def cmb_t_prime(self, y):
        y = np.asarray(y, dtype=float)
        coef, expo = self._cmb_t_terms()
        ly = np.log(np.maximum(y, 1e-300))
        return sum(expo[k] * np.exp(coef[k] + (expo[k] - 1) * ly) for k in range(3))

    def cmb_t_inverse(self, e):
        e = np.asarray(e, dtype=float)
        out = np.zeros_like(e)
        pos = e > 0
        if not pos.any():
            return out
        le = np.log(e[pos])
        coef, expo = self._cmb_t_terms()

        def h(l):
            t = coef[:, None] + expo[:, None] * l[None, :]
            v = np.logaddexp.reduce(t, axis=0)
            w = np.exp(t - v)
            return v - le, (expo[:, None] * w).sum(axis=0)

        roots = (le[None, :] - coef[:, None]) / expo[:, None]
        start = roots.min(axis=0)
        lo = start - math.log(3) / expo.min()
        l = _log_newton(h, lo, start + 1e-12, start, self.newton_tol * 1e-2, self.newton_max_iter, "CMB~^-1")
        out[pos] = np.exp(l)
        return out

    def g(self, x):
        """Squared chain CMB~^-1 o RO~ o SD~^-1."""
        return self.cmb_t_inverse(self.ro_t(self.sd_t_inverse(x)))

    def g_prime(self, x):
        x = np.asarray(x, dtype=float)
        s = self.sd_t_inverse(x)
        y = self.cmb_t_inverse(self.ro_t(s))
        out = np.zeros_like(x)
        pos = y > 0
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            val = self.ro_t_prime(s[pos]) / (self.sd_t_prime(s[pos]) * self.cmb_t_prime(y[pos]))
        out[pos] = np.where(np.isfinite(val), val, 0.0)
        return out

    # -- densities ----------------------------------------------------------------
    def f_lcf(self, sigma):
        """N_det^{-m} through the squared chain; zero on ker(TF)."""
        x = self.mat.amplitude_factor ** 2 * vm2(sigma)
        return self.g(x)

    def df_lcf(self, sigma):
        a2 = self.mat.amplitude_factor ** 2
        x = a2 * vm2(sigma)
        return (self.g_prime(x) * 3.0 * a2)[..., None, None] * tf(sigma)

    def f_lcf_plain(self, sigma):
        n = self.n_det(sigma)
        with np.errstate(divide="ignore"):
            return np.where(np.isinf(n), 0.0, n ** (-self.mat.m))


def _default_chain(mat: MaterialParams | None) -> LcfChain:
    return LcfChain(mat or MaterialParams())


def sd_inverse(sigma_v, mat: MaterialParams | None = None):
    return _default_chain(mat).sd_inverse(sigma_v)


def ro(sigma, mat: MaterialParams | None = None):
    return _default_chain(mat).ro(sigma)


def cmb_inverse(eps, mat: MaterialParams | None = None):
    return _default_chain(mat).cmb_inverse(eps)


def n_det(sigma, mat: MaterialParams | None = None):
    return _default_chain(mat).n_det(sigma)


def f_lcf(sigma, mat: MaterialParams | None = None):
    return _default_chain(mat).f_lcf(sigma)


def df_lcf(sigma, mat: MaterialParams | None = None):
    return _default_chain(mat).df_lcf(sigma)


# -- ceramic ----------------------------------------------------------------------------
def _check_m(m: float) -> None:
    if not m > 1:
        raise DomainError(f"ceramic Weibull modulus must exceed 1, got {m}")


def _normal_stress(sigma: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,qi,qj->...q", sigma, nodes, nodes)


def f_cer(sigma, quad: SphereQuadrature | None = None, m: float = 5.0, sigma_0: float = 1.0, chunk: int = 4096):
    """(1/4pi) sum_i w_i (max(0, n_i.sigma.n_i)/sigma_0)^m."""
    _check_m(m)
    quad = quad or sphere_rule()
    sigma = np.asarray(sigma, dtype=float)
    flat = sigma.reshape(-1, 3, 3)
    out = np.empty(len(flat))
    for s in range(0, len(flat), chunk):
        sn = np.maximum(_normal_stress(flat[s : s + chunk], quad.nodes), 0.0) / sigma_0
        out[s : s + chunk] = (sn ** m) @ quad.weights / (4 * np.pi)
    return out.reshape(sigma.shape[:-2])


def df_cer(sigma, quad: SphereQuadrature | None = None, m: float = 5.0, sigma_0: float = 1.0, chunk: int = 4096):
    _check_m(m)
    quad = quad or sphere_rule()
    sigma = np.asarray(sigma, dtype=float)
    flat = sigma.reshape(-1, 3, 3)
    nn = np.einsum("qi,qj->qij", quad.nodes, quad.nodes)
    out = np.empty_like(flat)
    for s in range(0, len(flat), chunk):
        sn = np.maximum(_normal_stress(flat[s : s + chunk], quad.nodes), 0.0) / sigma_0
        w = (m / sigma_0) * sn ** (m - 1) * quad.weights / (4 * np.pi)
        out[s : s + chunk] = np.einsum("cq,qij->cij", w, nn)
    return out.reshape(sigma.shape)


# -- functionals -----------------------------------------------------------------------------
def j_lcf(u, mat: MaterialParams, include_dirichlet: bool = False) -> float:
    from .functionals import LcfFunctional, evaluate

    return evaluate(LcfFunctional(mat, include_dirichlet=include_dirichlet), u, mat)


def j_cer(u, mat: MaterialParams, quad: SphereQuadrature | None = None) -> float:
    from .functionals import CeramicFunctional, evaluate

    return evaluate(CeramicFunctional(mat, quad), u, mat)


def lcf_facet_density(u, mat: MaterialParams) -> np.ndarray:
    """Per boundary facet mean of N_det^{-m} (for VTK export and hot-spot reports)."""
    from .functionals import facet_stress

    sig, w = facet_stress(u, mat, np.arange(len(u.space.mesh.facets)))
    d = LcfChain(mat).f_lcf(sig)
    return (d * w).sum(axis=1) / w.sum(axis=1)
