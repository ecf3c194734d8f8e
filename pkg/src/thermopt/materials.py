"""Temperature-dependent electrical conductivity models.

Each model provides sigma(u) >= 0, vanishing at a critical temperature
u_star (possibly infinite), together with the derived quantities used by the
substitution diagnostics and the a-priori bound chain:

    F(u)    = integral_0^u ds / sigma(s)   (maps [0, u_star) onto [0, inf))
    F_inv   = inverse of F
    a(v)    = sigma(F_inv(v))              (strictly positive, nonincreasing)
    mu      = max(sup sigma, sup |sigma'|) over [0, u_star]

Negative temperature arguments (transients of the nonlinear iteration) are
clamped to 0; callers that need to report clamping count negatives before
evaluating. Models are immutable and every evaluation is a pure function,
safe for concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from .errors import DomainError

_DENSE_SAMPLES = 4096
_MU_SLACK = 1e-6


@dataclass(frozen=True)
class TruncationLevel:
    """Level n in (0, u_star) at which sigma is blended to a positive floor."""

    n: float
    delta: float


class ConductivityModel:
    """Common interface; concrete families override the evaluations."""

    kind = "abstract"
    sigma0: float
    u_star: float

    def sigma(self, u):
        raise NotImplementedError

    def sigma_prime(self, u):
        raise NotImplementedError

    def F(self, u):
        raise NotImplementedError

    def F_inv(self, v):
        raise NotImplementedError

    def a(self, v):
        v = np.maximum(np.asarray(v, dtype=float), 0.0)
        return self.sigma(self.F_inv(v))

    def lipschitz_mu(self) -> float:
        """C1 norm bound of sigma over [0, u_star], by dense sampling."""
        hi = self.u_star if math.isfinite(self.u_star) else 1.0
        s = np.linspace(0.0, hi, _DENSE_SAMPLES)
        return float(max(np.max(np.abs(self.sigma(s))),
                         np.max(np.abs(self.sigma_prime(s))))) + _MU_SLACK

    def reciprocal_a_moment(self, v, p: float = 2.0):
        """integral_0^v s^(p-2) / a(s) ds, used by the bound chain."""
        v = np.asarray(v, dtype=float)
        scalar = v.ndim == 0
        flat = np.atleast_1d(v)
        out = np.empty_like(flat)
        for i, x in enumerate(flat):
            out[i] = self._moment_scalar(float(x), p)
        return float(out[0]) if scalar else out

    def _moment_scalar(self, v: float, p: float) -> float:
        if v <= 0.0:
            return 0.0
        val, _ = integrate.quad(lambda s: s ** (p - 2.0) / self.a(s), 0.0, v,
                                epsrel=1e-10, epsabs=1e-14, limit=200)
        return val


def _clamp(u):
    return np.maximum(np.asarray(u, dtype=float), 0.0)


class TruncatedPower(ConductivityModel):
    """sigma(u) = sigma0 (1 - u/u_star)^p for u < u_star, zero beyond.

    p >= 2 keeps sigma in C1 across u_star and makes F(u) diverge at u_star.
    p = 2 admits closed forms for F, F_inv and a; other exponents fall back
    to adaptive quadrature (relative tolerance 1e-10) and root bracketing.
    """

    kind = "truncated_power"

    def __init__(self, sigma0: float, u_star: float, exponent_p: float = 2.0):
        if sigma0 <= 0 or u_star <= 0:
            raise DomainError("sigma0 and u_star must be positive")
        if exponent_p < 2:
            raise DomainError("exponent p must be >= 2 for C1 regularity")
        self.sigma0 = float(sigma0)
        self.u_star = float(u_star)
        self.exponent_p = float(exponent_p)

    def sigma(self, u):
        u = _clamp(u)
        t = np.maximum(1.0 - u / self.u_star, 0.0)
        return self.sigma0 * t ** self.exponent_p

    def sigma_prime(self, u):
        u = _clamp(u)
        t = np.maximum(1.0 - u / self.u_star, 0.0)
        return -self.exponent_p * self.sigma0 / self.u_star * t ** (self.exponent_p - 1.0)

    def F(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0) or np.any(u >= self.u_star):
            raise DomainError("F is defined on [0, u_star)")
        if self.exponent_p == 2.0:
            return self.u_star * u / (self.sigma0 * (self.u_star - u))
        scalar = u.ndim == 0
        flat = np.atleast_1d(u)
        out = np.empty_like(flat)
        for i, x in enumerate(flat):
            out[i], _ = integrate.quad(lambda s: 1.0 / self.sigma(s), 0.0, float(x),
                                       epsrel=1e-10, epsabs=1e-14, limit=200)
        return float(out[0]) if scalar else out

    def F_inv(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise DomainError("F_inv is defined on [0, inf)")
        if self.exponent_p == 2.0:
            return self.sigma0 * self.u_star * v / (self.u_star + self.sigma0 * v)
        scalar = v.ndim == 0
        flat = np.atleast_1d(v)
        out = np.empty_like(flat)
        for i, x in enumerate(flat):
            out[i] = self._f_inv_scalar(float(x))
        return float(out[0]) if scalar else out

    def _f_inv_scalar(self, v: float) -> float:
        if v == 0.0:
            return 0.0
        lo, hi = 0.0, self.u_star * 0.5
        while self.F(hi) < v:
            hi = 0.5 * (hi + self.u_star)
            if self.u_star - hi < 1e-15 * self.u_star:
                return hi
        return float(optimize.brentq(lambda u: self.F(u) - v, lo, hi,
                                     xtol=1e-15, rtol=8.9e-16))

    def a(self, v):
        v = np.maximum(np.asarray(v, dtype=float), 0.0)
        if self.exponent_p == 2.0:
            return self.sigma0 * self.u_star ** 2 / (self.u_star + self.sigma0 * v) ** 2
        return self.sigma(self.F_inv(v))

    def lipschitz_mu(self) -> float:
        # sup sigma = sigma0 at u=0; sup |sigma'| = p sigma0 / u_star at u=0
        return max(self.sigma0, self.exponent_p * self.sigma0 / self.u_star)

    def _moment_scalar(self, v: float, p: float) -> float:
        if v <= 0.0:
            return 0.0
        if self.exponent_p == 2.0 and p == 2.0:
            # 1/a(s) = (u* + sigma0 s)^2 / (sigma0 u*^2)
            c = self.sigma0
            w = self.u_star
            return ((w + c * v) ** 3 - w ** 3) / (3.0 * c ** 2 * w ** 2)
        return super()._moment_scalar(v, p)


class Constant(ConductivityModel):
    """Uniformly positive conductivity; the nondegenerate baseline."""

    kind = "constant"

    def __init__(self, sigma0: float):
        if sigma0 <= 0:
            raise DomainError("sigma0 must be positive")
        self.sigma0 = float(sigma0)
        self.u_star = math.inf

    def sigma(self, u):
        return np.full_like(_clamp(u), self.sigma0)

    def sigma_prime(self, u):
        return np.zeros_like(_clamp(u))

    def F(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise DomainError("F is defined on [0, inf)")
        return u / self.sigma0

    def F_inv(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise DomainError("F_inv is defined on [0, inf)")
        return self.sigma0 * v

    def a(self, v):
        return np.full_like(np.asarray(v, dtype=float), self.sigma0)

    def lipschitz_mu(self) -> float:
        return self.sigma0

    def _moment_scalar(self, v: float, p: float) -> float:
        if v <= 0.0:
            return 0.0
        return v ** (p - 1.0) / ((p - 1.0) * self.sigma0)


class TruncatedModel(ConductivityModel):
    """sigma_n: equals sigma below the level n, then a C1 cubic blend down to
    the constant floor sigma(n)/2 on [n, n+delta], constant beyond.

    Only sigma/sigma' evaluations are meaningful for a truncated model; it
    exists to make each linearized solve uniformly elliptic.
    """

    kind = "truncated"

    def __init__(self, base: ConductivityModel, level: TruncationLevel):
        self.base = base
        self.level = level
        self.sigma0 = base.sigma0
        self.u_star = math.inf  # sigma_n never vanishes
        n, d = level.n, level.delta
        self._sn = float(base.sigma(n))
        self._spn = float(base.sigma_prime(n))
        self._n, self._d = n, d

    def sigma(self, u):
        u = _clamp(u)
        n, d, sn, spn = self._n, self._d, self._sn, self._spn
        t = np.clip((u - n) / d, 0.0, 1.0)
        blend = sn * (t ** 3 - 1.5 * t ** 2 + 1.0) + d * spn * t * (1.0 - t) ** 2
        out = np.where(u <= n, self.base.sigma(np.minimum(u, n)), blend)
        return np.where(u >= n + d, 0.5 * sn, out)

    def sigma_prime(self, u):
        u = _clamp(u)
        n, d, sn, spn = self._n, self._d, self._sn, self._spn
        t = np.clip((u - n) / d, 0.0, 1.0)
        dblend = sn * (3.0 * t ** 2 - 3.0 * t) / d + spn * (1.0 - t) * (1.0 - 3.0 * t)
        out = np.where(u <= n, self.base.sigma_prime(np.minimum(u, n)), dblend)
        return np.where(u >= n + d, 0.0, out)

    def lipschitz_mu(self) -> float:
        s = np.linspace(0.0, self._n + self._d, _DENSE_SAMPLES)
        return float(max(np.max(np.abs(self.sigma(s))),
                         np.max(np.abs(self.sigma_prime(s))))) + _MU_SLACK


def truncate(model: ConductivityModel, n: float,
             delta: float | None = None) -> TruncatedModel:
    """Build sigma_n with floor sigma(n)/2 and C1 blend of width delta.

    Default blend width is 0.05 (u_star - n). Requires 0 < n < u_star.
    """
    if not (0.0 < n < model.u_star):
        raise DomainError(f"truncation level {n} outside (0, u_star)")
    if delta is None:
        if not math.isfinite(model.u_star):
            raise DomainError("truncation of a model without finite u_star "
                              "needs an explicit blend width")
        delta = 0.05 * (model.u_star - n)
    if delta <= 0:
        raise DomainError("blend width must be positive")
    return TruncatedModel(model, TruncationLevel(float(n), float(delta)))
