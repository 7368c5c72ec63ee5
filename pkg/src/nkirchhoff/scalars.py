"""Closed-form scalar ingredients of the variational problem.

Two problem families share these ingredients:

* the two-branch problem with an affine Kirchhoff coefficient
  m(s) = a s + b and reaction  g(s) = s |s|^p exp(|s|^beta)  against a
  concave weighted term  lambda h |s|^(q-1) s,
* the generic problem with a user-supplied Kirchhoff coefficient m and a
  nonlinearity  f(x, t) = h_profile(x, t) exp(|t|^(n/(n-1)))  that vanishes
  for t <= 0.

Everything here is a pure function of scalars (or numpy arrays of scalars):
g, its primitive G, its derivative g', the bracket combination rho used in
the energy upper bound, the Kirchhoff primitive M, and the derived
constants (growth exponents, the sharp exponential-embedding constant, the
closed-form energy lower-bound constant).

The primitive G has no elementary closed form for general (p, beta).  It is
evaluated through the substitution y = |s|^beta, which turns it into
(1/beta) * integral_0^x y^c e^y dy with c = (p+2)/beta - 1; that integral is
computed by a power series for moderate x and by the integration-by-parts
asymptotic expansion for large x.  Both branches reach ~1e-14 relative
accuracy, comfortably inside the 1e-12 absolute / 1e-10 relative contract,
and are cross-checked in the test suite against adaptive Gauss-Kronrod
quadrature and a brute-force Riemann oracle.

All exponentials are guarded: arguments that would push any factor past the
floating-point range raise SaturationError instead of returning inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import QuadratureError, SaturationError

LOG_FLOAT_MAX = math.log(np.finfo(float).max)  # ~709.78

# dead-band used when classifying signs of assembled quantities
SIGN_DEADBAND = 1e-12


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentSet:
    """Growth exponents of the two-branch problem.

    The standing assumptions are 0 < q < n-1 < 2n-1 < p+1 and
    1 < beta <= n/(n-1).  The derived quantities gamma = n/(n-q-1),
    k = (p+2+beta)/(q+1) and k' = k/(k-1) are exposed as properties.
    """

    n: int
    p: float
    q: float
    beta: float
    lam: float

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("spatial dimension must satisfy n >= 2")
        if not (0.0 < self.q):
            raise ValueError("0 < q violated")
        if not (self.q < self.n - 1):
            raise ValueError("q < n-1 violated")
        if not (2 * self.n - 1 < self.p + 1):
            raise ValueError("2n-1 < p+1 violated")
        if not (1.0 < self.beta <= self.n / (self.n - 1)):
            raise ValueError("1 < beta <= n/(n-1) violated")
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")
        # needed by the smallest admissible scale argument; implied by the
        # standing assumptions (p+2 > 2n >= 3n/2) but asserted explicitly
        if not (self.p + 2 > 1.5 * self.n):
            raise ValueError("p+2 > 3n/2 violated")

    @property
    def gamma(self) -> float:
        return self.n / (self.n - self.q - 1)

    @property
    def k(self) -> float:
        return (self.p + 2 + self.beta) / (self.q + 1)

    @property
    def kprime(self) -> float:
        return self.k / (self.k - 1)

    @property
    def critical(self) -> bool:
        """True when beta sits at the borderline exponent n/(n-1)."""
        return abs(self.beta - self.n / (self.n - 1)) <= 1e-12


@dataclass(frozen=True)
class KirchhoffSpec:
    """Kirchhoff coefficient m and its primitive M(t) = int_0^t m.

    Affine: m(t) = a t + b with a, b > 0, so M(t) = a t^2/2 + b t exactly.
    Generic: user callables with a declared lower bound m0 > 0; the
    structural conditions (lower bound, superadditive primitive, power
    growth) are semantic contracts on the input, checked by sampling only.
    """

    a: float = 0.0
    b: float = 0.0
    m: Optional[Callable[[np.ndarray], np.ndarray]] = None
    m0: float = 0.0
    growth: Optional[tuple] = None  # (a1, a2, sigma, t0) when supplied

    @staticmethod
    def affine(a: float, b: float) -> "KirchhoffSpec":
        if a <= 0 or b <= 0:
            raise ValueError("affine Kirchhoff coefficients require a > 0, b > 0")
        return KirchhoffSpec(a=a, b=b)

    @staticmethod
    def generic(m, m0, growth=None) -> "KirchhoffSpec":
        if m0 <= 0:
            raise ValueError("generic Kirchhoff coefficient requires m0 > 0")
        return KirchhoffSpec(m=m, m0=m0, growth=growth)

    @property
    def is_affine(self) -> bool:
        return self.m is None

    def coefficient(self, t):
        """m(t) for t >= 0."""
        if self.is_affine:
            return self.a * np.asarray(t, dtype=float) + self.b
        return np.asarray(self.m(np.asarray(t, dtype=float)), dtype=float)

    @property
    def m_zero(self) -> float:
        """Lower bound m0 (equals b in the affine case)."""
        return self.b if self.is_affine else self.m0


@dataclass(frozen=True)
class GenericNonlinearity:
    """Nonlinearity f(x, t) = h_profile(x, t) * exp(|t|^(n/(n-1))), zero
    for t <= 0.

    h_profile must be vectorised: x is an (N, dim) coordinate array (or
    None for x-independent profiles) and t an (N,) value array.  K0 and t0
    are the constants of the primitive-domination condition
    F(x,t) <= K0 f(x,t) for t >= t0; theta >= 2n is the
    Ambrosetti-Rabinowitz constant used in bound computations.
    """

    h_profile: Callable
    n: int
    K0: float = 1.0
    t0: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n >= 2 required")
        th = self.theta if self.theta else 2.0 * self.n
        if th < 2 * self.n:
            raise ValueError("theta >= 2n required")
        object.__setattr__(self, "theta", th)

    @property
    def exponent(self) -> float:
        return self.n / (self.n - 1)


def power_profile(power: float):
    """Builtin profile h(x, t) = t^power for t > 0, zero otherwise."""

    def h(x, t):
        t = np.asarray(t, dtype=float)
        return np.where(t > 0.0, np.abs(t) ** power, 0.0)

    return h


# ---------------------------------------------------------------------------
# derived constants
# ---------------------------------------------------------------------------

def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere S^{n-1} in R^n (2*pi for n=2)."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def alpha_n(n: int) -> float:
    """Sharp exponential-embedding constant n * w_{n-1}^{1/(n-1)}."""
    return n * sphere_area(n) ** (1.0 / (n - 1))


def energy_lower_bound_constant(exps: ExponentSet, l: float) -> float:
    """Closed-form constant C(p,q,n) in theta >= -C(p,q,n) lambda^{k/(k-1)}.

    l is the integral of |h|^{k/(k-1)} over the domain.
    """
    n, p, q = exps.n, exps.p, exps.q
    k = exps.k
    lead = k ** (-1.0 / (k - 1)) - k ** (-k / (k - 1))
    num = l * (p + 2) ** (1.0 / (k - 1)) * (2 * n - q - 1) ** (k / (k - 1))
    den = 2 * n * (p + 2 - 2 * n) ** (1.0 / (k - 1)) * (q + 1) ** (k / (k - 1))
    return lead * num / den


def critical_level_threshold(exps: ExponentSet, kirch: KirchhoffSpec, l: float) -> float:
    """Compactness threshold (1/(2n)) m0 alpha_n^{n-1} - C lam^{(p+2+b)/(p+1-q+b)}.

    Solutions of the borderline problem are certified only below this level.
    """
    n = exps.n
    expo = (exps.p + 2 + exps.beta) / (exps.p + 1 - exps.q + exps.beta)
    C = energy_lower_bound_constant(exps, l)
    return kirch.m_zero * alpha_n(n) ** (n - 1) / (2 * n) - C * exps.lam ** expo


# ---------------------------------------------------------------------------
# saturation guard
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def saturation_limit(p: float, beta: float) -> float:
    """Largest x = |s|^beta for which every factor of g, g' and G stays
    finite in float64: solves x + w*log(x) = LOG_FLOAT_MAX - 5 with
    w = (p+2)/beta (the worst polynomial prefactor)."""
    w = (p + 2.0) / beta
    target = LOG_FLOAT_MAX - 5.0
    x = target
    for _ in range(60):
        fx = x + w * math.log(x) - target
        x -= fx / (1.0 + w / x)
    return x


def saturation_mask(s, exps: ExponentSet):
    """Boolean mask of entries whose exponential factors would overflow."""
    x = np.abs(np.asarray(s, dtype=float)) ** exps.beta
    return x > saturation_limit(exps.p, exps.beta)


def _guard(s, exps: ExponentSet):
    s = np.asarray(s, dtype=float)
    bad = saturation_mask(s, exps)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise SaturationError(
            f"|s|^beta = {np.abs(s.ravel()[idx] if s.ndim else s)**exps.beta:.6g} "
            f"exceeds the floating-point exponential range",
        )
    return s


# ---------------------------------------------------------------------------
# the reaction term g, its derivative and primitive
# ---------------------------------------------------------------------------

def g_eval(s, exps: ExponentSet):
    """g(s) = s |s|^p exp(|s|^beta).  Odd in s, bit-exact under negation."""
    s = _guard(s, exps)
    a = np.abs(s)
    out = np.sign(s) * a ** (exps.p + 1) * np.exp(a ** exps.beta)
    if not np.all(np.isfinite(out)):
        raise SaturationError("g overflowed despite guard")
    return out if out.ndim else float(out)


def g_prime_eval(s, exps: ExponentSet):
    """g'(s) = (p+1+beta |s|^beta) |s|^p exp(|s|^beta); g'(0) = 0 since p > 0."""
    s = _guard(s, exps)
    a = np.abs(s)
    ab = a ** exps.beta
    out = (exps.p + 1.0 + exps.beta * ab) * a ** exps.p * np.exp(ab)
    if not np.all(np.isfinite(out)):
        raise SaturationError("g' overflowed despite guard")
    return out if out.ndim else float(out)


_SERIES_SWITCH = 40.0
_SERIES_MAX_TERMS = 600
_ASYM_MAX_TERMS = 26


def _exp_power_primitive(x, c):
    """E_c(x) = integral_0^x y^c e^y dy for x >= 0, c > -1, vectorised.

    Power series sum_j x^(c+1+j) / (j! (c+1+j)) for x <= 40; asymptotic
    expansion e^x x^c sum_m (-1)^m (c)_m x^-m (falling factorial) beyond.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)

    small = x <= _SERIES_SWITCH
    if np.any(small):
        xs = x[small]
        total = np.zeros_like(xs)
        # term_j = x^(c+1) * x^j / j! ; accumulated as total of term/(c+1+j)
        term = xs ** (c + 1.0)
        total += term / (c + 1.0)
        converged = xs <= 0.0
        for j in range(1, _SERIES_MAX_TERMS):
            term = term * xs / j
            contrib = term / (c + 1.0 + j)
            total += contrib
            converged |= contrib <= 1e-17 * total
            if np.all(converged):
                break
        else:
            raise QuadratureError("series for the exponential primitive did not converge")
        out[small] = total

    big = ~small
    if np.any(big):
        xb = x[big]
        lead = np.exp(xb) * xb ** c
        if not np.all(np.isfinite(lead)):
            raise SaturationError("exponential primitive overflowed")
        acc = np.ones_like(xb)
        term = np.ones_like(xb)
        fall = 1.0
        for m in range(1, _ASYM_MAX_TERMS):
            fall *= c - (m - 1)
            term = -term * (c - (m - 1)) / xb  # keeps sign bookkeeping simple
            acc += term
            if np.all(np.abs(term) <= 1e-16 * np.abs(acc)):
                break
        # remainder is bounded by the first omitted term
        nxt = abs(fall * (c - m)) / np.min(xb) ** (m + 1)
        if nxt > 1e-12:
            raise QuadratureError("asymptotic expansion for the primitive too inaccurate")
        out[big] = lead * acc

    return out


def G_eval(s, exps: ExponentSet):
    """G(s) = integral_0^s g = (1/beta) E_c(|s|^beta), c = (p+2)/beta - 1.

    Even in s, bit-exact under negation; meets 1e-12 absolute / 1e-10
    relative accuracy on its whole guarded domain.
    """
    s = _guard(s, exps)
    c = (exps.p + 2.0) / exps.beta - 1.0
    out = _exp_power_primitive(np.abs(s) ** exps.beta, c) / exps.beta
    if not np.all(np.isfinite(out)):
        raise SaturationError("G overflowed despite guard")
    return out if out.ndim else float(out)


def rho_eval(s, exps: ExponentSet):
    """rho(s) = (2n+q)/(2n(q+1)) g(s)s - G(s) - g'(s)s^2/(2n(q+1)), s >= 0.

    Nonpositive on the half line; controls the energy upper bound.
    """
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("rho is defined for s >= 0")
    n, q = exps.n, exps.q
    out = ((2 * n + q) / (2 * n * (q + 1)) * g_eval(s_arr, exps) * s_arr
           - G_eval(s_arr, exps)
           - g_prime_eval(s_arr, exps) * s_arr ** 2 / (2 * n * (q + 1)))
    return out if np.ndim(s) else float(out)


# ---------------------------------------------------------------------------
# Kirchhoff primitive and the structure check
# ---------------------------------------------------------------------------

def kirchhoff_M(t, spec: KirchhoffSpec):
    """M(t) = integral_0^t m(s) ds, t >= 0.

    Exact for the affine coefficient; adaptive quadrature (1e-12 absolute
    tolerance) for a generic one.
    """
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("M is defined for t >= 0")
    if spec.is_affine:
        out = spec.a * t_arr ** 2 / 2.0 + spec.b * t_arr
    else:
        out = np.empty_like(t_arr)
        for i, ti in enumerate(t_arr):
            if ti == 0.0:
                out[i] = 0.0
                continue
            val, err = integrate.quad(spec.m, 0.0, ti, epsabs=1e-12, epsrel=1e-10, limit=200)
            if err > max(1e-10, 1e-8 * abs(val)):
                raise QuadratureError(f"M({ti}) quadrature error estimate {err:.3g}")
            out[i] = val
    return float(out[0]) if scalar else out


@dataclass
class ARReport:
    """Result of the structure inequality (1/n) M(t) - (1/theta) m(t) t >= 0."""

    theta: float
    min_value: float
    argmin: float
    passed: bool
    values: np.ndarray = field(repr=False, default=None)


def ar_inequality_check(spec: KirchhoffSpec, n: int, theta: float, t_samples) -> ARReport:
    """Evaluate (1/n) M(t) - (1/theta) m(t) t on the samples; pass iff the
    minimum stays above -1e-12."""
    if theta < 2 * n:
        raise ValueError("theta >= 2n required")
    t = np.asarray(t_samples, dtype=float)
    vals = kirchhoff_M(t, spec) / n - spec.coefficient(t) * t / theta
    i = int(np.argmin(vals))
    return ARReport(theta=theta, min_value=float(vals[i]), argmin=float(t[i]),
                    passed=bool(vals[i] >= -1e-12), values=vals)


# ---------------------------------------------------------------------------
# generic nonlinearity f and its primitive
# ---------------------------------------------------------------------------

def _guard_generic(t, nl: GenericNonlinearity):
    t = np.asarray(t, dtype=float)
    x = np.abs(t) ** nl.exponent
    if np.any(x > LOG_FLOAT_MAX - 10.0):
        raise SaturationError("|t|^(n/(n-1)) exceeds the floating-point exponential range")
    return t


def generic_f_eval(x, t, nl: GenericNonlinearity):
    """f(x, t) = h_profile(x, t) exp(|t|^(n/(n-1))) for t > 0, else 0."""
    t = _guard_generic(t, nl)
    pos = t > 0.0
    out = np.where(pos, nl.h_profile(x, t) * np.exp(np.abs(t) ** nl.exponent), 0.0)
    if not np.all(np.isfinite(out)):
        raise SaturationError("f overflowed despite guard")
    return out if out.ndim else float(out)


def generic_F_eval(x, t, nl: GenericNonlinearity, epsabs=1e-12, epsrel=1e-10):
    """F(x, t) = integral_0^t f(x, tau) dtau via adaptive panel-doubled
    Gauss-Legendre (vectorised over nodes; negative t gives 0).

    x may be None (x-independent profile), a single point of shape (dim,),
    or an (N, dim) array matching t.
    """
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    _guard_generic(t_arr, nl)
    tpos = np.where(t_arr > 0.0, t_arr, 0.0)

    if x is not None:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = np.broadcast_to(x, (t_arr.size, x.size))

    nodes16, weights16 = np.polynomial.legendre.leggauss(16)
    prev = None
    panels = 4
    while panels <= 4096:
        edges = np.linspace(0.0, 1.0, panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1] - edges[0])
        sigma = (mid[:, None] + half * nodes16[None, :]).ravel()
        w = np.tile(half * weights16, panels)
        tau = tpos[:, None] * sigma[None, :]
        tau_flat = tau.ravel()
        if x is None:
            hv = nl.h_profile(None, tau_flat)
        else:
            x_flat = np.repeat(x, sigma.size, axis=0)
            hv = nl.h_profile(x_flat, tau_flat)
        fv = np.where(tau_flat > 0.0,
                      hv * np.exp(np.abs(tau_flat) ** nl.exponent),
                      0.0).reshape(tau.shape)
        cur = tpos * (fv @ w)
        if not np.all(np.isfinite(cur)):
            raise SaturationError("F overflowed despite guard")
        if prev is not None:
            if np.all(np.abs(cur - prev) <= np.maximum(epsabs, epsrel * np.abs(cur))):
                return float(cur[0]) if scalar else cur
        prev = cur
        panels *= 2
    raise QuadratureError("primitive of the generic nonlinearity did not converge")
