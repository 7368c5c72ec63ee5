"""Fibering-map analysis along a fixed direction.

For a direction u != 0 the ray energy is phi(t) = J(t u).  With the affine
Kirchhoff coefficient m(s) = a s + b and A = ||u||^n it reduces to scalars:

    phi(t)  = a t^{2n} A^2 / (2n) + b t^n A / n
              - lam t^{q+1} H / (q+1) - S_G(t)
    phi'(t) = a t^{2n-1} A^2 + b t^{n-1} A - lam t^q H - S_g(t)
    phi''(t)= (2n-1) a t^{2n-2} A^2 + (n-1) b t^{n-2} A
              - q lam t^{q-1} H - S_g'(t)

with H = int h |u|^{q+1}, S_g(t) = int g(tu) u, S_g'(t) = int g'(tu) u^2,
S_G(t) = int G(tu).  The rescaled derivative

    psi(t)  = t^{n-1-q} m(t^n A) A - t^{-q} S_g(t)
    psi'(t) = (2n-1-q) a t^{2n-2-q} A^2 + (n-1-q) b t^{n-2-q} A
              - (p+1-q) t^{-1-q} S_g(t) - beta t^{beta-1-q} S_gb(t)

satisfies phi'(t) = t^q (psi(t) - lam H) identically, rises from 0 to a
unique interior maximum at t* and then falls to -infinity.  Nehari points
along the ray are the crossings psi(t) = lam H: two of them (t1 < t* < t2)
when H > 0 and the level lies below psi(t*), one global-maximum crossing
when H <= 0.

Note the displayed psi carries the factor A = ||u||^n on its Kirchhoff
term; expanding its derivative reproduces the four-term closed form above,
which pins the normalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from . import scalars
from .errors import BracketNotFound, SaturationError
from .grid import Field
from .problem import H_DEADBAND, H_eval, ProblemSpec, h_classify

# relative dead band for second-derivative sign classification
CLASSIFY_DEADBAND = 1e-10
# relative dead band for on-manifold detection
ONMANIFOLD_DEADBAND = 1e-8
# bracket scan window for the psi' sign change
BRACKET_LO, BRACKET_HI = 1e-8, 1e8
# level crossings sit at the scale (lam H / b ||u||^n)^{1/(n-1-q)}, far below
# the psi' window at small lam, so their scan floor is only a guard against
# a genuinely missing crossing
LEVEL_LO = 1e-250
# stand-in value for saturated (hugely negative) ray quantities
_NEG_SATURATED = -1e300


@dataclass
class RayScalars:
    """Per-direction reductions feeding the 1-D fibering formulas."""

    A: float
    H: float
    u: np.ndarray
    w: np.ndarray
    absu_beta: np.ndarray
    exps: object
    kirch: object

    @staticmethod
    def build(u: Field, spec: ProblemSpec) -> "RayScalars":
        if spec.kind != "two_branch":
            raise ValueError("fibering analysis applies to the two-branch problem")
        vals = u.values
        A = spec.grid.seminorm_pow(vals)
        if A <= 0.0:
            raise ValueError("fibering direction must be nonzero")
        return RayScalars(
            A=A,
            H=H_eval(u, spec),
            u=vals,
            w=spec.grid.node_weights,
            absu_beta=np.abs(vals) ** spec.exps.beta,
            exps=spec.exps,
            kirch=spec.kirchhoff,
        )

    # the three reaction reductions -----------------------------------------

    def S_g(self, t: float) -> float:
        return float(self.w @ (scalars.g_eval(t * self.u, self.exps) * self.u))

    def S_gb(self, t: float) -> float:
        return float(self.w @ (self.absu_beta * scalars.g_eval(t * self.u, self.exps) * self.u))

    def S_gp(self, t: float) -> float:
        return float(self.w @ (scalars.g_prime_eval(t * self.u, self.exps) * self.u ** 2))

    def S_G(self, t: float) -> float:
        return float(self.w @ scalars.G_eval(t * self.u, self.exps))

    # ray energy and derivatives --------------------------------------------

    def phi(self, t: float) -> float:
        e, n = self.exps, self.exps.n
        M = scalars.kirchhoff_M(t ** n * self.A, self.kirch)
        return (M / n - e.lam * t ** (e.q + 1) * self.H / (e.q + 1.0) - self.S_G(t))

    def phi_d1(self, t: float) -> float:
        e, n = self.exps, self.exps.n
        mcoef = float(self.kirch.coefficient(t ** n * self.A))
        return (t ** (n - 1) * mcoef * self.A - e.lam * t ** e.q * self.H - self.S_g(t))

    def phi_d2(self, t: float) -> float:
        e, n = self.exps, self.exps.n
        if self.kirch.is_affine:
            a, b = self.kirch.a, self.kirch.b
            return ((2 * n - 1) * a * t ** (2 * n - 2) * self.A ** 2
                    + (n - 1) * b * t ** (n - 2) * self.A
                    - e.q * e.lam * t ** (e.q - 1) * self.H
                    - self.S_gp(t))
        # generic Kirchhoff coefficient: differentiate phi' numerically
        dt = 1e-6 * max(t, 1.0)
        return (self.phi_d1(t + dt) - self.phi_d1(t - dt)) / (2 * dt)

    def psi(self, t: float) -> float:
        e, n = self.exps, self.exps.n
        mcoef = float(self.kirch.coefficient(t ** n * self.A))
        return t ** (n - 1 - e.q) * mcoef * self.A - t ** (-e.q) * self.S_g(t)

    def psi_d1(self, t: float) -> float:
        e, n = self.exps, self.exps.n
        if not self.kirch.is_affine:
            raise ValueError("closed-form psi' needs the affine Kirchhoff coefficient")
        a, b, q, beta, p = self.kirch.a, self.kirch.b, e.q, e.beta, e.p
        return ((2 * n - 1 - q) * a * t ** (2 * n - 2 - q) * self.A ** 2
                + (n - 1 - q) * b * t ** (n - 2 - q) * self.A
                - (p + 1 - q) * t ** (-1 - q) * self.S_g(t)
                - beta * t ** (beta - 1 - q) * self.S_gb(t))

    def psi_d1_scale(self, t: float) -> float:
        """Sum of the magnitudes of the four psi' terms (tolerance scale)."""
        e, n = self.exps, self.exps.n
        a, b, q, beta, p = self.kirch.a, self.kirch.b, e.q, e.beta, e.p
        return ((2 * n - 1 - q) * a * t ** (2 * n - 2 - q) * self.A ** 2
                + abs(n - 1 - q) * b * t ** (n - 2 - q) * self.A
                + (p + 1 - q) * t ** (-1 - q) * abs(self.S_g(t))
                + beta * t ** (beta - 1 - q) * abs(self.S_gb(t)))

    def phi_d1_scale(self, t: float) -> float:
        e, n = self.exps, self.exps.n
        mcoef = float(self.kirch.coefficient(t ** n * self.A))
        return (t ** (n - 1) * mcoef * self.A + e.lam * t ** e.q * abs(self.H)
                + abs(self.S_g(t)))


def _saturating(fn):
    """Evaluate a ray quantity, mapping overflow to a huge negative value
    (all ray quantities are eventually dominated by the negated reaction
    integrals, so saturation means 'very negative')."""

    def wrapped(t):
        try:
            return fn(t)
        except SaturationError:
            return _NEG_SATURATED

    return wrapped


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------

def phi_eval(u: Field, t: float, spec: ProblemSpec):
    """(phi(t), phi'(t), phi''(t)) along the ray through u."""
    if t <= 0:
        raise ValueError("fibering parameter t must be positive")
    ray = RayScalars.build(u, spec)
    return ray.phi(t), ray.phi_d1(t), ray.phi_d2(t)


def psi_eval(u: Field, t: float, spec: ProblemSpec):
    """(psi(t), psi'(t)); requires the affine Kirchhoff coefficient."""
    if t <= 0:
        raise ValueError("fibering parameter t must be positive")
    ray = RayScalars.build(u, spec)
    return ray.psi(t), ray.psi_d1(t)


def find_tstar(u_or_ray, spec: Optional[ProblemSpec] = None) -> float:
    """Unique maximiser of psi: the single sign change of psi' in
    [BRACKET_LO, BRACKET_HI], solved to |psi'(t*)| <= 1e-12 * scale."""
    ray = u_or_ray if isinstance(u_or_ray, RayScalars) else RayScalars.build(u_or_ray, spec)
    f = _saturating(ray.psi_d1)

    t_hi = 1.0
    v_hi = f(t_hi)
    while v_hi > 0.0:
        t_hi *= 2.0
        if t_hi > BRACKET_HI:
            raise BracketNotFound("psi' kept its sign up to the upper scan bound")
        v_hi = f(t_hi)
    t_lo = t_hi / 2.0
    v_lo = f(t_lo)
    while v_lo <= 0.0:
        t_lo *= 0.5
        if t_lo < BRACKET_LO:
            raise BracketNotFound("psi' kept its sign down to the lower scan bound")
        v_lo = f(t_lo)

    tstar = optimize.brentq(f, t_lo, t_hi, xtol=1e-15, rtol=8.9e-16)
    # secant polish towards the stated tolerance
    for _ in range(8):
        scale = ray.psi_d1_scale(tstar)
        val = f(tstar)
        if abs(val) <= 1e-12 * scale:
            break
        dt = 1e-7 * tstar
        slope = (f(tstar + dt) - f(tstar - dt)) / (2 * dt)
        if slope == 0.0:
            break
        tstar -= val / slope
    return tstar


@dataclass
class FiberingProfile:
    """Structure of phi along one direction."""

    norm: float
    H: float
    case_tag: str                 # "HPositive" | "HNonPositive"
    branch_count: int
    t_star: Optional[float] = None
    t1: Optional[float] = None
    t2: Optional[float] = None
    psi_at_star: float = math.nan
    level: float = math.nan       # lam * H
    diagnostic: str = ""
    ray: RayScalars = field(default=None, repr=False)

    def psi_samples(self, num: int = 200, lo: float = None, hi: float = None):
        """(t, psi(t)) samples on a log grid, for export and plotting."""
        lo = lo if lo is not None else (self.t1 or self.t_star or 1.0) / 50.0
        hi = hi if hi is not None else (self.t2 or self.t_star or 1.0) * 5.0
        ts = np.geomspace(lo, hi, num)
        ps = np.array([_saturating(self.ray.psi)(t) for t in ts])
        return ts, ps


def _find_level_crossing(ray, level, lo, hi):
    f = _saturating(lambda t: ray.psi(t) - level)
    return optimize.brentq(f, lo, hi, xtol=1e-300, rtol=8.9e-16)


def find_branches(u: Field, spec: ProblemSpec) -> FiberingProfile:
    """Locate the Nehari points along the ray through u.

    H > 0 with lam H below psi(t*): two crossings t1 < t* < t2 (local
    minimum / local maximum of phi).  H <= 0: the single global-maximum
    crossing, stored in t1.  H > 0 with the level at or above psi(t*):
    no branch, with a diagnostic.
    """
    ray = RayScalars.build(u, spec)
    lam = spec.exps.lam
    level = lam * ray.H
    tstar = find_tstar(ray)
    psi_star = ray.psi(tstar)
    norm = ray.A ** (1.0 / spec.exps.n)

    if h_classify(ray.H) != "H+":
        # psi decreases from psi(t*) > 0 >= level to -infinity: one crossing
        t_hi = tstar
        while _saturating(ray.psi)(t_hi) > level:
            t_hi *= 2.0
            if t_hi > BRACKET_HI:
                raise BracketNotFound("psi stayed above the level up to the scan bound")
        t1 = _find_level_crossing(ray, level, tstar, t_hi)
        return FiberingProfile(norm=norm, H=ray.H, case_tag="HNonPositive",
                               branch_count=1, t_star=tstar, t1=t1,
                               psi_at_star=psi_star, level=level, ray=ray)

    if level >= psi_star - abs(psi_star) * 1e-13:
        return FiberingProfile(norm=norm, H=ray.H, case_tag="HPositive",
                               branch_count=0, t_star=tstar, psi_at_star=psi_star,
                               level=level,
                               diagnostic="lam H(u) >= psi(t*): concave level too high",
                               ray=ray)

    if level <= H_DEADBAND:
        # degenerate lam -> 0 edge: only the decreasing-side crossing exists
        t_hi = tstar
        while _saturating(ray.psi)(t_hi) > level:
            t_hi *= 2.0
            if t_hi > BRACKET_HI:
                raise BracketNotFound("psi stayed above the level up to the scan bound")
        t2 = _find_level_crossing(ray, level, tstar, t_hi)
        return FiberingProfile(norm=norm, H=ray.H, case_tag="HPositive",
                               branch_count=1, t_star=tstar, t2=t2,
                               psi_at_star=psi_star, level=level,
                               diagnostic="lam H(u) <= 0: no concave dip",
                               ray=ray)

    # rising-side crossing t1 in (0, t*)
    t_lo = tstar
    while ray.psi(t_lo) > level:
        t_lo *= 0.25
        if t_lo < LEVEL_LO:
            raise BracketNotFound("psi stayed above the level down to the scan floor")
    t1 = _find_level_crossing(ray, level, t_lo, tstar)

    # falling-side crossing t2 in (t*, inf)
    t_hi = tstar
    while _saturating(ray.psi)(t_hi) > level:
        t_hi *= 2.0
        if t_hi > BRACKET_HI:
            raise BracketNotFound("psi stayed above the level up to the scan bound")
    t2 = _find_level_crossing(ray, level, tstar, t_hi)

    return FiberingProfile(norm=norm, H=ray.H, case_tag="HPositive", branch_count=2,
                           t_star=tstar, t1=t1, t2=t2, psi_at_star=psi_star,
                           level=level, ray=ray)


@dataclass
class NehariClass:
    """Membership label and the classifying second derivative phi''(1)."""

    label: str  # "NPlus" | "NMinus" | "NZero" | "NotOnNehari"
    second_derivative: float


def nehari_classify(u: Field, spec: ProblemSpec) -> NehariClass:
    """Classify u by phi'(1) (on-manifold test) and the sign of phi''(1)."""
    if spec.grid.seminorm_pow(u.values) == 0.0:
        return NehariClass("NotOnNehari", 0.0)
    ray = RayScalars.build(u, spec)
    d1 = ray.phi_d1(1.0)
    if abs(d1) > ONMANIFOLD_DEADBAND * max(ray.phi_d1_scale(1.0), 1e-300):
        return NehariClass("NotOnNehari", ray.phi_d2(1.0))
    d2 = ray.phi_d2(1.0)
    scale = abs((2 * spec.exps.n - 1) * ray.kirch.coefficient(ray.A) * ray.A) + abs(ray.S_gp(1.0))
    if abs(d2) <= CLASSIFY_DEADBAND * max(scale, 1e-300):
        return NehariClass("NZero", d2)
    return NehariClass("NPlus" if d2 > 0 else "NMinus", d2)


# ---------------------------------------------------------------------------
# admissibility of the concave perturbation strength
# ---------------------------------------------------------------------------

@dataclass
class AdmissibilityReport:
    in_lambda_set: bool
    norm_power: float          # ||u||^{3n/2}
    derivative_integral: float  # int g'(u) u^2
    lam_m_integrand: float
    step3_bound: Optional[float]
    lam: float
    lam_admissible: Optional[bool]


def lambda_set_threshold(spec: ProblemSpec) -> float:
    e, k = spec.exps, spec.kirchhoff
    if not k.is_affine:
        raise ValueError("the admissible set is defined for the affine coefficient")
    return 2.0 * math.sqrt(k.a * k.b * (2 * e.n - 1 - e.q) * (e.n - 1 - e.q))


def lambda_admissibility(u: Field, spec: ProblemSpec, C1: Optional[float] = None) -> AdmissibilityReport:
    """Per-direction admissibility diagnostics.

    Reports whether u lies in the admissible set
    ||u||^{3n/2} <= int g'(u) u^2 / (2 sqrt(ab(2n-1-q)(n-1-q))), the value
    of the positivity integrand
    int (p+2-2n+beta|u|^beta)|u|^{p+2} e^{|u|^beta} - (2n-1-q) lam H(u),
    and, when a C1 estimate is supplied, the closed-form strength bound
    lam < (C1/l)^{(k-1)/k} / (2n-q-1).
    """
    e = spec.exps
    ray = RayScalars.build(u, spec)
    gpu2 = ray.S_gp(1.0)
    norm_pow = (ray.A ** (1.0 / e.n)) ** (1.5 * e.n)
    member = norm_pow <= gpu2 / lambda_set_threshold(spec)

    vals = ray.u
    integ = float(ray.w @ ((e.p + 2 - 2 * e.n + e.beta * ray.absu_beta)
                           * np.abs(vals) ** (e.p + 2) * np.exp(ray.absu_beta)))
    lam_m = integ - (2 * e.n - 1 - e.q) * e.lam * ray.H

    bound = None
    admissible = None
    if C1 is not None:
        l = spec.weight.l_norm
        bound = (C1 / l) ** ((e.k - 1.0) / e.k) / (2 * e.n - e.q - 1.0)
        admissible = e.lam < bound
    return AdmissibilityReport(in_lambda_set=bool(member), norm_power=norm_pow,
                               derivative_integral=gpu2, lam_m_integrand=lam_m,
                               step3_bound=bound, lam=e.lam, lam_admissible=admissible)


def estimate_C1(spec: ProblemSpec, directions) -> float:
    """Sampled lower-estimate of the positivity constant C1.

    For each direction the admissible set is entered at a unique boundary
    scale (membership is monotone in the ray parameter because the
    derivative integral grows exponentially while the norm power grows
    polynomially); the positivity integrand is increasing along the ray, so
    its infimum over the ray's admissible part sits at that boundary scale.
    The reported value is the minimum over the supplied direction family -
    an estimate, not a certified infimum.
    """
    e = spec.exps
    thresh = lambda_set_threshold(spec)
    best = math.inf
    for u in directions:
        ray = RayScalars.build(u, spec)
        if h_classify(ray.H) == "H-":
            continue
        norm = ray.A ** (1.0 / e.n)

        def excess(c):
            try:
                return ray.S_gp(c) / thresh - (c * norm) ** (1.5 * e.n)
            except SaturationError:
                return math.inf

        lo, hi = 1.0, 1.0
        while excess(lo) > 0.0:
            lo *= 0.5
            if lo < BRACKET_LO:
                break
        while excess(hi) < 0.0:
            hi *= 2.0
            if hi > BRACKET_HI:
                raise BracketNotFound("no admissible-set boundary scale found")
        if lo == hi:
            c0 = lo
        else:
            c0 = optimize.brentq(excess, lo, hi, rtol=1e-12)
        vals = c0 * ray.u
        ab = np.abs(vals) ** e.beta
        integ = float(ray.w @ ((e.p + 2 - 2 * e.n + e.beta * ab)
                               * np.abs(vals) ** (e.p + 2) * np.exp(ab)))
        best = min(best, integ)
    return best
