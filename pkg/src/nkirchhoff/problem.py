"""Problem data and assembly of the energy and weak-form residual.

Two problem kinds share one container:

* ``two_branch`` - the affine-Kirchhoff problem with reaction
  g(u) + lam h |u|^{q-1} u driven by a (possibly sign-changing) weight h,
* ``ground_state`` - the generic problem with nonlinearity f(x, u).

The discrete energy is an exact function of the nodal values,

    J(u) = (1/n) M(seminorm_pow(u)) - lam/(q+1) sum_i w_i h_i |u_i|^{q+1}
           - sum_i w_i G(u_i)            (two_branch)
    J(u) = (1/n) M(seminorm_pow(u)) - sum_i w_i F(x_i, u_i)   (ground_state)

and ``residual`` assembles its exact nodal gradient (up to the tiny
|grad u| regularisation used for n > 2), which is simultaneously the
discrete weak form of the PDE tested against the nodal basis.  An optional
nodal source field supports manufactured-solution verification.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import scalars
from .errors import NKirchhoffError, SaturationError
from .grid import Field, Grid
from .scalars import ExponentSet, GenericNonlinearity, KirchhoffSpec

# |grad u|^{n-2} regularisation used in residual assembly only (n > 2)
GRAD_REGULARISATION = 1e-10

# dead band for sign classification of the weighted concave term
H_DEADBAND = 1e-12


@dataclass
class Weight:
    """Nodal weight h with cached norms.

    gamma_norm caches int |h|^gamma and l_norm caches l = int |h|^{k/(k-1)}
    for the exponent set the weight was built against.
    """

    grid: Grid
    values: np.ndarray
    gamma_norm: float
    l_norm: float

    @staticmethod
    def build(grid: Grid, values: np.ndarray, exps: ExponentSet) -> "Weight":
        v = np.asarray(values, dtype=float)
        if v.shape != (grid.num_nodes,):
            raise NKirchhoffError("weight values do not match the grid")
        if not np.any(v > 0.0):
            raise NKirchhoffError("weight must satisfy h+ != 0 (no positive part found)")
        gamma_norm = grid.integrate(np.abs(v) ** exps.gamma)
        l_norm = grid.integrate(np.abs(v) ** exps.kprime)
        return Weight(grid=grid, values=v, gamma_norm=gamma_norm, l_norm=l_norm)


def builtin_weight(name: str, grid: Grid, exps: ExponentSet) -> Weight:
    """Named weights: one, sin2pix, gaussian-bump, indicator."""
    x = grid.coords
    if name == "one":
        vals = np.ones(grid.num_nodes)
    elif name == "sin2pix":
        vals = np.sin(2.0 * np.pi * x[:, 0])
    elif name == "gaussian-bump":
        r2 = ((x - grid.center) ** 2).sum(axis=1)
        vals = np.exp(-r2 / (2 * (0.25 * grid.inradius) ** 2))
    elif name == "indicator":
        r2 = ((x - grid.center) ** 2).sum(axis=1)
        vals = (r2 < (0.5 * grid.inradius) ** 2).astype(float)
    else:
        raise NKirchhoffError(f"unknown builtin weight {name!r}")
    return Weight.build(grid, vals, exps)


@dataclass
class ProblemSpec:
    """Everything needed to assemble energies and residuals on one grid."""

    grid: Grid
    kirchhoff: KirchhoffSpec
    exps: Optional[ExponentSet] = None
    weight: Optional[Weight] = None
    nonlinearity: Optional[GenericNonlinearity] = None
    source: Optional[np.ndarray] = None  # nodal manufactured source

    def __post_init__(self):
        if self.exps is not None:
            if self.weight is None:
                raise NKirchhoffError("two-branch problem needs a weight")
            if self.exps.n != self.grid.n:
                raise NKirchhoffError("exponent set dimension does not match the grid")
        elif self.nonlinearity is None:
            raise NKirchhoffError("spec needs either an exponent set or a nonlinearity")
        elif self.nonlinearity.n != self.grid.n:
            raise NKirchhoffError("nonlinearity dimension does not match the grid")

    @property
    def kind(self) -> str:
        return "two_branch" if self.exps is not None else "ground_state"


def two_branch_spec(grid, exps, kirchhoff, weight_values=None, weight_name="one",
                    source=None) -> ProblemSpec:
    if weight_values is None:
        w = builtin_weight(weight_name, grid, exps)
    else:
        w = Weight.build(grid, weight_values, exps)
    return ProblemSpec(grid=grid, kirchhoff=kirchhoff, exps=exps, weight=w, source=source)


def ground_state_spec(grid, nonlinearity, kirchhoff, source=None) -> ProblemSpec:
    return ProblemSpec(grid=grid, kirchhoff=kirchhoff, nonlinearity=nonlinearity,
                       source=source)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _check_saturation(u: Field, spec: ProblemSpec):
    if spec.kind == "two_branch":
        bad = scalars.saturation_mask(u.values, spec.exps)
    else:
        bad = (np.abs(u.values) ** spec.nonlinearity.exponent
               > scalars.LOG_FLOAT_MAX - 10.0)
    if np.any(bad):
        node = int(np.argmax(bad))
        raise SaturationError(
            f"field value {u.values[node]:.6g} at node {node} exceeds the "
            f"exponential range", node=node)


def H_eval(u: Field, spec: ProblemSpec) -> float:
    """Weighted concave functional H(u) = int h |u|^{q+1}."""
    w = spec.weight
    return float(spec.grid.node_weights @ (w.values * np.abs(u.values) ** (spec.exps.q + 1)))


def h_classify(value: float) -> str:
    """Sign class of H(u) with a +-1e-12 dead band: 'H+', 'H-' or 'H0'."""
    if value > H_DEADBAND:
        return "H+"
    if value < -H_DEADBAND:
        return "H-"
    return "H0"


def energy(u: Field, spec: ProblemSpec) -> float:
    """J(u); exactly zero for the zero field."""
    _check_saturation(u, spec)
    g = spec.grid
    A = g.seminorm_pow(u.values)
    val = scalars.kirchhoff_M(A, spec.kirchhoff) / g.n
    if spec.kind == "two_branch":
        e = spec.exps
        val -= e.lam / (e.q + 1.0) * H_eval(u, spec)
        val -= float(g.node_weights @ scalars.G_eval(u.values, e))
    else:
        F = scalars.generic_F_eval(g.coords, u.values, spec.nonlinearity)
        val -= float(g.node_weights @ F)
    if spec.source is not None:
        val -= float(g.node_weights @ (spec.source * u.values))
    return val


def reaction(u: Field, spec: ProblemSpec) -> np.ndarray:
    """Pointwise right-hand side: g(u) + lam h |u|^{q-1} u, or f(x, u)."""
    _check_saturation(u, spec)
    if spec.kind == "two_branch":
        e = spec.exps
        out = scalars.g_eval(u.values, e)
        out = out + e.lam * spec.weight.values * np.sign(u.values) * np.abs(u.values) ** e.q
    else:
        out = scalars.generic_f_eval(spec.grid.coords, u.values, spec.nonlinearity)
    if spec.source is not None:
        out = out + spec.source
    return out


def residual(u: Field, spec: ProblemSpec):
    """Discrete weak-form residual over interior nodes and its dual norm.

    r_i = m(||u||^n) int |grad u|^{n-2} grad u . grad phi_i  -  w_i rhs(u_i);
    the dual norm is sqrt(sum_i r_i^2 / w_i) (a discrete L^2 norm of the
    pointwise residual).  This vector is the exact gradient of ``energy``
    with respect to interior nodal values when n = 2.
    """
    g = spec.grid
    A = g.seminorm_pow(u.values)
    mcoef = float(spec.kirchhoff.coefficient(A))
    reg = 0.0 if g.n == 2 else GRAD_REGULARISATION
    K = g.kirchhoff_flux_divergence(u.values, reg=reg)
    r_full = mcoef * K - g.node_weights * reaction(u, spec)
    r = r_full[g.interior_idx]
    wint = g.node_weights[g.interior_idx]
    norm = float(np.sqrt(np.sum(r * r / wint)))
    return r, norm


def residual_tolerance(u: Field, tol: float = 1e-8) -> float:
    """Default acceptance threshold tol * (1 + ||u||)."""
    return tol * (1.0 + u.norm())


def energy_gradient_interior(u: Field, spec: ProblemSpec) -> np.ndarray:
    """Gradient of the discrete energy wrt interior nodal values (equals the
    residual vector; kept as a named alias for descent code)."""
    r, _ = residual(u, spec)
    return r
