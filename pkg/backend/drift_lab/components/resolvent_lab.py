"""
Resolvent problems (alpha - L) u = f: solver, norm bounds, identities, the
log-weighted estimate and the convergence studies over a mollification family.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.errors import ValidationError
from ..core.grid import (
    GridSpec,
    ScalarField,
    VectorField,
    displacement_from,
    inner,
    l2_norm,
    require_same_grid,
)
from .linear_solver import DEFAULT_RTOL, krylov_solve
from .pde_core import DiffusionCoefficient, DiscreteOperator, bilinear_form, dirichlet_energy, evolve

logger = logging.getLogger(__name__)

BOUND_SLACK = 1e-8


@dataclass(frozen=True)
class ResolventResult:
    """u = (alpha - L)^{-1} f together with the norms the bound checks need"""

    alpha: float
    u: ScalarField
    f: ScalarField
    residual: float
    u_l2: float
    u_grad_l2: float
    f_l2: float
    u_energy: float

    @property
    def u_h1(self) -> float:
        return float(np.sqrt(self.u_l2 ** 2 + self.u_grad_l2 ** 2))


def resolve(op: DiscreteOperator, alpha: float, f: ScalarField, rtol: float = DEFAULT_RTOL) -> ResolventResult:
    """
    Solve (alpha - L) u = f.

    Args:
        op: Assembled operator
        alpha: Spectral shift, > 0
        f: Right-hand side
        rtol: Relative residual of the solve

    Returns:
        ResolventResult
    """
    grid = require_same_grid(op.grid, f.grid)
    if not alpha > 0:
        raise ValidationError(f"resolvent parameter alpha must be positive, got {alpha}")

    def shifted(x: np.ndarray) -> np.ndarray:
        return alpha * x - op.apply(x)

    u = krylov_solve(shifted, f.values, op.shifted_preconditioner(alpha, 1.0), rtol=rtol,
                     mean_gain=alpha, label=f"resolvent alpha={alpha:g}")
    f_l2 = l2_norm(f.values, grid)
    residual = l2_norm(shifted(u) - f.values, grid) / f_l2 if f_l2 > 0 else 0.0
    # gradient norm in the same discretization as the operator's diffusion
    grad_l2 = float(np.sqrt(max(dirichlet_energy(DiffusionCoefficient.identity(grid), u, op.diffusion_mode), 0.0)))
    return ResolventResult(
        alpha=float(alpha),
        u=ScalarField(grid, u),
        f=f,
        residual=residual,
        u_l2=l2_norm(u, grid),
        u_grad_l2=grad_l2,
        f_l2=f_l2,
        u_energy=op.dirichlet_energy(u),
    )


def resolvent_bounds(r: ResolventResult, lam: float) -> Dict[str, float]:
    """
    Ratios of the two resolvent estimates

        ||u||_2 <= ||f||_2 / alpha,   ||u||_{H^1} <= ||f||_2 / min(lam, alpha)

    each passing when the ratio is at most 1 + 1e-8.
    """
    if r.f_l2 == 0.0:
        return {"l2_ratio": 0.0, "h1_ratio": 0.0, "l2_pass": True, "h1_pass": True}
    l2_ratio = r.u_l2 * r.alpha / r.f_l2
    h1_ratio = r.u_h1 * min(lam, r.alpha) / r.f_l2
    return {
        "l2_ratio": float(l2_ratio),
        "h1_ratio": float(h1_ratio),
        "l2_pass": bool(l2_ratio <= 1 + BOUND_SLACK),
        "h1_pass": bool(h1_ratio <= 1 + BOUND_SLACK),
    }


def energy_inequality_margin(r: ResolventResult, lam: float) -> float:
    """
    (||f|| ||u|| (1 + 1e-8) - (lam ||grad u||^2 + alpha ||u||^2)) / ||f||^2, so
    that grids and right-hand sides compare; non-negative when the bound holds.

    The Dirichlet energy stored with the result dominates lam ||grad u||^2 for the
    spectral discretization.
    """
    if r.f_l2 == 0.0:
        return 0.0
    lhs = lam * r.u_grad_l2 ** 2 + r.alpha * r.u_l2 ** 2
    return float((r.f_l2 * r.u_l2 * (1 + BOUND_SLACK) - lhs) / r.f_l2 ** 2)


def resolvent_identity_residual(
    r: ResolventResult,
    a: DiffusionCoefficient,
    b: VectorField,
    v: ScalarField,
    diffusion_mode: str = "spectral",
) -> float:
    """|E(u, v) + alpha (u, v) - (f, v)| / (||f|| ||v||)"""
    grid = require_same_grid(a.grid, b.grid, r.u.grid, v.grid)
    scale = r.f_l2 * l2_norm(v.values, grid)
    if scale == 0.0:
        return 0.0
    energy = bilinear_form(a, b, r.u, v, diffusion_mode=diffusion_mode)
    value = energy + r.alpha * inner(r.u.values, v.values, grid) - inner(r.f.values, v.values, grid)
    return abs(value) / scale


def first_resolvent_identity_residual(op: DiscreteOperator, alpha: float, beta: float, f: ScalarField) -> float:
    """||R_a f - R_b f - (b - a) R_a R_b f|| / ||R_a f||"""
    ra = resolve(op, alpha, f).u.values
    rb = resolve(op, beta, f)
    rarb = resolve(op, alpha, rb.u).u.values
    scale = l2_norm(ra, op.grid)
    if scale == 0.0:
        return 0.0
    return l2_norm(ra - rb.u.values - (beta - alpha) * rarb, op.grid) / scale


# ---------------------------------------------------------------------------
# Weighted estimate and tails
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogWeight:
    """
    w(x) = [ln(|x - x_c|^2 + e)]^(2 gamma_w) with minimum-image distances, so the
    weight is clamped at the periodic seam.
    """

    grid: GridSpec
    gamma_w: float

    def __post_init__(self):
        if self.gamma_w < 0:
            raise ValidationError(f"gamma_w must be >= 0, got {self.gamma_w}")

    @cached_property
    def values(self) -> np.ndarray:
        r2 = np.sum(displacement_from(self.grid) ** 2, axis=0)
        return np.log(r2 + np.e) ** (2.0 * self.gamma_w)


def log_weighted_ratio(r: ResolventResult, w: LogWeight) -> float:
    """sum w u^2 / sum w f^2 for u = (1 - L)^{-1} f"""
    require_same_grid(r.u.grid, w.grid)
    if r.alpha != 1.0:
        raise ValidationError(f"the weighted estimate is normalized for alpha = 1, got {r.alpha}")
    denominator = float(np.sum(w.values * r.f.values ** 2))
    if denominator == 0.0:
        raise ValidationError("weighted ratio needs a nonzero right-hand side f")
    return float(np.sum(w.values * r.u.values ** 2)) / denominator


def weight_gradient_bound_check(w: LogWeight) -> float:
    """
    Largest ratio |grad psi0| / (2|x| / ((|x|^2 + 1) ln(|x|^2 + e))) for the
    log-log weight psi0 = ln ln(|x|^2 + e), using centered differences away from
    the center node and the periodic seam. Values <= 1 confirm the gradient bound.
    """
    grid = w.grid
    r2 = np.sum(displacement_from(grid) ** 2, axis=0)
    psi0 = np.log(np.log(r2 + np.e))
    grad = np.stack([
        (np.roll(psi0, -1, axis=i) - np.roll(psi0, 1, axis=i)) / (2.0 * grid.h) for i in range(grid.n)
    ])
    grad_norm = np.sqrt(np.sum(grad ** 2, axis=0))
    r = np.sqrt(r2)
    bound = 2.0 * r / ((r2 + 1.0) * np.log(r2 + np.e))
    mask = (r > 0) & (r < grid.box_length / 2 - 2 * grid.h)
    return float(np.max(grad_norm[mask] / bound[mask]))


def tail_mass(u: ScalarField, r: float) -> float:
    """sum over |x - x_c| > r of u^2 h^n"""
    if not r < u.grid.box_length / 2:
        raise ValidationError(f"tail radius must be below L/2 = {u.grid.box_length / 2}, got {r}")
    dist = np.sqrt(np.sum(displacement_from(u.grid) ** 2, axis=0))
    return float(np.sum(u.values[dist > r] ** 2) * u.grid.cell_volume)


# ---------------------------------------------------------------------------
# Families and cross-route checks
# ---------------------------------------------------------------------------

def resolvent_convergence(
    family: Sequence[DiscreteOperator],
    alpha: float,
    f: ScalarField,
    epsilons: Optional[Sequence[float]] = None,
) -> Dict[str, List[float]]:
    """
    Cauchy differences ||u_k - u_{k+1}||_2 and distances ||u_k - u_ref||_2 to the
    finest member along a mollification family ordered by decreasing epsilon.
    """
    if len(family) < 3:
        raise ValidationError(f"convergence needs at least 3 family members, got {len(family)}")
    if epsilons is not None:
        if len(epsilons) != len(family):
            raise ValidationError("one epsilon per family member is required")
        if np.any(np.diff(epsilons) >= 0):
            raise ValidationError("family epsilons must be strictly decreasing")
    grid = require_same_grid(*(op.grid for op in family))
    solutions = [resolve(op, alpha, f).u.values for op in family]
    cauchy = [l2_norm(solutions[k] - solutions[k + 1], grid) for k in range(len(solutions) - 1)]
    to_ref = [l2_norm(s - solutions[-1], grid) for s in solutions[:-1]]
    return {"cauchy": cauchy, "to_reference": to_ref}


def semigroup_via_resolvent(op: DiscreteOperator, u0: ScalarField, t: float, n: int) -> ScalarField:
    """((n/t) R_{n/t})^n u0, i.e. n implicit Euler steps of size t/n"""
    if n < 1:
        raise ValidationError(f"iteration count must be >= 1, got {n}")
    if not t > 0:
        raise ValidationError(f"t must be positive, got {t}")
    alpha = n / t
    u = u0
    for _ in range(n):
        u = resolve(op, alpha, alpha * u).u
    return u


def uniqueness_gap(op: DiscreteOperator, u0: ScalarField, t: float, n: int, dt: float) -> Dict[str, float]:
    """
    Compare time stepping (theta = 1/2) with resolvent iteration at time t.

    Returns:
        Dict with the absolute gap, the gap relative to ||u0||_2 and both final norms
    """
    stepped = evolve(op, u0, t, dt, theta=0.5, record_every=max(1, int(round(t / dt)))).final
    iterated = semigroup_via_resolvent(op, u0, t, n)
    grid = op.grid
    gap = l2_norm(stepped.values - iterated.values, grid)
    scale = l2_norm(u0.values, grid)
    return {
        "gap": gap,
        "relative_gap": gap / scale if scale > 0 else 0.0,
        "stepped_l2": l2_norm(stepped.values, grid),
        "iterated_l2": l2_norm(iterated.values, grid),
    }
