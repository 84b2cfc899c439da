"""
Fundamental-solution slices and the checks built on them: conservativeness in
both variables, Chapman-Kolmogorov, the Duhamel perturbation bound, kernel
stability along a mollification family and the sub-Markov property.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import InvariantError, ValidationError
from ..core.grid import ScalarField, VectorField, band_limit, l1_norm, node_point, require_same_grid
from .pde_core import DiscreteOperator, evolve, step_count

logger = logging.getLogger(__name__)

DIRECTIONS = ("forward", "adjoint")
DEFAULT_DT = 1e-3
DUHAMEL_SLACK = 0.05
MASS_TOLERANCE = 1e-3
UNDERSHOOT_TOLERANCE = 1e-8


@dataclass(frozen=True)
class KernelSlice:
    """x -> Gamma(t, x, y) (forward) or the adjoint kernel, on the grid"""

    t: float
    source: Tuple[int, ...]
    values: ScalarField
    direction: str = "forward"
    theta: float = 0.5

    @property
    def grid(self):
        return self.values.grid

    @property
    def mass(self) -> float:
        return self.values.mass()

    @property
    def peak(self) -> float:
        return float(self.values.values.max())

    @property
    def source_point(self) -> np.ndarray:
        return node_point(self.grid, self.source)

    @property
    def min_relative(self) -> float:
        """Most negative value relative to the peak (0 when non-negative)"""
        return min(0.0, float(self.values.values.min()) / self.peak) if self.peak > 0 else 0.0

    def check_invariants(self) -> "KernelSlice":
        """Unit mass within 1e-3; theta = 1 slices may not undershoot below -1e-8 peak"""
        if abs(self.mass - 1.0) > MASS_TOLERANCE:
            raise InvariantError(f"{self.direction} kernel slice at t={self.t} has mass {self.mass:.9f}")
        if self.theta == 1.0 and self.min_relative < -UNDERSHOOT_TOLERANCE:
            raise InvariantError(
                f"theta = 1 kernel slice at t={self.t} undershoots to {self.min_relative:.3e} of its peak"
            )
        return self


def default_dt(t: float, dt: Optional[float] = None) -> float:
    """Largest step <= dt (default 1e-3) that divides t"""
    target = DEFAULT_DT if dt is None else dt
    return t / max(1, math.ceil(t / target - 1e-9))


def discrete_delta(grid, y: Sequence[int], band_limited: bool = False) -> ScalarField:
    """
    h^{-n} at node y, zero elsewhere.

    band_limited drops the Nyquist modes, which the spectral operator leaves
    untouched.
    """
    values = np.zeros(grid.shape)
    values[tuple(int(i) % grid.points_per_axis for i in y)] = 1.0 / grid.cell_volume
    if band_limited:
        values = band_limit(values, grid)
    return ScalarField(grid, values)


def _band_limited(op: DiscreteOperator, theta: float) -> bool:
    # theta = 1 steps on the flux / upwind operator, which resolves every mode
    return op.diffusion_mode == "spectral" and theta < 1.0


def _operator_for(op: DiscreteOperator, direction: str) -> DiscreteOperator:
    if direction not in DIRECTIONS:
        raise ValidationError(f"unknown kernel direction '{direction}', expected one of {DIRECTIONS}")
    return op if direction == op.direction else op.adjoint()


def estimate_kernel(
    op: DiscreteOperator,
    t: float,
    y: Sequence[int],
    direction: str = "forward",
    dt: Optional[float] = None,
    theta: float = 0.5,
) -> KernelSlice:
    """
    Evolve the discrete delta at node y to time t.

    The slice is checked for unit mass (1e-3) and, at theta = 1, for
    non-negativity (1e-8 of the peak); a failure raises InvariantError.

    Args:
        op: Forward operator L
        t: Time, > 0
        y: Source node index
        direction: "forward" (L) or "adjoint" (L*, drift sign flipped)
        dt: Step; adjusted down to divide t (default 1e-3)
        theta: Scheme parameter

    Returns:
        KernelSlice
    """
    if not t > 0:
        raise ValidationError(f"kernel time must be positive, got {t}")
    source = tuple(int(i) % op.grid.points_per_axis for i in y)
    if len(source) != op.grid.n:
        raise ValidationError(f"source index must have {op.grid.n} entries")
    step = default_dt(t, dt)
    delta = discrete_delta(op.grid, source, band_limited=_band_limited(op, theta))
    traj = evolve(_operator_for(op, direction), delta, t, step,
                  theta=theta, record_every=step_count(t, step))
    kslice = KernelSlice(t=float(t), source=source, values=traj.final, direction=direction, theta=theta)
    kslice.check_invariants()
    logger.debug(f"kernel {direction} t={t} y={source}: mass={kslice.mass:.12f}, peak={kslice.peak:.6g}")
    return kslice


def conservativeness_check(
    op: DiscreteOperator, t: float, dt: Optional[float] = None, theta: float = 0.5
) -> Tuple[float, float]:
    """
    Evolve the constant 1 under L and under L*.

    Returns:
        (max_x |int Gamma(t,x,y) dy - 1|, max_y |int Gamma(t,x,y) dx - 1|)
    """
    if not t > 0:
        raise ValidationError(f"time must be positive, got {t}")
    step = default_dt(t, dt)
    one = ScalarField(op.grid, np.ones(op.grid.shape))
    deviations = []
    for direction in DIRECTIONS:
        final = evolve(_operator_for(op, direction), one, t, step, theta=theta,
                       record_every=step_count(t, step)).final
        deviations.append(float(np.max(np.abs(final.values - 1.0))))
    return deviations[0], deviations[1]


def chapman_kolmogorov_residual(
    op: DiscreteOperator,
    t: float,
    s: float,
    y: Sequence[int],
    dt: Optional[float] = None,
    leg_dts: Optional[Tuple[float, float]] = None,
    theta: float = 0.5,
) -> float:
    """
    ||Gamma(t+s, ., y) - sum_z Gamma(t, ., z) Gamma(s, z, y) h^n||_1 / ||Gamma(t+s, ., y)||_1.

    The composition is computed by evolving the s-slice for a further time t.
    With leg_dts unset both legs use the direct run's step and the residual
    vanishes up to roundoff; otherwise it measures the time-discretization error.
    """
    if not (t > 0 and s > 0):
        raise ValidationError(f"times must be positive, got t={t}, s={s}")
    step = default_dt(t + s, dt)
    if leg_dts is None:
        # matched legs: the direct step must divide both legs
        step_count(s, step)
        step_count(t, step)
        dt_s, dt_t = step, step
    else:
        dt_s, dt_t = default_dt(s, leg_dts[0]), default_dt(t, leg_dts[1])

    direct = estimate_kernel(op, t + s, y, dt=step, theta=theta).values
    first = estimate_kernel(op, s, y, dt=dt_s, theta=theta).values
    composed = evolve(op, first, t, dt_t, theta=theta, record_every=step_count(t, dt_t)).final
    scale = l1_norm(direct.values, op.grid)
    return l1_norm(direct.values - composed.values, op.grid) / scale


def duhamel_residual(
    op_b: DiscreteOperator,
    op_bk: DiscreteOperator,
    t: float,
    y: Sequence[int],
    dt: Optional[float] = None,
    u0: Optional[ScalarField] = None,
    theta: float = 0.5,
    slack: float = DUHAMEL_SLACK,
) -> Dict[str, float]:
    """
    Perturbation bound between the drifts b and b_k.

    Evolves u0 (default the discrete delta at y) under both operators and
    compares ||u_k(t) - u(t)||_1 with int_0^t ||(b - b_k).grad u||_1 dtau, the drift
    difference applied in the operators' skew form and integrated with the
    scheme's step-midpoint rule.

    Returns:
        Dict with difference, bound, ratio and holds (difference <= (1 + slack) bound + 1e-12 ||u0||_1)
    """
    grid = require_same_grid(op_b.grid, op_bk.grid)
    if op_b.diffusion_mode != op_bk.diffusion_mode:
        raise ValidationError("both operators must use the same diffusion discretization")
    u0 = discrete_delta(grid, y, band_limited=_band_limited(op_b, theta)) if u0 is None else u0
    require_same_grid(grid, u0.grid)
    step = default_dt(t, dt)

    traj = evolve(op_b, u0, t, step, theta=theta)
    traj_k = evolve(op_bk, u0, t, step, theta=theta, record_every=step_count(t, step))
    difference = l1_norm(traj_k.final.values - traj.final.values, grid)

    # difference of two certified fields, hence divergence-free as well
    gap = VectorField(grid, op_b.b.components - op_bk.b.components, True,
                      op_b.b.max_divergence + op_bk.b.max_divergence)
    delta_op = DiscreteOperator(grid, op_b.a, gap, op_b.diffusion_mode)
    if theta == 1.0:
        delta_op = delta_op.monotone()
    bound = 0.0
    for j in range(traj.times.size - 1):
        midpoint = theta * traj.snapshots[j + 1] + (1.0 - theta) * traj.snapshots[j]
        bound += (traj.times[j + 1] - traj.times[j]) * l1_norm(delta_op.advection(midpoint), grid)

    floor = 1e-12 * l1_norm(u0.values, grid)
    return {
        "difference": difference,
        "bound": bound,
        "ratio": difference / bound if bound > 0 else (0.0 if difference <= floor else np.inf),
        "holds": bool(difference <= (1.0 + slack) * bound + floor),
    }


def kernel_limit_stability(
    family: Sequence[DiscreteOperator],
    t: float,
    y: Sequence[int],
    dt: Optional[float] = None,
    theta: float = 0.5,
    workers: int = 1,
) -> Dict[str, List[float]]:
    """
    L1 differences of consecutive slices Gamma_{eps_k}(t, ., y) along a family
    ordered by decreasing epsilon, plus every slice's mass.
    """
    if len(family) < 3:
        raise ValidationError(f"kernel stability needs at least 3 family members, got {len(family)}")
    grid = require_same_grid(*(op.grid for op in family))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        slices = list(pool.map(lambda op: estimate_kernel(op, t, y, dt=dt, theta=theta), family))
    differences = [
        l1_norm(slices[k].values.values - slices[k + 1].values.values, grid) for k in range(len(slices) - 1)
    ]
    return {"differences": differences, "masses": [s.mass for s in slices]}


def markov_property_check(
    op: DiscreteOperator, u0: ScalarField, T: float, dt: float
) -> Dict[str, float]:
    """
    Implicit Euler run from 0 <= u0 <= 1 (on op.monotone()): reports the minimum, the excess over 1
    and the L1 contraction ratio, and whether all three stay within 1e-8.
    """
    require_same_grid(op.grid, u0.grid)
    lo, hi = float(u0.values.min()), float(u0.values.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"initial data must lie in [0, 1], got range [{lo}, {hi}]")
    traj = evolve(op, u0, T, dt, theta=1.0)
    minimum = float(traj.snapshots.min())
    excess = float(traj.snapshots.max()) - 1.0
    l1_0 = l1_norm(u0.values, op.grid)
    l1_ratio = l1_norm(traj.final.values, op.grid) / l1_0 if l1_0 > 0 else 0.0
    tol = 1e-8
    return {
        "min": minimum,
        "max_excess": excess,
        "l1_ratio": l1_ratio,
        "holds": bool(minimum >= -tol * max(hi, 1e-300) and excess <= tol and l1_ratio <= 1 + tol),
    }


def on_diagonal_profile(slices: Sequence[KernelSlice]) -> List[Dict[str, float]]:
    """Gamma(t, y, y) and Gamma(t, y, y) t^{n/2} for each slice"""
    rows = []
    for s in slices:
        value = float(s.values.values[s.source])
        rows.append({"t": s.t, "on_diagonal": value, "scaled": value * s.t ** (s.grid.n / 2.0)})
    return rows
