"""
Discrete operator L = div(a grad) - b.grad on the periodic box, the theta-scheme
time stepper, and the energy / weak-form checks of the Cauchy problem.

Diffusion is either spectral (default) or a second-order finite-volume flux
stencil ("flux", diagonal a only). Advection is the spectral skew form
1/2 (b.grad u + div(b u)) by default, whose matrix is exactly antisymmetric, so
L^T is the same operator with b replaced by -b. The "upwind" form is a donor-cell
flux on face velocities made discretely divergence-free; with flux diffusion it
assembles a sparse L with non-negative off-diagonals and zero row and column
sums, so implicit Euler on it keeps [0, 1] and mass. theta = 1 steps run on it.

The spectral parts act on the resolved band only: modes with a Nyquist index
are dropped from input and output, so the evolution leaves them unchanged.
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.integrate import trapezoid
from tqdm import tqdm

from ..core.dfsl import read_dfsl, write_dfsl
from ..core.errors import NumericalBlowupError, ShapeError, ValidationError
from ..core.grid import (
    GridSpec,
    ScalarField,
    VectorField,
    band_limit,
    divergence_array,
    from_spectral,
    gaussian_bump,
    gradient,
    inner,
    l1_norm,
    l2_norm,
    require_same_grid,
    to_spectral,
)
from ..core.tables import write_table
from .linear_solver import DEFAULT_RTOL, direct_solver, krylov_solve

logger = logging.getLogger(__name__)

DIFFUSION_MODES = ("spectral", "flux")
DRIFT_FORMS = ("skew", "direct")
ADVECTION_FORMS = ("skew", "upwind")
TEST_FUNCTION_NORMS = ("h1", "l2")


# ---------------------------------------------------------------------------
# Diffusion coefficient
# ---------------------------------------------------------------------------

@dataclass
class DiffusionCoefficient:
    """
    Symmetric, uniformly elliptic matrix field a(x).

    entries is None for the identity fast path, otherwise an array of shape
    (n, n) + grid.shape. lam is computed from the sampled eigenvalues when not given.
    """

    grid: GridSpec
    entries: Optional[np.ndarray] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.entries is None:
            self.lam = 1.0 if self.lam is None else float(self.lam)
            if not 0 < self.lam <= 1:
                raise ValidationError(f"ellipticity constant must lie in (0, 1], got {self.lam}")
            return

        n = self.grid.n
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.shape != (n, n) + self.grid.shape:
            raise ShapeError(f"diffusion entries shape {self.entries.shape} != {(n, n) + self.grid.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise ValidationError("diffusion coefficient contains non-finite values")
        if not np.allclose(self.entries, np.swapaxes(self.entries, 0, 1), rtol=0.0, atol=1e-12):
            raise ValidationError("diffusion coefficient must be symmetric at every grid point")

        eig = np.linalg.eigvalsh(np.moveaxis(self.entries.reshape(n, n, -1), -1, 0))
        lo, hi = float(eig.min()), float(eig.max())
        if self.lam is None:
            self.lam = min(lo, 1.0 / hi) if lo > 0 else lo
        self.lam = float(self.lam)
        if self.lam <= 0 or lo < self.lam * (1 - 1e-12) or hi > (1 + 1e-12) / self.lam:
            raise ValidationError(
                f"eigenvalues of a span [{lo:.6g}, {hi:.6g}], outside [lambda, 1/lambda] for lambda={self.lam:.6g}"
            )

    @property
    def is_identity(self) -> bool:
        return self.entries is None

    @cached_property
    def is_diagonal(self) -> bool:
        if self.entries is None:
            return True
        off = self.entries.copy()
        for i in range(self.grid.n):
            off[i, i] = 0.0
        return not np.any(off)

    @cached_property
    def mean_diagonal(self) -> float:
        """Average of trace(a)/n, the scalar used by the preconditioners"""
        if self.entries is None:
            return 1.0
        return float(np.mean(sum(self.entries[i, i] for i in range(self.grid.n)))) / self.grid.n

    def diagonal(self, i: int) -> np.ndarray:
        if self.entries is None:
            return np.ones(self.grid.shape)
        return self.entries[i, i]

    @classmethod
    def identity(cls, grid: GridSpec) -> "DiffusionCoefficient":
        return cls(grid)

    @classmethod
    def constant(cls, grid: GridSpec, matrix: Sequence[Sequence[float]],
                 lam: Optional[float] = None) -> "DiffusionCoefficient":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (grid.n, grid.n):
            raise ShapeError(f"constant diffusion matrix must be {grid.n}x{grid.n}, got {matrix.shape}")
        entries = np.broadcast_to(matrix.reshape((grid.n, grid.n) + (1,) * grid.n),
                                  (grid.n, grid.n) + grid.shape).copy()
        return cls(grid, entries, lam)

    @classmethod
    def diagonal_cosine(cls, grid: GridSpec, amplitude: float) -> "DiffusionCoefficient":
        """a_ii(x) = 1 + amplitude * cos(2 pi x_i / L), off-diagonals zero"""
        if not 0 <= amplitude < 1:
            raise ValidationError(f"cosine diffusion amplitude must lie in [0, 1), got {amplitude}")
        entries = np.zeros((grid.n, grid.n) + grid.shape)
        for i in range(grid.n):
            entries[i, i] = 1.0 + amplitude * np.cos(2.0 * np.pi * grid.coords[i] / grid.box_length)
        return cls(grid, entries)

    @classmethod
    def from_dfsl(cls, path, lam: Optional[float] = None) -> "DiffusionCoefficient":
        """Load n*n components (row-major) from a DFSL file"""
        grid, data = read_dfsl(path)
        if data.ndim != grid.n + 1 or data.shape[0] != grid.n ** 2:
            raise ShapeError(f"{path}: expected {grid.n ** 2} components for a diffusion matrix")
        return cls(grid, data.reshape((grid.n, grid.n) + grid.shape), lam)


def flux_symbol(grid: GridSpec) -> np.ndarray:
    """Fourier symbol of the constant-coefficient flux Laplacian"""
    return -sum((2.0 / grid.h * np.sin(0.5 * k * grid.h)) ** 2 for k in grid.wavenumbers)


def diffusion_action(a: DiffusionCoefficient, u: np.ndarray, mode: str = "spectral") -> np.ndarray:
    """div(a grad u) in the requested discretization"""
    grid = a.grid
    if mode == "spectral":
        if a.is_identity:
            return from_spectral(grid.resolved_mask * grid.laplacian_symbol * to_spectral(u, grid), grid)
        grad = gradient(band_limit(u, grid), grid)
        flux = np.einsum("ij...,j...->i...", a.entries, grad)
        return band_limit(divergence_array(flux, grid), grid)
    if mode == "flux":
        if not a.is_diagonal:
            raise ValidationError("flux diffusion mode supports diagonal coefficients only")
        out = np.zeros_like(u)
        for i in range(grid.n):
            ai = a.diagonal(i)
            face = 0.5 * (ai + np.roll(ai, -1, axis=i))
            F = face * (np.roll(u, -1, axis=i) - u) / grid.h
            out += (F - np.roll(F, 1, axis=i)) / grid.h
        return out
    raise ValidationError(f"unknown diffusion mode '{mode}', expected one of {DIFFUSION_MODES}")


def dirichlet_energy(a: DiffusionCoefficient, u: np.ndarray, mode: str = "spectral") -> float:
    """-<div(a grad u), u>, i.e. sum <a grad u, grad u> h^n in the given discretization"""
    return -inner(diffusion_action(a, u, mode), u, a.grid)


def face_velocities(b: VectorField) -> np.ndarray:
    """
    b_i on the faces x + h/2 e_i, shape (n,) + grid.shape.

    Each component is shifted by half a cell spectrally, then the set is projected
    onto the kernel of the face divergence sum_i (v_i(x) - v_i(x - h e_i)) / h,
    which therefore vanishes to round-off.
    """
    grid = b.grid
    h = grid.h
    hats = [grid.resolved_mask * to_spectral(b.components[i], grid) * np.exp(0.5j * k * h)
            for i, k in enumerate(grid.wavenumbers)]
    symbols = [(1.0 - np.exp(-1j * k * h)) / h for k in grid.wavenumbers]
    div_hat = sum(d * v for d, v in zip(symbols, hats))
    norm = sum(np.abs(d) ** 2 for d in symbols)
    correction = div_hat / np.where(norm > 0, norm, 1.0)
    return np.stack([from_spectral(v - np.conj(d) * correction, grid) for d, v in zip(symbols, hats)])


def face_divergence(faces: np.ndarray, grid: GridSpec) -> np.ndarray:
    return sum((faces[i] - np.roll(faces[i], 1, axis=i)) / grid.h for i in range(grid.n))


def upwind_matrix(a: DiffusionCoefficient, b: VectorField) -> sparse.csr_matrix:
    """
    Sparse L = flux diffusion - donor-cell advection on face velocities.

    Across the face between node p and its + neighbour q the diffusive coupling is
    the face-averaged a_ii / h^2 and the advective flux is v+ u_p + v- u_q.
    Off-diagonals are non-negative and every column sums to zero.
    """
    if not a.is_diagonal:
        raise ValidationError("the upwind operator supports diagonal coefficients only")
    grid = require_same_grid(a.grid, b.grid)
    size = int(np.prod(grid.shape))
    index = np.arange(size).reshape(grid.shape)
    faces = face_velocities(b) if np.any(b.components) else np.zeros((grid.n,) + grid.shape)
    rows, cols, vals = [], [], []
    for i in range(grid.n):
        ai = a.diagonal(i)
        kappa = (0.5 * (ai + np.roll(ai, -1, axis=i)) / grid.h ** 2).ravel()
        plus = np.maximum(faces[i], 0.0).ravel() / grid.h
        minus = np.minimum(faces[i], 0.0).ravel() / grid.h
        p, q = index.ravel(), np.roll(index, -1, axis=i).ravel()
        rows += [p, p, q, q]
        cols += [p, q, p, q]
        vals += [-(kappa + plus), kappa - minus, kappa + plus, -(kappa - minus)]
    matrix = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(size, size))
    return matrix.tocsr()


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteOperator:
    """Immutable discrete L = div(a grad) - b.grad"""

    grid: GridSpec
    a: DiffusionCoefficient
    b: VectorField
    diffusion_mode: str = "spectral"
    direction: str = "forward"
    advection_form: str = "skew"

    @cached_property
    def has_drift(self) -> bool:
        return bool(np.any(self.b.components))

    @property
    def is_monotone(self) -> bool:
        return self.advection_form == "upwind"

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """Assembled L of the upwind operator"""
        if not self.is_monotone:
            raise ValidationError("only the upwind operator is assembled as a matrix")
        return upwind_matrix(self.a, self.b)

    def monotone(self) -> "DiscreteOperator":
        """The upwind / flux operator with the same coefficients and direction"""
        if self.is_monotone:
            return self
        if not self.a.is_diagonal:
            raise ValidationError("the monotone (upwind) operator needs a diagonal diffusion coefficient")
        return replace(self, diffusion_mode="flux", advection_form="upwind")

    def diffusion(self, u: np.ndarray) -> np.ndarray:
        return diffusion_action(self.a, u, self.diffusion_mode)

    def advection(self, u: np.ndarray) -> np.ndarray:
        """Skew form 1/2 (b.grad u + div(b u)), or the donor-cell flux divergence"""
        if not self.has_drift:
            return np.zeros_like(u)
        if self.is_monotone:
            return self.diffusion(u) - self.apply(u)
        grid, b = self.grid, self.b.components
        u_hat = grid.resolved_mask * to_spectral(u, grid)
        transport = sum(b[i] * from_spectral(d * u_hat, grid) for i, d in enumerate(grid.derivative_symbols))
        conservative = divergence_array(b * from_spectral(u_hat, grid), grid)
        return band_limit(0.5 * (transport + conservative), grid)

    def apply(self, u: np.ndarray) -> np.ndarray:
        if self.is_monotone:
            return (self.matrix @ u.ravel()).reshape(u.shape)
        return self.diffusion(u) - self.advection(u)

    def __call__(self, u: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.apply(u.values))

    def adjoint(self) -> "DiscreteOperator":
        """L* = div(a grad) + b.grad, the transpose of this operator"""
        flipped = VectorField(self.grid, -self.b.components, self.b.div_free_certified, self.b.max_divergence)
        return replace(self, b=flipped, direction="adjoint" if self.direction == "forward" else "forward")

    def dirichlet_energy(self, u: np.ndarray) -> float:
        return dirichlet_energy(self.a, u, self.diffusion_mode)

    @cached_property
    def diffusion_symbol(self) -> np.ndarray:
        """Constant-coefficient approximation of the diffusion part in Fourier space"""
        base = self.grid.laplacian_symbol if self.diffusion_mode == "spectral" else flux_symbol(self.grid)
        return self.a.mean_diagonal * base

    def shifted_preconditioner(self, shift: float, scale: float) -> Callable[[np.ndarray], np.ndarray]:
        """x -> (shift - scale * abar * Laplacian)^{-1} x applied spectrally"""
        inverse = 1.0 / (shift - scale * self.diffusion_symbol)
        grid = self.grid
        return lambda x: from_spectral(inverse * to_spectral(x, grid), grid)

    def with_drift(self, b: VectorField) -> "DiscreteOperator":
        return assemble(self.a, b, self.diffusion_mode, self.advection_form)


def assemble(
    a: DiffusionCoefficient,
    b: VectorField,
    diffusion_mode: str = "spectral",
    advection_form: str = "skew",
) -> DiscreteOperator:
    """
    Assemble L for coefficients (a, b).

    Args:
        a: Diffusion coefficient
        b: Certified divergence-free drift
        diffusion_mode: "spectral" or "flux"
        advection_form: "skew" (spectral) or "upwind" (needs flux diffusion)

    Returns:
        DiscreteOperator
    """
    grid = require_same_grid(a.grid, b.grid)
    if not b.div_free_certified:
        raise ValidationError(
            f"drift is not certified divergence-free (max|div b| = {b.max_divergence:.3e}); "
            f"run field_toolkit.certify or leray_project first"
        )
    if diffusion_mode not in DIFFUSION_MODES:
        raise ValidationError(f"unknown diffusion mode '{diffusion_mode}', expected one of {DIFFUSION_MODES}")
    if diffusion_mode == "flux" and not a.is_diagonal:
        raise ValidationError("flux diffusion mode supports diagonal coefficients only")
    if advection_form not in ADVECTION_FORMS:
        raise ValidationError(f"unknown advection form '{advection_form}', expected one of {ADVECTION_FORMS}")
    if advection_form == "upwind" and diffusion_mode != "flux":
        raise ValidationError("the upwind advection form pairs with flux diffusion only")
    return DiscreteOperator(grid, a, b, diffusion_mode, advection_form=advection_form)


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Snapshots u(t_j) of one theta-scheme run"""

    grid: GridSpec
    times: np.ndarray
    snapshots: np.ndarray
    dt: float
    theta: float
    record_every: int = 1
    diffusion_mode: str = "spectral"
    advection_form: str = "skew"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.snapshots.shape != (self.times.size,) + self.grid.shape:
            raise ShapeError(f"snapshot stack {self.snapshots.shape} does not match {self.times.size} times")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValidationError("trajectory times must be strictly increasing")
        if not np.all(np.isfinite(self.snapshots)):
            raise ValidationError("trajectory contains non-finite values")

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def initial(self) -> ScalarField:
        return ScalarField(self.grid, self.snapshots[0])

    @property
    def final(self) -> ScalarField:
        return ScalarField(self.grid, self.snapshots[-1])

    def snapshot(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.snapshots[j])

    def masses(self) -> np.ndarray:
        return self.snapshots.reshape(self.times.size, -1).sum(axis=1) * self.grid.cell_volume

    def l2_norms(self) -> np.ndarray:
        return np.sqrt((self.snapshots.reshape(self.times.size, -1) ** 2).sum(axis=1) * self.grid.cell_volume)


def step_count(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ValidationError(f"T and dt must be positive, got T={T}, dt={dt}")
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
        raise ValidationError(f"dt={dt} does not divide T={T}")
    return steps


def evolve(
    op: DiscreteOperator,
    u0: ScalarField,
    T: float,
    dt: float,
    theta: float = 0.5,
    record_every: int = 1,
    rtol: float = DEFAULT_RTOL,
    progress: bool = False,
) -> Trajectory:
    """
    Theta-scheme (I - theta dt L) u^{j+1} = (I + (1 - theta) dt L) u^j.

    Each solve starts from the previous state, so equal inputs always
    reproduce bit-identical trajectories.

    theta = 1 steps run on op.monotone(), the upwind / flux operator, with one
    sparse LU; from 0 <= u0 <= 1 every snapshot stays in [0, 1] up to round-off.
    That route needs a diagonal diffusion coefficient.

    Args:
        op: Assembled operator
        u0: Initial data
        T: Final time
        dt: Step; must divide T
        theta: Scheme parameter in [1/2, 1]
        record_every: Snapshot stride (the final state is always kept)
        rtol: Relative residual of each linear solve
        progress: Show a tqdm bar

    Returns:
        Trajectory
    """
    require_same_grid(op.grid, u0.grid)
    if not 0.5 <= theta <= 1.0:
        raise ValidationError(f"theta must lie in [1/2, 1], got {theta}")
    if record_every < 1:
        raise ValidationError(f"record_every must be >= 1, got {record_every}")
    steps = step_count(T, dt)
    if theta == 1.0:
        op = op.monotone()

    lhs_scale = theta * dt
    if op.is_monotone:
        size = op.matrix.shape[0]
        system = sparse.identity(size, format="csr") - lhs_scale * op.matrix
        factor = direct_solver(system, label=f"theta={theta} upwind system")

        def solve(rhs: np.ndarray, x0: np.ndarray, j: int) -> np.ndarray:
            return factor(rhs)
    else:
        precondition = op.shifted_preconditioner(1.0, lhs_scale)

        def lhs(x: np.ndarray) -> np.ndarray:
            return x - lhs_scale * op.apply(x)

        def solve(rhs: np.ndarray, x0: np.ndarray, j: int) -> np.ndarray:
            return krylov_solve(lhs, rhs, precondition, x0=x0, rtol=rtol, mean_gain=1.0, label=f"theta step {j}")

    u = u0.values.copy()
    times, snaps = [0.0], [u.copy()]
    for j in tqdm(range(1, steps + 1), desc="evolve", disable=not progress, leave=False):
        rhs = u if theta == 1.0 else u + (1.0 - theta) * dt * op.apply(u)
        if not np.all(np.isfinite(rhs)):
            raise NumericalBlowupError("non-finite values in the explicit half-step", step=j)
        u = solve(rhs, u, j)
        if j % record_every == 0 or j == steps:
            times.append(j * dt)
            snaps.append(u.copy())

    traj = Trajectory(op.grid, np.array(times), np.stack(snaps), dt, theta, record_every,
                      op.diffusion_mode, op.advection_form)
    logger.debug(f"evolve: {steps} steps, dt={dt}, theta={theta}, mass drift {mass_drift(traj):.3e}")
    return traj


def mass_drift(traj: Trajectory) -> float:
    """max_j |mass_j - mass_0| / ||u_0||_1"""
    scale = l1_norm(traj.snapshots[0], traj.grid)
    if scale == 0.0:
        return 0.0
    masses = traj.masses()
    return float(np.max(np.abs(masses - masses[0]))) / scale


def l2_contraction_ratio(traj: Trajectory) -> float:
    """max_j ||u_j||_2 / ||u_0||_2"""
    norms = traj.l2_norms()
    return float(norms.max() / norms[0]) if norms[0] > 0 else 0.0


# ---------------------------------------------------------------------------
# Bilinear form and identities
# ---------------------------------------------------------------------------

def bilinear_form(
    a: DiffusionCoefficient,
    b: VectorField,
    u: ScalarField,
    v: ScalarField,
    drift_form: str = "skew",
    diffusion_mode: str = "spectral",
) -> float:
    """
    E(u, v) = sum [<grad u, a grad v> + (b.grad u) v] h^n.

    The default skew drift form 1/2[(b.grad u, v) - (u, b.grad v)] equals the
    direct one for divergence-free b and makes E(u, v) = -<L u, v> exactly.
    """
    grid = require_same_grid(a.grid, b.grid, u.grid, v.grid)
    if drift_form not in DRIFT_FORMS:
        raise ValidationError(f"unknown drift form '{drift_form}', expected one of {DRIFT_FORMS}")
    dirichlet = -inner(diffusion_action(a, u.values, diffusion_mode), v.values, grid)
    if not np.any(b.components):
        return dirichlet
    u_res, v_res = band_limit(u.values, grid), band_limit(v.values, grid)
    b_grad_u = np.sum(b.components * gradient(u_res, grid), axis=0)
    if drift_form == "direct":
        return dirichlet + inner(b_grad_u, v_res, grid)
    b_grad_v = np.sum(b.components * gradient(v_res, grid), axis=0)
    return dirichlet + 0.5 * (inner(b_grad_u, v_res, grid) - inner(u_res, b_grad_v, grid))


def energy_residual(traj: Trajectory, a: DiffusionCoefficient, quadrature: str = "midpoint") -> float:
    """
    |1/2 ||u(T)||^2 + int E_a(u) dt - 1/2 ||u0||^2| / (1/2 ||u0||^2).

    "midpoint" evaluates the dissipation at step midpoints, which the theta = 1/2
    scheme satisfies exactly; "trapezoid" averages the endpoint energies and
    carries an O(dt^2) quadrature error.
    """
    require_same_grid(traj.grid, a.grid)
    if traj.record_every != 1:
        raise ValidationError("energy_residual needs every step recorded (record_every=1)")
    if quadrature not in ("midpoint", "trapezoid"):
        raise ValidationError(f"unknown quadrature '{quadrature}'")
    half0 = 0.5 * l2_norm(traj.snapshots[0], traj.grid) ** 2
    if half0 == 0.0:
        return 0.0

    mode = traj.diffusion_mode
    steps = np.diff(traj.times)
    if quadrature == "midpoint":
        dissipation = sum(
            dtj * dirichlet_energy(a, 0.5 * (traj.snapshots[j] + traj.snapshots[j + 1]), mode)
            for j, dtj in enumerate(steps)
        )
    else:
        energies = np.array([dirichlet_energy(a, s, mode) for s in traj.snapshots])
        dissipation = float(np.sum(0.5 * steps * (energies[:-1] + energies[1:])))
    halfT = 0.5 * l2_norm(traj.snapshots[-1], traj.grid) ** 2
    return abs(halfT + dissipation - half0) / half0


@dataclass(frozen=True)
class TestFunction:
    """
    phi(t, x) = amplitude * w(t) * g(x) with w(t) = cos^2(pi t / (2 horizon)) up to
    the horizon (zero afterwards) and g a Gaussian bump.
    """

    grid: GridSpec
    horizon: float
    width: float = 0.5
    center: Optional[Sequence[float]] = None
    amplitude: float = 1.0

    __test__ = False

    def __post_init__(self):
        if not self.horizon > 0 or not self.width > 0:
            raise ValidationError("test function horizon and width must be positive")

    @cached_property
    def spatial(self) -> np.ndarray:
        return self.amplitude * gaussian_bump(self.grid, self.width, self.center).values

    def _expired(self, t: float) -> bool:
        # snapshot times are j * dt, which may round just below the horizon
        return t >= self.horizon * (1.0 - 1e-12)

    def window(self, t: float) -> float:
        if self._expired(t):
            return 0.0
        return float(np.cos(0.5 * np.pi * t / self.horizon) ** 2)

    def window_rate(self, t: float) -> float:
        if self._expired(t):
            return 0.0
        return float(-0.5 * np.pi / self.horizon * np.sin(np.pi * t / self.horizon))

    def at(self, t: float) -> np.ndarray:
        return self.window(t) * self.spatial

    def rate_at(self, t: float) -> np.ndarray:
        return self.window_rate(t) * self.spatial

    def l2_norm(self, times: np.ndarray) -> float:
        """Space-time L^2 norm by trapezoid quadrature"""
        w = np.array([self.window(t) for t in times])
        return float(l2_norm(self.spatial, self.grid) * np.sqrt(trapezoid(w ** 2, times)))

    def h1_norm(self, times: np.ndarray) -> float:
        """Space-time (phi, grad phi, d_t phi) L^2 norm by trapezoid quadrature"""
        g2 = l2_norm(self.spatial, self.grid) ** 2
        grad2 = float(np.sum(gradient(self.spatial, self.grid) ** 2) * self.grid.cell_volume)
        w = np.array([self.window(t) for t in times])
        dw = np.array([self.window_rate(t) for t in times])
        return float(np.sqrt(trapezoid(w ** 2 * (g2 + grad2) + dw ** 2 * g2, times)))


def weak_form_residual(traj: Trajectory, a: DiffusionCoefficient, b: VectorField, phi: TestFunction,
                       norm: str = "h1") -> float:
    """
    Weak-formulation defect

        int int u d_t phi - int int <a grad u, grad phi> - int int (b.grad u) phi + int u0 phi(0)

    with the trajectory's snapshots and trapezoid time quadrature, normalized by
    ||u0||_2 times the space-time norm of phi: H^1 (phi, grad phi, d_t phi) by
    default, L^2 with norm="l2".
    """
    if norm not in TEST_FUNCTION_NORMS:
        raise ValidationError(f"unknown test function norm '{norm}', expected one of {TEST_FUNCTION_NORMS}")
    grid = require_same_grid(traj.grid, a.grid, b.grid, phi.grid)
    if np.any(phi.at(traj.T)):
        raise ValidationError(f"test function must vanish at the final time T={traj.T}")
    phi_norm = phi.h1_norm(traj.times) if norm == "h1" else phi.l2_norm(traj.times)
    scale = l2_norm(traj.snapshots[0], grid) * phi_norm
    if scale == 0.0:
        return 0.0

    op = assemble(a, b, traj.diffusion_mode, traj.advection_form)
    integrand = np.array([
        inner(u, phi.rate_at(t), grid) + inner(op.apply(u), phi.at(t), grid)
        for t, u in zip(traj.times, traj.snapshots)
    ])
    total = trapezoid(integrand, traj.times) + inner(traj.snapshots[0], phi.at(0.0), grid)
    return abs(float(total)) / scale


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_trajectory(traj: Trajectory, directory, config_hash: Optional[str] = None) -> Path:
    """DFSL file per snapshot plus manifest.csv (index, time, mass, l2_norm, min, max)"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for j, snap in enumerate(traj.snapshots):
        write_dfsl(directory / f"snapshot_{j:05d}.dfsl", traj.grid, snap)
    flat = traj.snapshots.reshape(traj.times.size, -1)
    manifest = pd.DataFrame({
        "index": np.arange(traj.times.size),
        "time": traj.times,
        "mass": traj.masses(),
        "l2_norm": traj.l2_norms(),
        "min": flat.min(axis=1),
        "max": flat.max(axis=1),
    })
    return write_table(manifest, directory / "manifest.csv", config_hash)
