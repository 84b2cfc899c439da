"""
Divergence-free drift fields on the periodic box: construction from
potentials, Leray projection, Gaussian mollification, Lebesgue norms, and the
singular vortex family used by the convergence studies.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from ..core.errors import ShapeError, ValidationError
from ..core.grid import (
    GridSpec,
    ScalarField,
    VectorField,
    distance_from,
    divergence_array,
    from_spectral,
    smooth_cutoff,
    to_spectral,
)

logger = logging.getLogger(__name__)

CERTIFY_TOL = 1e-10
# share of spectral energy allowed in the top third of the resolved band
SMOOTHNESS_TOL = 1e-3


@dataclass(frozen=True)
class MollifierSpec:
    """Spectral Gaussian smoother of length scale epsilon"""

    epsilon: float
    kind: str = "spectral-gaussian"

    def validate(self, grid: GridSpec) -> None:
        if self.kind != "spectral-gaussian":
            raise ValidationError(f"unknown mollifier kind '{self.kind}'")
        if not 0 < self.epsilon < grid.box_length / 4:
            raise ValidationError(
                f"mollifier epsilon must lie in (0, L/4) = (0, {grid.box_length / 4}), got {self.epsilon}"
            )


# ---------------------------------------------------------------------------
# Certification and basic calculus
# ---------------------------------------------------------------------------

def certify(b: VectorField, tol: float = CERTIFY_TOL) -> VectorField:
    """Return b with its divergence-free certificate recomputed"""
    max_div = float(np.abs(divergence_array(b.components, b.grid)).max())
    scale = b.max_magnitude
    certified = max_div <= tol * scale if scale > 0 else max_div == 0.0
    logger.debug(f"certify: max|div b| = {max_div:.3e}, max|b| = {scale:.3e}, certified={certified}")
    return VectorField(b.grid, b.components, div_free_certified=bool(certified), max_divergence=max_div)


def divergence(b: VectorField) -> ScalarField:
    """Spectral divergence sum_i d_i b_i"""
    return ScalarField(b.grid, divergence_array(b.components, b.grid))


def curl(b: VectorField) -> Union[ScalarField, VectorField]:
    """Scalar vorticity in 2D, vector curl in 3D"""
    grid = b.grid
    d = grid.derivative_symbols
    hat = [to_spectral(c, grid) for c in b.components]
    if grid.n == 2:
        return ScalarField(grid, from_spectral(d[0] * hat[1] - d[1] * hat[0], grid))
    comps = np.stack([
        from_spectral(d[1] * hat[2] - d[2] * hat[1], grid),
        from_spectral(d[2] * hat[0] - d[0] * hat[2], grid),
        from_spectral(d[0] * hat[1] - d[1] * hat[0], grid),
    ])
    return VectorField(grid, comps)


def _check_periodic_smooth(values: np.ndarray, grid: GridSpec, what: str) -> None:
    hat = to_spectral(values - values.mean(), grid)
    energy = np.abs(hat) ** 2
    total = float(energy.sum())
    if total == 0.0:
        return
    k_max = np.pi / grid.h
    high = float(energy[np.sqrt(grid.k_squared) > (2.0 / 3.0) * k_max].sum())
    if high > SMOOTHNESS_TOL * total:
        raise ValidationError(
            f"{what} must be periodic-smooth on the box: {high / total:.2%} of its spectral "
            f"energy sits in the top third of the resolved band"
        )


def antisymmetric_to_field(B: np.ndarray, grid: GridSpec, check_smooth: bool = True) -> VectorField:
    """
    Drift b_i = -sum_j d_j B_ij from an antisymmetric matrix potential.

    Args:
        B: Array of shape (n, n) + grid.shape with B_ij = -B_ji
        grid: Grid the potential is sampled on
        check_smooth: Reject potentials that are not periodic-smooth

    Returns:
        Certified divergence-free VectorField
    """
    B = np.asarray(B, dtype=float)
    if B.shape != (grid.n, grid.n) + grid.shape:
        raise ShapeError(f"potential shape {B.shape} does not match grid {grid.shape}")
    if not np.allclose(B, -np.swapaxes(B, 0, 1), rtol=0.0, atol=1e-14 * max(1.0, np.abs(B).max())):
        raise ValidationError("matrix potential must be antisymmetric")
    if check_smooth:
        for i in range(grid.n):
            for j in range(i + 1, grid.n):
                _check_periodic_smooth(B[i, j], grid, f"potential component B[{i},{j}]")

    d = grid.derivative_symbols
    hat = {(i, j): to_spectral(B[i, j], grid) for i in range(grid.n) for j in range(grid.n) if i != j}
    comps = []
    for i in range(grid.n):
        bi_hat = sum(-d[j] * hat[(i, j)] for j in range(grid.n) if j != i)
        comps.append(from_spectral(bi_hat, grid))
    return certify(VectorField(grid, np.stack(comps)))


def stream_to_field(potential: Union[ScalarField, VectorField], check_smooth: bool = True) -> VectorField:
    """
    2D: b = (-d2 psi, d1 psi); 3D: b = curl A. Both computed spectrally.
    """
    grid = potential.grid
    B = np.zeros((grid.n, grid.n) + grid.shape)
    if isinstance(potential, ScalarField):
        if grid.n != 2:
            raise ShapeError("a scalar stream function needs n=2; pass a 3-component potential for n=3")
        B[0, 1] = potential.values
        B[1, 0] = -potential.values
    else:
        if grid.n != 3:
            raise ShapeError("a vector potential needs n=3; pass a scalar stream function for n=2")
        A = potential.components
        B[0, 1], B[1, 0] = -A[2], A[2]
        B[0, 2], B[2, 0] = A[1], -A[1]
        B[1, 2], B[2, 1] = -A[0], A[0]
    return antisymmetric_to_field(B, grid, check_smooth=check_smooth)


def leray_project(v: VectorField) -> VectorField:
    """v - grad Laplacian^{-1} div v, computed in Fourier space"""
    grid = v.grid
    d = grid.derivative_symbols
    hat = [to_spectral(c, grid) for c in v.components]
    div_hat = sum(di * ci for di, ci in zip(d, hat))
    dd = sum(di * di for di in d).real  # = -|k|^2 without Nyquist
    safe = np.where(dd == 0.0, 1.0, dd)
    potential_hat = np.where(dd == 0.0, 0.0, div_hat / safe)
    comps = np.stack([from_spectral(ci - di * potential_hat, grid) for di, ci in zip(d, hat)])
    return certify(VectorField(grid, comps))


def mollify(b: VectorField, m: MollifierSpec) -> VectorField:
    """Apply exp(-eps^2 |k|^2 / 2) componentwise"""
    m.validate(b.grid)
    multiplier = np.exp(-0.5 * m.epsilon ** 2 * b.grid.k_squared)
    comps = np.stack([from_spectral(multiplier * to_spectral(c, b.grid), b.grid) for c in b.components])
    out = VectorField(b.grid, comps)
    return certify(out) if b.div_free_certified else out


def mollify_scalar(f: ScalarField, m: MollifierSpec) -> ScalarField:
    m.validate(f.grid)
    multiplier = np.exp(-0.5 * m.epsilon ** 2 * f.grid.k_squared)
    return ScalarField(f.grid, from_spectral(multiplier * to_spectral(f.values, f.grid), f.grid))


def lebesgue_norm(f: Union[ScalarField, VectorField], p: float) -> float:
    """(sum |f|^p h^n)^(1/p), max for p = inf; vectors use the Euclidean magnitude"""
    if not (p == np.inf or p >= 1):
        raise ValidationError(f"Lebesgue exponent must be >= 1 or inf, got {p}")
    values = np.abs(f.values) if isinstance(f, ScalarField) else f.magnitude()
    if p == np.inf:
        return float(values.max())
    peak = float(values.max())
    if peak == 0.0:
        return 0.0
    # scale by the peak before powering to keep large p finite
    return float(peak * (np.sum((values / peak) ** p) * f.grid.cell_volume) ** (1.0 / p))


# ---------------------------------------------------------------------------
# Test families
# ---------------------------------------------------------------------------

def admissible_decay_range(n: int, q: float) -> Tuple[float, float]:
    """
    Decay exponents s for which |b| ~ r^(1-s) near a point core lies in L^2 and L^q.

    Local integrability of r^((1-s)p) r^(n-1) needs s < 1 + n/p for p in {2, q}.

    n  q    admissible s
    2  2    [0, 2)
    3  2    [0, 2.5)
    3  3    [0, 2)
    """
    return 0.0, 1.0 + n / max(2.0, q)


def _radial_potential(r: np.ndarray, s: float, core_radius: float) -> np.ndarray:
    delta2 = core_radius ** 2
    if abs(s - 2.0) < 1e-12:
        return 0.5 * np.log1p(r ** 2 / delta2)
    e = 2.0 - s
    return ((r ** 2 + delta2) ** (e / 2.0) - core_radius ** e) / e


def singular_vortex(
    grid: GridSpec,
    s: float,
    core_radius: float,
    target_q: float = 2.0,
    amplitude: float = 1.0,
    support_radius: Optional[float] = None,
) -> VectorField:
    """
    Point vortex with |b| ~ distance^(1-s) near the box center.

    The field is the perpendicular gradient (2D) or curl (3D) of a radial potential,
    regularized below core_radius and smoothly cut off between support_radius and
    1.5 * support_radius.

    Args:
        grid: Grid to sample on
        s: Decay exponent (0 gives a bounded solid-body core)
        core_radius: Regularization length
        target_q: Integrability exponent the family must satisfy besides L^2
        amplitude: Overall scale of b
        support_radius: Inner radius of the cutoff (default L/4)

    Returns:
        Certified divergence-free VectorField
    """
    lo, hi = admissible_decay_range(grid.n, target_q)
    if not lo <= s < hi:
        p = 2.0 if target_q <= 2.0 else target_q
        raise ValidationError(
            f"decay exponent s={s} outside [{lo}, {hi}): |b| ~ r^(1-s) is not in L^{p:g}(R^{grid.n}) "
            f"near the core (needs s < 1 + n/{p:g})"
        )
    if core_radius <= 0:
        raise ValidationError(f"core_radius must be positive, got {core_radius}")
    r_in = grid.box_length / 4.0 if support_radius is None else support_radius
    r_out = 1.5 * r_in
    if r_out >= grid.box_length / 2.0:
        raise ValidationError(f"support radius {r_in} leaves no margin before the box boundary")

    r = distance_from(grid)
    phi = amplitude * _radial_potential(r, s, core_radius) * smooth_cutoff(r, r_in, r_out)
    if grid.n == 2:
        return stream_to_field(ScalarField(grid, phi), check_smooth=False)
    A = np.zeros((3,) + grid.shape)
    A[2] = phi
    return stream_to_field(VectorField(grid, A), check_smooth=False)


def cellular_vortex(grid: GridSpec, amplitude: float = 1.0, mode: int = 1) -> VectorField:
    """Cellular flow from psi = (U/k) sin(k x) sin(k y), k = 2 pi mode / L"""
    k = 2.0 * np.pi * mode / grid.box_length
    x, y = grid.coords[0], grid.coords[1]
    psi = (amplitude / k) * np.sin(k * x) * np.sin(k * y)
    if grid.n == 2:
        return stream_to_field(ScalarField(grid, psi))
    A = np.zeros((3,) + grid.shape)
    A[2] = psi
    return stream_to_field(VectorField(grid, A))


def zero_field(grid: GridSpec) -> VectorField:
    return VectorField(grid, np.zeros((grid.n,) + grid.shape), div_free_certified=True, max_divergence=0.0)


def mollification_ladder(b: VectorField, epsilon0: float, halvings: int) -> List[Tuple[float, VectorField]]:
    """Members (eps_k, b_k) with eps_k = eps0 * 2^-k, k = 0..halvings"""
    if halvings < 0:
        raise ValidationError(f"halvings must be >= 0, got {halvings}")
    ladder = []
    for k in range(halvings + 1):
        eps = epsilon0 * 2.0 ** (-k)
        ladder.append((eps, mollify(b, MollifierSpec(eps))))
    return ladder
