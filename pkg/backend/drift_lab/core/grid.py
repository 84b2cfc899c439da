"""
Periodic computational box, sampled fields, and the spectral helpers every
component builds on.

Grid nodes sit at x_i = i*h, i = 0..N-1 on each axis; the box center is L/2.
Spectral derivatives use the real FFT layout with the Nyquist mode of each
derivative zeroed, so the discrete derivative matrices are exactly skew-symmetric.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid [0, L)^n with N points per axis"""

    n: int
    points_per_axis: int
    box_length: float

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValidationError(f"dimension must be 2 or 3, got n={self.n}")
        if self.points_per_axis < 8 or self.points_per_axis % 2:
            raise ValidationError(
                f"points_per_axis must be even and >= 8, got {self.points_per_axis}"
            )
        if not self.box_length > 0:
            raise ValidationError(f"box_length must be positive, got {self.box_length}")

    @property
    def h(self) -> float:
        return self.box_length / self.points_per_axis

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.points_per_axis,) * self.n

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    @property
    def volume(self) -> float:
        return self.box_length ** self.n

    @property
    def center(self) -> np.ndarray:
        return np.full(self.n, self.box_length / 2.0)

    @property
    def exploratory(self) -> bool:
        # the estimates being checked assume n >= 3
        return self.n < 3

    @cached_property
    def axes(self) -> Tuple[np.ndarray, ...]:
        x = np.arange(self.points_per_axis) * self.h
        return tuple(x for _ in range(self.n))

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n, N, ..., N)"""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def spectral_shape(self) -> Tuple[int, ...]:
        return self.shape[:-1] + (self.points_per_axis // 2 + 1,)

    @cached_property
    def wavenumbers(self) -> Tuple[np.ndarray, ...]:
        """Angular wavenumbers per axis, broadcastable to spectral_shape"""
        N, h = self.points_per_axis, self.h
        ks = []
        for axis in range(self.n):
            if axis == self.n - 1:
                k = 2.0 * np.pi * np.fft.rfftfreq(N, d=h)
            else:
                k = 2.0 * np.pi * np.fft.fftfreq(N, d=h)
            shape = [1] * self.n
            shape[axis] = k.size
            ks.append(k.reshape(shape))
        return tuple(ks)

    @cached_property
    def derivative_symbols(self) -> Tuple[np.ndarray, ...]:
        """i*k per axis with the Nyquist mode removed"""
        N = self.points_per_axis
        symbols = []
        for axis, k in enumerate(self.wavenumbers):
            k = k.copy()
            nyquist = [slice(None)] * self.n
            nyquist[axis] = N // 2
            k[tuple(nyquist)] = 0.0
            symbols.append(1j * k)
        return tuple(symbols)

    @cached_property
    def k_squared(self) -> np.ndarray:
        """|k|^2 on the spectral grid (Nyquist kept, used by smoothers)"""
        return sum(k ** 2 for k in self.wavenumbers)

    @cached_property
    def laplacian_symbol(self) -> np.ndarray:
        """Symbol of div(grad) built from the Nyquist-free derivative symbols"""
        return sum(d * d for d in self.derivative_symbols).real

    @cached_property
    def resolved_mask(self) -> np.ndarray:
        """False on every spectral mode with a Nyquist index along some axis"""
        N = self.points_per_axis
        mask = np.ones(self.spectral_shape, dtype=bool)
        for axis in range(self.n):
            nyquist = [slice(None)] * self.n
            nyquist[axis] = N // 2
            mask[tuple(nyquist)] = False
        return mask


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

@dataclass
class ScalarField:
    """Scalar samples on a grid"""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ShapeError(f"scalar field shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("scalar field contains non-finite values")

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def l2(self) -> float:
        return l2_norm(self.values, self.grid)

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass
class VectorField:
    """n-component drift samples; certification is set by field_toolkit.certify"""

    grid: GridSpec
    components: np.ndarray
    div_free_certified: bool = False
    max_divergence: float = field(default=float("nan"))

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=float)
        expected = (self.grid.n,) + self.grid.shape
        if self.components.shape != expected:
            raise ShapeError(f"vector field shape {self.components.shape} != {expected}")

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components ** 2, axis=0))

    @property
    def max_magnitude(self) -> float:
        return float(self.magnitude().max())

    def __mul__(self, c: float) -> "VectorField":
        return VectorField(self.grid, self.components * c, self.div_free_certified,
                           abs(c) * self.max_divergence)

    __rmul__ = __mul__


def require_same_grid(*grids: GridSpec) -> GridSpec:
    first = grids[0]
    for g in grids[1:]:
        if g != first:
            raise ShapeError(f"grid mismatch: {first} vs {g}")
    return first


# ---------------------------------------------------------------------------
# Spectral calculus
# ---------------------------------------------------------------------------

def to_spectral(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.fft.rfftn(values, axes=tuple(range(-grid.n, 0)))


def from_spectral(values_hat: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.fft.irfftn(values_hat, s=grid.shape, axes=tuple(range(-grid.n, 0)))


def derivative(values: np.ndarray, grid: GridSpec, axis: int) -> np.ndarray:
    return from_spectral(grid.derivative_symbols[axis] * to_spectral(values, grid), grid)


def gradient(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Spectral gradient, shape (n, N, ..., N)"""
    values_hat = to_spectral(values, grid)
    return np.stack([from_spectral(d * values_hat, grid) for d in grid.derivative_symbols])


def divergence_array(components: np.ndarray, grid: GridSpec) -> np.ndarray:
    div_hat = sum(d * to_spectral(c, grid) for d, c in zip(grid.derivative_symbols, components))
    return from_spectral(div_hat, grid)


def apply_multiplier(values: np.ndarray, grid: GridSpec, multiplier: np.ndarray) -> np.ndarray:
    return from_spectral(multiplier * to_spectral(values, grid), grid)


def band_limit(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Drop the Nyquist modes"""
    return from_spectral(grid.resolved_mask * to_spectral(values, grid), grid)


# ---------------------------------------------------------------------------
# Quadrature and geometry helpers
# ---------------------------------------------------------------------------

def inner(u: np.ndarray, v: np.ndarray, grid: GridSpec) -> float:
    return float(np.sum(u * v) * grid.cell_volume)


def l2_norm(u: np.ndarray, grid: GridSpec) -> float:
    return float(np.sqrt(np.sum(u * u) * grid.cell_volume))


def l1_norm(u: np.ndarray, grid: GridSpec) -> float:
    return float(np.sum(np.abs(u)) * grid.cell_volume)


def displacement_from(grid: GridSpec, point: Optional[Sequence[float]] = None) -> np.ndarray:
    """Minimum-image displacement x - point, shape (n, N, ..., N)"""
    point = grid.center if point is None else np.asarray(point, dtype=float)
    L = grid.box_length
    d = grid.coords - point.reshape((grid.n,) + (1,) * grid.n)
    return (d + L / 2.0) % L - L / 2.0


def distance_from(grid: GridSpec, point: Optional[Sequence[float]] = None) -> np.ndarray:
    return np.sqrt(np.sum(displacement_from(grid, point) ** 2, axis=0))


def node_point(grid: GridSpec, index: Sequence[int]) -> np.ndarray:
    index = np.asarray(index, dtype=int)
    if index.shape != (grid.n,):
        raise ShapeError(f"grid index must have {grid.n} entries, got {index.tolist()}")
    return (index % grid.points_per_axis) * grid.h


def center_index(grid: GridSpec) -> Tuple[int, ...]:
    return (grid.points_per_axis // 2,) * grid.n


def smooth_step(x: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for x <= 0, 1 for x >= 1"""
    x = np.clip(x, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def smooth_cutoff(r: np.ndarray, r_inner: float, r_outer: float) -> np.ndarray:
    """1 inside r_inner, 0 outside r_outer, smooth in between"""
    return 1.0 - smooth_step((r - r_inner) / (r_outer - r_inner))


def gaussian_bump(grid: GridSpec, width: float, center: Optional[Sequence[float]] = None,
                  normalized: bool = False) -> ScalarField:
    r2 = distance_from(grid, center) ** 2
    values = np.exp(-r2 / (2.0 * width ** 2))
    if normalized:
        values = values / (values.sum() * grid.cell_volume)
    return ScalarField(grid, values)


def fourier_mode(grid: GridSpec, mode: Sequence[int]) -> ScalarField:
    """cos(k.x) with k = 2*pi*mode/L"""
    mode = np.asarray(mode, dtype=float)
    k = 2.0 * np.pi * mode / grid.box_length
    phase = np.tensordot(k, grid.coords, axes=1)
    return ScalarField(grid, np.cos(phase))


def mode_k_squared(grid: GridSpec, mode: Sequence[int]) -> float:
    k = 2.0 * np.pi * np.asarray(mode, dtype=float) / grid.box_length
    return float(np.sum(k ** 2))


def random_field(grid: GridSpec, rng: np.random.Generator, correlation_length: float) -> ScalarField:
    """Gaussian random field, Gaussian-filtered, unit L2 norm"""
    noise = rng.standard_normal(grid.shape)
    smooth = apply_multiplier(noise, grid, np.exp(-0.5 * grid.k_squared * correlation_length ** 2))
    return ScalarField(grid, smooth / l2_norm(smooth, grid))
