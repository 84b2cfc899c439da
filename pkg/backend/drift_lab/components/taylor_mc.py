"""
Euler-Maruyama simulation of Taylor's diffusion dX = b(X) dt + sqrt(2) dW over
grid-interpolated drifts, and the comparisons of its law with PDE kernel slices.

Randomness is drawn per block of paths from SeedSequence(seed, spawn_key=(block,)),
so every path's increments depend only on (seed, path index) and never on the
number of worker threads.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from ..core.errors import NumericalBlowupError, ValidationError
from ..core.grid import GridSpec, ScalarField, VectorField, displacement_from
from ..core.tables import write_table
from .kernel_lab import KernelSlice

logger = logging.getLogger(__name__)

DEFAULT_BLOCK = 4096
TAIL_SLACK = 0.005


@dataclass(frozen=True)
class McConfig:
    """Path ensemble description; dt must divide T"""

    x0: Tuple[float, ...]
    T: float
    dt: float
    N: int
    seed: int
    exit_radius: float
    block_size: int = DEFAULT_BLOCK
    workers: int = 1

    def __post_init__(self):
        if not self.T > 0 or not 0 < self.dt <= self.T:
            raise ValidationError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        steps = round(self.T / self.dt)
        if abs(steps * self.dt - self.T) > 1e-9 * self.T:
            raise ValidationError(f"dt={self.dt} does not divide T={self.T}")
        if self.N < 1:
            raise ValidationError(f"path count must be >= 1, got {self.N}")
        if not self.exit_radius > 0:
            raise ValidationError(f"exit radius must be positive, got {self.exit_radius}")
        if self.block_size < 1:
            raise ValidationError("block_size must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def validate(self, grid: GridSpec) -> None:
        if len(self.x0) != grid.n:
            raise ValidationError(f"start point must have {grid.n} coordinates")
        if not self.exit_radius < grid.box_length / 2:
            raise ValidationError(f"exit radius must be below L/2 = {grid.box_length / 2}")


@dataclass
class EndpointSample:
    """Endpoints X_T (unwrapped) with exit flags and per-path stream keys (block, offset)"""

    grid: GridSpec
    config: McConfig
    positions: np.ndarray
    exited: np.ndarray
    path_keys: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return int(self.positions.shape[0])

    @property
    def wrapped(self) -> np.ndarray:
        return np.mod(self.positions, self.grid.box_length)

    def nearest_nodes(self) -> np.ndarray:
        """Index of the nearest grid node per path, shape (N, n)"""
        return np.rint(self.wrapped / self.grid.h).astype(int) % self.grid.points_per_axis


def _interpolate(b: VectorField, points: np.ndarray) -> np.ndarray:
    """Multilinear periodic interpolation of every drift component at (count, n) points"""
    coords = (np.mod(points, b.grid.box_length) / b.grid.h).T
    return np.stack([
        map_coordinates(c, coords, order=1, mode="grid-wrap") for c in b.components
    ], axis=1)


def _run_block(b: VectorField, cfg: McConfig, block: int, has_drift: bool) -> Tuple[np.ndarray, np.ndarray]:
    start = block * cfg.block_size
    count = min(cfg.block_size, cfg.N - start)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(block,))))
    x0 = np.asarray(cfg.x0, dtype=float)
    x = np.tile(x0, (count, 1))
    exited = np.zeros(count, dtype=bool)
    noise_scale = math.sqrt(2.0 * cfg.dt)
    r2 = cfg.exit_radius ** 2
    for step in range(1, cfg.steps + 1):
        if has_drift:
            drift = _interpolate(b, x)
            bad = ~np.all(np.isfinite(drift), axis=1)
            if np.any(bad):
                raise NumericalBlowupError("non-finite drift sample", step=step, path=start + int(np.argmax(bad)))
            x += drift * cfg.dt
        x += noise_scale * rng.standard_normal((count, b.grid.n))
        exited |= np.sum((x - x0) ** 2, axis=1) > r2
    return x, exited


def simulate(b: VectorField, cfg: McConfig) -> EndpointSample:
    """
    Euler-Maruyama paths of dX = b(X) dt + sqrt(2) dW from cfg.x0.

    Args:
        b: Drift sampled on the grid (interpolated multilinearly, periodically)
        cfg: Ensemble configuration

    Returns:
        EndpointSample, bit-identical for identical (b, cfg)
    """
    cfg.validate(b.grid)
    if not b.div_free_certified:
        logger.warning("simulating with an uncertified drift; PDE comparisons may not apply")
    if not np.all(np.isfinite(b.components)):
        raise NumericalBlowupError("drift field contains non-finite samples", step=0)
    has_drift = bool(np.any(b.components))
    blocks = math.ceil(cfg.N / cfg.block_size)
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        results = list(pool.map(lambda k: _run_block(b, cfg, k, has_drift), range(blocks)))

    positions = np.concatenate([r[0] for r in results])
    exited = np.concatenate([r[1] for r in results])
    index = np.arange(cfg.N)
    keys = np.stack([index // cfg.block_size, index % cfg.block_size], axis=1)
    logger.debug(f"simulate: {cfg.N} paths, {cfg.steps} steps, exit fraction {exited.mean():.4g}")
    return EndpointSample(b.grid, cfg, positions, exited, keys)


# ---------------------------------------------------------------------------
# Comparisons with the PDE
# ---------------------------------------------------------------------------

def _check_matching_slice(s: EndpointSample, kslice: KernelSlice) -> None:
    if kslice.grid != s.grid:
        raise ValidationError("kernel slice and sample live on different grids")
    if kslice.direction != "forward":
        raise ValidationError("the path law is compared with a forward kernel slice")
    if not math.isclose(kslice.t, s.config.T, rel_tol=1e-9):
        raise ValidationError(f"slice time {kslice.t} differs from the horizon {s.config.T}")
    x0_index = tuple(np.rint(np.asarray(s.config.x0) / s.grid.h).astype(int) % s.grid.points_per_axis)
    if tuple(kslice.source) != x0_index:
        raise ValidationError(f"slice source {kslice.source} is not the start node {x0_index}")


def _bin_masses(values: np.ndarray, grid: GridSpec, bins: int) -> np.ndarray:
    factor = grid.points_per_axis // bins
    shape = []
    for _ in range(grid.n):
        shape.extend([bins, factor])
    return values.reshape(shape).sum(axis=tuple(range(1, 2 * grid.n, 2)))


def _empirical_bins(s: EndpointSample, bins: int) -> np.ndarray:
    factor = s.grid.points_per_axis // bins
    idx = s.nearest_nodes() // factor
    flat = np.ravel_multi_index(tuple(idx.T), (bins,) * s.grid.n)
    counts = np.bincount(flat, minlength=bins ** s.grid.n)
    return counts.reshape((bins,) * s.grid.n) / s.N


def tv_distance(s: EndpointSample, kslice: KernelSlice, bins_per_axis: int) -> float:
    """1/2 sum over bins |empirical frequency - sum of Gamma h^n over the bin's cells|"""
    _check_matching_slice(s, kslice)
    if bins_per_axis < 1 or s.grid.points_per_axis % bins_per_axis:
        raise ValidationError(
            f"{bins_per_axis} bins per axis do not evenly coarsen {s.grid.points_per_axis} grid points"
        )
    empirical = _empirical_bins(s, bins_per_axis)
    pde = _bin_masses(kslice.values.values * s.grid.cell_volume, s.grid, bins_per_axis)
    return 0.5 * float(np.sum(np.abs(empirical - pde)))


def empirical_density(s: EndpointSample) -> KernelSlice:
    """Endpoint histogram on grid nodes, normalized to a density, as a forward slice"""
    grid = s.grid
    flat = np.ravel_multi_index(tuple(s.nearest_nodes().T), grid.shape)
    counts = np.bincount(flat, minlength=int(np.prod(grid.shape))).reshape(grid.shape)
    source = tuple(np.rint(np.asarray(s.config.x0) / grid.h).astype(int) % grid.points_per_axis)
    return KernelSlice(t=s.config.T, source=source,
                       values=ScalarField(grid, counts / (s.N * grid.cell_volume)), direction="forward")


def nonexplosion(s: EndpointSample) -> float:
    """Fraction of paths that left the exit ball before T"""
    return float(np.mean(s.exited))


def exit_consistency(s: EndpointSample, kslice: KernelSlice, R: Optional[float] = None) -> Dict[str, float]:
    """
    Exit fraction against terminal tails beyond radius R (default the config's).

    The exit fraction can never fall below the terminal tail fraction of the same
    paths; the MC terminal tail must match the PDE tail mass within 3 sigma plus
    a 0.5% discretization allowance.
    """
    _check_matching_slice(s, kslice)
    R = s.config.exit_radius if R is None else R
    x0 = np.asarray(s.config.x0, dtype=float)
    mc_tail = float(np.mean(np.sum((s.positions - x0) ** 2, axis=1) > R ** 2))
    d = np.sqrt(np.sum(displacement_from(s.grid, kslice.source_point) ** 2, axis=0))
    pde_tail = float(np.sum(kslice.values.values[d > R]) * s.grid.cell_volume)
    p = min(max(pde_tail, 0.0), 1.0)
    sigma = math.sqrt(p * (1.0 - p) / s.N)
    exit_fraction = nonexplosion(s)
    return {
        "exit_fraction": exit_fraction,
        "mc_tail": mc_tail,
        "pde_tail": pde_tail,
        "sigma": sigma,
        "nested_ok": bool(exit_fraction >= mc_tail),
        "tail_ok": bool(abs(mc_tail - pde_tail) <= 3.0 * sigma + TAIL_SLACK),
    }


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_endpoints(s: EndpointSample, path, config_hash: Optional[str] = None):
    columns = {"path_id": np.arange(s.N)}
    for i in range(s.grid.n):
        columns[f"x{i}"] = s.positions[:, i]
    columns["exited"] = s.exited.astype(int)
    return write_table(pd.DataFrame(columns), path, config_hash)


def histogram_table(s: EndpointSample, bins_per_axis: int,
                    kslice: Optional[KernelSlice] = None) -> pd.DataFrame:
    """Per-bin empirical frequency (and PDE mass when a slice is given), plot-ready"""
    if s.grid.points_per_axis % bins_per_axis:
        raise ValidationError(f"{bins_per_axis} bins per axis do not coarsen the grid evenly")
    empirical = _empirical_bins(s, bins_per_axis)
    factor = s.grid.points_per_axis // bins_per_axis
    index = np.indices(empirical.shape).reshape(s.grid.n, -1)
    table = {f"bin{i}": index[i] for i in range(s.grid.n)}
    for i in range(s.grid.n):
        table[f"center{i}"] = (index[i] * factor + 0.5 * (factor - 1)) * s.grid.h
    table["frequency"] = empirical.ravel()
    if kslice is not None:
        table["pde_mass"] = _bin_masses(kslice.values.values * s.grid.cell_volume, s.grid, bins_per_axis).ravel()
    return pd.DataFrame(table)
