"""Shared fixtures: coarse grids so the whole suite runs in minutes"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from drift_lab.components.field_toolkit import (  # noqa: E402
    cellular_vortex,
    mollification_ladder,
    singular_vortex,
    zero_field,
)
from drift_lab.components.pde_core import DiffusionCoefficient, assemble  # noqa: E402
from drift_lab.core.grid import GridSpec  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run (preset sized)")


@pytest.fixture
def grid2():
    return GridSpec(n=2, points_per_axis=32, box_length=8.0)


@pytest.fixture
def grid3():
    return GridSpec(n=3, points_per_axis=16, box_length=8.0)


@pytest.fixture
def vortex2(grid2):
    return cellular_vortex(grid2, amplitude=2.0)


@pytest.fixture
def heat_op(grid2):
    return assemble(DiffusionCoefficient.identity(grid2), zero_field(grid2))


@pytest.fixture
def vortex_op(grid2, vortex2):
    return assemble(DiffusionCoefficient.identity(grid2), vortex2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def singular_family(grid2):
    """Operators along eps = 0.4 .. 0.05 for a point vortex with |b| ~ r^(-1/2)"""
    ladder = mollification_ladder(singular_vortex(grid2, s=1.5, core_radius=0.05), 0.4, 3)
    a = DiffusionCoefficient.identity(grid2)
    return [eps for eps, _ in ladder], [assemble(a, bk) for _, bk in ladder]
