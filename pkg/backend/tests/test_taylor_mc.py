import numpy as np
import pytest

from drift_lab.components.field_toolkit import zero_field
from drift_lab.components.kernel_lab import estimate_kernel
from drift_lab.components.taylor_mc import (
    McConfig,
    empirical_density,
    exit_consistency,
    histogram_table,
    nonexplosion,
    simulate,
    tv_distance,
    write_endpoints,
)
from drift_lab.core.errors import NumericalBlowupError, ValidationError
from drift_lab.core.grid import VectorField, center_index, node_point
from drift_lab.core.tables import read_table


def start(grid):
    return tuple(node_point(grid, center_index(grid)))


def config(grid, **overrides):
    values = dict(x0=start(grid), T=0.1, dt=0.005, N=20000, seed=7, exit_radius=2.0 * np.sqrt(0.4))
    values.update(overrides)
    return McConfig(**values)


@pytest.fixture
def heat_sample(grid2):
    return simulate(zero_field(grid2), config(grid2))


@pytest.fixture
def heat_slice(grid2, heat_op):
    return estimate_kernel(heat_op, 0.1, center_index(grid2), dt=0.005)


def test_paths_do_not_depend_on_worker_count(grid2, vortex2):
    one = simulate(vortex2, config(grid2, N=10000, workers=1))
    three = simulate(vortex2, config(grid2, N=10000, workers=3))
    np.testing.assert_array_equal(one.positions, three.positions)
    np.testing.assert_array_equal(one.exited, three.exited)
    assert one.path_keys[4096].tolist() == [1, 0]


def test_seed_changes_the_sample(grid2):
    a = simulate(zero_field(grid2), config(grid2, N=100, seed=1))
    b = simulate(zero_field(grid2), config(grid2, N=100, seed=2))
    assert not np.array_equal(a.positions, b.positions)


def test_config_validation(grid2):
    with pytest.raises(ValidationError, match="divide"):
        config(grid2, dt=0.03)
    with pytest.raises(ValidationError):
        config(grid2, N=0)
    with pytest.raises(ValidationError):
        config(grid2, exit_radius=0.0)
    with pytest.raises(ValidationError, match="L/2"):
        simulate(zero_field(grid2), config(grid2, exit_radius=4.0))


def test_brownian_variance(heat_sample):
    x0 = np.asarray(heat_sample.config.x0)
    variance = np.var(heat_sample.positions - x0, axis=0)
    np.testing.assert_allclose(variance, 0.2, rtol=0.05)


def test_endpoint_law_matches_heat_kernel(heat_sample, heat_slice):
    assert tv_distance(heat_sample, heat_slice, bins_per_axis=8) <= 0.05


def test_tv_of_empirical_density_with_itself(heat_sample):
    assert tv_distance(heat_sample, empirical_density(heat_sample), bins_per_axis=8) <= 1e-12


def test_tv_rejects_mismatched_inputs(grid2, heat_op, heat_sample, heat_slice):
    with pytest.raises(ValidationError, match="horizon"):
        tv_distance(heat_sample, estimate_kernel(heat_op, 0.05, center_index(grid2), dt=0.005), 8)
    with pytest.raises(ValidationError, match="bins"):
        tv_distance(heat_sample, heat_slice, 5)


def test_exit_consistency(heat_sample, heat_slice):
    report = exit_consistency(heat_sample, heat_slice)
    assert report["nested_ok"]
    assert report["tail_ok"]
    assert report["pde_tail"] == pytest.approx(np.exp(-4.0), abs=0.005)
    assert 0.0 < nonexplosion(heat_sample) < 1.0


def test_histogram_table(heat_sample, heat_slice):
    table = histogram_table(heat_sample, 8, heat_slice)
    assert len(table) == 64
    assert table["frequency"].sum() == pytest.approx(1.0)
    assert table["pde_mass"].sum() == pytest.approx(1.0, abs=1e-8)


def test_write_endpoints(tmp_path, grid2):
    sample = simulate(zero_field(grid2), config(grid2, N=50))
    table = read_table(write_endpoints(sample, tmp_path / "endpoints.csv", "cafe"))
    assert list(table.columns) == ["path_id", "x0", "x1", "exited"]
    assert len(table) == 50


def test_non_finite_drift_is_reported(grid2):
    components = np.zeros((2,) + grid2.shape)
    components[0, 3, 3] = np.nan
    with pytest.raises(NumericalBlowupError):
        simulate(VectorField(grid2, components, div_free_certified=True), config(grid2, N=10))
