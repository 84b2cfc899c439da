import numpy as np
import pytest

from drift_lab.components.field_toolkit import MollifierSpec, mollify, zero_field
from drift_lab.components.kernel_lab import (
    KernelSlice,
    chapman_kolmogorov_residual,
    conservativeness_check,
    default_dt,
    discrete_delta,
    duhamel_residual,
    estimate_kernel,
    kernel_limit_stability,
    markov_property_check,
    on_diagonal_profile,
)
from drift_lab.components.pde_core import DiffusionCoefficient, assemble
from drift_lab.core.errors import InvariantError, ValidationError
from drift_lab.core.grid import ScalarField, center_index, displacement_from, gaussian_bump, l1_norm, node_point


def exact_heat_kernel(grid, t, point):
    r2 = np.sum(displacement_from(grid, point) ** 2, axis=0)
    return np.exp(-r2 / (4.0 * t)) / (4.0 * np.pi * t) ** (grid.n / 2.0)


def test_default_dt_divides_t():
    assert default_dt(0.1) == pytest.approx(1e-3)
    assert default_dt(0.1, 0.03) == pytest.approx(0.025)
    assert default_dt(0.001, 0.01) == pytest.approx(0.001)


def test_delta_carries_unit_mass(grid2):
    y = center_index(grid2)
    assert discrete_delta(grid2, y).mass() == pytest.approx(1.0)
    assert discrete_delta(grid2, y, band_limited=True).mass() == pytest.approx(1.0)


def test_heat_kernel_slice_matches_gaussian(grid2, heat_op):
    y = center_index(grid2)
    kslice = estimate_kernel(heat_op, 0.1, y)
    exact = exact_heat_kernel(grid2, 0.1, kslice.source_point)
    error = l1_norm(kslice.values.values - exact, grid2) / l1_norm(exact, grid2)
    assert error <= 0.01
    assert kslice.mass == pytest.approx(1.0, abs=1e-10)


def test_on_diagonal_value_in_two_dimensions(grid2, heat_op):
    kslice = estimate_kernel(heat_op, 0.1, center_index(grid2))
    row = on_diagonal_profile([kslice])[0]
    assert row["scaled"] == pytest.approx(1.0 / (4.0 * np.pi), rel=0.01)


def test_unknown_direction(grid2, heat_op):
    with pytest.raises(ValidationError, match="direction"):
        estimate_kernel(heat_op, 0.1, center_index(grid2), direction="backward")
    with pytest.raises(ValidationError):
        estimate_kernel(heat_op, 0.0, center_index(grid2))


def test_conservative_in_both_variables(vortex_op):
    forward, adjoint = conservativeness_check(vortex_op, 0.1, dt=0.01)
    assert forward <= 1e-8
    assert adjoint <= 1e-8


def test_forward_and_adjoint_kernels_are_dual(grid2, vortex_op):
    x, y = (14, 16), (18, 17)
    forward = estimate_kernel(vortex_op, 0.05, y, dt=0.005)
    adjoint = estimate_kernel(vortex_op, 0.05, x, direction="adjoint", dt=0.005)
    assert forward.values.values[x] == pytest.approx(adjoint.values.values[y], rel=1e-5)


def test_chapman_kolmogorov_matched_steps(grid2, vortex_op):
    residual = chapman_kolmogorov_residual(vortex_op, 0.05, 0.05, center_index(grid2), dt=0.005)
    assert residual <= 1e-12


def test_chapman_kolmogorov_mismatched_steps_refine(grid2, vortex_op):
    y = center_index(grid2)
    coarse = chapman_kolmogorov_residual(vortex_op, 0.05, 0.05, y, dt=0.005, leg_dts=(0.01, 0.005))
    fine = chapman_kolmogorov_residual(vortex_op, 0.05, 0.05, y, dt=0.0025, leg_dts=(0.005, 0.0025))
    assert coarse > 1e-12
    assert fine < coarse


def test_duhamel_bound_holds(grid2, vortex2, vortex_op):
    smooth = mollify(vortex2, MollifierSpec(0.4))
    op_k = assemble(DiffusionCoefficient.identity(grid2), smooth)
    u0 = gaussian_bump(grid2, 0.5, normalized=True)
    result = duhamel_residual(vortex_op, op_k, 0.1, center_index(grid2), dt=0.005, u0=u0)
    assert result["difference"] > 0.0
    assert result["holds"]


def test_duhamel_identical_drifts(grid2, vortex_op):
    result = duhamel_residual(vortex_op, vortex_op, 0.05, center_index(grid2), dt=0.005)
    assert result["difference"] == 0.0
    assert result["bound"] == 0.0
    assert result["holds"]


def test_stability_needs_three_members(grid2, heat_op):
    with pytest.raises(ValidationError, match="at least 3"):
        kernel_limit_stability([heat_op, heat_op], 0.05, center_index(grid2))


def test_stability_of_constant_family_is_zero(grid2, heat_op):
    result = kernel_limit_stability([heat_op] * 3, 0.05, center_index(grid2), dt=0.005, workers=2)
    assert result["differences"] == [0.0, 0.0]
    assert result["masses"] == pytest.approx([1.0, 1.0, 1.0])


def test_markov_property_for_flux_diffusion(grid2):
    op = assemble(DiffusionCoefficient.diagonal_cosine(grid2, 0.3), zero_field(grid2), "flux")
    result = markov_property_check(op, gaussian_bump(grid2, 0.5), T=0.05, dt=0.01)
    assert result["holds"]
    assert result["l1_ratio"] <= 1.0 + 1e-8


def test_markov_property_rejects_data_outside_unit_interval(grid2, heat_op):
    with pytest.raises(ValidationError, match=r"\[0, 1\]"):
        markov_property_check(heat_op, ScalarField(grid2, 2.0 * np.ones(grid2.shape)), T=0.05, dt=0.01)


def heat_slice(grid, t, theta, scale=1.0):
    y = center_index(grid)
    values = scale * exact_heat_kernel(grid, t, node_point(grid, y))
    return KernelSlice(t, y, ScalarField(grid, values), theta=theta)


def test_slice_mass_is_checked(grid2):
    assert heat_slice(grid2, 0.1, 0.5).check_invariants().mass == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(InvariantError, match="mass"):
        heat_slice(grid2, 0.1, 0.5, scale=1.01).check_invariants()


def test_backward_euler_slice_may_not_undershoot(grid2):
    crank_nicolson = heat_slice(grid2, 0.1, 0.5)
    crank_nicolson.values.values[0, 0] = -1e-3 * crank_nicolson.peak
    assert crank_nicolson.check_invariants() is crank_nicolson
    backward_euler = KernelSlice(crank_nicolson.t, crank_nicolson.source, crank_nicolson.values, theta=1.0)
    with pytest.raises(InvariantError, match="undershoots"):
        backward_euler.check_invariants()


@pytest.mark.parametrize("direction", ["forward", "adjoint"])
def test_backward_euler_kernel_with_drift_is_non_negative(grid2, vortex_op, direction):
    kslice = estimate_kernel(vortex_op, 0.05, center_index(grid2), direction=direction, dt=0.005, theta=1.0)
    assert kslice.min_relative >= -1e-8
    assert kslice.mass == pytest.approx(1.0, abs=1e-8)


def test_markov_property_with_drift(grid2, vortex_op):
    result = markov_property_check(vortex_op, gaussian_bump(grid2, 0.3), T=0.2, dt=0.01)
    assert result["holds"]
    assert result["min"] >= -1e-8
    assert result["l1_ratio"] <= 1.0 + 1e-8


def test_stability_along_singular_ladder(grid2, singular_family):
    _, family = singular_family
    result = kernel_limit_stability(family, 0.1, center_index(grid2), dt=0.005, workers=2)
    differences = result["differences"]
    assert len(differences) == 3
    assert differences[-1] > 0.0
    assert all(later < earlier for earlier, later in zip(differences, differences[1:]))
    assert result["masses"] == pytest.approx([1.0] * 4, abs=1e-6)
