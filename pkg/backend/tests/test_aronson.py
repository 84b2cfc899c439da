import math

import numpy as np
import pytest

from drift_lab.components.aronson import (
    aronson_envelope,
    aronson_params,
    constants_spread,
    envelope_fit,
    envelope_tail_mass,
    exponent_feature,
    mixed_norm,
    near_field_exponent,
    resolution_floor,
)
from drift_lab.components.kernel_lab import KernelSlice, estimate_kernel
from drift_lab.core.errors import ValidationError
from drift_lab.core.grid import ScalarField, VectorField, center_index, displacement_from, node_point


def gaussian_slice(grid, t):
    """Sampled heat kernel of R^2 around the center node"""
    y = center_index(grid)
    r2 = np.sum(displacement_from(grid, node_point(grid, y)) ** 2, axis=0)
    values = np.exp(-r2 / (4.0 * t)) / (4.0 * np.pi * t)
    return KernelSlice(t=t, source=y, values=ScalarField(grid, values))


def cauchy_slice(grid, t):
    """Planar Poisson kernel t / (2 pi (t^2 + r^2)^{3/2}): unit mass, polynomial tail"""
    y = center_index(grid)
    r2 = np.sum(displacement_from(grid, node_point(grid, y)) ** 2, axis=0)
    values = t / (2.0 * np.pi * (t ** 2 + r2) ** 1.5)
    return KernelSlice(t=t, source=y, values=ScalarField(grid, values))


@pytest.mark.parametrize(
    "l, q, n, mu, nu",
    [
        (math.inf, 2.0, 2, 2.0, 1.0),
        (math.inf, 2.0, 3, 4.0, 1.0),
        (2.0, math.inf, 3, 1.0, 0.5),
        (4.0, 4.0, 2, 2.0 / 1.5, 1.0 / 1.5),
    ],
)
def test_exponent_arithmetic(l, q, n, mu, nu):
    p = aronson_params(l, q, n, lam=1.0, Lambda=1.0)
    assert p.mu == pytest.approx(mu)
    assert p.nu == pytest.approx(nu)
    assert p.mu_one == (q == math.inf)


def test_hypothesis_violations():
    with pytest.raises(ValidationError, match="violates"):
        aronson_params(2.0, 2.0, 2, 1.0, 1.0)
    with pytest.raises(ValidationError, match="violates"):
        aronson_params(math.inf, 4.0, 2, 1.0, 1.0)
    with pytest.raises(ValidationError, match="n/2"):
        aronson_params(math.inf, 1.5, 3, 1.0, 1.0)
    with pytest.raises(ValidationError):
        aronson_params(1.0, 2.0, 2, 1.0, 1.0)


def test_branches_coincide_when_mu_is_two():
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    d = np.linspace(0.1, 3.0, 30)
    feature = exponent_feature(p, 0.1, 0.0, d, d)
    np.testing.assert_allclose(feature, d ** 2 / 0.1, rtol=1e-14)


def test_heat_constants_give_the_heat_kernel(grid2):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0, C1=1.0 / (4.0 * math.pi), C2=4.0)
    xi = node_point(grid2, center_index(grid2))
    env = aronson_envelope(p, 0.1, 0.0, grid2.coords, xi, regime_reference="displacement")
    np.testing.assert_allclose(env, gaussian_slice(grid2, 0.1).values.values, rtol=1e-12, atol=1e-300)


def test_envelope_needs_positive_interval(grid2):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    with pytest.raises(ValidationError):
        aronson_envelope(p, 0.1, 0.1, grid2.coords, grid2.center)


def test_envelope_tail_mass():
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0, C1=1.0 / (4.0 * math.pi), C2=4.0)
    assert envelope_tail_mass(p, 0.1, 0.0) == pytest.approx(1.0, rel=1e-7)
    tails = [envelope_tail_mass(p, 0.1, R) for R in (0.5, 1.0, 2.0)]
    assert tails[0] > tails[1] > tails[2] > 0.0
    assert tails[1] == pytest.approx(math.exp(-1.0 / 0.4), rel=1e-6)


def test_mu_one_envelope_tail_is_finite():
    p = aronson_params(2.0, math.inf, 3, 1.0, 1.0)
    near = envelope_tail_mass(p, 0.1, 0.5)
    far = envelope_tail_mass(p, 0.1, 3.0)
    assert math.isfinite(near) and near > far > 0.0


def test_mixed_norm(grid2):
    components = np.zeros((2,) + grid2.shape)
    components[0] = 1.0
    b = VectorField(grid2, components)
    assert mixed_norm(b, math.inf, 2.0, 0.25) == pytest.approx(8.0)
    assert mixed_norm(b, 2.0, 2.0, 0.25) == pytest.approx(4.0)


def test_near_field_exponent_of_gaussian(grid2):
    assert 1.7 <= near_field_exponent(gaussian_slice(grid2, 0.1)) <= 2.3


def test_fit_recovers_heat_constants(grid2):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    slices = [gaussian_slice(grid2, t) for t in (0.05, 0.1, 0.2)]
    fit = envelope_fit(slices, p)
    assert fit["C2_fit"] == pytest.approx(4.0, rel=1e-6)
    assert fit["C1_fit"] == pytest.approx(1.0 / (4.0 * math.pi), rel=1e-6)
    assert fit["violations"] == 0
    assert fit["on_diagonal_ok"]
    assert fit["C1"] >= fit["C1_fit"]
    for row in fit["per_slice"]:
        assert row["C1_held_out"] == pytest.approx(1.0 / (4.0 * math.pi), rel=1e-6)
    assert 1.7 <= fit["near_exponent"] <= 2.3
    assert [row["t"] for row in fit["per_slice"]] == [0.05, 0.1, 0.2]


def test_heavy_tailed_slice_is_reported(grid2):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    slices = [gaussian_slice(grid2, 0.05), gaussian_slice(grid2, 0.1), cauchy_slice(grid2, 0.2)]
    fit = envelope_fit(slices, p)
    heavy = fit["per_slice"][2]
    assert heavy["violations"] > 0
    assert fit["violations"] >= heavy["violations"]
    assert fit["violations"] == sum(row["violations"] for row in fit["per_slice"])


def test_least_squares_violations_on_cauchy_family(grid2):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    fit = envelope_fit([cauchy_slice(grid2, t) for t in (0.05, 0.1, 0.2)], p)
    assert fit["violations_fit"] > 0
    # the dominating constant covers every point it was fitted on
    assert fit["C1"] >= fit["C1_fit"]


def test_resolution_floor_tracks_undershoot(grid2):
    clean = gaussian_slice(grid2, 0.1)
    assert resolution_floor(clean) == pytest.approx(1e-14 * clean.peak)
    values = clean.values.values.copy()
    values[0, 0] = -1e-6
    ringing = KernelSlice(t=0.1, source=clean.source, values=ScalarField(grid2, values))
    assert resolution_floor(ringing) == pytest.approx(1e-4)


def test_fit_on_vortex_kernel_slices(grid2, vortex_op):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    y = center_index(grid2)
    slices = [estimate_kernel(vortex_op, t, y, dt=0.005) for t in (0.05, 0.1, 0.2)]
    fit = envelope_fit(slices, p)
    assert 0.0 < fit["C1_fit"] <= fit["C1"] < math.inf
    assert fit["C2_fit"] > 0.0
    assert fit["violations"] == sum(row["violations"] for row in fit["per_slice"])
    assert all(row["points"] > 0 for row in fit["per_slice"])
    assert all(abs(row["mass"] - 1.0) <= 1e-3 for row in fit["per_slice"])
    again = envelope_fit(slices, p)
    assert again["violations"] == fit["violations"]
    assert again["C1"] == fit["C1"]


def test_fit_input_checks(grid2):
    p = aronson_params(math.inf, 2.0, 2, 1.0, 1.0)
    two = [gaussian_slice(grid2, t) for t in (0.05, 0.1)]
    with pytest.raises(ValidationError, match="at least 3"):
        envelope_fit(two, p)
    with pytest.raises(ValidationError, match="distinct"):
        envelope_fit(two + [gaussian_slice(grid2, 0.1)], p)
    with pytest.raises(ValidationError, match="mu = 1"):
        envelope_fit([gaussian_slice(grid2, t) for t in (0.05, 0.1, 0.2)],
                     aronson_params(2.0, math.inf, 2, 1.0, 1.0))


def test_spread_of_identical_fits_is_zero():
    fit = {"C1": 0.1, "C2": 4.0}
    assert constants_spread([fit, dict(fit)]) == {"C1_spread": 0.0, "C2_spread": 0.0}
