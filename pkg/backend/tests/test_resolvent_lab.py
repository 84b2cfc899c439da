import numpy as np
import pytest

from drift_lab.components.pde_core import DiffusionCoefficient
from drift_lab.components.resolvent_lab import (
    LogWeight,
    energy_inequality_margin,
    first_resolvent_identity_residual,
    log_weighted_ratio,
    resolve,
    resolvent_bounds,
    resolvent_convergence,
    resolvent_identity_residual,
    semigroup_via_resolvent,
    tail_mass,
    uniqueness_gap,
    weight_gradient_bound_check,
)
from drift_lab.core.errors import ValidationError
from drift_lab.core.grid import ScalarField, distance_from, fourier_mode, gaussian_bump, mode_k_squared, random_field


def test_heat_resolvent_of_fourier_mode(grid2, heat_op):
    f = fourier_mode(grid2, (1, 2))
    r = resolve(heat_op, 1.0, f)
    k2 = mode_k_squared(grid2, (1, 2))
    np.testing.assert_allclose(r.u.values, f.values / (1.0 + k2), rtol=1e-8, atol=1e-10)
    assert r.residual <= 1e-10


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_resolvent_bounds_with_vortex(grid2, vortex_op, rng, alpha):
    f = random_field(grid2, rng, 0.5)
    r = resolve(vortex_op, alpha, f)
    bounds = resolvent_bounds(r, lam=1.0)
    assert bounds["l2_pass"] and bounds["h1_pass"]
    assert bounds["l2_ratio"] <= 1.0 + 1e-8
    assert energy_inequality_margin(r, lam=1.0) >= 0.0


def test_energy_margin_is_relative_to_f(grid2, vortex_op, rng):
    f = random_field(grid2, rng, 0.5)
    margin = energy_inequality_margin(resolve(vortex_op, 1.0, f), lam=1.0)
    scaled = energy_inequality_margin(resolve(vortex_op, 1.0, f * 1000.0), lam=1.0)
    assert 0.0 <= margin <= 1.0
    assert scaled == pytest.approx(margin, rel=1e-6, abs=1e-9)


def test_variational_identity(grid2, vortex2, vortex_op, rng):
    f = random_field(grid2, rng, 0.5)
    v = random_field(grid2, rng, 0.3)
    r = resolve(vortex_op, 1.0, f)
    a = DiffusionCoefficient.identity(grid2)
    assert resolvent_identity_residual(r, a, vortex2, v) <= 1e-8


def test_first_resolvent_identity(grid2, vortex_op, rng):
    f = random_field(grid2, rng, 0.5)
    assert first_resolvent_identity_residual(vortex_op, 1.0, 10.0, f) <= 1e-8


def test_alpha_must_be_positive(grid2, heat_op):
    with pytest.raises(ValidationError):
        resolve(heat_op, 0.0, gaussian_bump(grid2, 0.5))


def test_zero_rhs_gives_zero(grid2, vortex_op):
    r = resolve(vortex_op, 1.0, ScalarField(grid2, np.zeros(grid2.shape)))
    assert not np.any(r.u.values)
    assert resolvent_bounds(r, 1.0)["h1_pass"]


def test_log_weighted_ratio_requirements(grid2, vortex_op):
    w = LogWeight(grid2, 0.1)
    f = gaussian_bump(grid2, 0.5)
    ratio = log_weighted_ratio(resolve(vortex_op, 1.0, f), w)
    assert 0.0 < ratio <= 1.0
    with pytest.raises(ValidationError, match="alpha = 1"):
        log_weighted_ratio(resolve(vortex_op, 2.0, f), w)
    with pytest.raises(ValidationError, match="nonzero"):
        log_weighted_ratio(resolve(vortex_op, 1.0, ScalarField(grid2, np.zeros(grid2.shape))), w)


def test_log_weight_shape(grid2):
    w = LogWeight(grid2, 0.0)
    np.testing.assert_allclose(w.values, 1.0)
    assert LogWeight(grid2, 0.2).values.min() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        LogWeight(grid2, -0.1)


def test_weight_gradient_bound(grid2):
    assert weight_gradient_bound_check(LogWeight(grid2, 0.0)) <= 1.0


def test_tail_mass(grid2):
    u = gaussian_bump(grid2, 0.5)
    tails = [tail_mass(u, r) for r in (0.0, 0.5, 1.0, 2.0)]
    assert all(x > y for x, y in zip(tails, tails[1:]))
    at_center = u.values[distance_from(grid2) == 0.0]
    assert tails[0] == pytest.approx(u.l2() ** 2 - np.sum(at_center ** 2) * grid2.cell_volume)
    with pytest.raises(ValidationError):
        tail_mass(u, grid2.box_length / 2)


def test_convergence_needs_three_members(grid2, heat_op, vortex_op):
    f = gaussian_bump(grid2, 0.5)
    with pytest.raises(ValidationError, match="at least 3"):
        resolvent_convergence([heat_op, vortex_op], 1.0, f)
    with pytest.raises(ValidationError, match="decreasing"):
        resolvent_convergence([heat_op, vortex_op, heat_op], 1.0, f, epsilons=[0.1, 0.2, 0.05])


def test_convergence_of_identical_members_is_zero(grid2, vortex_op):
    result = resolvent_convergence([vortex_op] * 3, 1.0, gaussian_bump(grid2, 0.5))
    assert result["cauchy"] == [0.0, 0.0]
    assert result["to_reference"] == [0.0, 0.0]


def test_semigroup_via_resolvent_on_fourier_mode(grid2, heat_op):
    mode = (2, 1)
    f = fourier_mode(grid2, mode)
    t, n = 0.1, 8
    u = semigroup_via_resolvent(heat_op, f, t, n)
    factor = (1.0 + t * mode_k_squared(grid2, mode) / n) ** (-n)
    np.testing.assert_allclose(u.values, factor * f.values, rtol=1e-7, atol=1e-9)
    with pytest.raises(ValidationError):
        semigroup_via_resolvent(heat_op, f, t, 0)


def test_uniqueness_gap_is_small(grid2, vortex_op):
    gap = uniqueness_gap(vortex_op, gaussian_bump(grid2, 0.5), t=0.1, n=128, dt=0.01)
    assert gap["relative_gap"] <= 0.02
    assert gap["iterated_l2"] <= gap["stepped_l2"] * (1 + 0.02)


def test_convergence_along_singular_ladder(grid2, singular_family):
    epsilons, family = singular_family
    result = resolvent_convergence(family, 1.0, gaussian_bump(grid2, 0.5), epsilons)
    cauchy = result["cauchy"]
    assert len(cauchy) == 3
    assert cauchy[-1] > 0.0
    assert all(later < earlier for earlier, later in zip(cauchy, cauchy[1:]))
