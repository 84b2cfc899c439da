import numpy as np
import pytest

from drift_lab.components.field_toolkit import cellular_vortex, zero_field
from drift_lab.components.pde_core import (
    DiffusionCoefficient,
    TestFunction,
    assemble,
    bilinear_form,
    energy_residual,
    evolve,
    face_divergence,
    face_velocities,
    l2_contraction_ratio,
    mass_drift,
    step_count,
    weak_form_residual,
    write_trajectory,
)
from drift_lab.core.errors import ValidationError
from drift_lab.core.grid import ScalarField, VectorField, fourier_mode, gaussian_bump, inner, mode_k_squared, random_field
from drift_lab.core.tables import read_config_hash, read_table


def test_identity_diffusion_has_unit_ellipticity(grid2):
    assert DiffusionCoefficient.identity(grid2).lam == 1.0
    with pytest.raises(ValidationError):
        DiffusionCoefficient(grid2, lam=1.5)


def test_constant_diffusion_ellipticity(grid2):
    a = DiffusionCoefficient.constant(grid2, [[2.0, 0.0], [0.0, 0.5]])
    assert a.lam == pytest.approx(0.5)
    assert a.is_diagonal
    with pytest.raises(ValidationError, match="symmetric"):
        DiffusionCoefficient.constant(grid2, [[1.0, 0.2], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        DiffusionCoefficient.constant(grid2, [[2.0, 0.0], [0.0, 0.5]], lam=0.9)


def test_cosine_diffusion_amplitude_limit(grid2):
    a = DiffusionCoefficient.diagonal_cosine(grid2, 0.5)
    assert a.lam == pytest.approx(0.5, rel=1e-6)
    with pytest.raises(ValidationError):
        DiffusionCoefficient.diagonal_cosine(grid2, 1.0)


def test_flux_mode_needs_diagonal_coefficient(grid2):
    a = DiffusionCoefficient.constant(grid2, [[1.0, 0.2], [0.2, 1.0]])
    with pytest.raises(ValidationError, match="diagonal"):
        assemble(a, zero_field(grid2), "flux")


def test_uncertified_drift_is_refused(grid2, vortex2):
    raw = VectorField(grid2, vortex2.components)
    with pytest.raises(ValidationError, match="certified"):
        assemble(DiffusionCoefficient.identity(grid2), raw)


def test_adjoint_is_the_transpose(grid2, vortex_op, rng):
    u = random_field(grid2, rng, 0.5).values
    v = random_field(grid2, rng, 0.5).values
    lhs = inner(vortex_op.apply(u), v, grid2)
    rhs = inner(u, vortex_op.adjoint().apply(v), grid2)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
    assert vortex_op.adjoint().direction == "adjoint"


def test_skew_bilinear_form_matches_operator(grid2, vortex2, vortex_op, rng):
    a = DiffusionCoefficient.identity(grid2)
    u = random_field(grid2, rng, 0.5)
    v = random_field(grid2, rng, 0.5)
    form = bilinear_form(a, vortex2, u, v)
    assert form == pytest.approx(-inner(vortex_op.apply(u.values), v.values, grid2), abs=1e-10)
    # for divergence-free drift the direct form agrees up to discretization
    assert bilinear_form(a, vortex2, u, v, drift_form="direct") == pytest.approx(form, abs=1e-6)


def test_fourier_mode_decays_like_heat_semigroup(grid2, heat_op):
    mode = (1, 0)
    u0 = fourier_mode(grid2, mode)
    traj = evolve(heat_op, u0, T=0.1, dt=0.01)
    expected = np.exp(-mode_k_squared(grid2, mode) * 0.1) * u0.values
    np.testing.assert_allclose(traj.final.values, expected, rtol=1e-5, atol=1e-9)


def test_mass_and_l2_under_vortex(grid2, vortex_op):
    u0 = gaussian_bump(grid2, 0.5, normalized=True)
    traj = evolve(vortex_op, u0, T=0.1, dt=0.005)
    assert mass_drift(traj) <= 1e-8
    assert l2_contraction_ratio(traj) <= 1.0 + 1e-8
    assert traj.times[-1] == pytest.approx(0.1)


def test_semigroup_law_holds_exactly(grid2, vortex_op):
    u0 = gaussian_bump(grid2, 0.5)
    full = evolve(vortex_op, u0, T=0.2, dt=0.01)
    first = evolve(vortex_op, u0, T=0.1, dt=0.01)
    second = evolve(vortex_op, first.final, T=0.1, dt=0.01)
    np.testing.assert_allclose(second.final.values, full.final.values, rtol=0.0, atol=1e-13)


def test_backward_euler_flux_keeps_positivity(grid2):
    op = assemble(DiffusionCoefficient.diagonal_cosine(grid2, 0.3), zero_field(grid2), "flux")
    u0 = gaussian_bump(grid2, 0.3)
    traj = evolve(op, u0, T=0.05, dt=0.01, theta=1.0)
    peak = np.abs(traj.snapshots).max()
    assert traj.snapshots.min() >= -1e-8 * peak


def test_step_count_requires_dividing_dt():
    assert step_count(0.1, 0.01) == 10
    with pytest.raises(ValidationError, match="divide"):
        step_count(0.1, 0.03)
    with pytest.raises(ValidationError):
        step_count(0.0, 0.01)


def test_theta_out_of_range(grid2, heat_op):
    with pytest.raises(ValidationError):
        evolve(heat_op, gaussian_bump(grid2, 0.5), T=0.1, dt=0.01, theta=0.4)


def test_midpoint_energy_identity(grid2, vortex_op):
    a = DiffusionCoefficient.identity(grid2)
    traj = evolve(vortex_op, gaussian_bump(grid2, 0.5), T=0.1, dt=0.01)
    assert energy_residual(traj, a) <= 1e-6


def test_trapezoid_energy_is_second_order(grid2, heat_op):
    a = DiffusionCoefficient.identity(grid2)
    u0 = gaussian_bump(grid2, 0.5)
    coarse = energy_residual(evolve(heat_op, u0, T=0.1, dt=0.005), a, "trapezoid")
    fine = energy_residual(evolve(heat_op, u0, T=0.1, dt=0.0025), a, "trapezoid")
    assert 3.0 < coarse / fine < 5.0


def test_energy_needs_every_step(grid2, heat_op):
    traj = evolve(heat_op, gaussian_bump(grid2, 0.5), T=0.1, dt=0.01, record_every=2)
    assert traj.times.size == 6
    with pytest.raises(ValidationError, match="record_every"):
        energy_residual(traj, DiffusionCoefficient.identity(grid2))


def test_weak_form_defect_is_small(grid2, vortex2, vortex_op):
    a = DiffusionCoefficient.identity(grid2)
    traj = evolve(vortex_op, gaussian_bump(grid2, 0.5), T=0.1, dt=0.00125)
    phi = TestFunction(grid2, horizon=0.1, width=0.8, center=(4.5, 4.0))
    assert weak_form_residual(traj, a, vortex2, phi) <= 1e-3


def test_weak_form_edge_cases(grid2, heat_op):
    a = DiffusionCoefficient.identity(grid2)
    b = zero_field(grid2)
    traj = evolve(heat_op, gaussian_bump(grid2, 0.5), T=0.1, dt=0.01)
    assert weak_form_residual(traj, a, b, TestFunction(grid2, horizon=0.1, amplitude=0.0)) == 0.0
    with pytest.raises(ValidationError, match="vanish"):
        weak_form_residual(traj, a, b, TestFunction(grid2, horizon=0.2))


def test_weak_form_normalization(grid2, vortex2, vortex_op):
    a = DiffusionCoefficient.identity(grid2)
    u0 = gaussian_bump(grid2, 0.5)
    traj = evolve(vortex_op, u0, T=0.1, dt=0.005)
    scaled = evolve(vortex_op, u0 * 32.0, T=0.1, dt=0.005)
    phi = TestFunction(grid2, horizon=0.1, width=0.8, center=(4.5, 4.0))
    tall = TestFunction(grid2, horizon=0.1, width=0.8, center=(4.5, 4.0), amplitude=16.0)
    h1 = weak_form_residual(traj, a, vortex2, phi)
    assert h1 > 0.0
    assert weak_form_residual(scaled, a, vortex2, tall) == pytest.approx(h1, rel=1e-6)

    l2 = weak_form_residual(traj, a, vortex2, phi, norm="l2")
    assert l2 == pytest.approx(h1 * phi.h1_norm(traj.times) / phi.l2_norm(traj.times), rel=1e-10)
    assert l2 > h1
    with pytest.raises(ValidationError, match="norm"):
        weak_form_residual(traj, a, vortex2, phi, norm="h2")


def test_write_trajectory(tmp_path, grid2, heat_op):
    traj = evolve(heat_op, gaussian_bump(grid2, 0.5), T=0.04, dt=0.01)
    manifest = write_trajectory(traj, tmp_path / "run", config_hash="feed")
    assert len(list((tmp_path / "run").glob("snapshot_*.dfsl"))) == 5
    assert read_config_hash(manifest) == "feed"
    table = read_table(manifest)
    assert table["time"].tolist() == pytest.approx([0.0, 0.01, 0.02, 0.03, 0.04])


def test_drift_cellular_field_in_3d_conserves_mass(grid3):
    op = assemble(DiffusionCoefficient.identity(grid3), cellular_vortex(grid3, amplitude=1.0))
    traj = evolve(op, gaussian_bump(grid3, 0.8, normalized=True), T=0.05, dt=0.01)
    assert mass_drift(traj) <= 1e-8
    assert isinstance(traj.final, ScalarField)


def test_face_velocities_are_discretely_divergence_free(grid2, vortex2):
    faces = face_velocities(vortex2)
    assert faces.shape == (2,) + grid2.shape
    assert np.abs(face_divergence(faces, grid2)).max() <= 1e-10 * np.abs(faces).max() / grid2.h
    # half a cell away from the nodes the faces still carry the drift
    assert np.abs(faces).max() == pytest.approx(vortex2.max_magnitude, rel=0.1)


def test_upwind_matrix_is_an_m_matrix(grid2, vortex2):
    op = assemble(DiffusionCoefficient.diagonal_cosine(grid2, 0.3), vortex2, "flux", "upwind")
    matrix = op.matrix.toarray()
    off = matrix - np.diag(np.diag(matrix))
    assert off.min() >= 0.0
    assert np.diag(matrix).max() < 0.0
    scale = np.abs(matrix).max()
    assert np.abs(matrix.sum(axis=0)).max() <= 1e-12 * scale
    assert np.abs(matrix.sum(axis=1)).max() <= 1e-10 * scale


def test_upwind_adjoint_is_the_transpose(grid2, vortex2):
    op = assemble(DiffusionCoefficient.identity(grid2), vortex2, "flux", "upwind")
    forward = op.matrix.toarray()
    backward = op.adjoint().matrix.toarray()
    assert np.abs(backward - forward.T).max() <= 1e-10 * np.abs(forward).max()


def test_upwind_needs_flux_diffusion(grid2, vortex2):
    with pytest.raises(ValidationError, match="flux"):
        assemble(DiffusionCoefficient.identity(grid2), vortex2, "spectral", "upwind")
    with pytest.raises(ValidationError, match="advection"):
        assemble(DiffusionCoefficient.identity(grid2), vortex2, "flux", "central")


def test_backward_euler_with_drift_stays_in_unit_interval(grid2, vortex_op):
    u0 = gaussian_bump(grid2, 0.3)
    dt = grid2.h ** 2 / 4.0
    traj = evolve(vortex_op, u0, T=40 * dt, dt=dt, theta=1.0)
    assert traj.advection_form == "upwind"
    assert traj.diffusion_mode == "flux"
    assert traj.snapshots.min() >= -1e-8
    assert traj.snapshots.max() <= 1.0 + 1e-8
    assert mass_drift(traj) <= 1e-8


def test_backward_euler_needs_diagonal_coefficient(grid2, vortex2):
    a = DiffusionCoefficient.constant(grid2, [[1.0, 0.2], [0.2, 1.0]])
    op = assemble(a, vortex2)
    with pytest.raises(ValidationError, match="diagonal"):
        evolve(op, gaussian_bump(grid2, 0.5), T=0.02, dt=0.01, theta=1.0)
