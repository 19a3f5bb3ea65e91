import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from upwindkr.fields import cell_average, scalar_data, source_average, velocity_field
from upwindkr.mesh import build_perturbed_quad_mesh, locate_points, uniform_interval_mesh
from upwindkr.reference import (ParticleCloud, ReferenceError, advected_area, fine_grid_reference,
                                flow_map, reference_solution)
from upwindkr.solver import SchemeConfig, run
from upwindkr.transport import DiscreteMeasure, kr_distance, signed_atoms_difference, w1_distance

CENTRED = ((-0.5, 0.5), (-0.5, 0.5))


def rotate(x, theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.column_stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]])


# -- flow map ------------------------------------------------------------------------------

def test_flow_map_identity_for_zero_field(rng):
    x = rng.random((10, 2)) - 0.5
    np.testing.assert_array_equal(flow_map(velocity_field("zero2d"), x, 0.0, 2.0), x)
    np.testing.assert_array_equal(flow_map(velocity_field("rotation2d"), x, 0.3, 0.3), x)


def test_flow_map_rotation(rng):
    r = rng.uniform(0, 0.35, 20)
    a = rng.uniform(0, 2 * np.pi, 20)
    x = np.column_stack([r * np.cos(a), r * np.sin(a)])
    out = flow_map(velocity_field("rotation2d"), x, 0.2, 0.2 + 1.3)
    np.testing.assert_allclose(out, rotate(x, 1.3), atol=1e-9)


def test_flow_map_logistic_closed_form():
    # x' = x (1 - x), x(0) = 1/2  ->  x(t) = e^t / (1 + e^t)
    out = flow_map(velocity_field("logistic1d"), np.array([0.5]), 0.0, 1.0)
    assert out[0] == pytest.approx(math.e / (1 + math.e), abs=1e-9)


@given(seed=st.integers(0, 10**6), s=st.floats(0, 1), d1=st.floats(0, 1), d2=st.floats(0, 1))
def test_flow_map_semigroup(seed, s, d1, d2):
    rng = np.random.default_rng(seed)
    x = rng.random((5, 2)) - 0.5
    u = velocity_field("rotation2d")
    direct = flow_map(u, x, s, s + d1 + d2)
    composed = flow_map(u, flow_map(u, x, s, s + d1), s + d1, s + d1 + d2)
    np.testing.assert_allclose(direct, composed, atol=1e-8)


def test_flow_map_errors():
    u = velocity_field("rotation2d")
    with pytest.raises(ReferenceError):
        flow_map(u, np.zeros(2), 1.0, 0.0)
    with pytest.raises(ReferenceError, match="left the domain"):
        flow_map(u, np.array([[0.4, 0.0]]), 0.0, 1.0, bounds=np.array([[0.39, 0.41], [-0.5, 0.5]]))


def test_area_preserved_by_divergence_free_flow():
    square = np.array([[0.05, 0.05], [0.3, 0.05], [0.3, 0.3], [0.05, 0.3]])
    before, after = advected_area(velocity_field("rotation2d"), square, 0.0, 2.0)
    assert before == pytest.approx(0.0625, rel=1e-14)
    assert after == pytest.approx(before, rel=1e-6)
    before, after = advected_area(velocity_field("rotation2d"),
                                  np.array([[0.3, 0.0], [0.45, 0.0], [0.45, 0.1], [0.3, 0.1]]), 0.0, 1.5)
    assert after == pytest.approx(before, rel=1e-6)


# -- particle clouds --------------------------------------------------------------------------

def test_cloud_without_motion_reproduces_seeding():
    m = uniform_interval_mesh(0, 1, 16)
    data = scalar_data("indicator1d:a=0.2,b=0.55")
    cloud = reference_solution(velocity_field("zero1d"), data, 0.7, m, 4)
    exact = cell_average(m, data.initial).values * m.volumes
    owner = locate_points(m, cloud.positions)
    np.testing.assert_allclose(np.bincount(owner, cloud.masses, m.n_cells), exact, atol=1e-15)
    assert not cloud.from_source.any()


def test_cloud_source_mass_without_motion():
    m = uniform_interval_mesh(0, 1, 16)
    data = scalar_data("cosine1d", "cosine1d:mean=0,amp=1,k=1")
    t = 0.9
    cloud = reference_solution(velocity_field("zero1d"), data, t, m, 4)
    # the source integrates to zero, so the total stays at the initial mass
    init = cell_average(m, data.initial).values @ m.volumes
    assert cloud.total_mass == pytest.approx(init + t * 0.0, abs=1e-12)
    assert cloud.from_source.any()
    assert np.all(cloud.emission_time[cloud.from_source] < t)


def test_cloud_mass_conserved_under_advection():
    m = build_perturbed_quad_mesh(CENTRED, 16, 16, 0.1, seed=2)
    data = scalar_data("blob2d")
    a = reference_solution(velocity_field("rotation2d"), data, 0.0, m, 4)
    b = reference_solution(velocity_field("rotation2d"), data, 1.0, m, 4)
    np.testing.assert_array_equal(a.masses, b.masses)
    assert b.meta["w1_bound"] > 0


def test_rotated_disk_matches_rotated_seeding():
    m = build_perturbed_quad_mesh(CENTRED, 32, 32, 0.0, seed=0)
    data = scalar_data("disk2d")
    u = velocity_field("rotation2d")
    seed = reference_solution(u, data, 0.0, m, 4)
    cloud = reference_solution(u, data, math.pi / 2, m, 4)
    turned = DiscreteMeasure(rotate(seed.positions, math.pi / 2), seed.masses)
    assert w1_distance(DiscreteMeasure(cloud.positions, cloud.masses), turned) <= 1e-8


def test_cloud_csv_roundtrip(tmp_path):
    m = uniform_interval_mesh(0, 1, 8)
    cloud = reference_solution(velocity_field("logistic1d"), scalar_data("cosine1d", "cosine1d"),
                               0.5, m, 2, source_time_nodes=8)
    cloud.write_csv(tmp_path / "c.csv")
    back = ParticleCloud.read_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.positions, cloud.positions)
    np.testing.assert_array_equal(back.masses, cloud.masses)
    np.testing.assert_array_equal(back.from_source, cloud.from_source)


def test_bad_particle_count_in_2d():
    m = build_perturbed_quad_mesh(CENTRED, 4, 4, 0.0, seed=0)
    with pytest.raises(ReferenceError):
        reference_solution(velocity_field("rotation2d"), scalar_data("blob2d"), 0.5, m, 3)


def test_doubling_particles_barely_moves_the_error():
    u = velocity_field("logistic1d")
    data = scalar_data("cosine1d")
    coarse = uniform_interval_mesh(0, 1, 16)
    traj = run(coarse, u, data, SchemeConfig(delta=1 / 16, T=0.5))
    rho = traj.snapshots[-1]
    sampling = uniform_interval_mesh(0, 1, 128)
    r = math.sqrt(1 / 16) + math.sqrt(1 / 16)
    vals = []
    for ppc in (4, 8):
        cloud = reference_solution(u, data, 0.5, sampling, ppc)
        scale = rho.mass() / cloud.total_mass
        plus, minus = signed_atoms_difference(coarse.centroids, rho.values * coarse.volumes,
                                              cloud.positions, cloud.masses * scale, 1e-6)
        vals.append(kr_distance(plus, minus, r).value)
    assert abs(vals[1] - vals[0]) < 0.1 * vals[0]


# -- fine-grid reference ----------------------------------------------------------------------

def test_fine_grid_without_motion():
    m = uniform_interval_mesh(0, 1, 32)
    data = scalar_data("constant", "cosine1d:mean=0,amp=1,k=1")
    out = fine_grid_reference(m, velocity_field("zero1d"), data, 0.05, 0.5)
    expect = cell_average(m, data.initial).values + 0.5 * source_average(m, data, 0, 0.05).values
    np.testing.assert_allclose(out.values, expect, atol=1e-13)
    assert out.meta["reference"] == "fine-grid"
    assert out.meta["bias_scale"] == pytest.approx(math.sqrt(1 / 32))


def test_fine_grid_resolution_checks():
    m = uniform_interval_mesh(0, 1, 32)
    u, data = velocity_field("zero1d"), scalar_data("constant")
    with pytest.raises(ReferenceError):
        fine_grid_reference(m, u, data, 0.01, 0.5, h_coarsest=1 / 8)
    with pytest.raises(ReferenceError):
        fine_grid_reference(m, u, data, 0.01, 0.5, delta_coarsest=0.08)
    with pytest.raises(ReferenceError):
        fine_grid_reference(m, u, data, 0.03, 0.5)


def test_fine_grid_self_consistency():
    u = velocity_field("logistic1d")
    data = scalar_data("cosine1d")
    r = 0.25
    a_mesh, b_mesh = uniform_interval_mesh(0, 1, 256), uniform_interval_mesh(0, 1, 512)
    a = fine_grid_reference(a_mesh, u, data, 1 / 256, 0.5)
    b = fine_grid_reference(b_mesh, u, data, 1 / 512, 0.5)
    plus, minus = signed_atoms_difference(a_mesh.centroids, a.values * a_mesh.volumes,
                                          b_mesh.centroids, b.values * b_mesh.volumes)
    total = a.mass()
    assert kr_distance(plus, minus, r).value < a.meta["bias_scale"] / r * total
