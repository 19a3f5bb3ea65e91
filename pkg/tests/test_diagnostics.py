import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from upwindkr.diagnostics import (DiagnosticsError, energy_report, lq_norm,
                                  q_mean, q_mean_integral, report_row, split_certificates,
                                  stability_certificate, weak_bv_report)
from upwindkr.fields import CellField, VelocityField, scalar_data, velocity_field
from upwindkr.mesh import build_interval_mesh, build_perturbed_quad_mesh, uniform_interval_mesh
from upwindkr.solver import SchemeConfig, max_timestep, run

CENTRED = ((-0.5, 0.5), (-0.5, 0.5))

pos = st.floats(1e-3, 1e3)
expo = st.floats(1.05, 6.0)


def two_cell_trajectory():
    """One step of the two-cell example: (1, 0) -> (2/3, 1/3) with delta = 1/4, u = 1."""
    mesh = build_interval_mesh(0.0, 1.0, [0.5, 0.5])
    u = VelocityField(evaluate=lambda t, x: np.ones_like(x), dim=1, sup_norm=1.0,
                      divergence=lambda t, x: np.zeros(len(x)), bounds=np.array([[0.0, 1.0]]))
    data = scalar_data("constant")
    config = SchemeConfig(delta=0.25, T=0.25, q=2.0)
    # boundary fluxes are zeroed, so only the interior face carries u = 1
    traj = run(mesh, u, data, config, check_timestep=False, initial=CellField(mesh, [1.0, 0.0]))
    np.testing.assert_allclose(traj.snapshots[1].values, [2 / 3, 1 / 3], atol=1e-12)
    return traj


# -- norms and the q-mean -----------------------------------------------------------

def test_lq_norm_examples():
    m = uniform_interval_mesh(0, 1, 7)
    for q in (1.0, 1.5, 2.0, 7.0, math.inf):
        assert lq_norm(CellField(m, np.full(7, -2.5)), q) == pytest.approx(2.5, rel=1e-14)
        assert lq_norm(CellField(m, np.zeros(7)), q) == 0.0
    two = build_interval_mesh(0, 1, [0.5, 0.5])
    assert lq_norm(CellField(two, [1.0, 0.0]), 2.0) == pytest.approx(math.sqrt(0.5), rel=1e-15)
    with pytest.raises(DiagnosticsError):
        lq_norm(CellField(two, [1.0, 0.0]), 0.5)


def test_q_mean_examples():
    assert q_mean(3.0, 1.0, 2.0) == 2.0
    for q in (1.2, 2.0, 3.5):
        assert q_mean(4.2, 4.2, q) == 4.2
        assert q_mean(7.0 * 3.0, 7.0 * 1.0, q) == pytest.approx(7.0 * q_mean(3.0, 1.0, q), rel=1e-14)
    # closed form at q = 3: (2/3)(a^2 + ab + b^2)/(a + b)
    assert q_mean(3.0, 1.0, 3.0) == pytest.approx(2 / 3 * 13 / 4, rel=1e-15)
    assert q_mean_integral(3.0, 1.0, 2.0) == pytest.approx(2.0, abs=1e-10)
    assert q_mean_integral(2.5, 2.5, 1.7) == 2.5


@pytest.mark.parametrize("a,b,q", [(0.0, 1.0, 2.0), (1.0, -1.0, 2.0), (1.0, 2.0, 1.0),
                                   (1.0, 2.0, 0.5)])
def test_q_mean_rejects_bad_input(a, b, q):
    with pytest.raises(DiagnosticsError):
        q_mean(a, b, q)
    with pytest.raises(DiagnosticsError):
        q_mean_integral(a, b, q)


def test_q_mean_taylor_branch_is_continuous():
    a = 1.3
    for q in (1.3, 2.0, 4.0):
        for rel in (1e-9, 1e-8, 2e-8, 1e-6):
            b = a * (1 + rel)
            assert q_mean(a, b, q) == pytest.approx(q_mean_integral(a, b, q), rel=1e-13)


def test_q_mean_vectorised():
    a = np.array([1.0, 2.0, 3.0])
    out = q_mean(a, 1.0, 2.0)
    np.testing.assert_allclose(out, (a + 1) / 2, rtol=1e-15)


@given(a=pos, b=pos, q=expo)
def test_q_mean_integral_representation(a, b, q):
    assert abs(q_mean(a, b, q) - q_mean_integral(a, b, q)) <= 1e-8 * max(1.0, a, b)


@given(a=pos, b=pos, q=expo, c=st.floats(1e-3, 1e3))
def test_q_mean_homogeneous_and_symmetric(a, b, q, c):
    assert q_mean(c * a, c * b, q) == pytest.approx(c * q_mean(a, b, q), rel=1e-10)
    assert q_mean(a, b, q) == pytest.approx(q_mean(b, a, q), rel=1e-12)
    assert min(a, b) * (1 - 1e-12) <= q_mean(a, b, q) <= max(a, b) * (1 + 1e-12)


@given(a=pos, b=pos, q1=expo, q2=expo)
def test_q_mean_increasing_in_q(a, b, q1, q2):
    assume(abs(a - b) > 1e-3 * (a + b) and abs(q1 - q2) > 1e-2)
    lo, hi = sorted((q1, q2))
    assert q_mean(a, b, lo) < q_mean(a, b, hi)


@given(a=pos, b=pos, a2=pos, b2=pos, q=expo)
def test_q_mean_concavity(a, b, a2, b2, q):
    mid = q_mean((a + a2) / 2, (b + b2) / 2, q)
    avg = 0.5 * (q_mean(a, b, q) + q_mean(a2, b2, q))
    slack = 1e-8 * max(1.0, a, b, a2, b2)
    if q < 2:
        assert mid >= avg - slack
    elif q > 2:
        assert mid <= avg + slack


@given(a=pos, b=pos, q=expo)
def test_q_mean_distance_to_arithmetic_mean(a, b, q):
    gap = abs(q_mean(a, b, 2.0) - q_mean(a, b, q))
    assert gap <= abs(q - 2) / q * abs(a - b) / 2 + 1e-8 * max(1.0, a, b)


# -- energy and weak BV ---------------------------------------------------------------

def test_two_cell_energy_hand_values():
    # ordered neighbour pairs: the single interior face counts twice in the spatial sum
    rep = energy_report(two_cell_trajectory(), 2.0)
    assert rep.temporal == pytest.approx(1 / 9, rel=1e-12)
    assert rep.spatial == pytest.approx(2 * 1 / 36, rel=1e-12)


def test_two_cell_weak_bv_hand_values():
    rep = weak_bv_report(two_cell_trajectory())
    assert rep.temporal == pytest.approx(1 / 3, rel=1e-12)
    assert rep.spatial == pytest.approx(2 * 1 / 12, rel=1e-12)
    assert rep.temporal_normalized == pytest.approx(1 / 3, rel=1e-12)


def test_constant_trajectories_have_zero_gradients():
    m = build_perturbed_quad_mesh(CENTRED, 5, 5, 0.2, seed=2)
    traj = run(m, velocity_field("zero2d"), scalar_data("constant"), SchemeConfig(delta=0.2, T=1.0))
    e = energy_report(traj, 1.5)
    assert e.temporal == 0 and e.spatial == 0
    bv = weak_bv_report(traj)
    assert bv.temporal == 0 and bv.spatial == 0
    rot = run(m, velocity_field("rotation2d"), scalar_data("constant"), SchemeConfig(delta=0.2, T=1.0))
    bv = weak_bv_report(rot)
    assert bv.temporal < 1e-12 and bv.spatial < 1e-12


def test_energy_rejects_bad_exponent_and_signed_data():
    traj = two_cell_trajectory()
    for qbar in (1.0, 2.5):
        with pytest.raises(DiagnosticsError):
            energy_report(traj, qbar)
    m = uniform_interval_mesh(0, 1, 8)
    signed = run(m, velocity_field("zero1d"), scalar_data("cosine1d", "constant"),
                 SchemeConfig(delta=0.5, T=1.0))
    signed.snapshots[0].values[:] = 0.0
    signed.snapshots[-1].values[0] = -1.0
    with pytest.raises(DiagnosticsError):
        energy_report(signed, 2.0)
    with pytest.raises(DiagnosticsError):
        stability_certificate(signed)


def test_energy_zero_data():
    m = uniform_interval_mesh(0, 1, 8)
    traj = run(m, velocity_field("logistic1d"), scalar_data("constant"), SchemeConfig(delta=0.25, T=1.0),
               initial=CellField(m, np.zeros(8)))
    rep = energy_report(traj, 2.0)
    assert rep.temporal == rep.spatial == rep.bound == 0 and rep.ratio == 0.0


# -- stability certificates -------------------------------------------------------------

def test_certificate_without_transport():
    m = uniform_interval_mesh(0, 1, 10)
    traj = run(m, velocity_field("zero1d"), scalar_data("indicator1d"), SchemeConfig(delta=0.25, T=1.0))
    cert = stability_certificate(traj)
    assert cert.holds and cert.margin >= 0
    assert cert.lhs == lq_norm(traj.snapshots[0], 2.0)
    assert cert.compressibility == 1.0


def test_certificate_rotation_has_unit_compressibility():
    m = build_perturbed_quad_mesh(CENTRED, 10, 10, 0.2, seed=3)
    traj = run(m, velocity_field("rotation2d"), scalar_data("blob2d"), SchemeConfig(delta=0.1, T=1.0))
    cert = stability_certificate(traj)
    assert cert.compressibility == pytest.approx(1.0, abs=1e-12)
    assert cert.holds
    assert cert.rhs == pytest.approx(lq_norm(traj.snapshots[0], 2.0), rel=1e-10)


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_certificate_compressive_field(q):
    u = VelocityField(evaluate=lambda t, x: -0.8 * x * (1 - x), dim=1, sup_norm=0.2,
                      divergence=lambda t, x: -0.8 * (1 - 2 * x[:, 0]),
                      bounds=np.array([[0.0, 1.0]]))
    m = uniform_interval_mesh(0, 1, 32)
    d = max_timestep(u, q, 2.0, 1.0)
    traj = run(m, u, scalar_data("cosine1d"), SchemeConfig(delta=d, T=1.0, q=q))
    cert = stability_certificate(traj)
    assert cert.compressibility > 1
    assert cert.holds and cert.gronwall_excess <= 1e-12
    # the growth of the norm is real, so the compressibility factor is needed
    assert cert.lhs > lq_norm(traj.snapshots[0], q)


def test_split_certificates_for_signed_data():
    m = uniform_interval_mesh(0, 1, 32)
    u = velocity_field("logistic1d")
    config = SchemeConfig(delta=max_timestep(u, 2.0, 2.0, 1.0), T=1.0)
    plus, minus = split_certificates(m, u, scalar_data("oscillating1d"), config)
    assert plus.holds and minus.holds


def test_report_row_flattens():
    traj = two_cell_trajectory()
    row = report_row("r1", energy=energy_report(traj, 2.0), bv=weak_bv_report(traj),
                     certificate=stability_certificate(traj))
    assert row["run_id"] == "r1"
    assert {"energy_temporal", "energy_ratio", "bv_spatial_normalized", "stability_holds"} <= set(row)
