import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from upwindkr import harness as hz
from upwindkr.solver import ConfigError


@pytest.fixture(scope="module")
def tc0_report():
    return hz.run_study(hz.ExperimentConfig(case="TC0"))


# -- configuration -------------------------------------------------------------------------

def test_parse_config_formats():
    cfg = hz.parse_config("""
        # weak-rate study
        case = tc3
        levels = 1/8, 2^-4, 0.03125   # mixed notations
        T = pi/2
        q = 1.5
        eval_fractions = 1
        diagnostics = no
        particles-per-cell = 16
    """)
    assert cfg.case == "tc3" and cfg.test_case.id == "TC3"
    assert cfg.levels == (0.125, 0.0625, 0.03125)
    assert cfg.final_time == pytest.approx(math.pi / 2)
    assert cfg.q == 1.5 and cfg.qbar_value == 1.5
    assert cfg.diagnostics is False and cfg.particles_per_cell == 16
    assert cfg.kappa_value == 1.0


@pytest.mark.parametrize("text", [
    "levels = 1/8, 1/16, 1/32",
    "case = TC9",
    "case = TC1\nlevels = 1/8, 1/16",
    "case = TC1\nfoo = 3",
    "case = TC1\nq = abc",
    "case = TC1\nq = 1",
    "case = TC1\ndelta_rule = fixed",
    "case = TC1\nr_rule = fixed",
    "case = TC1\nreference = exact",
    "case = TC1\neval_fractions = 0, 1",
    "case = TC1\nthis line has no equals sign",
])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        hz.parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        hz.load_config(tmp_path / "absent.cfg")


def test_registry_covers_all_cases():
    assert set(hz.TEST_CASES) == {"TC0", "TC1", "TC2", "TC3", "TC4", "TC5", "TC6"}
    assert hz.TEST_CASES["TC1"].velocity == "zero1d" and hz.TEST_CASES["TC1"].source
    assert hz.TEST_CASES["TC2"].dim == 2 and hz.TEST_CASES["TC3"].dim == 2
    assert hz.TEST_CASES["TC6"].kappa == 2.0 and not hz.TEST_CASES["TC6"].divergence_free


def test_delta_and_r_rules():
    cfg = hz.ExperimentConfig(case="TC3")
    u = cfg.test_case.velocity_field()
    for h in cfg.levels:
        d = cfg.delta_for(h, u.sup_norm)
        assert d <= h / (2 * u.sup_norm) * (1 + 1e-12)
        n = cfg.final_time / d
        assert abs(n - round(n)) < 1e-9 and round(n) % 2 == 0  # T/2 lies on the grid
        assert cfg.r_for(h, d) == math.sqrt(h) + math.sqrt(d)
    fixed = hz.ExperimentConfig(case="TC1", delta_rule="fixed", delta_c=0.3, r_rule="fixed",
                                r_value=0.2)
    assert fixed.delta_for(1 / 16, 0.0) == pytest.approx(0.25)
    assert fixed.r_for(1 / 16, 0.25) == 0.2


def test_study_rejects_delta_above_limit():
    cfg = hz.ExperimentConfig(case="TC6", delta_rule="fixed", delta_c=1.0, eval_fractions=(1.0,),
                              q=3.0)
    with pytest.raises(ConfigError):
        hz.run_study(cfg)


def test_workers_env_override(monkeypatch):
    cfg = hz.ExperimentConfig(case="TC0")
    monkeypatch.setenv("UPWINDKR_WORKERS", "3")
    assert hz._workers(cfg) == 3
    monkeypatch.setenv("UPWINDKR_WORKERS", "many")
    with pytest.raises(ConfigError):
        hz._workers(cfg)


# -- rate fitting ----------------------------------------------------------------------------

def test_fit_rate_examples():
    h = [2.0 ** -k for k in range(3, 9)]
    fit = hz.fit_rate([(s, 3 * s ** 0.5) for s in h])
    assert fit.slope == pytest.approx(0.5, abs=1e-12)
    assert fit.halfwidth == pytest.approx(0.0, abs=1e-10)
    assert hz.fit_rate([(s, 0.7) for s in h]).slope == pytest.approx(0.0, abs=1e-12)
    slope, half = hz.fit_rate([(s, s) for s in h])
    assert slope == pytest.approx(1.0)


def test_fit_rate_noisy_half_law():
    rng = np.random.default_rng(5)
    h = [2.0 ** -k for k in range(3, 9)]
    fit = hz.fit_rate([(s, s ** 0.5 * (1 + rng.uniform(-0.05, 0.05))) for s in h])
    assert 0.4 <= fit.slope <= 0.6
    assert fit.halfwidth > 0


def test_fit_rate_errors():
    with pytest.raises(ValueError):
        hz.fit_rate([(1, 1), (2, 2)])
    with pytest.raises(ValueError):
        hz.fit_rate([(1, 1), (2, 0), (3, 1)])


def test_affine_fit():
    x = np.array([0.5, 1.0, 1.5, 2.0])
    out = hz.affine_fit(x, 0.3 + 2.0 * x + np.array([1e-3, -1e-3, 1e-3, -1e-3]))
    assert out["b"] == pytest.approx(2.0, abs=1e-2) and out["b_t"] > 100
    assert math.isnan(hz.affine_fit([1, 1, 1], [1, 2, 3])["b"])


# -- error measures ----------------------------------------------------------------------------

def test_weak_error_of_identical_measures_is_zero():
    pts = np.array([[0.1], [0.4], [0.8]])
    m = np.array([1.0, -0.5, 2.0])
    we = hz.weak_error(pts, m, pts, m, 0.3, dim=1)
    assert we.value == 0.0 and we.bias_bound == 0.0


def test_weak_error_coarsens_over_cap_and_reports_bias():
    rng = np.random.default_rng(3)
    pa, pb = rng.random((60, 1)), rng.random((60, 1))
    ma, mb = np.ones(60), np.ones(60)
    exact = hz.weak_error(pa, ma, pb, mb, 0.2, dim=1)
    capped = hz.weak_error(pa, ma, pb, mb, 0.2, dim=1, cap=400, start_cell=0.02)
    assert capped.cells["difference"] and capped.atoms[0] * capped.atoms[1] <= 400
    assert abs(capped.value - exact.value) <= capped.bias_bound


def test_strong_error_deposits_reference():
    from upwindkr.fields import CellField
    from upwindkr.mesh import uniform_interval_mesh
    m = uniform_interval_mesh(0, 1, 4)
    ref = hz.Reference(1.0, np.array([[0.1], [0.3], [0.6], [0.9]]),
                       np.array([0.25, 0.25, 0.25, 0.25]), "particles", 0.0)
    assert hz.strong_error(m, CellField(m, np.ones(4)), ref) == pytest.approx(0.0, abs=1e-15)
    assert hz.strong_error(m, CellField(m, np.zeros(4)), ref) == pytest.approx(1.0)


def test_match_total():
    masses, defect = hz._match_total(np.array([1.0, 1.0]), 2.2)
    np.testing.assert_allclose(masses, [1.1, 1.1])
    assert defect == pytest.approx(0.1)


# -- studies and reports -------------------------------------------------------------------------

def test_tc0_slope_is_one(tc0_report):
    # only the data discretisation contributes, so r D_r = O(h)
    for fit in tc0_report.fits.values():
        assert abs(fit["weak_rate"] - 1.0) <= 0.2
    h = tc0_report.column("h")
    assert np.all(np.diff(h) < 0)
    assert np.all(np.isfinite(tc0_report.column("E")))
    assert tc0_report.failures == []


def test_emit_report_csv_only(tc0_report, tmp_path):
    written = hz.emit_report(tc0_report, {"csv"}, tmp_path)
    assert sorted(p.name for p in written) == ["levels.csv", "summary.txt"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["levels.csv", "summary.txt"]
    header = (tmp_path / "levels.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["level", "h", "h_mesh"] and "runtime_solver" not in header


def test_emit_report_is_deterministic(tc0_report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    hz.emit_report(tc0_report, {"csv", "svg", "text"}, a)
    hz.emit_report(tc0_report, {"csv", "svg", "text"}, b)
    for name in ("levels.csv", "summary.txt", "convergence.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    root = ET.parse(a / "convergence.svg").getroot()
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("circle")]) == len(tc0_report.config.levels)
    with pytest.raises(ConfigError):
        hz.emit_report(tc0_report, {"pdf"}, a)


def test_identical_configs_give_identical_csv(tc0_report):
    again = hz.run_study(hz.ExperimentConfig(case="TC0"))
    assert hz.levels_csv(again) == hz.levels_csv(tc0_report)


def test_study_writes_output_dir(tmp_path):
    cfg = hz.ExperimentConfig(case="TC1", levels=(1 / 8, 1 / 16, 1 / 32),
                              output_dir=str(tmp_path / "out"), source_time_nodes=16)
    rep = hz.run_study(cfg)
    assert {p.name for p in (tmp_path / "out").iterdir()} == {"levels.csv", "summary.txt",
                                                             "convergence.svg"}
    assert all(r["stability_holds"] for r in rep.rows)
    assert "weak_rate" in rep.fits[1.0]
