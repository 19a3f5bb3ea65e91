import csv
import math
import shutil
import subprocess

import pytest

from upwindkr.cli import main
from upwindkr.mesh import build_perturbed_quad_mesh, write_mesh


def write_csv(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)
    return str(path)


def test_kr_command(tmp_path, capsys):
    plus = write_csv(tmp_path / "p.csv", [[0.0, 1.0], [1.0, 1.0]], ["x0", "mass"])
    minus = write_csv(tmp_path / "m.csv", [[0.5, 2.0]])
    plan = tmp_path / "plan.csv"
    assert main(["kr", "--plus", plus, "--minus", minus, "--r", "1", "--plan", str(plan)]) == 0
    out = capsys.readouterr().out
    value = float(out.splitlines()[0].split("=")[1])
    assert value == pytest.approx(2 * math.log(1.5), rel=1e-14)
    rows = list(csv.reader(open(plan)))
    assert rows[0] == ["src_x0", "dst_x0", "mass", "cost"] and len(rows) == 3


@pytest.mark.parametrize("minus_rows,extra", [
    ([[0.5, 3.0]], []),             # unbalanced
    ([[0.5, 0.1, 2.0]], []),        # dimension mismatch
    ([[0.5, 2.0]], ["--r", "0"]),   # bad radius
    ([[0.5, "x"]], []),             # garbage
])
def test_kr_input_errors(tmp_path, minus_rows, extra, capsys):
    plus = write_csv(tmp_path / "p.csv", [[0.0, 1.0], [1.0, 1.0]])
    minus = write_csv(tmp_path / "m.csv", minus_rows)
    args = ["kr", "--plus", plus, "--minus", minus, "--r", "1"]
    if extra:
        args[-2:] = extra
    assert main(args) == 2
    assert "error" in capsys.readouterr().err


def test_kr_over_cap(tmp_path):
    plus = write_csv(tmp_path / "p.csv", [[float(i), 1.0] for i in range(5)])
    minus = write_csv(tmp_path / "m.csv", [[i + 0.5, 1.0] for i in range(5)])
    assert main(["kr", "--plus", plus, "--minus", minus, "--r", "1", "--cap", "10"]) == 2


def test_validate_mesh(tmp_path, capsys):
    path = tmp_path / "mesh.txt"
    write_mesh(build_perturbed_quad_mesh(((0, 1), (0, 1)), 4, 3, 0.1, seed=2), path)
    assert main(["validate-mesh", str(path)]) == 0
    out = capsys.readouterr().out
    assert "12 cells" in out and "isoperimetric" in out
    bad = tmp_path / "bad.txt"
    bad.write_text("not a mesh\n")
    assert main(["validate-mesh", str(bad)]) == 2
    assert main(["validate-mesh", str(tmp_path / "absent.txt")]) == 2


def test_study_command(tmp_path, capsys):
    cfg = tmp_path / "study.cfg"
    cfg.write_text("case = TC0\nlevels = 1/8, 1/16, 1/32\n")
    out = tmp_path / "out"
    assert main(["study", "--config", str(cfg), "--formats", "csv", "--output", str(out)]) == 0
    assert "weak_rate" in capsys.readouterr().out
    assert sorted(p.name for p in out.iterdir()) == ["levels.csv", "summary.txt"]
    assert main(["study", "--config", str(cfg), "--formats", "png"]) == 2
    cfg.write_text("case = TC42\n")
    assert main(["study", "--config", str(cfg)]) == 2


def test_console_script_exit_code(tmp_path):
    exe = shutil.which("upwindkr")
    if exe is None:
        pytest.skip("console script not installed")
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("case = TC1\nlevels = 1/8\n")
    proc = subprocess.run([exe, "study", "--config", str(cfg)], capture_output=True, text=True)
    assert proc.returncode == 2 and "at least 3 levels" in proc.stderr
