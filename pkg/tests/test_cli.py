import json
import math

import numpy as np
import pytest

from hybridkoopman.cli import SystemDocumentError, load_system, run, system_from_document


def _doc():
    return {
        "num_modes": 1,
        "dim": 2,
        "modes": [{
            "vector_field": ["-x1", "-2*x2"],
            "guard_level": "1 - x1",
            "reset": ["2", "x2 + 1"],
            "domain_box": [[1, 2], [1e-3, 10]],
            "collar_depth": 1.0,
        }],
        "frame": [["0", "x2"]],
        "period_hint": math.log(2),
    }


@pytest.fixture(autouse=True)
def _in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _kv(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)


def test_fixture_is_the_example_system():
    sysdef = load_system("paper-example")
    mode = sysdef.modes[0]
    assert np.allclose(mode.field(np.array([1.5, 1.0])), [-1.5, -2.0])
    assert mode.guard(np.array([1.0, 0.3])) == 0.0
    assert np.allclose(mode.reset_map(np.array([1.0, 0.3])), [2.0, 1.3])
    assert np.allclose(mode.domain_box, [[1, 2], [1e-3, 10]])


def test_document_matches_fixture(tmp_path):
    path = tmp_path / "sys.json"
    path.write_text(json.dumps(_doc()))
    sysdef = load_system(str(path))
    ref = load_system("paper-example")
    x = np.array([1.3, 0.7])
    assert np.allclose(sysdef.modes[0].field(x), ref.modes[0].field(x))
    assert sysdef.frame is not None


def test_missing_reset_names_pointer():
    doc = _doc()
    del doc["modes"][0]["reset"]
    with pytest.raises(SystemDocumentError) as info:
        system_from_document(doc)
    assert info.value.pointer == "/modes/0/reset"


def test_arity_error():
    doc = _doc()
    doc["modes"][0]["vector_field"].append("0")
    with pytest.raises(SystemDocumentError, match="expected 2 entries, got 3"):
        system_from_document(doc)


def test_bad_expression_reports_offset():
    doc = _doc()
    doc["modes"][0]["guard_level"] = "1 - "
    with pytest.raises(SystemDocumentError, match="/modes/0"):
        system_from_document(doc)


def test_invalid_document_exits_1(tmp_path, capsys):
    doc = _doc()
    del doc["modes"][0]["reset"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert run(["--system", str(path), "validate"]) == 1
    assert "/modes/0/reset" in capsys.readouterr().err


def test_floquet_output(capsys):
    assert run(["floquet", "--section-level", "x1 - 2", "--guess", "0,2,2"]) == 0
    out = _kv(capsys.readouterr().out)
    assert float(out["tau"]) == pytest.approx(0.6931472, abs=1e-7)
    assert float(out["rho_2"]) == pytest.approx(0.25, abs=1e-6)
    assert float(out["nu_2"]) == pytest.approx(-2.0, abs=1e-6)
    assert float(out["omega"]) == pytest.approx(9.0647203, abs=1e-7)


def test_floquet_default_section(capsys):
    assert run(["floquet"]) == 0
    assert float(_kv(capsys.readouterr().out)["tau"]) == pytest.approx(math.log(2), abs=1e-9)


def test_check_observable_flags_discontinuity(capsys):
    assert run(["check-observable", "--re", "x1", "--k", "0", "--samples", "10"]) == 1
    out = _kv(capsys.readouterr().out)
    assert float(out["max_residual"]) == pytest.approx(1.0, abs=1e-12)
    assert out["verdict"] == "fail"


def test_check_observable_passes_eigenfunction(capsys):
    assert run(["check-observable", "--re", "x2 - x1^2/3", "--k", "1", "--samples", "10"]) == 0


def test_seam_scan(capsys):
    assert run(["seam-scan", "--re", "x2 - x1^2/3", "--k", "1", "--samples", "3"]) == 0
    assert run(["seam-scan", "--re", "x1", "--k", "0", "--samples", "3"]) == 1


def test_simulate_zero_horizon(capsys):
    assert run(["simulate", "--x0", "0,2,1.3333333", "--t-end", "0", "--dt", "0.1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,mode,x1,x2,jump" and len(lines) == 2
    assert [float(v) for v in lines[1].split(",")] == [0.0, 0.0, 2.0, 1.3333333, 0.0]


def test_sigma_and_gluing(capsys):
    assert run(["sigma", "--x0", "0,2,0.7"]) == 0
    out = _kv(capsys.readouterr().out)
    assert float(out["sigma"]) == pytest.approx(math.log(2), abs=1e-10)
    assert run(["gluing", "--x0", "0,1.5,0.9"]) == 0
    psi = [float(v) for v in _kv(capsys.readouterr().out)["psi"].split()]
    assert np.allclose(psi, [4 / 3, 0.9 / 1.5 ** 4 + 1 / 1.5 ** 2], atol=1e-10)
    assert run(["gluing", "--inverse", "--x0", "0,1.3333333333333333,0.6222222222222222"]) == 0
    pre = [float(v) for v in _kv(capsys.readouterr().out)["psi_inverse"].split()]
    assert np.allclose(pre, [1.5, 0.9], atol=1e-9)


def test_poincare_iterates(capsys):
    assert run(["poincare", "--section-level", "x1 - 2", "--p0", "0,2,2", "--iters", "3"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "iterate,x1,x2"
    assert np.allclose([float(r.split(",")[2]) for r in rows[1:]], [2, 1.5, 1.375, 1.34375])


def test_frame_check(capsys):
    assert run(["frame-check", "--samples", "5"]) == 0
    assert run(["frame-check", "--samples", "5", "--frame", "0,x1"]) == 1


def test_validate(capsys):
    assert run(["validate", "--samples", "20"]) == 0


@pytest.mark.parametrize("argv", [
    ["simulate", "--x0", "2,1", "--t-end", "1"],
    ["simulate", "--x0", "0,a,b", "--t-end", "1"],
    ["eigfn", "phase", "--grid", "3:1,2"],
    ["no-such-command"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv) == 2
    assert "usage error" in capsys.readouterr().err


def test_eigfn_csv(tmp_path):
    out = tmp_path / "amp.csv"
    assert run(["eigfn", "amplitude", "--section-level", "x1 - 2", "--guess", "0,2,2",
                "--grid", "3,3:1,2,0.1,2", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "mode,x1,x2,re,im" and len(rows) == 10
    for row in rows[1:]:
        _, x1, x2, re, im = map(float, row.split(","))
        assert re == pytest.approx(x2 - x1 ** 2 / 3, abs=1e-8) and im == 0.0


def test_embed(capsys):
    assert run(["embed", "--section-level", "x1 - 2", "--guess", "0,2,2",
                "--grid", "3,3:1.1,1.9,0.2,1.8"]) == 0
    assert _kv(capsys.readouterr().out)["verdict"] == "pass"


def test_outputs_are_deterministic(tmp_path):
    argv = ["--seed", "3", "simulate", "--x0", "0,1.7,2.5", "--t-end", "2", "--dt", "0.05"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(argv + ["--out", str(a)]) == 0
    assert run(argv + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_manifest_replay(tmp_path):
    out = tmp_path / "membership.txt"
    assert run(["check-observable", "--re", "x2 - x1^2/3", "--samples", "5",
                "--out", str(out)]) == 0
    first = out.read_bytes()
    manifest = json.loads((tmp_path / "membership.txt.manifest.json").read_text())
    assert manifest["command"] == "check-observable"
    assert manifest["outputs"] == [str(out)]
    assert manifest["config"]["samples"] == 5 and manifest["seed"] == 0
    out.unlink()
    assert run(["replay", str(tmp_path / "membership.txt.manifest.json")]) == 0
    assert out.read_bytes() == first


def test_manifest_written_without_out(tmp_path, capsys):
    assert run(["sigma", "--x0", "0,1.5,1"]) == 0
    assert json.loads((tmp_path / "sigma_manifest.json").read_text())["exit_code"] == 0
