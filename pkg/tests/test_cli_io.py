import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tresca_vi.cli_io import (
    REPORT_COLUMNS,
    ConfigError,
    check_rows,
    load_config,
    main,
    run_command,
    sweep_rows,
    write_csv,
)
from tresca_vi.verification import CheckReport, SweepReport

SMALL = {"dim": 1, "n": 8, "n_steps": 8, "n_random": 1}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data) if not isinstance(data, str) else data, encoding="utf-8")
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_config_gets_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"dim": 1, "n": 16, "n_steps": 32}))
    s = cfg.spec
    assert (s.c0, s.epsilon, s.newton_tol, s.T) == (1.0, 1e-8, 1e-11, 1.0)
    assert cfg.M_cost == 1.0 and cfg.grad_tol == 1e-6
    assert np.all(s.u_b == s.b)
    assert len(cfg.config_hash) == 12


def test_negative_q_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="q must be nonnegative") as exc:
        load_config(write(tmp_path, {"q": -1}))
    assert exc.value.field == "q"


@pytest.mark.parametrize(
    "data,field",
    [({"n": 0}, "n"), ({"T": "1"}, "T"), ({"bc": "neumann"}, "bc"), ({"mystery": 1}, "mystery"),
     ({"b": 1, "u_b": 0}, "u_b"), ({"control": {"kind": "magic"}}, "control"),
     ({"mu_list": [0.5, 2]}, "mu_list"), ({"q": [1, 2]}, "q"), ({"n_steps": 2.5}, "n_steps")],
)
def test_validation_names_field(tmp_path, data, field):
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, data))
    assert exc.value.field == field


def test_parse_error_has_line_info(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        load_config(write(tmp_path, '{\n  "n": 4,\n  "q": ,\n}'))


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.json")
    with pytest.raises(FileNotFoundError):
        load_config(write(tmp_path, {"control": {"kind": "file", "path": "g.csv"}}))


def test_write_csv_shapes(tmp_path):
    write_csv([], tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text() == ",".join(REPORT_COLUMNS) + "\n"
    rep = CheckReport("monotony", True, 0.1 + 0.2, {"seed": 4})
    write_csv(check_rows([rep], "abc", 4), tmp_path / "one.csv")
    rows = read_rows(tmp_path / "one.csv")
    assert len(rows) == 1 and rows[0]["name"] == "monotony" and rows[0]["seed"] == "4"
    assert float(rows[0]["margin"]) == 0.1 + 0.2  # round-trip precision
    sw = SweepReport("sweep_eps", "epsilon", [1e-1, 1e-2, 1e-3, 1e-4], [4.0, 3.0, 2.0, 1.0],
                     -0.5, True, True)
    write_csv(sweep_rows(sw, "abc", 0), tmp_path / "sweep.csv")
    rows = read_rows(tmp_path / "sweep.csv")
    assert len(rows) == 5 and rows[-1]["slope"] == "-0.5"
    assert b"\r" not in (tmp_path / "sweep.csv").read_bytes()


def test_write_csv_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        write_csv([], blocker / "sub" / "out.csv")


def test_unknown_command(tmp_path, capsys):
    cfg = load_config(write(tmp_path, SMALL))
    assert run_command("explode", cfg) == 2
    assert main(["explode", "--config", str(write(tmp_path, SMALL))]) == 2
    assert "usage" in capsys.readouterr().err


def test_main_reports_errors_with_exit_2(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["solve", "--config", str(write(tmp_path, {"q": -1}))]) == 2


def test_verify_null_data_passes(tmp_path):
    p = write(tmp_path, {**SMALL, "b": 0, "u_b": 0, "q": 0.5})
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    rows = read_rows(tmp_path / "o" / "verify.csv")
    assert rows and all(r["passed"] == "true" for r in rows)
    assert {r["config_hash"] for r in rows} == {load_config(p).config_hash}


def test_verify_sabotaged_tolerance_fails(tmp_path):
    p = write(tmp_path, {**SMALL, "newton_tol": 1})
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    rows = read_rows(tmp_path / "o" / "verify.csv")
    assert any(float(r["margin"]) < 0 for r in rows)


def test_solve_and_seed_override(tmp_path):
    p = write(tmp_path, {**SMALL, "control": {"kind": "random", "low": 0, "high": 1}})
    out = tmp_path / "o"
    assert main(["solve", "--config", str(p), "--out", str(out), "--seed", "9"]) == 0
    rows = read_rows(out / "state.csv")
    assert len(rows) == 9 * 9
    assert list(rows[0]) == ["config_hash", "seed", "node", "time", "value"]
    assert rows[0]["seed"] == "9" and float(rows[0]["value"]) == 1.0
    first = (out / "state.csv").read_bytes()
    main(["solve", "--config", str(p), "--out", str(out), "--seed", "10"])
    assert (out / "state.csv").read_bytes() != first


def test_control_from_file(tmp_path):
    g = np.full((8, 9), 0.5)
    np.savetxt(tmp_path / "g.csv", g, delimiter=",")
    p = write(tmp_path, {**SMALL, "control": {"kind": "file", "path": "g.csv"}})
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    np.save(tmp_path / "bad.npy", np.zeros((3, 3)))
    p = write(tmp_path, {**SMALL, "control": {"kind": "file", "path": "bad.npy"}}, "bad.json")
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_optimize_and_sweeps(tmp_path):
    p = write(tmp_path, {**SMALL, "h_list": [1, 10, 100, 1000]})
    out = tmp_path / "o"
    assert main(["optimize", "--config", str(p), "--out", str(out)]) == 0
    rows = read_rows(out / "optimize.csv")
    assert rows[-1]["name"] == "optimize" and rows[-1]["passed"] == "true"
    assert len(read_rows(out / "control.csv")) == 8 * 9
    assert main(["sweep-h", "--config", str(p), "--out", str(out)]) == 0
    assert len(read_rows(out / "sweep_h.csv")) == 5
    assert main(["converge-control", "--config", str(p), "--out", str(out)]) == 0
    q = write(tmp_path, {**SMALL, "b": 0, "u_b": 0, "q": 0.2,
                         "control": {"kind": "random", "low": 0, "high": 1}}, "eps.json")
    assert main(["sweep-eps", "--config", str(q), "--out", str(out)]) == 0
    assert read_rows(out / "sweep_eps.csv")[-1]["passed"] == "true"


def test_module_entry_point(tmp_path):
    p = write(tmp_path, SMALL)
    res = subprocess.run([sys.executable, "-m", "tresca_vi", "solve", "--config", str(p),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "tresca_vi", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "converge-control" in res.stdout
