import json
import textwrap
from pathlib import Path

import pytest

from heralded_cz import acceptance
from heralded_cz.cli import SweepAxis, main, parse_config, sweep_points
from heralded_cz.errors import ConfigError
from heralded_cz.protocol import CSV_COLUMNS

BASE = """\
[run]
mode = {mode}
{extra}
[params]
omega = 1.0
kappa = 0.2
tau = 1.3
t_detect = 25
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return str(path)


def test_gate_mode_writes_row_and_amplitudes(tmp_path, capsys):
    cfg = write(tmp_path, BASE.format(mode="gate", extra="pattern = D2,D3"))
    out = tmp_path / "gate.csv"
    assert main(["--config", cfg, "--output", str(out)]) == 0
    header, row = out.read_text().splitlines()
    assert header.split(",") == list(CSV_COLUMNS)
    assert row.endswith(",1.0")
    lines = (tmp_path / "gate.csv.amplitudes.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["dimension"] == 16
    assert {json.loads(x)["basis_label"] for x in lines[1:]} == {"gH,gH", "gH,gV", "gV,gH", "gV,gV"}
    assert "fidelity_cz" in capsys.readouterr().out


def test_gate_output_is_byte_identical(tmp_path):
    cfg = write(tmp_path, BASE.format(mode="gate", extra=""))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["--config", cfg, "--output", str(a), "--quiet"])
    main(["--config", cfg, "--output", str(b), "--quiet"])
    assert a.read_bytes() == b.read_bytes()


def test_sweep_cartesian_product(tmp_path):
    text = BASE.format(mode="sweep", extra="") + "[sweep]\ntau = 0.5, 2, 3\neta = 0.1, 0.4, 3, log\n"
    cfg = write(tmp_path, text)
    out = tmp_path / "sweep.csv"
    assert main(["--config", cfg, "--output", str(out), "--quiet"]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 10
    taus = sorted({r.split(",")[2] for r in rows[1:]})
    assert taus == ["0.5", "1.25", "2.0"]


def test_sweep_parallel_matches_serial(tmp_path):
    text = BASE.format(mode="sweep", extra="") + "[sweep]\nomega = 0.5, 2, 4\n"
    cfg = write(tmp_path, text)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["--config", cfg, "--output", str(a), "--quiet", "--jobs", "1"])
    main(["--config", cfg, "--output", str(b), "--quiet", "--jobs", "2"])
    assert a.read_bytes() == b.read_bytes()


def test_sweep_axis_endpoints():
    vals = SweepAxis("tau", 0.1, 10, 3, "log").values()
    assert vals[0] == 0.1 and vals[-1] == 10.0
    assert vals[1] == pytest.approx(1.0)
    assert SweepAxis("tau", 1, 2, 1).values() == [1]


def test_sweep_points_count():
    cfg = parse_config(BASE.format(mode="sweep", extra="")
                       + "[sweep]\ntau = 1, 2, 4\nphi1 = 0, 3, 5\n")
    assert len(sweep_points(cfg)) == 20


def test_mc_mode_log_and_summary(tmp_path, capsys):
    cfg = write(tmp_path, BASE.format(mode="mc", extra="n_trajectories = 150"))
    out = tmp_path / "mc.jsonl"
    assert main(["--config", cfg, "--output", str(out), "--seed", "3"]) == 0
    lines = out.read_text().splitlines()
    assert [json.loads(x)["seed"] for x in lines] == list(range(3, 153))
    summary = json.loads((tmp_path / "mc.jsonl.summary.json").read_text())
    assert summary["base_seed"] == 3
    assert 0 <= summary["heralding_mean"] <= 1
    assert json.loads(capsys.readouterr().out) == summary


def test_mc_deterministic_across_jobs(tmp_path, monkeypatch):
    cfg = write(tmp_path, BASE.format(mode="mc", extra="n_trajectories = 120"))
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["--config", cfg, "--output", str(a), "--quiet"])
    monkeypatch.setenv("GATE_SIM_JOBS", "2")
    main(["--config", cfg, "--output", str(b), "--quiet"])
    assert a.read_bytes() == b.read_bytes()


def test_verify_mode_reports_each_criterion(tmp_path, monkeypatch, capsys):
    fake = [acceptance.CriterionResult(k, f"c{k}", k != 8, "d", 0.0) for k in range(1, 10)]
    monkeypatch.setattr(acceptance, "run_all", lambda jobs=1, echo=print: fake)
    cfg = write(tmp_path, BASE.format(mode="verify", extra=""))
    out = tmp_path / "report.txt"
    assert main(["--config", cfg, "--output", str(out)]) == 3
    assert len(out.read_text().splitlines()) == 9
    fake[7] = acceptance.CriterionResult(8, "c8", True, "d", 0.0)
    assert main(["--config", cfg, "--quiet"]) == 0


@pytest.mark.parametrize("text,line,field", [
    (BASE.format(mode="gate", extra="") + "colour = red\n", 9, "colour"),
    (BASE.format(mode="teleport", extra=""), 2, "mode"),
    (BASE.format(mode="gate", extra="").replace("kappa = 0.2", "kappa = -1"), 6, "kappa"),
    (BASE.format(mode="gate", extra="").replace("tau = 1.3", "tau = abc"), 7, None),
    (BASE.format(mode="gate", extra="pattern = D1,D2"), 3, "pattern"),
    (BASE.format(mode="mc", extra="n_trajectories = 10"), 3, "n_trajectories"),
    (BASE.format(mode="gate", extra="") + "[sweep]\ntau = 1, 2\n", 10, "tau"),
    (BASE.format(mode="gate", extra="") + "[sweep]\ntau = 0, 2, 3, log\n", 10, "tau"),
])
def test_config_errors_locate_problem(text, line, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    if field is not None:
        assert info.value.field == field


def test_missing_required_parameter():
    text = BASE.format(mode="gate", extra="").replace("omega = 1.0\n", "")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "omega"


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(BASE.format(mode="gate", extra="") + "[extras]\nx = 1\n")


def test_inputs_section():
    text = BASE.format(mode="gate", extra="") + (
        "[inputs]\nalpha1 = 0.6\nbeta1 = 0.8j\nalpha2 = 1\nbeta2 = 0\n")
    cfg = parse_config(text)
    assert cfg.inputs.beta1 == 0.8j
    with pytest.raises(ConfigError, match="alpha2"):
        parse_config(text.replace("alpha2 = 1\n", ""))


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, BASE.format(mode="gate", extra="") + "nope = 1\n")
    assert main(["--config", cfg]) == 1
    assert "line 9" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.ini")]) == 1


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_bad_jobs_env(tmp_path, monkeypatch):
    cfg = write(tmp_path, BASE.format(mode="gate", extra=""))
    monkeypatch.setenv("GATE_SIM_JOBS", "many")
    assert main(["--config", cfg, "--quiet"]) == 1


def test_numeric_failure_exit_code(tmp_path):
    # no drive: the coincidence branch has zero weight
    cfg = write(tmp_path, BASE.format(mode="gate", extra="").replace("omega = 1.0", "omega = 0"))
    assert main(["--config", cfg, "--quiet"]) == 2


DATA = Path(__file__).parent / "data"


def test_gate_golden_csv(tmp_path):
    out = tmp_path / "gate.csv"
    assert main(["--config", str(DATA / "gate.ini"), "--output", str(out), "--quiet"]) == 0
    assert out.read_bytes() == (DATA / "gate_golden.csv").read_bytes()


def test_gate_fidelity_in_row(tmp_path):
    out = tmp_path / "gate.csv"
    main(["--config", str(DATA / "gate.ini"), "--output", str(out), "--quiet"])
    header, row = out.read_text().splitlines()
    fid = float(row.rsplit(",", 1)[1])
    assert abs(fid - 1.0) < 1e-9


def test_minimal_config_defaults():
    cfg = parse_config(BASE.format(mode="gate", extra=""))
    p = cfg.params
    assert (p.eta, p.phi1, p.phi2, p.fock_cutoff) == (0.0, 0.0, 0.0, 1)
    assert cfg.n_trajectories == 1000 and cfg.base_seed == 0


def test_eta_out_of_range_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config(BASE.format(mode="gate", extra="") + "eta = 1.5\n")
    assert info.value.field == "eta"
    assert "[0, 1]" in str(info.value)


def test_fifty_log_points():
    cfg = parse_config(BASE.format(mode="sweep", extra="") + "[sweep]\ntau = 0.1, 10, 50, log\n")
    vals = cfg.sweep_axes[0].values()
    assert len(vals) == 50
    assert vals[0] == 0.1 and vals[-1] == 10.0
    assert all(b > a for a, b in zip(vals, vals[1:]))
