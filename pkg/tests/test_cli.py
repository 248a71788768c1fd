"""End-to-end tests of the command-line front end.

Tags: [DERIVED] independent oracle, [PAPER] reference value, [TRIVIAL] identity.
"""
import csv
import json
import math

import pytest

from iontransport import cli
from iontransport import waveform_synth as ws


@pytest.fixture(autouse=True)
def cached_separation(monkeypatch, separation):
    """Route two-ion separations on the built-in trap through the session cache."""
    original = ws.synth_separation

    def synth(basis, ramp, n_ions=2, constants=None, **kw):
        if n_ions == 2 and not kw and constants in (None, cli.DEFAULT_CONSTANTS):
            return separation(ramp)
        return original(basis, ramp, n_ions, constants=constants, **kw)
    monkeypatch.setattr(ws, "synth_separation", synth)


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code, report = cli.run(["--out", str(out), *argv])
    assert code == 0
    return report, out


def read_json(path):
    return json.loads(path.read_text())


# -- solve-well ---------------------------------------------------------------------------

def test_solve_well(tmp_path):
    """[PAPER] the report echoes the requested 1.972 MHz and finds that frequency."""
    report, out = run(tmp_path, "solve-well", "--omega-MHz", "1.972")
    well = read_json(out / "well.json")
    assert abs(well["frequency_MHz"] / 1.972 - 1) < 1e-9
    assert well["requested_frequency_MHz"] == 1.972
    assert abs(well["z0_m"]) < 1e-12
    assert report["outputs"]["z0_m"] == well["z0_m"]


def test_missing_trap_file(tmp_path, capsys):
    """[TRIVIAL] exit 2 and the message names the path."""
    missing = tmp_path / "nope.json"
    code = cli.main(["--trap", str(missing), "--out", str(tmp_path), "solve-well"])
    assert code == cli.EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_trap_file_is_used(tmp_path):
    from iontransport.trap_model import default_trap_dict
    path = tmp_path / "trap.json"
    path.write_text(json.dumps(default_trap_dict()))
    report, _ = run(tmp_path, "--trap", str(path), "solve-well")
    assert report["trap"] == str(path)
    assert abs(report["outputs"]["frequency_MHz"] / 2.0 - 1) < 1e-9


# -- configuration ------------------------------------------------------------------------

def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema": cli.CONFIG_SCHEMA, "omega_MHz": 1.5, "z0_um": 20}))
    report, _ = run(tmp_path, "solve-well", "--config", str(cfg), "--omega-MHz", "2.5")
    assert report["inputs"] == {"omega_MHz": 2.5, "z0_um": 20.0}


@pytest.mark.parametrize("content,needle", [
    ({"schema": "iontransport.config/1", "omega_mhz": 2.0}, "unknown keys"),
    ({"omega_MHz": 2.0}, "schema"),
    ({"schema": "iontransport.config/1", "command": "flop"}, "not 'solve-well'"),
    ({"schema": "iontransport.config/1", "omega_MHz": -1}, "omega_MHz"),
])
def test_bad_config_is_rejected(tmp_path, capsys, content, needle):
    """[TRIVIAL] fail closed on typos, missing schema and out-of-range values."""
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(content))
    code = cli.main(["--out", str(tmp_path), "solve-well", "--config", str(cfg)])
    assert code == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_bad_json_reports_line(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{\n "schema": "iontransport.config/1",\n "z0_um": ,\n}')
    assert cli.main(["--out", str(tmp_path), "solve-well", "--config", str(cfg)]) == 2
    assert "cfg.json:3" in capsys.readouterr().err


def test_flag_range_checks(tmp_path):
    assert cli.main(["--out", str(tmp_path), "flop", "--nbar", "-1"]) == cli.EXIT_CONFIG
    assert cli.main(["--out", str(tmp_path), "flop"]) == cli.EXIT_CONFIG  # no nbar
    assert cli.main(["--out", str(tmp_path), "transport", "--n-ions", "2",
                     "--compensate"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit):
        cli.main(["--seed", "-1", "flop"])


# -- transport -------------------------------------------------------------------------------

def test_transport_tuned(tmp_path):
    """[DERIVED] a sine-squared ramp on a spectral zero ends with nbar < 0.05."""
    report, out = run(tmp_path, "transport")
    out_ = report["outputs"]
    assert out_["modes"][0]["nbar"] < 0.05
    assert out_["n_samples"] == 401
    assert report["certificates"]["spectral_criterion"] < 1e-12
    for name in ("waveform.csv", "trajectory.csv", "excitation.json", "report.json"):
        assert (out / name).exists()


def test_transport_detuned_with_compensation(tmp_path):
    """[DERIVED] a quarter-period detuning excites the ion; the pulse removes it."""
    t_t = 8e-6
    f = (31.5 / (2 * t_t)) / 1e6
    report, out = run(tmp_path, "transport", "--omega-MHz", repr(f), "--compensate")
    out_ = report["outputs"]
    assert out_["modes"][0]["nbar"] > 0.5
    assert out_["compensation"]["residual_nbar"] < 1e-6
    assert out_["compensation"]["analytic_residual_nbar"] < 1e-4
    assert read_json(out / "excitation.json")["compensation"] == out_["compensation"]


def test_transport_two_ions(tmp_path):
    """[PAPER] both COM and stretch are reported; the stretch stays nearly unexcited."""
    report, _ = run(tmp_path, "transport", "--n-ions", "2")
    modes = {m["label"]: m["nbar"] for m in report["outputs"]["modes"]}
    assert set(modes) == {"COM", "stretch"}
    assert modes["stretch"] < 0.1 * max(modes["COM"], 1e-2)


# -- separation ----------------------------------------------------------------------------

@pytest.mark.slow
def test_separate_default(tmp_path):
    """[PAPER] symmetric trap, two ions: equal excitation in both zones."""
    report, out = run(tmp_path, "separate")
    nbar = report["outputs"]["nbar"]
    assert set(nbar) == {"A", "B"}
    assert abs(nbar["A"] - nbar["B"]) < 1e-3 * (nbar["A"] + nbar["B"])
    cert = read_json(out / "certificate.json")
    assert cert["adiabaticity"]["stage1"]["ok"]
    assert cert["adiabaticity"]["stage2"]["ok"]
    assert cert["b_at_crossing_V_per_m4"] > 0
    assert report["certificates"] == cert


@pytest.mark.slow
def test_separate_eps2_halved(tmp_path):
    """[DERIVED] halving the stage-2 bound at least doubles the stage-2 duration."""
    base, _ = run(tmp_path, "separate", name="a")
    half, _ = run(tmp_path, "separate", "--eps2", "0.0075", name="b")
    d0, d1 = base["outputs"]["stage_durations_s"], half["outputs"]["stage_durations_s"]
    assert d1[1] >= 2 * d0[1]


@pytest.mark.slow
def test_separate_o2_offset_is_asymmetric(tmp_path):
    """[PAPER] a 3 mV O2 offset makes the excitation strongly one-sided; the
    sign of the offset selects the side. With this trap a positive offset
    loads the A side (the reverse of the published direction)."""
    plus, _ = run(tmp_path, "separate", "--o2-offset-mV", "3", name="p")
    minus, _ = run(tmp_path, "separate", "--o2-offset-mV", "-3", name="m")
    p, m = plus["outputs"]["nbar"], minus["outputs"]["nbar"]
    assert max(p.values()) > 10 * min(p.values())
    assert max(m.values()) > 10 * min(m.values())
    assert (p["A"] > p["B"]) != (m["A"] > m["B"])
    assert max(m.values()) > 15 and max(p.values()) > 15


def test_separate_duration_limit_is_physics_error(tmp_path, capsys):
    code = cli.main(["--out", str(tmp_path), "separate", "--max-duration-us", "10"])
    assert code == cli.EXIT_PHYSICS
    assert "limit" in capsys.readouterr().err


# -- partition scan ------------------------------------------------------------------------

def test_partition_scan_nine_ions(tmp_path):
    """[PAPER] monotone staircase through every count 0..9; [DERIVED] each plateau
    spans at least one grid offset."""
    report, out = run(tmp_path, "partition-scan")
    assert report["outputs"]["monotone"]
    assert report["outputs"]["counts_visited"] == list(range(10))
    with (out / "staircase.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    lefts = [int(r["left_count"]) for r in rows]
    for k in range(10):
        assert lefts.count(k) >= 1


def test_partition_scan_two_ions_symmetric(tmp_path):
    """[TRIVIAL] zero offset splits two ions one and one."""
    _, out = run(tmp_path, "partition-scan", "--n-ions", "2", "--offset-min-V", "0",
                 "--offset-max-V", "0.1", "--n-offsets", "2")
    with (out / "staircase.csv").open() as fh:
        first = next(csv.DictReader(fh))
    assert float(first["offset_V"]) == 0.0 and first["left_count"] == "1"


def test_partition_scan_unknown_electrode(tmp_path):
    assert cli.main(["--out", str(tmp_path), "partition-scan", "--electrode", "Q"]) == 2


# -- flop / fit ------------------------------------------------------------------------------

def test_flop_fit_thermal(tmp_path):
    """[PAPER] nbar = 0.19 survives flop -> fit within 1e-4."""
    _, out = run(tmp_path, "flop", "--nbar", "0.19")
    report, fit_out = run(tmp_path, "fit", "--trace", str(out / "trace.csv"), name="fit")
    fit = read_json(fit_out / "fit.json")
    assert abs(fit["nbar"] / 0.19 - 1) < 1e-4
    assert set(fit) == {"model", "nbar", "nbar_sigma", "gamma", "residual"}
    assert report["outputs"] == fit


def test_flop_fit_coherent(tmp_path):
    """[PAPER] |alpha| = 2.53 at eta = 0.486 survives flop -> fit within 1e-3."""
    _, out = run(tmp_path, "flop", "--model", "coherent", "--alpha", "2.53", "--eta", "0.486")
    _, fit_out = run(tmp_path, "fit", "--trace", str(out / "trace.csv"), "--model",
                     "coherent", "--eta", "0.486", name="fit")
    fit = read_json(fit_out / "fit.json")
    assert abs(fit["alpha"] / 2.53 - 1) < 1e-3
    assert math.isclose(fit["alpha"] ** 2, fit["nbar"], rel_tol=1e-12)


def test_fit_parse_errors(tmp_path, capsys):
    """[TRIVIAL] an empty trace and a malformed row are parse errors (exit 2)."""
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert cli.main(["--out", str(tmp_path), "fit", "--trace", str(empty)]) == 2
    assert "empty" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("t_s,p_down\n0,1\n1e-6,x\n")
    assert cli.main(["--out", str(tmp_path), "fit", "--trace", str(bad)]) == 2
    assert "bad.csv:3" in capsys.readouterr().err


def test_fit_failure_is_numerical_error(tmp_path):
    short = tmp_path / "short.csv"
    short.write_text("t_s,p_down\n" + "".join(f"{k}e-6,1.0\n" for k in range(5)))
    assert cli.main(["--out", str(tmp_path), "fit", "--trace", str(short)]) == 3


def test_reports_are_deterministic(tmp_path):
    """[TRIVIAL] same config and seed give byte-identical output apart from the timestamp."""
    args = ["--seed", "42", "flop", "--nbar", "0.5", "--repetitions", "100"]
    a, out_a = run(tmp_path, *args, name="a")
    b, out_b = run(tmp_path, *args, name="b")
    assert (out_a / "trace.csv").read_bytes() == (out_b / "trace.csv").read_bytes()
    a.pop("timestamp")
    b.pop("timestamp")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    c, out_c = run(tmp_path, "--seed", "43", *args[2:], name="c")
    assert (out_c / "trace.csv").read_bytes() != (out_a / "trace.csv").read_bytes()


def test_main_prints_summary_and_json(tmp_path, capsys):
    assert cli.main(["--out", str(tmp_path), "solve-well"]) == 0
    assert capsys.readouterr().out.startswith("solve-well ok")
    assert cli.main(["--out", str(tmp_path), "--json", "solve-well"]) == 0
    assert json.loads(capsys.readouterr().out)["command"] == "solve-well"
