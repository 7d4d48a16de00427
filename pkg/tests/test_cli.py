import pytest

from hcfloop import __version__
from hcfloop.cli import main
from hcfloop.loop import build_trace, write_trace


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_presets_list_and_show(capsys):
    assert main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    assert "fig2-scaled" in out and "fig1d" in out
    assert main(["presets", "show", "fig1d"]) == 0
    assert "preset = fig1d" in capsys.readouterr().out
    assert main(["presets", "show", "nope"]) == 2
    assert main(["presets", "show"]) == 2


def test_bad_config_exits_with_message(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[loop]\nwhatever = 3\n")
    assert main(["run", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.ini")]) == 2


def test_run_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(
        "[experiment]\nn_loops_list = 1\n"
        "[channels]\npayload_symbols = 16384\ntraining_symbols = 2048\n"
        "[loop]\nmax_nonlinear_phase_rad = 0.1\nmax_step_km = 1.0\n"
    )
    out = tmp_path / "res"
    assert main(["run", str(cfg), "--out", str(out), "--no-figures"]) == 0
    assert "1 points written" in capsys.readouterr().out
    assert (out / "results.csv").exists() and (out / "manifest.json").exists()
    assert not list(out.glob("fig_*.png"))


def test_latency_report(tmp_path, capsys):
    a, b = tmp_path / "hcf.txt", tmp_path / "smf.txt"
    write_trace(build_trace([0.0] * 25, 231.84e-6, 1e-6), a)
    write_trace(build_trace([0.0] * 25, 233.76e-6, 1e-6), b)
    assert main(["latency-report", str(a), str(b), "--fut-km", "1.1", "--common-delay-us", "228.37"]) == 0
    out = capsys.readouterr().out
    assert "25 loops" in out
    diff = float(out.strip().splitlines()[-1].split(":")[1].split()[0])
    assert diff == pytest.approx(1.92 / 1.1, abs=0.05)


def test_latency_report_rejects_flat_trace(tmp_path, capsys):
    a = tmp_path / "flat.txt"
    a.write_text("# time_us power_dbm\n0 0\n1 0\n2 0\n")
    assert main(["latency-report", str(a), str(a), "--fut-km", "1.0"]) == 2
    assert "insufficient markers" in capsys.readouterr().err
