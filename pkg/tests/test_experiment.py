import json
import math

import numpy as np
import pytest

from hcfloop.experiment import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    SweepGroup,
    build_transmission,
    parse_config,
    run_group,
    run_sweep,
    sweep_groups,
    write_results,
)
from hcfloop.metrics import read_records_csv, records_to_csv
from hcfloop.signal import measure_power_dbm

# small and coarse enough for a unit test; physics accuracy is not the point
FAST = dict(payload_symbols=1 << 14, training_symbols=2048, max_nonlinear_phase_rad=0.1, max_step_km=1.0)


def write(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def test_empty_config_gives_defaults(tmp_path):
    assert parse_config(write(tmp_path, "")) == ExperimentConfig()


def test_config_sections_and_lists(tmp_path):
    cfg = parse_config(write(tmp_path, """
[experiment]
fut_kinds = hcf, smf
launch_power_list_dbm = 13 17 23
n_loops_list = 1, 25
[channels]
preemphasis = no
[dsp]
cpe_block_symbols = 32
"""))
    assert cfg.fut_kinds == ("hcf", "smf")
    assert cfg.launch_power_list_dbm == (13.0, 17.0, 23.0)
    assert cfg.n_loops_list == (1, 25)
    assert cfg.preemphasis is False
    assert cfg.cpe_block_symbols == 32


def test_preset_with_override(tmp_path):
    cfg = parse_config(write(tmp_path, "[experiment]\npreset = fig2\nseeds = 3\n"))
    assert cfg.scale == "full" and cfg.channel_count == 9 and cfg.seeds == (3,)
    assert set(PRESETS) >= {"scaled", "fig2", "fig2-scaled", "fig1d"}


@pytest.mark.parametrize("text, match", [
    ("[loop]\nbogus = 1\n", "unknown key"),
    ("[nowhere]\nx = 1\n", "unknown section"),
    ("[experiment]\npreset = fig9\n", "unknown preset"),
    ("[channels]\nchannel_spacing_hz = 16e9\n", "channel overlap"),
    ("[experiment]\nfut_kinds = pcf\n", "unknown fut kind"),
    ("[channels]\nsymbol_rate = fast\n", "bad value"),
])
def test_config_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(write(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "absent.ini")


def test_regime_scaling_quantities():
    cfg = ExperimentConfig()
    assert cfg.dispersion_scale == pytest.approx((130 / 16) ** 2)
    assert cfg.power_offset_db == pytest.approx(10 * math.log10(3 / 9))
    assert cfg.effective_linewidth_hz == pytest.approx(100e3 * 16 / 130)
    literal = ExperimentConfig(regime_scaling=False)
    assert literal.dispersion_scale == 1.0 and literal.power_offset_db == 0.0
    lc = cfg.loop_config("smf", 23.0, 1)
    assert lc.launch_power_dbm == pytest.approx(23.0 + cfg.power_offset_db)
    assert lc.fut.dispersion_ps_per_nm_km == pytest.approx(17.0 * cfg.dispersion_scale, rel=1e-3)


def test_transmission_power_and_layout():
    cfg = ExperimentConfig(tx_osnr_db=float("inf"), **FAST)
    tx = build_transmission(cfg, 1)
    assert measure_power_dbm(tx.signal) == pytest.approx(cfg.loop_input_total_dbm, abs=0.1)
    assert tx.symbols.shape == (2, cfg.training_symbols + cfg.payload_symbols)
    assert np.array_equal(tx.symbols[:, : cfg.training_symbols], tx.training)
    # training is shared across seeds, payload is not
    other = build_transmission(cfg, 2)
    assert np.array_equal(other.training, tx.training)
    assert not np.array_equal(other.symbols, tx.symbols)


def test_sweep_groups_share_loop_runs():
    cfg = ExperimentConfig(fut_kinds=("hcf", "smf"), launch_power_list_dbm=(13.0, 23.0),
                           n_loops_list=(5, 1, 5), seeds=(1, 2))
    groups = sweep_groups(cfg)
    assert len(groups) == 8
    assert all(g.loops == (1, 5) for g in groups)
    assert len({g.seed for g in groups}) == 8


def test_single_loop_hcf_smoke():
    cfg = ExperimentConfig(tx_osnr_db=30.0, **FAST)
    res = run_group(cfg, SweepGroup(0, "hcf", 23.0, 1, (1,)))
    (rec,) = res.records
    assert rec.error == ""
    assert rec.snr_db > 15
    assert 0 < rec.gmi <= cfg.entropy_bits
    assert rec.air_gbps == pytest.approx(2 * 16 * rec.gmi, rel=1e-9)
    assert res.trace.boundary_markers.size == 1


def test_failed_point_is_recorded_not_raised():
    cfg = ExperimentConfig(loop_input_dbm=-15.0, **FAST)  # amp2 would have to attenuate
    res = run_group(cfg, SweepGroup(0, "hcf", 23.0, 1, (1, 2)))
    assert [r.n_loops for r in res.records] == [1, 2]
    assert all("attenuation requested" in r.error for r in res.records)
    assert all(math.isnan(r.snr_db) for r in res.records)


def test_sweep_is_deterministic_and_written(tmp_path):
    cfg = ExperimentConfig(fut_kinds=("hcf", "smf"), n_loops_list=(1, 2), **FAST)
    a = run_sweep(cfg)
    b = run_sweep(cfg, workers=2)
    assert a.records == b.records
    written = write_results(a, tmp_path / "out")
    assert records_to_csv(read_records_csv(written["results"])) == records_to_csv(a.records)
    assert len(written["traces"]) == 2
    manifest = json.loads(written["manifest"].read_text())
    assert manifest["config"]["fut_kinds"] == ["hcf", "smf"]
    assert len(manifest["seeds"]) == 2
    assert (tmp_path / "out" / "fig_snr_vs_loops.png").exists()
    again = write_results(b, tmp_path / "again", figures=False)
    assert again["results"].read_text() == written["results"].read_text()
