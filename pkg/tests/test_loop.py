import numpy as np
import pytest

import oracles
from hcfloop.fiber import FiberSpec, StepControl, make_preset
from hcfloop.loop import (
    DEFAULT_OVERHEAD_DELAY_US,
    AmplifierError,
    AmplifierSpec,
    LoopConfig,
    LoopError,
    amplify,
    attenuate,
    build_trace,
    read_trace,
    run_loop,
    voa2_auto,
    wss_equalize,
    write_trace,
)
from hcfloop.metrics import measure_osnr
from hcfloop.signal import ChannelGrid, SignalBlock, measure_power_dbm, set_power_dbm
from hcfloop.transmitter import TxChain, draw_shaped_symbols, mb_shape_constellation, pulse_shape_rrc, wdm_multiplex

NOISELESS = float("-inf")


def channel(grid, n_sym=4096, power_dbm=-10.0, seed=1, sps=8):
    const = mb_shape_constellation(6.0)
    chain = TxChain(16e9, sps, laser_linewidth_hz=0)
    sym = draw_shaped_symbols(const, 2 * n_sym, seed).reshape(2, -1)
    return set_power_dbm(pulse_shape_rrc(sym, chain, grid.center_frequency), power_dbm)


@pytest.fixture
def grid1():
    return ChannelGrid.uniform(1559.39, 50e9, 1, 17.6e9)


def test_unity_noiseless_amp_is_identity(grid1):
    s = channel(grid1)
    out = amplify(s, AmplifierSpec("fixed_gain", 0.0, noise_figure_db=0.0), seed=1)
    assert np.max(np.abs(out.field - s.field)) < 1e-12


def test_fixed_output_power_includes_noise(grid1):
    for p_in in (-30.0, -10.0, 5.0):
        s = set_power_dbm(channel(grid1), p_in)
        out = amplify(s, AmplifierSpec("fixed_output_power", target_output_dbm=23.0, noise_figure_db=5.0), 2)
        assert measure_power_dbm(out) == pytest.approx(23.0, abs=0.05)


def test_single_amp_osnr_matches_rule_of_thumb(grid1):
    s = channel(grid1, power_dbm=-10.0)
    out = amplify(s, AmplifierSpec("fixed_gain", 20.0, noise_figure_db=5.0), 3)
    osnr = measure_osnr(out, grid1)[0]
    assert osnr == pytest.approx(oracles.osnr_rule_of_thumb_db(-10.0, 5.0), abs=0.2)


@pytest.mark.parametrize("n_amps", [1, 5, 25])
def test_amplifier_cascade_osnr(grid1, n_amps):
    amp = AmplifierSpec("fixed_gain", 20.0, noise_figure_db=5.0)
    x = channel(grid1, power_dbm=-10.0)
    stages = []
    for k in range(n_amps):
        x = amplify(x if k == 0 else attenuate(x, 20.0), amp, k)
        stages.append(oracles.osnr_single_amp_db(-10.0, 5.0, 20.0, grid1.center_frequency))
    assert measure_osnr(x, grid1)[0] == pytest.approx(oracles.cascade_osnr_db(stages), abs=0.3)


def test_amplifier_errors(grid1):
    s = set_power_dbm(channel(grid1), 10.0)
    with pytest.raises(AmplifierError, match="attenuation requested"):
        amplify(s, AmplifierSpec("fixed_output_power", target_output_dbm=0.0))
    with pytest.raises(AmplifierError, match="saturation"):
        amplify(s, AmplifierSpec("fixed_gain", 20.0, max_output_dbm=27.0))
    with pytest.raises(ValueError):
        AmplifierSpec(noise_figure_db=-1.0)
    with pytest.raises(ValueError):
        AmplifierSpec("fixed_output_power", target_output_dbm=30, max_output_dbm=27)


def test_attenuator_and_voa(grid1):
    s = set_power_dbm(channel(grid1), 17.3)
    assert attenuate(s, 0.0) is s
    assert attenuate(s, 10 * np.log10(2)).mean_power() == pytest.approx(s.mean_power() / 2)
    out = voa2_auto(s, 10.2)
    assert measure_power_dbm(out) == pytest.approx(10.2, abs=1e-9)
    with pytest.raises(LoopError, match="VOA cannot amplify"):
        voa2_auto(s, 20.0)
    with pytest.raises(LoopError):
        attenuate(s, -1.0)


def _wdm(grid, powers, sps=8):
    chans = [channel(grid, 1024, 0.0, seed=k, sps=sps) for k in range(grid.channel_count)]
    mux = wdm_multiplex(chans, grid, 0.0)
    # rescale each channel in the frequency domain
    spec = np.fft.fft(mux.field, axis=-1)
    f = mux.frequencies()
    for off, p in zip(grid.offsets_hz(), powers):
        band = np.abs(f - off) < grid.channel_spacing_hz / 2
        spec[:, band] *= 10 ** (p / 20)
    return mux.with_field(np.fft.ifft(spec, axis=-1))


def _band_powers(sig, grid):
    spec = np.sum(np.abs(np.fft.fft(sig.field, axis=-1)) ** 2, axis=0)
    f = sig.frequencies()
    return np.array([spec[np.abs(f - off) < grid.channel_spacing_hz / 2].sum() for off in grid.offsets_hz()])


def test_wss_equal_channels_untouched():
    grid = ChannelGrid.uniform(1559.39, 25e9, 3, 17.6e9)
    _, att = wss_equalize(_wdm(grid, [0, 0, 0]), grid, return_attenuation=True)
    assert np.allclose(att, 0, atol=0.05)


def test_wss_flattens_a_tilt():
    grid = ChannelGrid.uniform(1559.39, 25e9, 3, 17.6e9)
    sig = _wdm(grid, [0, 3, 0])
    out, att = wss_equalize(sig, grid, return_attenuation=True)
    assert att[1] == pytest.approx(3.0, abs=0.1)
    p = 10 * np.log10(_band_powers(out, grid))
    assert p.max() - p.min() < 0.05


def test_wss_removes_inter_channel_noise():
    grid = ChannelGrid.uniform(1559.39, 25e9, 3, 17.6e9)
    sig = amplify(set_power_dbm(_wdm(grid, [0, 0, 0]), -20.0),
                  AmplifierSpec("fixed_gain", 20.0, noise_figure_db=5.0), 1)
    out = wss_equalize(sig, grid, passband_hz=18e9)
    f = sig.frequencies()
    guard = np.zeros(f.size, bool)
    for off in grid.offsets_hz():
        guard |= (np.abs(f - off - 12.5e9) < 2.5e9)
    before = np.sum(np.abs(np.fft.fft(sig.field, axis=-1))[:, guard] ** 2)
    after = np.sum(np.abs(np.fft.fft(out.field, axis=-1))[:, guard] ** 2)
    assert 10 * np.log10(before / max(after, 1e-300)) >= 20


def test_trace_construction_and_io(tmp_path):
    tr = build_trace([0.0] * 25, 233.76e-6, 1e-6)
    assert tr.boundary_markers.size == 25
    assert np.ptp(np.diff(tr.boundary_markers)) <= 1
    assert np.all(tr.power_dbm[tr.boundary_markers] == 3.0)
    path = tmp_path / "trace.txt"
    write_trace(tr, path)
    back = read_trace(path)
    assert np.array_equal(back.boundary_markers, tr.boundary_markers)
    np.testing.assert_allclose(back.power_dbm, tr.power_dbm)
    assert back.sample_interval_s == pytest.approx(1e-6)


def test_transparent_loop_returns_scaled_input():
    grid = ChannelGrid.uniform(1559.39, 50e9, 1, 17.6e9)
    tx = channel(grid, 512, 5.0)
    # band-limit to the WSS passband so the filter is lossless for the signal
    spec = np.fft.fft(tx.field, axis=-1)
    spec[:, np.abs(tx.frequencies()) >= 24e9] = 0
    tx = tx.with_field(np.fft.ifft(spec, axis=-1))
    zero = FiberSpec("none", 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    cfg = LoopConfig(
        fut=zero, buffering=zero, grid=grid, launch_power_dbm=5.0, buffering_input_dbm=5.0,
        booster=AmplifierSpec("fixed_output_power", target_output_dbm=5.0, noise_figure_db=NOISELESS),
        pair_amps=(AmplifierSpec("fixed_gain", 0.0, noise_figure_db=NOISELESS),
                   AmplifierSpec("fixed_output_power", target_output_dbm=0.0, noise_figure_db=NOISELESS)),
        voa1_margin_db=0.0, wss_loss_db=1.0,
    )
    res = run_loop(tx, cfg, seed=1)
    assert res.log[0]["net_gain_db"] == pytest.approx(0.0, abs=0.1)
    g = np.vdot(tx.field.ravel(), res.rx.field.ravel()) / np.vdot(tx.field.ravel(), tx.field.ravel())
    assert np.max(np.abs(res.rx.field - g * tx.field)) < 1e-9 * np.max(np.abs(tx.field))


def _short_loop(fut_kind, launch, n_loops, **kw):
    grid = ChannelGrid.uniform(1559.39, 50e9, 1, 17.6e9)
    tx = channel(grid, 256, 10.0)
    cfg = LoopConfig(
        fut=make_preset(fut_kind), grid=grid, launch_power_dbm=launch, n_loops=n_loops,
        step_control=StepControl(max_step_km=50.0, max_nonlinear_phase_rad=1.0), **kw,
    )
    return tx, cfg, run_loop(tx, cfg, seed=3)


@pytest.mark.parametrize("fut, launch", [("smf", 13.0), ("smf", 23.0), ("hcf", 17.0), ("hcf", 23.0)])
def test_loop_power_rules(fut, launch):
    tx, cfg, res = _short_loop(fut, launch, 3)
    p_ref = measure_power_dbm(tx)
    for rec in res.log:
        assert rec["launch_dbm"] == pytest.approx(launch, abs=1e-9)
        assert rec["buffering_in_dbm"] == pytest.approx(10.2, abs=0.01)
        assert rec["monitor_dbm"] - p_ref == pytest.approx(0.0, abs=0.1)
    assert res.trace.boundary_markers.size == 3


def test_hcf_low_power_clamps_voa2():
    _, _, res = _short_loop("hcf", 13.0, 2)
    for rec in res.log:
        assert rec["voa2_db"] == 0.0
        assert rec["voa2_shortfall_db"] == pytest.approx(10.2 - (13.0 - 5.7), abs=0.05)
    with pytest.raises(LoopError, match="loop 1: VOA cannot amplify"):
        _short_loop("hcf", 13.0, 1, voa2_clamp=False)


def test_taps_keep_intermediate_circulations():
    grid = ChannelGrid.uniform(1559.39, 50e9, 1, 17.6e9)
    tx = channel(grid, 256, 10.0)
    base = dict(fut=make_preset("hcf"), grid=grid, step_control=StepControl(50.0, 1.0))
    full = run_loop(tx, LoopConfig(n_loops=4, **base), seed=7, tap_loops=(2,))
    short = run_loop(tx, LoopConfig(n_loops=2, **base), seed=7)
    assert set(full.taps) == {2, 4}
    assert np.array_equal(full.taps[2].field, short.rx.field)


def test_trace_totals_match_loop_timing():
    grid = ChannelGrid.uniform(1559.39, 50e9, 1)
    hcf = LoopConfig(fut=make_preset("hcf"), grid=grid)
    smf = LoopConfig(fut=make_preset("smf"), grid=grid)
    assert 25 * smf.loop_delay_s * 1e6 == pytest.approx(5844.0, abs=1e-6)
    assert 25 * hcf.loop_delay_s * 1e6 == pytest.approx(5796.0, rel=1e-3)
    assert DEFAULT_OVERHEAD_DELAY_US == pytest.approx(5.08, abs=0.05)
