"""Recirculating-loop emulation: amplifiers, VOAs, WSS and the monitor trace."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from hcfloop.fiber import FiberSpec, StepControl, group_delay, make_preset, propagate
from hcfloop.signal import H_PLANCK, ChannelGrid, SignalBlock, measure_power_dbm

logger = logging.getLogger(__name__)

# Calibrated so that 25 SMF-FUT circulations last 5844 us with the presets.
DEFAULT_OVERHEAD_DELAY_US = 5.844e3 / 25 - (
    group_delay(make_preset("smf")) + group_delay(make_preset("buffering_smf"))
) * 1e6


class LoopError(RuntimeError):
    pass


class AmplifierError(LoopError):
    pass


@dataclass(frozen=True)
class AmplifierSpec:
    """EDFA model. ``mode`` is ``fixed_gain`` or ``fixed_output_power``.

    ``noise_figure_db=-inf`` (zero linear noise figure) gives a noiseless
    amplifier, which is useful for isolating other impairments.
    """

    mode: str = "fixed_gain"
    gain_db: float = 0.0
    target_output_dbm: float | None = None
    noise_figure_db: float = 5.0
    max_output_dbm: float = float("inf")

    def __post_init__(self):
        if self.mode not in ("fixed_gain", "fixed_output_power"):
            raise ValueError(f"unknown amplifier mode {self.mode!r}")
        if self.noise_figure_db < 0 and self.noise_figure_db != float("-inf"):
            raise ValueError("noise figure must be >= 0 dB (or -inf for a noiseless amplifier)")
        if self.mode == "fixed_output_power":
            if self.target_output_dbm is None:
                raise ValueError("fixed_output_power mode needs target_output_dbm")
            if self.max_output_dbm < self.target_output_dbm:
                raise ValueError("max_output_dbm below target output")

    def with_target(self, target_dbm) -> "AmplifierSpec":
        return AmplifierSpec("fixed_output_power", self.gain_db, target_dbm,
                             self.noise_figure_db, self.max_output_dbm)


def ase_psd_per_pol(gain_lin, nf_db, center_frequency) -> float:
    """Per-polarization ASE PSD in W/Hz: (G-1) NF h nu / 2."""
    return (gain_lin - 1) * 10 ** (nf_db / 10) * H_PLANCK * center_frequency / 2


def amplify(signal: SignalBlock, amp: AmplifierSpec, seed=None) -> SignalBlock:
    """Scale the field by sqrt(G) and add white circular Gaussian ASE.

    In ``fixed_output_power`` mode the gain is solved so that the expected
    output power, ASE included, equals the target.
    """
    p_in = signal.mean_power()
    nf_lin = 10 ** (amp.noise_figure_db / 10)
    # total ASE power over the simulation band per unit (G-1)
    k = nf_lin * H_PLANCK * signal.center_frequency * signal.sample_rate
    if amp.mode == "fixed_gain":
        g = 10 ** (amp.gain_db / 10)
    else:
        p_t = 1e-3 * 10 ** (amp.target_output_dbm / 10)
        if p_in <= 0:
            raise AmplifierError("zero input power to power-controlled amplifier")
        g = (p_t + k) / (p_in + k)
    if g < 1 - 1e-12:
        raise AmplifierError("attenuation requested from amplifier")
    g = max(g, 1.0)
    out = signal.field * np.sqrt(g)
    sigma2 = ase_psd_per_pol(g, amp.noise_figure_db, signal.center_frequency) * signal.sample_rate
    if sigma2 > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(size=(2, 2, signal.n_samples))
        out = out + np.sqrt(sigma2 / 2) * (noise[:, 0] + 1j * noise[:, 1])
    result = signal.with_field(out)
    if measure_power_dbm(result) > amp.max_output_dbm + 1e-9:
        raise AmplifierError("amplifier saturation")
    return result


def attenuate(signal: SignalBlock, loss_db: float) -> SignalBlock:
    if loss_db < 0:
        raise LoopError("attenuation must be >= 0 dB")
    if loss_db == 0:
        return signal
    return signal.with_field(signal.field * 10 ** (-loss_db / 20))


def voa2_auto(signal: SignalBlock, target_dbm: float) -> SignalBlock:
    """Attenuate to exactly ``target_dbm``; a VOA cannot add power."""
    loss = measure_power_dbm(signal) - target_dbm
    if loss < -1e-12:
        raise LoopError("VOA cannot amplify")
    return attenuate(signal, max(loss, 0.0))


def _passband_masks(signal, grid, width):
    f = signal.frequencies()
    offs = grid.offsets_hz(signal.center_frequency)
    return [(f >= off - width / 2) & (f < off + width / 2) for off in offs]


def wss_equalize(signal: SignalBlock, grid: ChannelGrid, passband_hz=None,
                 return_attenuation=False):
    """Ideal filter-bank WSS: flatten channel powers to the weakest one.

    Channel powers are measured over spacing-wide passbands. Each channel is
    then scaled by a brick-wall filter of width ``passband_hz`` (default: the
    spacing); everything outside the passbands is discarded.
    """
    spacing = grid.channel_spacing_hz
    width = spacing if passband_hz is None else passband_hz
    spec = sfft.fft(signal.field, axis=-1)
    energy = np.abs(spec[0]) ** 2 + np.abs(spec[1]) ** 2
    meas = [float(energy[m].sum()) for m in _passband_masks(signal, grid, spacing)]
    p_min = min(meas)
    atten_db = [10 * np.log10(p / p_min) if p > 0 else 0.0 for p in meas]
    gain = np.zeros(signal.n_samples)
    for m, a in zip(_passband_masks(signal, grid, width), atten_db):
        gain[m] = 10 ** (-a / 20)
    out = signal.with_field(sfft.ifft(spec * gain, axis=-1))
    return (out, atten_db) if return_attenuation else out


@dataclass(frozen=True)
class PowerTrace:
    """Uniformly sampled monitor-photodiode trace with loop-end markers."""

    start_time_s: float
    sample_interval_s: float
    power_dbm: np.ndarray
    boundary_markers: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.boundary_markers, dtype=int)
        if np.any(np.diff(m) <= 0):
            raise ValueError("boundary markers must be strictly increasing")
        object.__setattr__(self, "boundary_markers", m)
        object.__setattr__(self, "power_dbm", np.asarray(self.power_dbm, dtype=float))

    def times(self) -> np.ndarray:
        return self.start_time_s + self.sample_interval_s * np.arange(self.power_dbm.size)


def build_trace(loop_powers_dbm, loop_delay_s, sample_interval_s, spike_db=3.0) -> PowerTrace:
    """Piecewise-constant trace, one segment per loop, 2-sample spike at each end."""
    n = len(loop_powers_dbm)
    ends = np.round(np.arange(1, n + 1) * loop_delay_s / sample_interval_s).astype(int)
    total = int(ends[-1]) + 3
    power = np.empty(total)
    start = 0
    for j, (end, p) in enumerate(zip(ends, loop_powers_dbm)):
        power[start:end] = p
        start = end
    power[start:] = loop_powers_dbm[-1]
    for end, p in zip(ends, loop_powers_dbm):
        power[end:end + 2] = p + spike_db
    return PowerTrace(0.0, sample_interval_s, power, ends)


def write_trace(trace: PowerTrace, path):
    """Two-column ``time_us power_dbm`` text plus a ``.markers.txt`` sidecar."""
    path = Path(path)
    data = np.column_stack([trace.times() * 1e6, trace.power_dbm])
    np.savetxt(path, data, fmt="%.6f", header="time_us power_dbm")
    np.savetxt(_marker_path(path), trace.boundary_markers, fmt="%d", header="marker_sample_index")


def _marker_path(path):
    return path.with_name(path.stem + ".markers.txt")


def read_trace(path) -> PowerTrace:
    path = Path(path)
    data = np.loadtxt(path, ndmin=2)
    t_us, p = data[:, 0], data[:, 1]
    dt = (t_us[1] - t_us[0]) * 1e-6 if t_us.size > 1 else 1e-6
    mp = _marker_path(path)
    markers = np.loadtxt(mp, dtype=int, ndmin=1) if mp.exists() else np.array([], dtype=int)
    return PowerTrace(t_us[0] * 1e-6, dt, p, markers)


@dataclass(frozen=True)
class LoopConfig:
    """Recirculating-loop description (powers in dBm, delays in us)."""

    fut: FiberSpec
    grid: ChannelGrid
    launch_power_dbm: float = 23.0
    n_loops: int = 1
    buffering: FiberSpec = field(default_factory=lambda: make_preset("buffering_smf"))
    booster: AmplifierSpec = field(
        default_factory=lambda: AmplifierSpec("fixed_output_power", target_output_dbm=23.0,
                                              noise_figure_db=5.0, max_output_dbm=27.0))
    pair_amps: tuple = field(default_factory=lambda: (
        AmplifierSpec("fixed_gain", gain_db=12.0, noise_figure_db=5.0),
        AmplifierSpec("fixed_output_power", target_output_dbm=0.0, noise_figure_db=5.0),
    ))
    buffering_input_dbm: float = 10.2
    coupler_loss_db: float = 3.0
    aom_loss_db: float = 3.0
    voa1_margin_db: float = 0.5
    wss_loss_db: float = 6.0
    wss_passband_hz: float | None = None
    voa2_clamp: bool = True
    overhead_delay_us: float = DEFAULT_OVERHEAD_DELAY_US
    monitor_sample_interval_us: float = 1.0
    step_control: StepControl = field(default_factory=StepControl)

    def __post_init__(self):
        if self.n_loops < 1:
            raise ValueError("n_loops must be >= 1")
        for name in ("coupler_loss_db", "aom_loss_db", "wss_loss_db", "voa1_margin_db",
                     "overhead_delay_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.monitor_sample_interval_us > 0:
            raise ValueError("monitor sample interval must be positive")
        if len(self.pair_amps) != 2:
            raise ValueError("pair_amps needs exactly two amplifiers")

    @property
    def loop_delay_s(self) -> float:
        return group_delay(self.fut) + group_delay(self.buffering) + self.overhead_delay_us * 1e-6

    @property
    def loop_dispersion_ps_per_nm(self) -> float:
        return self.fut.accumulated_dispersion_ps_per_nm() + self.buffering.accumulated_dispersion_ps_per_nm()


@dataclass
class LoopResult:
    rx: SignalBlock
    trace: PowerTrace
    log: list
    taps: dict


def _stage_rng(seed, loop_index, stage):
    return np.random.default_rng([int(seed), int(loop_index), int(stage)])


def run_loop(tx: SignalBlock, cfg: LoopConfig, seed=0, tap_loops=()) -> LoopResult:
    """Circulate ``tx`` ``cfg.n_loops`` times around the loop.

    Per circulation: coupler+AOM loss, booster, VOA1 trim to the launch
    power, FUT, VOA2 to ``buffering_input_dbm``, buffering SMF, pair amp 1,
    WSS, pair amp 2 (output held at the loop-input power, i.e. zero net loop
    gain at the monitor). ``tap_loops`` lists extra circulation counts whose
    monitor-point signal is kept in ``taps`` (the final one always is).

    If the FUT output is already below the VOA2 target and ``voa2_clamp`` is
    set, VOA2 goes to 0 dB and the shortfall is logged instead of failing.
    """
    p_ref = measure_power_dbm(tx)
    booster = cfg.booster.with_target(cfg.launch_power_dbm + cfg.voa1_margin_db)
    amp1 = cfg.pair_amps[0]
    amp2 = cfg.pair_amps[1].with_target(p_ref)
    wanted = set(int(t) for t in tap_loops) | {cfg.n_loops}
    taps = {}
    log = []
    monitor = []
    s = tx
    for k in range(cfg.n_loops):
        rec = {"loop": k + 1}
        try:
            s = attenuate(s, cfg.coupler_loss_db + cfg.aom_loss_db)
            rec["booster_in_dbm"] = measure_power_dbm(s)
            s = amplify(s, booster, _stage_rng(seed, k, 0))
            rec["booster_out_dbm"] = measure_power_dbm(s)
            rec["booster_gain_db"] = rec["booster_out_dbm"] - rec["booster_in_dbm"]
            s = voa2_auto(s, cfg.launch_power_dbm)
            rec["voa1_db"] = rec["booster_out_dbm"] - cfg.launch_power_dbm
            rec["launch_dbm"] = measure_power_dbm(s)
            s = propagate(s, cfg.fut, cfg.step_control)
            p_fut = measure_power_dbm(s)
            rec["fut_out_dbm"] = p_fut
            if p_fut < cfg.buffering_input_dbm and cfg.voa2_clamp:
                rec["voa2_db"] = 0.0
                rec["voa2_shortfall_db"] = cfg.buffering_input_dbm - p_fut
            else:
                s = voa2_auto(s, cfg.buffering_input_dbm)
                rec["voa2_db"] = p_fut - cfg.buffering_input_dbm
                rec["voa2_shortfall_db"] = 0.0
            rec["buffering_in_dbm"] = measure_power_dbm(s)
            s = propagate(s, cfg.buffering, cfg.step_control)
            rec["buffering_out_dbm"] = measure_power_dbm(s)
            s = amplify(s, amp1, _stage_rng(seed, k, 1))
            rec["amp1_out_dbm"] = measure_power_dbm(s)
            s, wss_att = wss_equalize(s, cfg.grid, cfg.wss_passband_hz, return_attenuation=True)
            s = attenuate(s, cfg.wss_loss_db)
            rec["wss_attenuation_db"] = wss_att
            rec["amp2_in_dbm"] = measure_power_dbm(s)
            s = amplify(s, amp2, _stage_rng(seed, k, 2))
            rec["monitor_dbm"] = measure_power_dbm(s)
            rec["amp2_gain_db"] = rec["monitor_dbm"] - rec["amp2_in_dbm"]
            rec["net_gain_db"] = rec["monitor_dbm"] - p_ref
        except Exception as exc:
            raise LoopError(f"loop {k + 1}: {exc}") from exc
        log.append(rec)
        monitor.append(rec["monitor_dbm"])
        logger.debug("loop %d: launch %.2f dBm, monitor %.2f dBm", k + 1, rec["launch_dbm"], rec["monitor_dbm"])
        if k + 1 in wanted:
            taps[k + 1] = s
    trace = build_trace(monitor, cfg.loop_delay_s, cfg.monitor_sample_interval_us * 1e-6)
    return LoopResult(s, trace, log, taps)
