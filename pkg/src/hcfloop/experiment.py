"""Config-driven sweeps over FUT kind, launch power and circulation count."""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from hcfloop import __version__
from hcfloop.dsp import (
    DspConfig,
    carrier_phase_recover,
    cd_compensate,
    equalize_2x2,
    matched_filter_downsample,
    select_channel,
)
from hcfloop.fiber import StepControl, make_preset
from hcfloop.loop import LoopConfig, PowerTrace, run_loop, write_trace
from hcfloop.metrics import (
    OSNR_REF_BW,
    MetricsRecord,
    compute_air,
    estimate_gmi,
    estimate_snr,
    measure_osnr,
    ngmi,
    records_to_csv,
)
from hcfloop.signal import ChannelGrid, SignalBlock, wiener_phase
from hcfloop.transmitter import (
    CUT_WAVELENGTH_NM,
    TxChain,
    apply_tx_frontend,
    draw_shaped_symbols,
    mb_shape_constellation,
    pulse_shape_rrc,
    wdm_multiplex,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep: every (fut_kind, launch power, loop count, seed) point."""

    scale: str = "scaled"
    channel_count: int = 3
    symbol_rate: float = 16e9
    channel_spacing_hz: float = 25e9
    center_wavelength_nm: float = CUT_WAVELENGTH_NM
    entropy_bits: float = 5.7
    payload_symbols: int = 1 << 15
    training_symbols: int = 4096
    samples_per_symbol: int = 0  # 0: derive from the channel plan
    rrc_rolloff: float = 0.1
    preemphasis: bool = True
    laser_linewidth_hz: float = 100e3
    tx_osnr_db: float = 16.5
    loop_input_dbm: float = 5.0
    regime_scaling: bool = True
    reference_symbol_rate: float = 130e9
    reference_channel_count: int = 9
    fut_kinds: tuple = ("hcf",)
    launch_power_list_dbm: tuple = (23.0,)
    n_loops_list: tuple = (1,)
    seeds: tuple = (1,)
    booster_nf_db: float = 6.0
    pair_nf_db: float = 5.0
    pair_gain_db: float = 9.0
    max_nonlinear_phase_rad: float = 0.05
    max_step_km: float = 0.25
    eq_taps: int = 31
    eq_step_size: float = 1e-3
    eq_training_passes: int = 2
    cpe_block_symbols: int = 64
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if self.scale not in ("scaled", "full"):
            raise ConfigError(f"scale must be 'scaled' or 'full', not {self.scale!r}")
        for name in ("fut_kinds", "launch_power_list_dbm", "n_loops_list", "seeds"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"{name} must not be empty")
            object.__setattr__(self, name, value)
        bad = set(self.fut_kinds) - {"hcf", "smf"}
        if bad:
            raise ConfigError(f"unknown fut kind(s): {sorted(bad)}")
        if any(int(n) < 1 for n in self.n_loops_list):
            raise ConfigError("loop counts must be >= 1")
        if self.channel_count < 1 or self.symbol_rate <= 0 or self.channel_spacing_hz <= 0:
            raise ConfigError("invalid channel plan")
        if self.channel_spacing_hz < self.symbol_rate * (1 + self.rrc_rolloff):
            raise ConfigError("channel overlap: spacing below symbol_rate*(1+rolloff)")
        if self.payload_symbols < 1 or self.training_symbols < 64:
            raise ConfigError("need payload symbols and at least 64 training symbols")
        if self.samples_per_symbol and self.samples_per_symbol < 2:
            raise ConfigError("samples_per_symbol must be >= 2")
        if self.samples_per_symbol and self.channel_count * self.channel_spacing_hz > self.sample_rate:
            raise ConfigError("insufficient simulation bandwidth for the channel plan")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def sps(self) -> int:
        """Samples per symbol: composite band within 80% of the sampled band, even."""
        if self.samples_per_symbol:
            return self.samples_per_symbol
        n = math.ceil(self.channel_count * self.channel_spacing_hz / (0.8 * self.symbol_rate) - 1e-9)
        n = max(n, 2)
        return n + (n % 2)

    @property
    def sample_rate(self) -> float:
        return self.sps * self.symbol_rate

    @property
    def dispersion_scale(self) -> float:
        """Factor on every fibre's D that keeps the dispersion length, in
        symbol periods, equal to the reference symbol rate's."""
        if not self.regime_scaling:
            return 1.0
        return (self.reference_symbol_rate / self.symbol_rate) ** 2

    @property
    def power_offset_db(self) -> float:
        """Offset from nominal (reference-plan total) to simulated total power.

        Nominal powers are totals over ``reference_channel_count`` channels;
        the simulated channels keep the same per-channel power.
        """
        if not self.regime_scaling:
            return 0.0
        return 10 * np.log10(self.channel_count / self.reference_channel_count)

    @property
    def loop_input_total_dbm(self) -> float:
        """Simulated total power at the loop input (and the monitor point)."""
        return self.loop_input_dbm + self.power_offset_db

    @property
    def effective_linewidth_hz(self) -> float:
        """Simulated laser linewidth; scaled with the symbol rate so phase
        noise per symbol (and its interplay with dispersion) is preserved."""
        if not self.regime_scaling:
            return self.laser_linewidth_hz
        return self.laser_linewidth_hz * self.symbol_rate / self.reference_symbol_rate

    @property
    def cut_index(self) -> int:
        return (self.channel_count - 1) // 2

    def grid(self) -> ChannelGrid:
        return ChannelGrid.uniform(self.center_wavelength_nm, self.channel_spacing_hz,
                                   self.channel_count, self.symbol_rate * (1 + self.rrc_rolloff))

    def tx_chain(self) -> TxChain:
        return TxChain(symbol_rate=self.symbol_rate, samples_per_symbol=self.sps,
                       rrc_rolloff=self.rrc_rolloff, preemphasis_enabled=self.preemphasis,
                       laser_linewidth_hz=self.effective_linewidth_hz)

    def dsp_config(self, total_dispersion_ps_per_nm=0.0) -> DspConfig:
        return DspConfig(eq_taps=self.eq_taps, eq_step_size=self.eq_step_size,
                         eq_training_passes=self.eq_training_passes,
                         cpe_block_symbols=self.cpe_block_symbols,
                         total_dispersion_ps_per_nm=total_dispersion_ps_per_nm)

    def step_control(self) -> StepControl:
        return StepControl(max_step_km=self.max_step_km,
                           max_nonlinear_phase_rad=self.max_nonlinear_phase_rad)

    def loop_config(self, fut_kind, launch_power_dbm, n_loops) -> LoopConfig:
        from hcfloop.loop import AmplifierSpec

        k = self.dispersion_scale
        fut = make_preset(fut_kind)
        buffering = make_preset("buffering_smf")
        off = self.power_offset_db
        return LoopConfig(
            fut=replace(fut, dispersion_ps_per_nm_km=fut.dispersion_ps_per_nm_km * k),
            buffering=replace(buffering, dispersion_ps_per_nm_km=buffering.dispersion_ps_per_nm_km * k),
            buffering_input_dbm=10.2 + off,
            grid=self.grid(),
            launch_power_dbm=float(launch_power_dbm) + off,
            n_loops=int(n_loops),
            booster=AmplifierSpec("fixed_output_power", target_output_dbm=float(launch_power_dbm) + off,
                                  noise_figure_db=self.booster_nf_db, max_output_dbm=30.0),
            pair_amps=(
                AmplifierSpec("fixed_gain", gain_db=self.pair_gain_db, noise_figure_db=self.pair_nf_db),
                AmplifierSpec("fixed_output_power", target_output_dbm=self.loop_input_total_dbm,
                              noise_figure_db=self.pair_nf_db),
            ),
            step_control=self.step_control(),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


PRESETS = {
    "scaled": {},
    "fig2": dict(
        scale="full", channel_count=9, symbol_rate=130e9, channel_spacing_hz=150e9,
        fut_kinds=("hcf", "smf"),
        launch_power_list_dbm=(13.0, 15.0, 17.0, 19.0, 21.0, 23.0),
        n_loops_list=(1, 5, 10, 15, 20, 25),
    ),
    "fig2-scaled": dict(
        fut_kinds=("hcf", "smf"),
        launch_power_list_dbm=(13.0, 15.0, 17.0, 19.0, 21.0, 23.0),
        n_loops_list=(1, 5, 10, 15, 20, 25),
    ),
    "fig1d": dict(fut_kinds=("hcf", "smf"), launch_power_list_dbm=(23.0,), n_loops_list=(25,)),
}

PRESET_NOTES = {
    "scaled": "defaults: 3 x 16 GBaud x 25 GHz, 2^15 payload symbols",
    "fig2": "full scale 9 x 130 GBaud x 150 GHz; powers 13..23 dBm, loops 1..25 (compute-heavy)",
    "fig2-scaled": "the fig2 grid on the scaled channel plan",
    "fig1d": "HCF and SMF loops at 23 dBm, 25 circulations (latency traces)",
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_TUPLE_FIELDS = {"fut_kinds", "launch_power_list_dbm", "n_loops_list", "seeds"}
_SECTIONS = {
    "experiment": {"scale", "preset", "fut_kinds", "launch_power_list_dbm", "n_loops_list", "seeds",
                   "output_dir", "workers"},
    "channels": {"channel_count", "symbol_rate", "channel_spacing_hz", "center_wavelength_nm",
                 "entropy_bits", "payload_symbols", "training_symbols", "samples_per_symbol",
                 "rrc_rolloff", "preemphasis", "laser_linewidth_hz", "tx_osnr_db"},
    "loop": {"loop_input_dbm", "regime_scaling", "reference_symbol_rate", "reference_channel_count",
             "booster_nf_db", "pair_nf_db", "pair_gain_db", "max_nonlinear_phase_rad", "max_step_km"},
    "dsp": {"eq_taps", "eq_step_size", "eq_training_passes", "cpe_block_symbols"},
}


def _convert(name, raw):
    raw = raw.strip()
    if name in _TUPLE_FIELDS:
        items = [s for s in raw.replace(",", " ").split() if s]
        if name == "fut_kinds":
            return tuple(items)
        if name in ("n_loops_list", "seeds"):
            return tuple(int(s) for s in items)
        return tuple(float(s) for s in items)
    kind = _FIELD_TYPES[name]
    if kind in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if kind in ("int", int):
        return int(float(raw))
    if kind in ("float", float):
        return float(raw)
    return raw


def config_from_mapping(values: dict) -> ExperimentConfig:
    values = dict(values)
    preset = values.pop("preset", None)
    if preset and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    base = dict(PRESETS[preset]) if preset else {}
    base.update(values)
    return ExperimentConfig(**base)


def parse_config(path) -> ExperimentConfig:
    """Read an INI-style config; unknown sections or keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for section in cp.sections():
        allowed = _SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if key == "preset":
                if raw.strip() not in PRESETS:
                    raise ConfigError(f"{path}: unknown preset {raw.strip()!r}")
                values[key] = raw.strip()
                continue
            try:
                values[key] = _convert(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from exc
    try:
        return config_from_mapping(values)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# --- transmitter side -------------------------------------------------------

def _rng_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class Transmission:
    signal: SignalBlock
    symbols: np.ndarray  # (2, N) CUT symbols, training prefix first
    training: np.ndarray


def add_noise_loading(signal: SignalBlock, osnr_db, channel_power_w, seed) -> SignalBlock:
    """White ASE over the whole band giving ``osnr_db`` (12.5 GHz) per channel."""
    n_psd = channel_power_w / (10 ** (osnr_db / 10) * OSNR_REF_BW)  # both pols, W/Hz
    sigma2 = n_psd / 2 * signal.sample_rate  # per polarization
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(2, 2, signal.n_samples))
    return signal.with_field(signal.field + np.sqrt(sigma2 / 2) * (noise[:, 0] + 1j * noise[:, 1]))


def build_transmission(cfg: ExperimentConfig, seed: int) -> Transmission:
    """Shaped WDM signal at the loop input; the CUT's symbols are returned."""
    const = mb_shape_constellation(cfg.entropy_bits, 64)
    chain = cfg.tx_chain()
    grid = cfg.grid()
    channels = []
    cut = None
    for ch in range(cfg.channel_count):
        train = draw_shaped_symbols(const, 2 * cfg.training_symbols, _rng_seed(0x7A11, ch))
        train = train.reshape(2, -1)
        payload = draw_shaped_symbols(const, 2 * cfg.payload_symbols, _rng_seed(seed, ch, 1))
        symbols = np.concatenate([train, payload.reshape(2, -1)], axis=1)
        wave = pulse_shape_rrc(symbols, chain, grid.center_frequency, seed_tag=seed)
        wave = apply_tx_frontend(wave, chain, _rng_seed(seed, ch, 2))
        channels.append(wave)
        if ch == cfg.cut_index:
            cut = (symbols, train)
    p_ch_dbm = cfg.loop_input_total_dbm - 10 * np.log10(cfg.channel_count)
    wdm = wdm_multiplex(channels, grid, per_channel_power_dbm=p_ch_dbm)
    if np.isfinite(cfg.tx_osnr_db):
        wdm = add_noise_loading(wdm, cfg.tx_osnr_db, 1e-3 * 10 ** (p_ch_dbm / 10), _rng_seed(seed, 99))
    return Transmission(wdm, cut[0], cut[1])


# --- receiver side ----------------------------------------------------------

def receive(cfg: ExperimentConfig, rx: SignalBlock, tx: Transmission, total_dispersion, seed):
    """Run the DSP chain on the CUT.

    Returns ``(snr_db, gmi, osnr_db, entropy_bits)`` for the payload symbols.
    """
    grid = cfg.grid()
    osnr = float(measure_osnr(rx, grid)[cfg.cut_index])
    s = select_channel(rx, grid, cfg.cut_index)
    if cfg.effective_linewidth_hz > 0:
        lo = wiener_phase(s.n_samples, cfg.effective_linewidth_hz, s.sample_rate,
                          np.random.default_rng(_rng_seed(seed, 7)))
        s = s.with_field(s.field * np.exp(-1j * lo))
    dsp = cfg.dsp_config(total_dispersion)
    s = cd_compensate(s, dsp)
    sync = matched_filter_downsample(s, cfg.tx_chain(), tx.training, dsp.sync_threshold)
    eq = equalize_2x2(sync.samples, tx.symbols, dsp)
    rec = carrier_phase_recover(eq, tx.symbols, dsp)
    k = cfg.training_symbols
    payload_rx, payload_tx = rec[:, k:], tx.symbols[:, k:]
    const = mb_shape_constellation(cfg.entropy_bits, 64)
    snr = estimate_snr(payload_rx, payload_tx)
    gmi = estimate_gmi(payload_rx, payload_tx, const)
    return snr, gmi, osnr, const.entropy_bits


# --- sweep ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGroup:
    """Points sharing one loop run: same FUT, launch power and seed."""

    index: int
    fut_kind: str
    launch_power_dbm: float
    master_seed: int
    loops: tuple

    @property
    def seed(self) -> int:
        return _rng_seed(self.master_seed, self.index)


def sweep_groups(cfg: ExperimentConfig) -> list:
    groups = []
    loops = tuple(sorted(set(int(n) for n in cfg.n_loops_list)))
    for fut in cfg.fut_kinds:
        for p in cfg.launch_power_list_dbm:
            for s in cfg.seeds:
                groups.append(SweepGroup(len(groups), fut, float(p), int(s), loops))
    return groups


@dataclass
class GroupResult:
    records: list
    trace: PowerTrace | None
    group: SweepGroup
    log: list = field(default_factory=list)


def run_group(cfg: ExperimentConfig, group: SweepGroup) -> GroupResult:
    """One loop run to the largest requested count, tapped at the others."""
    seed = group.seed
    records = []
    trace = None
    log = []
    try:
        tx = build_transmission(cfg, seed)
        lcfg = cfg.loop_config(group.fut_kind, group.launch_power_dbm, max(group.loops))
        res = run_loop(tx.signal, lcfg, seed, tap_loops=group.loops)
        trace, log = res.trace, res.log
    except Exception as exc:  # recorded per point, the sweep continues
        logger.warning("group %d failed: %s", group.index, exc)
        for n in group.loops:
            records.append(_failed(group, n, exc))
        return GroupResult(records, trace, group, log)
    for n in group.loops:
        try:
            snr, gmi, osnr, h = receive(cfg, res.taps[n], tx, n * lcfg.loop_dispersion_ps_per_nm, seed)
            records.append(MetricsRecord(
                fut_kind=group.fut_kind, launch_power_dbm=group.launch_power_dbm, n_loops=n,
                snr_db=snr, osnr_db=osnr, gmi=gmi, ngmi=ngmi(gmi, h),
                air_gbps=compute_air(gmi, cfg.symbol_rate), seed=group.master_seed,
            ))
        except Exception as exc:
            logger.warning("point %s/%g dBm/%d loops failed: %s", group.fut_kind,
                           group.launch_power_dbm, n, exc)
            records.append(_failed(group, n, exc))
    return GroupResult(records, trace, group, log)


def _failed(group, n, exc):
    nan = float("nan")
    return MetricsRecord(group.fut_kind, group.launch_power_dbm, n, nan, nan, nan, nan, nan,
                         group.master_seed, f"{type(exc).__name__}: {exc}")


def _sort_key(rec: MetricsRecord):
    return (rec.fut_kind, rec.launch_power_dbm, rec.n_loops, rec.seed)


@dataclass
class SweepResult:
    config: ExperimentConfig
    records: list
    groups: list

    def traces(self) -> dict:
        return {(g.group.fut_kind, g.group.launch_power_dbm, g.group.master_seed): g.trace
                for g in self.groups if g.trace is not None}


def run_sweep(cfg: ExperimentConfig, workers=None) -> SweepResult:
    """Run every sweep point; independent loop runs may execute in parallel.

    Loop counts for the same (FUT, power, seed) are taps of one run, as in
    the physical loop where the AOM gate picks the circulation count.
    """
    workers = cfg.workers if workers is None else workers
    groups = sweep_groups(cfg)
    if workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_group, [cfg] * len(groups), groups))
    else:
        results = [run_group(cfg, g) for g in groups]
    records = sorted((r for g in results for r in g.records), key=_sort_key)
    return SweepResult(cfg, records, results)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()


def write_results(result: SweepResult, out_dir=None, figures=True) -> dict:
    """Write results.csv, traces/, plot-data files, figures and manifest.json."""
    cfg = result.config
    if not result.records:
        raise ConfigError("no results to write")
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    try:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    csv_text = records_to_csv(result.records)
    (out / "results.csv").write_text(csv_text)
    written = {"results": out / "results.csv", "traces": []}
    for (fut, p, s), trace in sorted(result.traces().items()):
        path = out / "traces" / f"{fut}_{p:g}dBm_seed{s}.txt"
        write_trace(trace, path)
        written["traces"].append(path)

    from hcfloop import report

    written["plot_data"] = report.write_plot_data(result.records, out)
    if figures:
        written["figures"] = report.render_figures(result.records, result.traces(), out)
    manifest = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "results_sha1": hashlib.sha1(csv_text.encode()).hexdigest(),
        "seeds": {f"{g.group.fut_kind}/{g.group.launch_power_dbm:g}/{g.group.master_seed}": g.group.seed
                  for g in result.groups},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written["manifest"] = out / "manifest.json"
    return written
