"""Figures of merit: SNR, GMI/NGMI, AIR, OSNR and loop latency."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import median_filter
from scipy.special import logsumexp

from hcfloop.loop import PowerTrace
from hcfloop.signal import ChannelGrid, SignalBlock
from hcfloop.transmitter import ShapedConstellation

SNR_CAP_DB = 60.0
OSNR_REF_BW = 12.5e9
C_KM_PER_US = 0.299792458


class MetricsError(ValueError):
    pass


def _as_dp(a):
    a = np.asarray(a, dtype=complex)
    return a.reshape(1, -1) if a.ndim == 1 else a


def _regress(rx, tx):
    """Per-polarization complex gain g in rx ~ g * tx, and rx / g."""
    g = np.sum(rx * np.conj(tx), axis=1, keepdims=True) / np.sum(np.abs(tx) ** 2, axis=1, keepdims=True)
    if np.any(g == 0):
        raise MetricsError("received signal uncorrelated with the reference")
    return g, rx / g


def estimate_snr(rx_symbols, tx_symbols, cap_db=SNR_CAP_DB) -> float:
    """Post-DSP SNR in dB, pooled over polarizations.

    Each polarization is scaled by the least-squares complex gain of the
    model ``rx = g * tx + n`` before the error is taken.
    """
    rx, tx = _as_dp(rx_symbols), _as_dp(tx_symbols)
    if rx.shape != tx.shape:
        raise MetricsError("rx/tx length mismatch")
    sig = np.sum(np.abs(tx) ** 2)
    if sig <= 0:
        raise MetricsError("reference has no energy")
    _, r = _regress(rx, tx)
    err = np.sum(np.abs(r - tx) ** 2)
    if err <= sig * 10 ** (-cap_db / 10):
        return cap_db
    return float(10 * np.log10(sig / err))


def estimate_gmi(rx_symbols, tx_symbols, constellation: ShapedConstellation,
                 min_symbols=10_000, chunk=1 << 15) -> float:
    """Monte-Carlo GMI in bits per symbol per polarization.

    Bit-metric decoding with the shaped prior and a circular Gaussian
    auxiliary channel whose variance is estimated from the residuals::

        GMI = H + mean_k sum_bits log2( sum_{c: b_k(c) = b_k(x)} p(c) q(y|c)
                                         / sum_c p(c) q(y|c) )

    The estimate is clipped to ``[0, H]``.
    """
    rx, tx = _as_dp(rx_symbols), _as_dp(tx_symbols)
    if rx.shape != tx.shape:
        raise MetricsError("rx/tx length mismatch")
    if rx.size < min_symbols:
        raise MetricsError("insufficient sample size")
    _, r = _regress(rx, tx)
    r = r.ravel()
    idx = constellation.index_of(tx.ravel())
    sigma2 = float(np.mean(np.abs(r - constellation.points[idx]) ** 2))
    h = constellation.entropy_bits
    if sigma2 <= 0:
        return h
    pts = constellation.points
    logp = np.log(np.where(constellation.probabilities > 0, constellation.probabilities, 1e-300))
    labels = constellation.labels.astype(bool)
    total = 0.0
    for start in range(0, r.size, chunk):
        rs = r[start:start + chunk]
        ls = labels[idx[start:start + chunk]]  # (n, m) sent bits
        metric = logp[None, :] - np.abs(rs[:, None] - pts[None, :]) ** 2 / sigma2
        den = logsumexp(metric, axis=1)
        for k in range(labels.shape[1]):
            sel1 = labels[:, k]
            num1 = logsumexp(metric[:, sel1], axis=1)
            num0 = logsumexp(metric[:, ~sel1], axis=1)
            num = np.where(ls[:, k], num1, num0)
            total += float(np.sum(num - den))
    gmi = h + total / np.log(2) / r.size
    return float(np.clip(gmi, 0.0, h))


def ngmi(gmi, entropy_bits, bits_per_symbol=6) -> float:
    """Normalized GMI: 1 - (H - GMI) / m."""
    return float(np.clip(1 - (entropy_bits - gmi) / bits_per_symbol, 0.0, 1.0))


def compute_air(gmi_per_pol, symbol_rate_baud) -> float:
    """Dual-polarization AIR in Gb/s (no FEC overhead deducted)."""
    if gmi_per_pol < 0:
        raise MetricsError("GMI must be >= 0")
    return 2 * symbol_rate_baud * gmi_per_pol / 1e9


def measure_osnr(signal: SignalBlock, grid: ChannelGrid, signal_bandwidth_hz=None,
                 ref_bandwidth_hz=OSNR_REF_BW, cap_db=SNR_CAP_DB) -> np.ndarray:
    """Spectral OSNR per channel, in dB over ``ref_bandwidth_hz``.

    Signal+noise power is integrated over the channel bandwidth; the noise
    density is the mean of the two guard bands flanking the channel (one
    side if the other falls outside the simulated band).
    """
    bw = grid.signal_bandwidth_hz if signal_bandwidth_hz is None else signal_bandwidth_hz
    spacing = grid.channel_spacing_hz
    if bw is None:
        raise MetricsError("signal bandwidth needed for spectral OSNR")
    guard = (spacing - bw) / 2
    if guard <= 0:
        raise MetricsError("OSNR not measurable spectrally")
    margin = 0.1 * guard
    n = signal.n_samples
    spec = sfft.fft(signal.field, axis=-1)
    psd = (np.abs(spec[0]) ** 2 + np.abs(spec[1]) ** 2) / n**2  # W per bin
    f = signal.frequencies()
    df = signal.sample_rate / n
    nyq = signal.sample_rate / 2
    out = []
    for off in grid.offsets_hz(signal.center_frequency):
        in_band = np.abs(f - off) <= bw / 2
        p_sn = psd[in_band].sum()
        densities = []
        for lo, hi in ((off - spacing / 2, off - bw / 2 - margin), (off + bw / 2 + margin, off + spacing / 2)):
            if lo < -nyq or hi > nyq:
                continue
            m = (f >= lo) & (f < hi)
            if m.any():
                densities.append(psd[m].mean() / df)
        if not densities:
            raise MetricsError("OSNR not measurable spectrally")
        n_psd = float(np.mean(densities))
        p_sig = p_sn - n_psd * in_band.sum() * df
        if n_psd <= 0:
            out.append(cap_db)
        elif p_sig <= 0:
            out.append(-np.inf)
        else:
            out.append(min(cap_db, 10 * np.log10(p_sig / (n_psd * ref_bandwidth_hz))))
    return np.asarray(out)


@dataclass
class LatencyReport:
    per_loop_delay_us: float
    per_km_latency_us: float
    total_duration_us: float
    n_spikes: int
    differential_us_per_km: float | None = None
    warnings: list = field(default_factory=list)


def detect_spikes(trace: PowerTrace, threshold_db=2.0, window=9) -> np.ndarray:
    """First sample of each run lying ``threshold_db`` above the local median."""
    p = trace.power_dbm
    base = median_filter(p, size=window, mode="nearest")
    hot = p >= base + threshold_db
    starts = np.flatnonzero(hot & ~np.concatenate([[False], hot[:-1]]))
    return starts


def extract_latency(trace: PowerTrace, fut_length_km, common_delay_us, use_markers=False) -> LatencyReport:
    """Per-loop and per-km latency from the loop-end spikes of a monitor trace.

    ``common_delay_us`` is the part of each circulation not spent in the
    fibre under test (buffering fibre and component overhead).
    """
    idx = trace.boundary_markers if use_markers else detect_spikes(trace)
    if len(idx) < 2:
        raise MetricsError("insufficient markers")
    times = trace.start_time_s * 1e6 + np.asarray(idx) * trace.sample_interval_s * 1e6
    intervals = np.diff(times)
    per_loop = float(intervals.mean())
    warnings = []
    cv = float(intervals.std() / per_loop) if per_loop > 0 else np.inf
    if cv > 0.01:
        warnings.append(f"irregular spike spacing (CV {cv:.3%})")
    total = float(times[-1] - times[0] + per_loop)
    per_km = (per_loop - common_delay_us) / fut_length_km
    return LatencyReport(per_loop, per_km, total, len(idx), warnings=warnings)


def compare_latency(reference: LatencyReport, other: LatencyReport) -> LatencyReport:
    """Copy of ``other`` carrying its per-km latency excess over ``reference``."""
    d = asdict(other)
    d["differential_us_per_km"] = other.per_km_latency_us - reference.per_km_latency_us
    return LatencyReport(**d)


def field_trial_latency(round_trip_us, cable_km) -> float:
    """Per-km latency difference from a round-trip measurement over a cable."""
    return round_trip_us / (2 * cable_km)


def predicted_differential_us(path_km, group_index_slow, group_index_fast) -> float:
    """Delay difference over ``path_km`` between two group indices, in us."""
    return path_km * (group_index_slow - group_index_fast) / C_KM_PER_US


@dataclass
class MetricsRecord:
    fut_kind: str
    launch_power_dbm: float
    n_loops: int
    snr_db: float
    osnr_db: float
    gmi: float
    ngmi: float
    air_gbps: float
    seed: int = 0
    error: str = ""


CSV_COLUMNS = [f.name for f in fields(MetricsRecord)]


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def records_to_csv(records) -> str:
    """Stable CSV text (fixed column order, 6-decimal floats, LF endings)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_records_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            def num(key, cast=float):
                return cast(row[key]) if row[key] != "" else float("nan")
            out.append(MetricsRecord(
                fut_kind=row["fut_kind"], launch_power_dbm=num("launch_power_dbm"),
                n_loops=int(row["n_loops"]), snr_db=num("snr_db"), osnr_db=num("osnr_db"),
                gmi=num("gmi"), ngmi=num("ngmi"), air_gbps=num("air_gbps"),
                seed=int(row["seed"]), error=row["error"],
            ))
    return out
