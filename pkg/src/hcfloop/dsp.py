"""Linear, data-aided coherent receiver DSP.

Channel selection, chromatic-dispersion compensation, matched filtering with
training-based timing sync, a T/2-spaced 2x2 LMS butterfly equalizer and
block-wise carrier phase recovery. No step depends nonlinearly on power.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.fft as sfft
from numba import njit
from scipy import signal as sps

from hcfloop.fiber import beta2_from_dispersion
from hcfloop.signal import ChannelGrid, SignalBlock, dump_samples, frequency_shift
from hcfloop.transmitter import TxChain, circular_filter, rrc_taps


class DspError(RuntimeError):
    pass


@dataclass(frozen=True)
class DspConfig:
    eq_taps: int = 31
    eq_step_size: float = 1e-3
    eq_training_passes: int = 2
    cpe_block_symbols: int = 64
    total_dispersion_ps_per_nm: float = 0.0
    sync_threshold: float = 30.0

    def __post_init__(self):
        if self.eq_taps < 3 or self.eq_taps % 2 == 0:
            raise ValueError("eq_taps must be odd and >= 3")
        if not 0 < self.eq_step_size <= 0.1:
            raise ValueError("eq_step_size must lie in (0, 0.1]")
        if self.eq_training_passes < 1:
            raise ValueError("eq_training_passes must be >= 1")
        if self.cpe_block_symbols < 8:
            raise ValueError("cpe_block_symbols must be >= 8")
        if not np.isfinite(self.total_dispersion_ps_per_nm):
            raise ValueError("total dispersion must be finite")


def select_channel(signal: SignalBlock, grid: ChannelGrid, index: int) -> SignalBlock:
    """Brick-wall filter one grid channel (width = spacing) and move it to DC."""
    if not 0 <= index < grid.channel_count:
        raise IndexError(f"channel index {index} out of range 0..{grid.channel_count - 1}")
    off = float(grid.offsets_hz(signal.center_frequency)[index])
    f = signal.frequencies()
    half = grid.channel_spacing_hz / 2
    mask = (f >= off - half) & (f < off + half)
    filtered = sfft.ifft(sfft.fft(signal.field, axis=-1) * mask, axis=-1)
    out = frequency_shift(signal.with_field(filtered), -off)
    return SignalBlock(out.samples_x, out.samples_y, out.sample_rate,
                       signal.center_frequency + off, signal.seed_tag)


def cd_compensate(signal: SignalBlock, dsp: DspConfig) -> SignalBlock:
    """Exact inverse of the fibre dispersion operator for the accumulated D*L."""
    if dsp.total_dispersion_ps_per_nm == 0:
        return signal
    # beta2 per km times 1 km == accumulated beta2 for D*L in ps/nm
    beta2_acc = beta2_from_dispersion(dsp.total_dispersion_ps_per_nm, signal.wavelength)
    omega = 2 * np.pi * signal.frequencies()
    h = np.exp(-1j * (beta2_acc / 2) * omega**2)
    return signal.with_field(sfft.ifft(sfft.fft(signal.field, axis=-1) * h, axis=-1))


class SyncResult(NamedTuple):
    samples: np.ndarray  # (2, 2 * n_symbols) at 2 samples/symbol
    offset: int  # detected delay in input samples
    peak_ratio: float


def matched_filter_downsample(signal: SignalBlock, chain: TxChain, training,
                              threshold: float = 30.0) -> SyncResult:
    """RRC matched filter, training-based timing sync, resample to 2 sps.

    ``training`` is the ``(2, K)`` known symbol prefix. The delay is the lag
    maximizing the polarization-insensitive correlation energy against the
    upsampled prefix; ``peak_ratio`` is that maximum over the mean.
    """
    sps_in = int(round(signal.sample_rate / chain.symbol_rate))
    if abs(sps_in * chain.symbol_rate - signal.sample_rate) > 1e-6 * signal.sample_rate:
        raise DspError("sample rate must be an integer multiple of the symbol rate")
    taps = rrc_taps(chain.rrc_rolloff, chain.rrc_span_symbols, sps_in)
    r = circular_filter(signal.field, taps)
    n = r.shape[1]
    training = np.atleast_2d(training)
    tmpl = np.zeros((2, n), dtype=complex)
    tmpl[:, : training.shape[1] * sps_in : sps_in] = training
    R = sfft.fft(r, axis=-1)
    T = np.conj(sfft.fft(tmpl, axis=-1))
    metric = np.zeros(n)
    for p in range(2):
        for q in range(2):
            c = sfft.ifft(R[p] * T[q])
            metric += c.real**2 + c.imag**2
    lag = int(np.argmax(metric))
    ratio = float(metric[lag] / metric.mean())
    if ratio < threshold:
        raise DspError(f"sync failed (peak ratio {ratio:.1f})")
    aligned = np.roll(r, -lag, axis=-1)
    n_sym = n // sps_in
    if sps_in % 2 == 0:
        out = aligned[:, :: sps_in // 2]
    else:
        out = sps.resample(aligned, 2 * n_sym, axis=-1)
    return SyncResult(out, lag, ratio)


@njit(cache=True)
def _lms_core(xpad, d, ntaps, mu, passes, forget):
    n = d.shape[1]
    c = ntaps // 2
    w = np.zeros((2, 2, ntaps), dtype=np.complex128)
    w[0, 0, c] = 1.0
    w[1, 1, c] = 1.0
    wavg = np.zeros((2, 2, ntaps), dtype=np.complex128)
    acc = 0j
    mse = 0.0
    for p in range(passes):
        last = p == passes - 1
        for k in range(n):
            base = 2 * k
            y0 = 0j
            y1 = 0j
            for t in range(ntaps):
                x0 = xpad[0, base + t]
                x1 = xpad[1, base + t]
                y0 += w[0, 0, t] * x0 + w[0, 1, t] * x1
                y1 += w[1, 0, t] * x0 + w[1, 1, t] * x1
            mag = abs(acc)
            ph = acc / mag if mag > 0 else 1.0 + 0j
            e0 = d[0, k] * ph - y0
            e1 = d[1, k] * ph - y1
            for t in range(ntaps):
                cx0 = np.conj(xpad[0, base + t])
                cx1 = np.conj(xpad[1, base + t])
                w[0, 0, t] += mu * e0 * cx0
                w[0, 1, t] += mu * e0 * cx1
                w[1, 0, t] += mu * e1 * cx0
                w[1, 1, t] += mu * e1 * cx1
            acc = forget * acc + y0 * np.conj(d[0, k]) + y1 * np.conj(d[1, k])
            if last:
                wavg += w
                mse += (e0.real**2 + e0.imag**2 + e1.real**2 + e1.imag**2) / 2
    return wavg / n, mse / n


def _pad_circular(x, ntaps):
    c = ntaps // 2
    return np.concatenate([x[:, x.shape[1] - c:], x, x[:, : c + 1]], axis=1)


def apply_butterfly(x2, w) -> np.ndarray:
    """Apply fixed ``(2, 2, taps)`` T/2-spaced filters; output at 1 sps."""
    ntaps = w.shape[-1]
    n = x2.shape[1] // 2
    xpad = _pad_circular(x2, ntaps)
    win = np.lib.stride_tricks.sliding_window_view(xpad, ntaps, axis=-1)[:, : 2 * n : 2]
    out = np.empty((2, n), dtype=complex)
    for i in range(2):
        out[i] = win[0] @ w[i, 0] + win[1] @ w[i, 1]
    return out


def equalize_2x2(rx, known_symbols, dsp: DspConfig, return_taps=False):
    """Data-aided T/2-spaced 2x2 LMS butterfly.

    Trains against the known symbols for ``eq_training_passes`` passes, with
    a decaying data-aided phase reference inside the update so laser phase
    drift does not pull the taps, then applies the averaged final-pass taps
    to the whole sequence. Input is normalized to unit power per
    polarization; output is one sample per symbol.
    """
    rx = np.asarray(rx, dtype=complex)
    d = np.ascontiguousarray(known_symbols, dtype=complex)
    if rx.shape[1] != 2 * d.shape[1]:
        raise DspError("equalizer input must be 2 samples/symbol and match the known symbols")
    scale = np.sqrt(np.mean(np.abs(rx) ** 2, axis=1, keepdims=True))
    if np.any(scale == 0):
        raise DspError("equalizer input has a dead polarization")
    x = rx / scale
    xpad = np.ascontiguousarray(_pad_circular(x, dsp.eq_taps))
    forget = 1.0 - 1.0 / dsp.cpe_block_symbols
    w, mse = _lms_core(xpad, d, dsp.eq_taps, dsp.eq_step_size, dsp.eq_training_passes, forget)
    if not np.isfinite(mse) or mse > np.mean(np.abs(d) ** 2):
        raise DspError("equalizer diverged")
    out = apply_butterfly(x, w)
    return (out, w) if return_taps else out


def carrier_phase_recover(symbols, known_symbols, dsp: DspConfig, return_phase=False):
    """Per-polarization block phase ``arg(sum r conj(a))`` removed blockwise."""
    r = np.asarray(symbols, dtype=complex)
    a = np.asarray(known_symbols, dtype=complex)
    n = r.shape[1]
    block = dsp.cpe_block_symbols
    edges = np.arange(0, n, block)
    corr = np.add.reduceat(r * np.conj(a), edges, axis=1)
    phase = np.angle(corr)
    per_symbol = np.repeat(phase, np.diff(np.append(edges, n)), axis=1)
    out = r * np.exp(-1j * per_symbol)
    return (out, phase) if return_phase else out


def dump_symbols(path, symbols, symbol_rate, center_frequency):
    """Recovered-symbol dump: HLSB layout at one sample per symbol."""
    dump_samples(path, symbols, symbol_rate, center_frequency)
