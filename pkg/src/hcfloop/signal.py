"""Dual-polarization baseband waveforms and power/frequency bookkeeping.

Field convention: ``|a|**2`` is instantaneous power in watts, and the total
power of a block is summed over both polarizations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.constants as const

C_LIGHT = const.c  # m/s
H_PLANCK = const.h

_DUMP_MAGIC = b"HLSB"
_DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sIQdd")


class SignalError(ValueError):
    """Raised for invalid or degenerate signal blocks."""


@dataclass(frozen=True, eq=False)
class SignalBlock:
    """Dual-polarization complex baseband samples.

    Parameters
    ----------
    samples_x, samples_y : numpy.ndarray
        Complex field samples of each polarization, in sqrt(W).
    sample_rate : float
        Sampling rate in Hz.
    center_frequency : float
        Optical carrier frequency in Hz.
    seed_tag : int
        Provenance of the randomness used to build the block.
    """

    samples_x: np.ndarray
    samples_y: np.ndarray
    sample_rate: float
    center_frequency: float
    seed_tag: int = 0

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples_x, dtype=np.complex128)
        y = np.ascontiguousarray(self.samples_y, dtype=np.complex128)
        if x.ndim != 1 or y.ndim != 1:
            raise SignalError("polarization samples must be 1-D")
        if x.size != y.size:
            raise SignalError("polarizations have different lengths")
        if x.size < 1:
            raise SignalError("empty signal")
        if not self.sample_rate > 0:
            raise SignalError("sample_rate must be positive")
        if not self.center_frequency > 0:
            raise SignalError("center_frequency must be positive")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise SignalError("non-finite samples")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "samples_x", x)
        object.__setattr__(self, "samples_y", y)

    @classmethod
    def from_field(cls, field, sample_rate, center_frequency, seed_tag=0):
        """Build a block from a ``(2, N)`` array."""
        field = np.asarray(field)
        return cls(field[0], field[1], sample_rate, center_frequency, seed_tag)

    @property
    def field(self) -> np.ndarray:
        """Stacked ``(2, N)`` copy of both polarizations."""
        return np.stack([self.samples_x, self.samples_y])

    @property
    def n_samples(self) -> int:
        return self.samples_x.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def wavelength(self) -> float:
        """Carrier wavelength in metres."""
        return C_LIGHT / self.center_frequency

    def time(self) -> np.ndarray:
        """Sample instants, t=0 at the first sample."""
        return np.arange(self.n_samples) / self.sample_rate

    def frequencies(self) -> np.ndarray:
        """Baseband FFT bin frequencies in Hz (numpy ordering)."""
        return np.fft.fftfreq(self.n_samples, d=self.dt)

    def with_field(self, field, seed_tag=None) -> "SignalBlock":
        """Copy of this block carrying new samples."""
        return replace(
            self,
            samples_x=field[0],
            samples_y=field[1],
            seed_tag=self.seed_tag if seed_tag is None else seed_tag,
        )

    def mean_power(self) -> float:
        """Average total power in W."""
        return float(
            np.mean(self.samples_x.real**2 + self.samples_x.imag**2)
            + np.mean(self.samples_y.real**2 + self.samples_y.imag**2)
        )


@dataclass(frozen=True)
class ChannelGrid:
    """WDM channel plan.

    ``center_wavelength_nm`` is ordered by strictly increasing wavelength.
    ``signal_bandwidth_hz`` is optional and only needed for spectral OSNR
    measurements (it locates the guard bands between channels).
    """

    center_wavelength_nm: tuple
    channel_spacing_hz: float
    signal_bandwidth_hz: float | None = None

    def __post_init__(self):
        wl = tuple(float(w) for w in self.center_wavelength_nm)
        object.__setattr__(self, "center_wavelength_nm", wl)
        if len(wl) < 1:
            raise SignalError("channel grid needs at least one channel")
        if not self.channel_spacing_hz > 0:
            raise SignalError("channel spacing must be positive")
        if any(b <= a for a, b in zip(wl, wl[1:])):
            raise SignalError("channel wavelengths must be strictly increasing")

    @classmethod
    def uniform(cls, center_nm, spacing_hz, count, signal_bandwidth_hz=None):
        """Equally spaced (in frequency) grid centred on ``center_nm``."""
        f0 = C_LIGHT / (center_nm * 1e-9)
        offsets = (np.arange(count) - (count - 1) / 2) * spacing_hz
        # descending frequency = ascending wavelength
        freqs = f0 - offsets
        wl = tuple(C_LIGHT / f * 1e9 for f in freqs)
        return cls(wl, spacing_hz, signal_bandwidth_hz)

    @property
    def channel_count(self) -> int:
        return len(self.center_wavelength_nm)

    @property
    def frequencies(self) -> np.ndarray:
        return C_LIGHT / (np.asarray(self.center_wavelength_nm) * 1e-9)

    @property
    def center_frequency(self) -> float:
        """Mid-point of the grid in optical frequency."""
        f = self.frequencies
        return float(0.5 * (f.max() + f.min()))

    def offsets_hz(self, center_frequency=None) -> np.ndarray:
        """Channel offsets from ``center_frequency``, rounded to the spacing.

        Rounding removes the sub-Hz jitter that the wavelength round-trip
        introduces, so channel placement is exact on the grid.
        """
        fc = self.center_frequency if center_frequency is None else center_frequency
        raw = self.frequencies - fc
        return np.round(raw / self.channel_spacing_hz * 2) / 2 * self.channel_spacing_hz


def measure_power_dbm(signal: SignalBlock) -> float:
    """Total average power of ``signal`` in dBm.

    Raises
    ------
    SignalError
        If the block carries no power at all ("zero power").
    """
    p = signal.mean_power()
    if p <= 0:
        raise SignalError("zero power")
    return 10 * np.log10(p / 1e-3)


def set_power_dbm(signal: SignalBlock, target: float) -> SignalBlock:
    """Scale ``signal`` by a positive real factor to reach ``target`` dBm."""
    current = measure_power_dbm(signal)
    scale = 10 ** ((target - current) / 20)
    return signal.with_field(signal.field * scale)


def frequency_shift(signal: SignalBlock, offset_hz: float) -> SignalBlock:
    """Multiply by ``exp(i 2 pi offset t)`` with t=0 at the first sample."""
    if offset_hz == 0:
        return signal
    phase = 2 * np.pi * offset_hz * signal.time()
    return signal.with_field(signal.field * np.exp(1j * phase))


def wiener_phase(n, linewidth_hz, sample_rate, rng) -> np.ndarray:
    """Laser phase-noise trajectory: increments of variance 2*pi*linewidth*dt."""
    if linewidth_hz <= 0:
        return np.zeros(n)
    sigma = np.sqrt(2 * np.pi * linewidth_hz / sample_rate)
    steps = rng.normal(0.0, sigma, n)
    steps[0] = 0.0
    return np.cumsum(steps)


def dump_samples(path, samples, sample_rate, center_frequency):
    """Write a ``(2, N)`` complex array in the HLSB binary layout.

    Layout: little-endian header {magic, u32 version, u64 length,
    f64 sample_rate, f64 center_frequency} followed by interleaved float64
    (Ix, Qx, Iy, Qy) per sample.
    """
    samples = np.asarray(samples, dtype=np.complex128)
    n = samples.shape[1]
    body = np.empty((n, 4), dtype="<f8")
    body[:, 0] = samples[0].real
    body[:, 1] = samples[0].imag
    body[:, 2] = samples[1].real
    body[:, 3] = samples[1].imag
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(_DUMP_MAGIC, _DUMP_VERSION, n, sample_rate, center_frequency))
        fh.write(body.tobytes())


def load_samples(path):
    """Read an HLSB file; returns ``(samples, sample_rate, center_frequency)``."""
    raw = Path(path).read_bytes()
    magic, version, n, fs, fc = _DUMP_HEADER.unpack_from(raw)
    if magic != _DUMP_MAGIC:
        raise SignalError(f"{path}: not an HLSB dump")
    if version != _DUMP_VERSION:
        raise SignalError(f"{path}: unsupported dump version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=_DUMP_HEADER.size)
    if body.size != 4 * n:
        raise SignalError(f"{path}: truncated dump")
    body = body.reshape(n, 4)
    samples = np.stack([body[:, 0] + 1j * body[:, 1], body[:, 2] + 1j * body[:, 3]])
    return samples, fs, fc


def dump_signal(path, signal: SignalBlock):
    dump_samples(path, signal.field, signal.sample_rate, signal.center_frequency)


def load_signal(path, seed_tag=0) -> SignalBlock:
    samples, fs, fc = load_samples(path)
    return SignalBlock.from_field(samples, fs, fc, seed_tag)
