"""Shaped WDM transmitter: PCS-QAM symbols, RRC shaping, front-end, multiplex."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from scipy import optimize, signal as sps

from hcfloop.signal import (
    C_LIGHT,
    ChannelGrid,
    SignalBlock,
    SignalError,
    frequency_shift,
    set_power_dbm,
    wiener_phase,
)

CUT_WAVELENGTH_NM = 1559.39
TRAINING_SYMBOLS = 4096


class ShapingError(ValueError):
    pass


def _gray(n):
    return n ^ (n >> 1)


def _entropy_bits(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


@dataclass(frozen=True, eq=False)
class ShapedConstellation:
    """Square QAM alphabet with a probability mass over its points.

    Points are normalized to unit mean energy under ``probabilities``.
    ``labels[i]`` is the Gray bit label of ``points[i]`` (I bits first).
    """

    points: np.ndarray
    probabilities: np.ndarray
    entropy_bits: float
    base_order: int
    labels: np.ndarray

    @property
    def bits_per_symbol(self) -> int:
        return int(round(math.log2(self.base_order)))

    def mean_energy(self) -> float:
        return float(np.sum(self.probabilities * np.abs(self.points) ** 2))

    def index_of(self, symbols) -> np.ndarray:
        """Index of the nearest alphabet point for each symbol."""
        symbols = np.asarray(symbols)
        d = np.abs(symbols.reshape(-1, 1) - self.points.reshape(1, -1))
        return np.argmin(d, axis=1).reshape(symbols.shape)

    def to_table(self) -> str:
        """Text export: index, I, Q, probability per line."""
        rows = ["# index I Q probability"]
        for i, (c, p) in enumerate(zip(self.points, self.probabilities)):
            rows.append(f"{i} {c.real:.17g} {c.imag:.17g} {p:.17g}")
        return "\n".join(rows) + "\n"


def _square_qam_grid(order):
    side = math.isqrt(order)
    if side * side != order or side < 2 or order & (order - 1):
        raise ShapingError(f"order {order} is not a square QAM order")
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    bits = int(round(math.log2(side)))
    ii, qq = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    ii, qq = ii.ravel(), qq.ravel()
    points = levels[ii] + 1j * levels[qq]
    labels = np.zeros((order, 2 * bits), dtype=np.uint8)
    gi, gq = _gray(ii), _gray(qq)
    for b in range(bits):
        shift = bits - 1 - b
        labels[:, b] = (gi >> shift) & 1
        labels[:, bits + b] = (gq >> shift) & 1
    return points, labels


def _mb_probabilities(energy, nu):
    w = np.exp(-nu * (energy - energy.min()))
    return w / w.sum()


def mb_entropy(nu, order=64) -> float:
    """Entropy in bits of the Maxwell-Boltzmann law exp(-nu |c|^2).

    ``nu`` applies to the unnormalized odd-integer QAM grid.
    """
    points, _ = _square_qam_grid(order)
    return _entropy_bits(_mb_probabilities(np.abs(points) ** 2, nu))


def mb_shape_constellation(target_entropy_bits: float, base_order: int = 64) -> ShapedConstellation:
    """Maxwell-Boltzmann shaped square QAM with the requested entropy.

    The shaping parameter is found by a bracketed root search on the
    strictly decreasing map nu -> H(nu). As nu grows the law collapses onto
    the four inner points, so entropies at or below 2 bits are unreachable.
    """
    points, labels = _square_qam_grid(base_order)
    h_max = math.log2(base_order)
    if target_entropy_bits > h_max + 1e-12:
        raise ShapingError(f"entropy exceeds log2(M) = {h_max:g}")
    if not target_entropy_bits > 2.0:
        raise ShapingError("entropy must exceed 2 bits for Maxwell-Boltzmann QAM")

    energy = np.abs(points) ** 2
    if target_entropy_bits >= h_max - 1e-12:
        nu = 0.0
    else:
        def gap(v):
            return _entropy_bits(_mb_probabilities(energy, v)) - target_entropy_bits

        hi = 1e-3
        while gap(hi) > 0:
            hi *= 2
        nu = optimize.brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)

    p = _mb_probabilities(energy, nu)
    scale = np.sqrt(np.sum(p * energy))
    return ShapedConstellation(
        points=points / scale,
        probabilities=p,
        entropy_bits=_entropy_bits(p),
        base_order=base_order,
        labels=labels,
    )


def draw_shaped_symbols(constellation: ShapedConstellation, count: int, seed) -> np.ndarray:
    """I.i.d. draws from the shaping distribution (deterministic per seed)."""
    if count < 1:
        raise ShapingError("count must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(constellation.base_order, size=count, p=constellation.probabilities)
    return constellation.points[idx]


@dataclass(frozen=True)
class TxChain:
    symbol_rate: float
    samples_per_symbol: int
    rrc_rolloff: float = 0.1
    rrc_span_symbols: int = 32
    tx_bandwidth_hz: float | None = None
    preemphasis_enabled: bool = True
    laser_linewidth_hz: float = 100e3

    def __post_init__(self):
        if not self.symbol_rate > 0:
            raise ValueError("symbol_rate must be positive")
        if not 0 < self.rrc_rolloff <= 1:
            raise ValueError("rolloff must lie in (0, 1]")
        if self.rrc_span_symbols < 8:
            raise ValueError("RRC span must be at least 8 symbols")
        if self.samples_per_symbol < 2:
            raise ValueError("samples_per_symbol must be >= 2")
        if self.tx_bandwidth_hz is None:
            object.__setattr__(self, "tx_bandwidth_hz", 0.62 * self.symbol_rate)
        if not self.tx_bandwidth_hz > 0:
            raise ValueError("tx_bandwidth_hz must be positive")
        if self.laser_linewidth_hz < 0:
            raise ValueError("laser linewidth must be >= 0")

    @property
    def sample_rate(self) -> float:
        return self.symbol_rate * self.samples_per_symbol

    @property
    def occupied_bandwidth(self) -> float:
        return self.symbol_rate * (1 + self.rrc_rolloff)


def rrc_taps(rolloff, span_symbols, sps) -> np.ndarray:
    """Unit-energy root-raised-cosine impulse response, ``span*sps + 1`` taps."""
    n = span_symbols * sps
    t = (np.arange(n + 1) - n / 2) / sps  # in symbol periods
    b = rolloff
    h = np.empty_like(t)
    at_zero = np.isclose(t, 0.0)
    at_sing = np.isclose(np.abs(t), 1 / (4 * b))
    reg = ~(at_zero | at_sing)
    tr = t[reg]
    h[reg] = (
        np.sin(np.pi * tr * (1 - b)) + 4 * b * tr * np.cos(np.pi * tr * (1 + b))
    ) / (np.pi * tr * (1 - (4 * b * tr) ** 2))
    h[at_zero] = 1 - b + 4 * b / np.pi
    h[at_sing] = (b / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
    )
    return h / np.linalg.norm(h)


def circular_filter(x, taps) -> np.ndarray:
    """Circular convolution of the rows of ``x`` with centred ``taps``."""
    x = np.atleast_2d(x)
    n = x.shape[-1]
    half = (taps.size - 1) // 2
    kernel = np.zeros(n, dtype=complex)
    idx = (np.arange(taps.size) - half) % n
    np.add.at(kernel, idx, taps)
    return sfft.ifft(sfft.fft(x, axis=-1) * sfft.fft(kernel), axis=-1)


def pulse_shape_rrc(symbols, chain: TxChain, center_frequency=None, seed_tag=0) -> SignalBlock:
    """Upsample and shape a ``(2, N)`` symbol array with the RRC filter.

    The waveform is periodic (circular convolution), so symbol ``k`` sits at
    sample ``k * sps`` with no filter delay.
    """
    symbols = np.atleast_2d(np.asarray(symbols, dtype=complex))
    if symbols.shape[0] != 2:
        raise SignalError("symbols must be a (2, N) array")
    sps = chain.samples_per_symbol
    up = np.zeros((2, symbols.shape[1] * sps), dtype=complex)
    up[:, ::sps] = symbols
    taps = rrc_taps(chain.rrc_rolloff, chain.rrc_span_symbols, sps)
    if center_frequency is None:
        center_frequency = C_LIGHT / (CUT_WAVELENGTH_NM * 1e-9)
    return SignalBlock.from_field(circular_filter(up, taps), chain.sample_rate, center_frequency, seed_tag)


def bessel_response(freqs, bandwidth_hz, order=5) -> np.ndarray:
    """Zero-delay Bessel low-pass response (3 dB at ``bandwidth_hz``).

    The constant group delay at DC is removed; timing is bookkept elsewhere.
    """
    b, a = sps.bessel(order, 2 * np.pi * bandwidth_hz, btype="low", analog=True, norm="mag")
    w = 2 * np.pi * np.asarray(freqs, dtype=float)
    _, h = sps.freqs(b, a, worN=w)
    # DC group delay: -d(phase)/dw at w=0, from the polynomial coefficients
    tau0 = a[-2] / a[-1] - (b[-2] / b[-1] if len(b) > 1 else 0.0)
    return h * np.exp(1j * w * tau0)


def preemphasis_response(h, clip_db=10.0) -> np.ndarray:
    """Inverse of ``h`` with its magnitude clipped at ``clip_db``."""
    mag = np.minimum(1 / np.maximum(np.abs(h), 1e-300), 10 ** (clip_db / 20))
    return mag * np.exp(-1j * np.angle(h))


def apply_tx_frontend(signal: SignalBlock, chain: TxChain, seed=None) -> SignalBlock:
    """Transmitter low-pass response, optional pre-emphasis, laser phase noise."""
    f = signal.frequencies()
    h = bessel_response(f, chain.tx_bandwidth_hz)
    if chain.preemphasis_enabled:
        h = h * preemphasis_response(h)
    out = sfft.ifft(sfft.fft(signal.field, axis=-1) * h, axis=-1)
    if chain.laser_linewidth_hz > 0:
        rng = np.random.default_rng(seed)
        theta = wiener_phase(signal.n_samples, chain.laser_linewidth_hz, signal.sample_rate, rng)
        out = out * np.exp(1j * theta)
    return signal.with_field(out)


def wdm_multiplex(channels, grid: ChannelGrid, per_channel_power_dbm=None) -> SignalBlock:
    """Place each channel on its grid offset and sum them.

    All channels are first brought to a common power: ``per_channel_power_dbm``
    if given, else the mean of their linear powers.
    """
    channels = list(channels)
    if len(channels) != grid.channel_count:
        raise SignalError("channel count does not match the grid")
    fs = channels[0].sample_rate
    if any(ch.sample_rate != fs for ch in channels):
        raise SignalError("channels must share a sample rate")
    if grid.channel_count * grid.channel_spacing_hz > fs:
        raise SignalError("insufficient simulation bandwidth")
    if per_channel_power_dbm is None:
        p = np.mean([ch.mean_power() for ch in channels])
        per_channel_power_dbm = 10 * np.log10(p / 1e-3)
    fc = grid.center_frequency
    offsets = grid.offsets_hz(fc)
    parts = []
    for ch, off in zip(channels, offsets):
        ch = set_power_dbm(ch, per_channel_power_dbm)
        parts.append(frequency_shift(ch, float(off)).field)
    total = np.sum(np.stack(parts), axis=0)
    return SignalBlock.from_field(total, fs, fc, channels[0].seed_tag)


def occupied_bandwidth(signal: SignalBlock, fraction=0.99) -> float:
    """Smallest centred band holding ``fraction`` of the energy, in Hz."""
    spec = np.sum(np.abs(sfft.fft(signal.field, axis=-1)) ** 2, axis=0)
    f = signal.frequencies()
    order = np.argsort(np.abs(f), kind="stable")
    cum = np.cumsum(spec[order]) / spec.sum()
    k = int(np.searchsorted(cum, fraction))
    return 2 * float(np.abs(f[order][k]))
