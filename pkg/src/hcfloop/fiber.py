"""Manakov split-step propagation, group delay and fibre presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.fft as sfft
from numba import njit

from hcfloop.signal import C_LIGHT, SignalBlock

MANAKOV = 8.0 / 9.0


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FiberSpec:
    """Fibre span parameters in engineering units.

    ``loss_table`` optionally holds ``(wavelength_nm, dB/km)`` rows; when set
    it replaces ``attenuation_db_per_km`` with a wavelength-dependent value.
    """

    name: str
    length_km: float
    attenuation_db_per_km: float
    lumped_loss_db: float
    dispersion_ps_per_nm_km: float
    gamma_per_w_km: float
    group_index: float
    reference_wavelength_nm: float = 1550.0
    loss_table: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.length_km < 0:
            raise ValueError("length must be >= 0")
        if self.attenuation_db_per_km < 0 or self.lumped_loss_db < 0:
            raise ValueError("losses must be >= 0")
        if self.gamma_per_w_km < 0:
            raise ValueError("gamma must be >= 0")
        if self.group_index < 1:
            raise ValueError("group index must be >= 1")

    @property
    def alpha_per_km(self) -> float:
        """Power attenuation coefficient in 1/km."""
        return self.attenuation_db_per_km * np.log(10) / 10

    @property
    def total_loss_db(self) -> float:
        return self.attenuation_db_per_km * self.length_km + self.lumped_loss_db

    @property
    def effective_length_km(self) -> float:
        a = self.alpha_per_km
        if a == 0:
            return self.length_km
        return (1 - np.exp(-a * self.length_km)) / a

    def accumulated_dispersion_ps_per_nm(self) -> float:
        return self.dispersion_ps_per_nm_km * self.length_km

    def with_length(self, length_km) -> "FiberSpec":
        return replace(self, length_km=length_km)


@dataclass(frozen=True)
class StepControl:
    max_step_km: float = 0.1
    max_nonlinear_phase_rad: float = 3e-3
    mode: str = "adaptive"

    def __post_init__(self):
        if not self.max_step_km > 0:
            raise ValueError("max_step_km must be positive")
        if not self.max_nonlinear_phase_rad > 0:
            raise ValueError("max_nonlinear_phase_rad must be positive")
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown step mode {self.mode!r}")


class StepRecord(NamedTuple):
    z_km: float
    step_km: float
    peak_power_w: float
    nonlinear_phase_rad: float


_PRESETS = {
    "smf": dict(
        name="smf", length_km=1.1, attenuation_db_per_km=0.20, lumped_loss_db=0.0,
        dispersion_ps_per_nm_km=17.0, gamma_per_w_km=1.3, group_index=1.4682,
    ),
    "hcf": dict(
        name="hcf", length_km=1.085, attenuation_db_per_km=1.5, lumped_loss_db=4.07,
        dispersion_ps_per_nm_km=3.0, gamma_per_w_km=1.3e-4, group_index=1.0003,
    ),
    "buffering_smf": dict(
        name="buffering_smf", length_km=45.6, attenuation_db_per_km=0.20, lumped_loss_db=0.0,
        dispersion_ps_per_nm_km=17.0, gamma_per_w_km=1.3, group_index=1.4682,
    ),
}


def make_preset(kind: str) -> FiberSpec:
    """Fibre presets: ``smf`` and ``hcf`` (loop FUTs) and ``buffering_smf``."""
    try:
        return FiberSpec(**_PRESETS[kind])
    except KeyError:
        raise ValueError(f"unknown fibre preset {kind!r}; choose from {sorted(_PRESETS)}") from None


def preset_names():
    return sorted(_PRESETS)


def load_loss_table(path) -> tuple:
    """Read ``wavelength_nm loss_db_per_km`` rows (``#`` comments allowed)."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        rows.append((float(parts[0]), float(parts[1])))
    if len(rows) < 1:
        raise ValueError(f"{path}: empty loss table")
    rows.sort()
    return tuple(rows)


def group_delay(fiber: FiberSpec) -> float:
    """Group delay in seconds: length * n_g / c."""
    return fiber.length_km * 1e3 * fiber.group_index / C_LIGHT


def beta2_from_dispersion(d_ps_nm_km, wavelength_m) -> float:
    """GVD in s^2/km from D in ps/(nm km)."""
    d = d_ps_nm_km * 1e-12 / 1e-9  # s/m per km
    return -d * wavelength_m**2 / (2 * np.pi * C_LIGHT)


def _alpha_spectrum(fiber, signal):
    """Per-bin power attenuation (1/km), or a scalar if flat."""
    if fiber.loss_table is None:
        return fiber.alpha_per_km
    wl_nm = C_LIGHT / (signal.center_frequency + signal.frequencies()) * 1e9
    tab = np.asarray(fiber.loss_table)
    db = np.interp(wl_nm, tab[:, 0], tab[:, 1])
    return db * np.log(10) / 10


def _step_sizes(fiber, ctl):
    n = max(1, int(np.ceil(fiber.length_km / ctl.max_step_km - 1e-12)))
    return np.full(n, fiber.length_km / n)


def _total_power(field_t):
    # overflow shows up as inf and is reported as a blowup by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        return field_t[0].real ** 2 + field_t[0].imag ** 2 + field_t[1].real ** 2 + field_t[1].imag ** 2


@njit(cache=True)
def _kerr_rotate(field_t, phi_scale):
    """In-place rotation by ``phi_scale * (|Ax|^2 + |Ay|^2)``."""
    n = field_t.shape[1]
    for i in range(n):
        a = field_t[0, i]
        b = field_t[1, i]
        phi = phi_scale * (a.real * a.real + a.imag * a.imag + b.real * b.real + b.imag * b.imag)
        rot = complex(np.cos(phi), np.sin(phi))
        field_t[0, i] = a * rot
        field_t[1, i] = b * rot


def propagate(signal: SignalBlock, fiber: FiberSpec, ctl: StepControl | None = None,
              return_steps=False):
    """Symmetric split-step solution of the Manakov equation over ``fiber``.

    Each step applies half the linear operator (dispersion and loss, in the
    frequency domain), the full Kerr phase rotation
    ``(8/9) gamma (|Ax|^2 + |Ay|^2) h_eff``, and the second linear half.
    Adjacent linear halves are merged. ``h_eff`` integrates the power decay
    across the step exactly, so a CW wave accumulates ``(8/9) gamma P L_eff``.
    The lumped loss is applied once at the end. The common group delay is not
    applied (see :func:`group_delay`).

    In adaptive mode each step is the largest one (up to ``max_step_km``)
    whose Kerr phase at the peak midpoint power stays within
    ``max_nonlinear_phase_rad``.

    Returns the output block, or ``(block, steps)`` with ``return_steps``.
    """
    ctl = StepControl() if ctl is None else ctl
    steps: list[StepRecord] = []
    field_t = signal.field
    L = fiber.length_km

    if L > 0:
        omega = 2 * np.pi * signal.frequencies()
        beta2 = beta2_from_dispersion(fiber.dispersion_ps_per_nm_km, signal.wavelength)
        alpha = _alpha_spectrum(fiber, signal)
        alpha_nl = float(np.mean(alpha))
        gam = MANAKOV * fiber.gamma_per_w_km
        lin_exponent = 1j * (beta2 / 2) * omega**2 - alpha / 2  # per km, on the field
        adaptive = ctl.mode == "adaptive" and gam > 0
        bound = ctl.max_nonlinear_phase_rad
        fixed = _step_sizes(fiber, ctl)

        def h_eff(h):
            # midpoint-power length that integrates exp(-alpha z) exactly
            if alpha_nl == 0:
                return h
            return 2 * np.sinh(alpha_nl * h / 2) / alpha_nl

        cache = {}

        def linear(dz):
            # steps repeat, so the operator for each length is built once
            key = round(dz, 12)
            op = cache.get(key)
            if op is None:
                if len(cache) > 8:
                    cache.clear()
                op = cache[key] = np.exp(lin_exponent * dz)
            return op

        peak_est = float(_total_power(field_t).max())
        field_f = sfft.fft(field_t, axis=-1)
        z = 0.0
        k = 0
        pending = 0.0  # linear propagation owed from the previous step
        while z < L * (1 - 1e-12):
            if adaptive:
                h = ctl.max_step_km
                if peak_est > 0:
                    h = min(h, bound / (gam * peak_est))
                h = min(h, L - z)
                if L - z - h < 1e-9 * L:
                    h = L - z
            else:
                h = fixed[min(k, fixed.size - 1)]
                h = min(h, L - z)
            while True:
                field_t = sfft.ifft(field_f * linear(pending + h / 2), axis=-1)
                power = _total_power(field_t)
                if not np.isfinite(power).all():
                    raise PropagationError(
                        f"numerical blowup in {fiber.name} at z={z:.6g} km (step {k}, h={h:.3g} km)"
                    )
                peak = float(power.max())
                if adaptive and gam * peak * h > bound * (1 + 1e-9):
                    h = 0.999 * bound / (gam * peak)
                    continue
                break
            phi_scale = gam * h_eff(h)
            if phi_scale > 0:
                _kerr_rotate(field_t, phi_scale)
            steps.append(StepRecord(z, h, peak, gam * peak * h))
            field_f = sfft.fft(field_t, axis=-1)
            pending = h / 2
            peak_est = peak
            z += h
            k += 1
        field_t = sfft.ifft(field_f * linear(pending), axis=-1)

    if fiber.lumped_loss_db:
        field_t = field_t * 10 ** (-fiber.lumped_loss_db / 20)
    if not np.isfinite(field_t).all():
        raise PropagationError(f"numerical blowup in {fiber.name} at span end")
    out = signal.with_field(field_t)
    return (out, steps) if return_steps else out
