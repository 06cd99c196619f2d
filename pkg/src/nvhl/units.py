"""Unit conventions.

Frequencies enter and leave the package in ordinary-frequency kHz, fields in
gauss and times in ns (T2-type times in ms). Hamiltonians are stored in kHz
with spin-1/2 operators I = sigma/2, so the eigen-gap of a 2x2 field
Hamiltonian is the precession frequency. The only place a frequency and a
time are combined into a phase is :func:`phase`.
"""

from __future__ import annotations

import numpy as np

#: ns -> ms
NS_TO_MS = 1e-6
#: ms -> ns
MS_TO_NS = 1e6
TWO_PI = 2.0 * np.pi


def phase(freq_khz, t_ns):
    """Accumulated phase (rad) of a frequency in kHz over a time in ns."""
    return TWO_PI * np.asarray(freq_khz, dtype=float) * np.asarray(t_ns, dtype=float) * NS_TO_MS


def angular_khz(freq_khz):
    """Ordinary frequency (kHz) to angular frequency (rad/ms)."""
    return TWO_PI * np.asarray(freq_khz, dtype=float)


def ordinary_khz(omega_rad_per_ms):
    """Angular frequency (rad/ms) to ordinary frequency (kHz)."""
    return np.asarray(omega_rad_per_ms, dtype=float) / TWO_PI
