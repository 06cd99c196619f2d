"""Hamiltonian learning and gate design for an NV electron coupled to 13C nuclear spins."""

from __future__ import annotations

__version__ = "0.1.0"

from .spin_model import HyperfineTensor, MagneticField, NuclearSpinRecord, PhysicalConstants, SystemConfig

__all__ = [
    "__version__",
    "HyperfineTensor",
    "MagneticField",
    "NuclearSpinRecord",
    "PhysicalConstants",
    "SystemConfig",
]
