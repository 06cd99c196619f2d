from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nvhl.config import load_bundled
from nvhl.spin_model import HyperfineTensor, NuclearSpinRecord, SystemConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# quoted hyperfine parameters (azz, azx) in kHz and polarizations of the ten resolved spins
HYPERFINE = {
    1: (566.0, 208.0, 0.95),
    2: (45.9, 72.0, 0.94),
    3: (-15.1, 72.0, 0.93),
    4: (118.1, 71.0, 0.97),
    5: (5.50, 43.0, 0.92),
    6: (-49.64, 33.0, 0.93),
    7: (46.34, 32.0, 0.81),
    8: (27.09, 31.0, 0.78),
    9: (28.70, 29.0, 0.78),
    10: (-14.28, 17.0, 0.86),
}

# measured precession frequencies (kHz): ms = -1, |ms = +1|, Larmor
MEASURED = {
    1: (1115.49, 213.09, 530.177),
    2: (580.79, 489.77, 530.672),
    3: (520.25, 550.35, 530.657),
    4: (652.50, 418.36, 530.636),
    5: (537.61, 526.70, 530.615),
    6: (481.83, 581.02, 530.597),
    7: (577.74, 485.27, 530.578),
    8: (558.47, 504.42, 530.655),
    9: (559.88, 502.59, 530.569),
    10: (516.51, 545.08, 530.573),
}


def record(spin_id: int) -> NuclearSpinRecord:
    azz, azx, f = HYPERFINE[spin_id]
    return NuclearSpinRecord(spin_id, HyperfineTensor.weak_coupling(azz, azx), f_init=f)


def make_config(ids=(), bath=(), **kw) -> SystemConfig:
    return SystemConfig(resolved_spins=[record(i) for i in ids], bath_spins=list(bath), **kw)


@pytest.fixture(scope="session")
def bundled():
    return load_bundled()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
