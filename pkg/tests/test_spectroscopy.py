from __future__ import annotations

import numpy as np
import pytest
from conftest import make_config
from hypothesis import given
from hypothesis import strategies as st

from nvhl.dynamics import NoiseModel, coherence_curve
from nvhl.spectroscopy import (
    AZX_BOX,
    AZZ_BOX,
    SpectroscopyTrace,
    detect_dips,
    generate_trace,
    read_trace_csv,
    rough_fit,
    single_spin_coherence,
    tau_grid,
    write_trace_csv,
)
from nvhl.spin_model import HyperfineTensor, NuclearSpinRecord, SystemConfig


def config_of(pairs, convention="negated"):
    spins = [NuclearSpinRecord(i + 1, HyperfineTensor.weak_coupling(a, x)) for i, (a, x) in enumerate(pairs)]
    return SystemConfig(resolved_spins=spins, convention=convention)


def test_tau_grid():
    g = tau_grid(4, 20, 4)
    assert list(g) == [4, 8, 12, 16, 20]
    assert tau_grid(4, 50000, 4).size == 12500
    for bad in ((0, 10, 1), (10, 5, 1), (1, 10, 0)):
        with pytest.raises(ValueError):
            tau_grid(*bad)


def test_trace_validation():
    with pytest.raises(ValueError, match="equal length"):
        SpectroscopyTrace([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="increasing"):
        SpectroscopyTrace([2.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError, match="lie in"):
        SpectroscopyTrace([1.0, 2.0], [1.0, 1.5])
    with pytest.raises(ValueError, match="kind"):
        SpectroscopyTrace([1.0], [0.5], kind="other")
    p = SpectroscopyTrace([1.0, 2.0], [1.0, 0.25], kind="probability")
    assert list(p.as_coherence()) == [1.0, -0.5]


def test_generated_trace_matches_coherence_curve():
    cfg = make_config((1, 4))
    tr = generate_trace(cfg, 100, 2000, 7)
    assert np.array_equal(tr.coherence, coherence_curve(cfg, 32, tr.tau))
    assert tr.metadata["omega_n"] == cfg.omega_n and tr.n_pulses == 32
    with pytest.raises(ValueError):
        generate_trace(cfg, 100, 2000, 7, n_pulses=0)


def test_empty_config_trace_is_flat():
    tr = generate_trace(SystemConfig(), 4, 5000, 4)
    assert np.all(tr.coherence == 1.0)
    assert detect_dips(tr) == []
    assert rough_fit(tr) == []


def test_noisy_trace_reproducible_and_unbiased():
    cfg = make_config((4,))
    nm = NoiseModel(nuclear_t2star=None, shots=20000)
    a = generate_trace(cfg, 100, 3000, 10, noise=nm, seed=5)
    b = generate_trace(cfg, 100, 3000, 10, noise=nm, seed=5)
    c = generate_trace(cfg, 100, 3000, 10, noise=nm, seed=6)
    assert np.array_equal(a.coherence, b.coherence)
    assert not np.array_equal(a.coherence, c.coherence)
    exact = coherence_curve(cfg, 32, a.tau)
    assert np.max(np.abs(a.coherence - exact)) < 0.1
    assert abs(np.mean(a.coherence - exact)) < 0.01


def test_csv_round_trip(tmp_path):
    tr = generate_trace(make_config((1, 2)), 4, 3000, 4, seed=3)
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, path)
    back = read_trace_csv(path)
    assert np.array_equal(back.tau, tr.tau) and np.array_equal(back.coherence, tr.coherence)
    assert back.n_pulses == tr.n_pulses and back.kind == tr.kind
    assert back.metadata["omega_n"] == tr.metadata["omega_n"]
    assert back.metadata["seed"] == 3 and back.metadata["convention"] == "negated"


def test_csv_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,1\n")
    with pytest.raises(ValueError, match="header"):
        read_trace_csv(path)


@pytest.mark.parametrize("spin", [(45.9, 72.0), (118.1, 71.0), (-49.64, 33.0)])
def test_dip_positions_follow_resonance_condition(spin):
    cfg = config_of([spin])
    wn = cfg.omega_n
    f1 = np.hypot(spin[1], wn + spin[0])
    tr = generate_trace(cfg, 100, 6000, 1)
    dips = detect_dips(tr, threshold=0.5)
    assert dips
    for d in dips:
        k = round(d.tau_center * 1e-6 * (wn + f1) + 0.5)
        expected = (2 * k - 1) / (2 * (wn + f1)) * 1e6
        assert d.tau_center == pytest.approx(expected, abs=2.0)
    assert dips == sorted(dips, key=lambda d: -d.depth)


def test_dip_merge_separation():
    tau = np.arange(0.0, 100.0, 1.0) + 1
    y = np.ones_like(tau)
    y[[20, 30, 70]] = [0.2, 0.3, 0.5]
    tr = SpectroscopyTrace(tau, y)
    assert [d.tau_center for d in detect_dips(tr, min_separation=15)] == [21.0, 71.0]
    assert len(detect_dips(tr, min_separation=5)) == 3


@pytest.mark.parametrize("n", [1, 4, 7, 32])
def test_single_spin_coherence_matches_dynamics(n):
    cfg = config_of([(118.1, 71.0)])
    b1 = np.array([[71.0, 0.0, cfg.omega_n + 118.1]])
    taus = np.linspace(50, 4000, 200)
    assert np.max(np.abs(single_spin_coherence(b1, cfg.omega_n, n, taus)[0]
                         - coherence_curve(cfg, n, taus))) < 1e-10


def _match(estimates, truth):
    got = sorted((e.azz, e.azx) for e in estimates)
    return all(abs(a - ta) <= 5.0 and abs(x - tx) <= 10.0 for (a, x), (ta, tx) in zip(got, sorted(truth)))


@pytest.mark.parametrize(
    "truth",
    [[(45.9, 72.0)], [(566.0, 208.0), (118.1, 71.0)], [(45.9, 72.0), (-15.1, 72.0)]],
)
def test_rough_fit_recovers_isolated_spins(truth):
    est = rough_fit(generate_trace(config_of(truth), 4, 50000, 4))
    assert len(est) == len(truth)
    assert _match(est, truth)
    for e in est:
        assert AZZ_BOX[0] <= e.azz <= AZZ_BOX[1] and AZX_BOX[0] <= e.azx <= AZX_BOX[1]
        assert np.isfinite(e.azz_err) and np.isfinite(e.azx_err)


def test_rough_fit_physical_convention():
    truth = [(118.1, 71.0)]
    tr = generate_trace(config_of(truth, "physical"), 4, 30000, 4)
    est = rough_fit(tr)
    assert tr.metadata["convention"] == "physical"
    assert _match(est, truth)


def test_rough_fit_respects_max_spins():
    tr = generate_trace(config_of([(566.0, 208.0), (118.1, 71.0)]), 4, 30000, 4)
    assert len(rough_fit(tr, max_spins=1)) == 1


@given(st.floats(-600, 600), st.floats(10, 240))
def test_single_spin_coherence_bounded(azz, azx):
    b1 = np.array([[azx, 0.0, 530.0 + azz]])
    m = single_spin_coherence(b1, 530.0, 32, np.linspace(4, 5000, 300))
    assert np.all(np.abs(m) <= 1 + 1e-12)
