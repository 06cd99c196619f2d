from __future__ import annotations

import json
import math

import numpy as np
import pytest
from conftest import HYPERFINE, MEASURED, make_config
from hypothesis import given
from hypothesis import strategies as st

from nvhl.qpe import (
    QpeBackendError,
    QpeConfig,
    QpeRecord,
    ReplayBackend,
    SimulatorBackend,
    ToneBackend,
    digit_decision,
    digit_posterior,
    estimate_from_digits,
    measure_frequency_pair,
    ramsey_probability,
    read_measurement_csv,
    refine_hyperfine,
    run_adaptive_qpe,
    unwrap_alias,
    update_basis,
    write_measurement_csv,
)
from nvhl.spin_model import (
    DEFAULT_BZ_G,
    HyperfineTensor,
    MagneticField,
    NuclearSpinRecord,
    PhysicalConstants,
    SystemConfig,
    branch_frequencies,
    exact_manifold_gaps,
)

NOISELESS = QpeConfig(contrast=1.0, use_dephasing=False)


def test_config_schedule():
    q = QpeConfig(n_steps=3)
    assert list(q.times()) == [3200.0, 1600.0, 800.0]
    assert q.f0 == pytest.approx(156.25)
    assert q.f0 == pytest.approx(1 / (2 * q.times()[0] * 1e-6))
    assert QpeConfig().unambiguous_range == pytest.approx(1250.0)
    for bad in (dict(t_min=0), dict(n_steps=0), dict(shots=0), dict(contrast=1.5)):
        with pytest.raises(ValueError):
            QpeConfig(**bad)


def test_ramsey_probability():
    f, t = 546.875, 3200.0
    assert ramsey_probability(f, t, 2 * math.pi * f * t * 1e-6) == pytest.approx(1.0)
    assert ramsey_probability(f, t, 0.3, contrast=0.0) == 0.5
    assert ramsey_probability(f, t, math.pi / 2) == pytest.approx(0.0, abs=1e-12)
    avg = ramsey_probability(100.0, 1000.0, 0.0, detunings=np.array([-50.0, 50.0]))
    assert avg == pytest.approx(0.5 * (1 + math.cos(0.2 * math.pi) * math.cos(0.1 * math.pi)))
    with pytest.raises(ValueError):
        ramsey_probability(1.0, -1.0, 0.0)
    with pytest.raises(ValueError):
        ramsey_probability(1.0, 1.0, 0.0, contrast=2.0)


def test_digit_decision():
    assert digit_decision(0.9).k == 0
    assert digit_decision(0.1).k == 1
    tie = digit_decision(0.5)
    assert tie.k == 0 and tie.tie and tie.confidence == 0.0
    assert digit_decision(0.6, 0.05).confidence == pytest.approx(2.0)
    with pytest.raises(ValueError):
        digit_decision(1.2)


def test_update_basis():
    assert update_basis(math.pi / 2, 1) == pytest.approx(3 * math.pi / 4)
    assert update_basis(math.pi / 2, 0) == pytest.approx(math.pi / 4)
    assert update_basis(3 * math.pi / 4, 1) == pytest.approx(7 * math.pi / 8)


def test_worked_example():
    q = QpeConfig(n_steps=3, t_min=800.0)
    rec = run_adaptive_qpe(ToneBackend(546.875, shots=None), q)
    assert [s.p_hat for s in rec.steps] == pytest.approx([0.0, 0.0, 1.0], abs=1e-12)
    assert rec.digits == (1, 1, 0)
    assert rec.f_estimate == 546.875
    assert rec.complete and rec.f_error == pytest.approx(78.125)


def test_all_zero_digits():
    q = QpeConfig(n_steps=5)
    rec = run_adaptive_qpe(ToneBackend(0.5 * q.f0, shots=None), q)
    assert rec.digits == (0,) * 5
    assert all(s.p_hat == pytest.approx(1.0) for s in rec.steps)
    assert rec.f_estimate == pytest.approx(0.5 * q.f0)


@given(st.integers(1, 10), st.data())
def test_telescoping_gives_extreme_probabilities(n, data):
    q = QpeConfig(n_steps=n)
    j = data.draw(st.integers(0, 2**n - 1))
    f = (j + 0.5) * q.f0
    rec = run_adaptive_qpe(ToneBackend(f, shots=None), q)
    assert all(min(s.p_hat, 1 - s.p_hat) < 1e-9 for s in rec.steps)
    assert rec.f_estimate == pytest.approx(f)
    assert sum(k << i for i, k in enumerate(rec.digits)) == j


@given(st.floats(0.0, 1249.0))
def test_estimate_error_bound_for_correct_digits(f):
    q = QpeConfig(n_steps=8)
    rec = run_adaptive_qpe(ToneBackend(f, shots=None), q)
    j = int(f // q.f0)
    if sum(k << i for i, k in enumerate(rec.digits)) == j:
        assert abs(rec.f_estimate - f) <= 0.5 * q.f0 + 1e-9


def test_precision_doubles_with_each_step():
    worst = []
    for n in (6, 7, 8):
        q = QpeConfig(n_steps=n)
        worst.append(max(abs(estimate_from_digits(
            [((j >> i) & 1) for i in range(n)], q.f0) - j * q.f0) for j in range(2**n)))
    assert worst[0] / worst[1] == pytest.approx(2.0) and worst[1] / worst[2] == pytest.approx(2.0)


def test_statistical_success_rate():
    rng = np.random.default_rng(2024)
    q = QpeConfig(shots=1000)
    ok = 0
    for trial in range(100):
        j = int(rng.integers(0, 2**q.n_steps))
        rec = run_adaptive_qpe(ToneBackend((j + 0.5) * q.f0, contrast=0.85, seed=trial), q)
        ok += sum(k << i for i, k in enumerate(rec.digits)) == j
    assert ok >= 90


def test_posterior_and_string_posterior():
    assert digit_posterior(0.1, 1000) > 0.999
    assert digit_posterior(0.9, 1000) < 1e-3
    assert digit_posterior(0.5, 1000) == pytest.approx(0.5, abs=0.02)
    rec = run_adaptive_qpe(ToneBackend(300.0, contrast=0.85, seed=1), QpeConfig(n_steps=4))
    assert 0.0 <= rec.string_posterior <= 1.0


def test_unwrap_alias():
    assert unwrap_alias(100.0, 1340.0, 800.0) == pytest.approx(1350.0)
    assert unwrap_alias(1115.0, 1100.0, 800.0) == pytest.approx(1115.0)
    assert unwrap_alias(1200.0, 0.0, 800.0) == pytest.approx(1200.0)
    assert unwrap_alias(10.0, -600.0, 800.0) >= 0.0


def _cfg_with_wn(ids, wn):
    constants = PhysicalConstants(gamma_n=wn / DEFAULT_BZ_G)
    return make_config(ids, constants=constants)


def test_frequency_pair_spin2():
    cfg = _cfg_with_wn((2,), 530.672)
    pair = measure_frequency_pair(cfg, 2, NOISELESS, seed=1, model="secular")
    assert pair.f_ms_plus == pytest.approx(490.1, abs=NOISELESS.f0 + 0.1)
    assert pair.f_ms_minus == pytest.approx(581.1, abs=NOISELESS.f0 + 0.1)
    plus, minus = pair.branches()
    assert plus == pair.f_ms_minus and minus == pair.f_ms_plus
    assert not pair.alias_risk


def test_frequency_pair_decoupled_spin():
    rec = NuclearSpinRecord(7, HyperfineTensor.weak_coupling(0.0, 0.0))
    cfg = SystemConfig(resolved_spins=[rec])
    pair = measure_frequency_pair(cfg, 7, NOISELESS, seed=3)
    assert pair.f_ms_plus == pytest.approx(cfg.omega_n, abs=NOISELESS.f0)
    assert pair.f_ms_minus == pytest.approx(cfg.omega_n, abs=NOISELESS.f0)


def test_frequency_pair_ignores_other_spins():
    cfg1 = make_config((2,))
    cfg3 = make_config((2, 1, 4))
    a = measure_frequency_pair(cfg1, 2, NOISELESS, seed=9)
    b = measure_frequency_pair(cfg3, 2, NOISELESS, seed=9)
    assert abs(a.f_ms_plus - b.f_ms_plus) <= NOISELESS.f0
    assert abs(a.f_ms_minus - b.f_ms_minus) <= NOISELESS.f0


def test_frequency_pair_alias_spin1():
    cfg = make_config((1,))
    pair = measure_frequency_pair(cfg, 1, NOISELESS, seed=2, prior={1: 220.0, -1: 1105.0})
    p, m = branch_frequencies(566.0, 208.0, cfg.omega_n)
    assert pair.alias_risk and pair.minus.alias_risk and not pair.plus.alias_risk
    assert pair.f_ms_minus == pytest.approx(p, abs=1.0)
    assert pair.f_ms_plus == pytest.approx(m, abs=1.0)
    assert json.loads(json.dumps(pair.to_dict()))["alias_risk"] is True


def test_simulator_floquet_matches_exact_gap():
    cfg = make_config((4,), field=MagneticField(DEFAULT_BZ_G, 1.0))
    sim = SimulatorBackend(cfg, 4)
    gaps = exact_manifold_gaps(cfg.constants, cfg.field, cfg.physical_tensors()[0])
    for ms in (1, -1):
        assert sim.frequency(ms) == pytest.approx(gaps[ms], rel=1e-4)


def test_simulator_dephasing_drives_long_step_to_half():
    cfg = make_config((2,))
    q = QpeConfig(n_steps=13, shots=20000, contrast=1.0)
    from nvhl.dynamics import NoiseModel

    sim = SimulatorBackend(cfg, 2, q, seed=4, noise=NoiseModel(nuclear_t2star=0.3))
    p, _, _ = sim.measure(1, float(q.times()[0]), q.theta_1, 1)
    assert p == pytest.approx(0.5, abs=0.02)
    with pytest.raises(ValueError):
        sim.measure(1, 800.0, 0.0, None)


def test_replay_is_deterministic(tmp_path):
    q = QpeConfig(n_steps=8)
    rec = run_adaptive_qpe(ToneBackend(321.0, contrast=0.85, seed=5), q, manifold=1)
    path = tmp_path / "m.csv"
    write_measurement_csv(rec, path)
    rows = read_measurement_csv(path)
    a = run_adaptive_qpe(ReplayBackend(rows), q, manifold=1)
    b = run_adaptive_qpe(ReplayBackend.from_csv(path), q, manifold=1)
    assert a.to_json() == b.to_json()
    assert a.digits == rec.digits and a.f_estimate == rec.f_estimate


def test_replay_schedule_mismatch_and_partial_record(tmp_path):
    q = QpeConfig(n_steps=4)
    rec = run_adaptive_qpe(ToneBackend(321.0, shots=None), q)
    path = tmp_path / "m.csv"
    write_measurement_csv(rec, path)
    rows = read_measurement_csv(path)[:2]
    with pytest.raises(QpeBackendError) as err:
        run_adaptive_qpe(ReplayBackend(rows), q)
    assert len(err.value.partial.steps) == 2
    with pytest.raises(QpeBackendError):
        run_adaptive_qpe(ReplayBackend(read_measurement_csv(path)), QpeConfig(n_steps=4, t_min=400.0))


def test_measurement_csv_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("step,t,theta\n1,2,3\n")
    with pytest.raises(ValueError, match="columns"):
        read_measurement_csv(path)


def test_record_json_round_trip():
    rec = run_adaptive_qpe(ToneBackend(700.0, contrast=0.9, seed=1), QpeConfig(n_steps=6), manifold=-1,
                           provenance={"seed": 1}, spin_id=3)
    back = QpeRecord.from_dict(json.loads(rec.to_json()))
    assert back.to_json() == rec.to_json()
    assert back.digits == rec.digits and back.manifold == -1 and back.provenance == {"seed": 1}


def _register():
    pairs = [(v[0], v[1]) for v in MEASURED.values()]
    wn = [v[2] for v in MEASURED.values()]
    azz = np.array([v[0] for v in HYPERFINE.values()])
    azx = np.array([v[1] for v in HYPERFINE.values()])
    return pairs, wn, azz, azx


def test_refine_reproduces_quoted_values():
    pairs, wn, azz, azx = _register()
    r = refine_hyperfine(pairs, wn)
    assert np.max(np.abs(r.azz - azz)) <= 3.0
    assert np.max(np.abs(r.azx - azx)) <= 4.0
    assert not r.pinned and abs(r.bx) <= 2.5


def test_refine_noiseless_self_consistency():
    _, wn, azz, azx = _register()
    p, m = branch_frequencies(azz, azx, np.array(wn), 0.0)
    r = refine_hyperfine(np.column_stack([p, m]), wn)
    assert abs(r.bx) < 1e-6
    assert np.max(np.abs(r.azz - azz)) < 1e-6 and np.max(np.abs(r.azx - azx)) < 1e-6


def _exact_data(bx):
    _, wn, azz, azx = _register()
    field = MagneticField(DEFAULT_BZ_G, bx)
    pairs, zero = [], []
    for a, x, w in zip(azz, azx, wn):
        c = PhysicalConstants(gamma_n=w / DEFAULT_BZ_G)
        g = exact_manifold_gaps(c, field, HyperfineTensor.weak_coupling(-a, -x))
        pairs.append((g[-1], g[1]))
        zero.append(g[0])
    return pairs, zero, wn, azz, azx


@pytest.mark.parametrize("forward_model", ["perturbative", "floquet"])
def test_refine_exact_model_with_zero_manifold_data(forward_model):
    pairs, zero, wn, azz, azx = _exact_data(1.5)
    # errors of the order of the default QPE half-bin
    r = refine_hyperfine(pairs, wn, errors=np.full((10, 2), 0.1), zero_frequencies=zero,
                         zero_errors=np.full(10, 0.1), forward_model=forward_model)
    assert r.identifiable
    assert r.bx == pytest.approx(1.5, abs=0.3)
    assert np.max(np.abs(r.azz - azz)) < 1.0 and np.max(np.abs(r.azx - azx)) < 1.0


def test_refine_pairs_alone_leave_bx_unidentified():
    pairs, _, wn, _, _ = _exact_data(1.5)
    assert not refine_hyperfine(pairs, wn).identifiable


def test_refine_single_spin_falls_back_to_inversion():
    r = refine_hyperfine([MEASURED[2][:2]], MEASURED[2][2])
    assert r.method == "per-spin inversion"
    assert r.azz[0] == pytest.approx(45.9, abs=0.05) and r.azx[0] == pytest.approx(69.9, abs=0.1)


def test_refine_pinned_bound_warns():
    pairs, zero, wn, _, _ = _exact_data(2.4)
    with pytest.warns(RuntimeWarning, match="pinned"):
        r = refine_hyperfine(pairs, wn, bx_prior_bound=0.5, errors=np.full((10, 2), 0.1),
                             zero_frequencies=zero, zero_errors=np.full(10, 0.1))
    assert r.pinned and r.bx == pytest.approx(0.5)


def test_refine_errors():
    with pytest.raises(ValueError):
        refine_hyperfine([], 530.0)
    with pytest.raises(ValueError):
        refine_hyperfine([(1.0, 2.0), (3.0, 4.0)], 530.0, forward_model="nope")
