from __future__ import annotations

import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from nvhl import _su2
from nvhl.units import NS_TO_MS, TWO_PI, phase

finite = st.floats(-2000, 2000, allow_nan=False)
field = st.tuples(finite, finite, finite).map(np.array)
times = st.floats(0, 5000, allow_nan=False)


def test_phase_unit_boundary():
    # 1 kHz for 1e6 ns (1 ms) is one cycle
    assert math.isclose(phase(1.0, 1e6), TWO_PI)
    assert NS_TO_MS == 1e-6


@given(field, times)
def test_from_field_matches_matrix_exponential(b, t):
    h = 0.5 * np.einsum("k,kij->ij", b, _su2.PAULI)
    u = expm(-1j * TWO_PI * t * NS_TO_MS * h)
    np.testing.assert_allclose(_su2.to_matrix(_su2.from_field(b, t)), u, atol=1e-9)


@given(field, times, field, times)
def test_mul_is_matrix_product(b1, t1, b2, t2):
    a, b = _su2.from_field(b1, t1), _su2.from_field(b2, t2)
    np.testing.assert_allclose(_su2.to_matrix(_su2.mul(a, b)), _su2.to_matrix(a) @ _su2.to_matrix(b), atol=1e-12)


@given(field, times, st.integers(0, 40))
def test_power_equals_repeated_product(b, t, m):
    q = _su2.from_field(b, t)
    ref = _su2.IDENTITY_Q
    for _ in range(m):
        ref = _su2.mul(q, ref)
    np.testing.assert_allclose(_su2.power(q, m), ref, atol=1e-9)


@given(field, times)
def test_matrix_round_trip_up_to_sign(b, t):
    q = _su2.from_field(b, t)
    back = _su2.from_matrix(np.exp(0.7j) * _su2.to_matrix(q))
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9


def test_rotation_and_axis_angle():
    q = _su2.rotation([0.0, 0.0, 2.0], 0.5 * math.pi)
    axis, angle = _su2.axis_angle(q)
    np.testing.assert_allclose(axis, [0, 0, 1])
    assert math.isclose(angle, 0.5 * math.pi)
    np.testing.assert_allclose(_su2.rz(0.5 * math.pi), q)
    axis, angle = _su2.axis_angle(_su2.IDENTITY_Q)
    assert angle == 0.0


def test_dot_is_normalised_trace():
    a = _su2.rotation([1, 2, 3], 1.1)
    b = _su2.rotation([-1, 0, 2], 0.4)
    tr = np.trace(_su2.to_matrix(a).conj().T @ _su2.to_matrix(b)) / 2
    assert math.isclose(_su2.dot(a, b), tr.real, abs_tol=1e-12)
    assert abs(tr.imag) < 1e-12
