"""Vectorised SU(2) algebra in quaternion form.

An element is stored as q = (q0, qx, qy, qz) with U = q0*I - i*(q . sigma).
All functions broadcast over leading axes.
"""

from __future__ import annotations

import numpy as np

from .units import phase

PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)
IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def from_field(field_khz, t_ns):
    """Propagator exp(-i 2pi t (b . sigma/2)) for a field vector b in kHz."""
    b = np.asarray(field_khz, dtype=float)
    t = np.asarray(t_ns, dtype=float)
    norm = np.linalg.norm(b, axis=-1)
    half = 0.5 * phase(norm, t)
    safe = np.where(norm > 0, norm, 1.0)
    s = np.sin(half) / safe
    q = np.empty(np.broadcast_shapes(half.shape + (4,), b.shape[:-1] + (4,)))
    q[..., 0] = np.cos(half)
    q[..., 1:] = s[..., None] * b
    return q


def mul(a, b):
    """Quaternion product corresponding to the matrix product A @ B."""
    a0, av = a[..., 0], a[..., 1:]
    b0, bv = b[..., 0], b[..., 1:]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a0 * b0 - np.sum(av * bv, axis=-1)
    out[..., 1:] = a0[..., None] * bv + b0[..., None] * av + np.cross(av, bv)
    return out


def conj(q):
    """Inverse (Hermitian conjugate) of a unit quaternion."""
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] *= -1.0
    return out


def dot(a, b):
    """Re Tr(A^dagger B)/2, which is the full complex value for SU(2)."""
    return np.sum(a * b, axis=-1)


def axis_angle(q):
    """Rotation axis (unit vector) and angle in [0, 2pi] of q."""
    q = np.asarray(q, dtype=float)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    safe = np.where(s > 0, s, 1.0)
    axis = np.where((s > 0)[..., None], v / safe[..., None], np.array([0.0, 0.0, 1.0]))
    return axis, angle


def power(q, m):
    """q**m for integer m >= 0, computed in closed form."""
    axis, angle = axis_angle(q)
    m = np.asarray(m)
    half = 0.5 * m * angle
    out = np.empty(np.broadcast_shapes(q.shape, np.shape(half) + (4,)))
    out[..., 0] = np.cos(half)
    out[..., 1:] = np.sin(half)[..., None] * axis
    return out


def rz(phi):
    """Rotation exp(-i phi sigma_z/2)."""
    phi = np.asarray(phi, dtype=float)
    out = np.zeros(phi.shape + (4,))
    out[..., 0] = np.cos(phi / 2)
    out[..., 3] = np.sin(phi / 2)
    return out


def rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)
    shape = np.broadcast_shapes(axis.shape[:-1], angle.shape)
    out = np.empty(shape + (4,))
    out[..., 0] = np.cos(angle / 2)
    out[..., 1:] = np.sin(angle / 2)[..., None] * axis
    return out


def to_matrix(q):
    """2x2 unitary from a quaternion."""
    q = np.asarray(q, dtype=float)
    eye = np.eye(2, dtype=complex)
    return q[..., 0, None, None] * eye - 1j * np.einsum("...k,kij->...ij", q[..., 1:], PAULI)


def from_matrix(u):
    """Project a 2x2 unitary onto SU(2) and return its quaternion.

    The global phase is removed so that det = 1; the remaining sign ambiguity
    is fixed by making the scalar part non-negative.
    """
    u = np.asarray(u, dtype=complex)
    det = np.linalg.det(u)
    u = u / np.sqrt(det)[..., None, None]
    q = np.empty(u.shape[:-2] + (4,))
    q[..., 0] = 0.5 * np.real(u[..., 0, 0] + u[..., 1, 1])
    q[..., 1] = -0.5 * np.imag(u[..., 0, 1] + u[..., 1, 0])
    q[..., 2] = 0.5 * np.real(u[..., 1, 0] - u[..., 0, 1])
    q[..., 3] = -0.5 * np.imag(u[..., 0, 0] - u[..., 1, 1])
    sign = np.where(q[..., 0] < 0, -1.0, 1.0)
    return q * sign[..., None]
