"""Conditional nuclear evolution under dynamical decoupling.

The electron is confined to {|0>, |-1>}. A branch of the electron
superposition that starts in ms = 0 sees the ms = 0 nuclear field, then the
ms = -1 field after the first pi pulse, and so on. Because the secular
Hamiltonian has no inter-nuclear terms, each nucleus evolves independently
on each branch and the electron coherence is the product of single-spin
overlaps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import expm

from . import _su2
from .parallel import concat, map_chunks
from .spin_model import SystemConfig, field_vector, manifold_fields
from .units import TWO_PI, phase

XY8_PATTERN = (0.0, 0.5 * np.pi, 0.0, 0.5 * np.pi, 0.5 * np.pi, 0.0, 0.5 * np.pi, 0.0)
_CHUNK = 2048


class PhasePattern(str, enum.Enum):
    XY8 = "XY8"
    FIXED_X = "X"


class PulseModel(str, enum.Enum):
    INSTANTANEOUS = "instantaneous"
    FINITE = "finite"


@dataclass(frozen=True)
class PulseSequence:
    """(tau - pi - tau) repeated ``n_pulses`` times; times in ns.

    With ``pulse_width > 0`` each pi pulse lasts ``pulse_width``; the nuclei
    keep evolving during the pulse and the electron is taken to flip at the
    pulse midpoint.
    """

    n_pulses: int
    tau: float
    phase_pattern: PhasePattern = PhasePattern.XY8
    pulse_width: float = 0.0

    def __post_init__(self) -> None:
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 0:
            raise ValueError("n_pulses must be a non-negative integer")
        object.__setattr__(self, "n_pulses", int(self.n_pulses))
        object.__setattr__(self, "phase_pattern", PhasePattern(self.phase_pattern))
        if self.n_pulses > 0 and not self.tau > 0:
            raise ValueError("tau must be positive when n_pulses > 0")
        if self.pulse_width < 0:
            raise ValueError("pulse_width must be non-negative")

    @property
    def pulse_model(self) -> PulseModel:
        return PulseModel.FINITE if self.pulse_width > 0 else PulseModel.INSTANTANEOUS

    @property
    def duration(self) -> float:
        """Total duration in ns."""
        return self.n_pulses * (2.0 * self.tau + self.pulse_width)

    @property
    def half_interval(self) -> float:
        """Free evolution on each side of a flip, including half a pulse."""
        return self.tau + 0.5 * self.pulse_width

    def pulse_phases(self) -> np.ndarray:
        if self.phase_pattern is PhasePattern.FIXED_X:
            return np.zeros(self.n_pulses)
        return np.resize(np.array(XY8_PATTERN), self.n_pulses)


@dataclass(frozen=True)
class ConditionalPropagators:
    """Nuclear propagators for the branch starting in |0> (w0) and in |-1> (w1)."""

    w0: np.ndarray
    w1: np.ndarray
    electron_flipped: bool = False

    def __post_init__(self) -> None:
        for name in ("w0", "w1"):
            w = np.asarray(getattr(self, name), dtype=complex)
            if np.max(np.abs(w.conj().T @ w - np.eye(2))) > 1e-12:
                raise ValueError(f"{name} is not unitary")
            object.__setattr__(self, name, w)

    @classmethod
    def from_quaternions(cls, q0, q1, electron_flipped: bool = False) -> "ConditionalPropagators":
        return cls(_su2.to_matrix(q0), _su2.to_matrix(q1), electron_flipped)

    @property
    def q0(self) -> np.ndarray:
        return _su2.from_matrix(self.w0)

    @property
    def q1(self) -> np.ndarray:
        return _su2.from_matrix(self.w1)


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic imperfections; times in ms, frequencies in kHz.

    ``nuclear_t2star`` is either one value or a mapping from spin label
    (e.g. ``"spin1"``) to a value, with ``"default"`` as fallback.
    ``quasistatic_detuning_sigma`` overrides the T2*-derived detuning width.
    """

    nuclear_t2star: float | Mapping[str, float] | None = 10.0
    electron_dd_t2: float | None = None
    quasistatic_detuning_sigma: float | None = None
    pi_pulse_error: float = 0.0
    readout_f_bright: float = 0.81
    readout_f_dark: float = 0.99
    shots: int = 1000

    def __post_init__(self) -> None:
        for name in ("pi_pulse_error", "readout_f_bright", "readout_f_dark"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        t2 = self.nuclear_t2star
        values = list(t2.values()) if isinstance(t2, Mapping) else ([] if t2 is None else [t2])
        if self.electron_dd_t2 is not None:
            values.append(self.electron_dd_t2)
        for v in values:
            if not v > 0:
                raise ValueError("coherence times must be positive")
        if self.quasistatic_detuning_sigma is not None and self.quasistatic_detuning_sigma < 0:
            raise ValueError("quasistatic_detuning_sigma must be non-negative")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")

    def t2star(self, label: str | None = None) -> float | None:
        t2 = self.nuclear_t2star
        if isinstance(t2, Mapping):
            if label is not None and label in t2:
                return t2[label]
            return t2.get("default")
        return t2

    def detuning_sigma(self, label: str | None = None) -> float:
        """Quasi-static detuning width (kHz) giving exp(-(t/T2*)^2) Ramsey decay."""
        if self.quasistatic_detuning_sigma is not None:
            return self.quasistatic_detuning_sigma
        t2 = self.t2star(label)
        if t2 is None:
            return 0.0
        return np.sqrt(2.0) / (TWO_PI * t2)


IDEAL_READOUT = NoiseModel(nuclear_t2star=None, readout_f_bright=1.0, readout_f_dark=1.0)


class Representation(str, enum.Enum):
    PRODUCT = "product"
    FULL = "full"


@dataclass
class QuantumState:
    """Density matrix of the electron 2-level manifold and a set of nuclei.

    In product form ``data`` is ``[rho_electron, rho_1, ..., rho_k]``; in full
    form it is a single dense matrix with the electron as the leading factor.
    """

    representation: Representation
    data: list[np.ndarray] | np.ndarray
    tol: float = field(default=1e-10, repr=False)

    def __post_init__(self) -> None:
        self.representation = Representation(self.representation)
        if self.representation is Representation.PRODUCT:
            self.data = [np.asarray(d, dtype=complex) for d in self.data]
            mats = self.data
        else:
            self.data = np.asarray(self.data, dtype=complex)
            mats = [self.data]
        for m in mats:
            if abs(np.trace(m) - 1.0) > self.tol:
                raise ValueError("density matrix trace must be 1")
            if np.max(np.abs(m - m.conj().T)) > self.tol:
                raise ValueError("density matrix must be Hermitian")
            if np.min(np.linalg.eigvalsh(m)) < -self.tol:
                raise ValueError("density matrix must be positive semidefinite")

    @classmethod
    def product(cls, *factors: np.ndarray) -> "QuantumState":
        return cls(Representation.PRODUCT, list(factors))

    @classmethod
    def full(cls, rho: np.ndarray) -> "QuantumState":
        return cls(Representation.FULL, rho)

    @property
    def n_nuclei(self) -> int:
        if self.representation is Representation.PRODUCT:
            return len(self.data) - 1
        return int(round(np.log2(self.data.shape[0]))) - 1

    def dense(self) -> np.ndarray:
        if self.representation is Representation.FULL:
            return self.data
        out = np.array([[1.0 + 0j]])
        for m in self.data:
            out = np.kron(out, m)
        return out


# ---------------------------------------------------------------------------
# Propagators
# ---------------------------------------------------------------------------


def nuclear_propagator(h: np.ndarray, t: float) -> np.ndarray:
    """exp(-i 2pi t h) for a 2x2 Hermitian h in kHz and t in ns (closed form)."""
    h = np.asarray(h, dtype=complex)
    offset = 0.5 * float(np.real(np.trace(h)))
    q = _su2.from_field(field_vector(h), t)
    return np.exp(-1j * phase(offset, t)) * _su2.to_matrix(q)


def _as_field(x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-2:] == (2, 2):
        return field_vector(x)
    return np.asarray(x, dtype=float)


def cpmg_quaternions(b0, b1, n_pulses: int, half_interval):
    """Branch propagators (q0, q1) for fields b0 (ms=0) and b1 (ms=-1).

    ``b0``/``b1`` have shape (..., 3) and broadcast against
    ``half_interval`` (ns, the free evolution on each side of a flip).
    """
    b0 = np.asarray(b0, float)
    b1 = np.asarray(b1, float)
    t = np.asarray(half_interval, float)
    a0 = _su2.from_field(b0, t)
    a1 = _su2.from_field(b1, t)
    shape = np.broadcast_shapes(a0.shape, a1.shape)
    a0, a1 = np.broadcast_to(a0, shape), np.broadcast_to(a1, shape)
    if n_pulses == 0:
        ident = np.broadcast_to(_su2.IDENTITY_Q, shape).copy()
        return ident, ident.copy()
    a00 = _su2.from_field(b0, 2 * t)
    a11 = _su2.from_field(b1, 2 * t)
    # time order is right to left
    pair0 = _su2.mul(a0, _su2.mul(a11, a0))
    pair1 = _su2.mul(a1, _su2.mul(a00, a1))
    m = n_pulses // 2
    q0 = _su2.power(pair0, m)
    q1 = _su2.power(pair1, m)
    if n_pulses % 2:
        q0 = _su2.mul(_su2.mul(a1, a0), q0)
        q1 = _su2.mul(_su2.mul(a0, a1), q1)
    return q0, q1


def cpmg_conditional_propagators(spin_fields, sequence: PulseSequence) -> ConditionalPropagators:
    """Conditional propagators for one nucleus.

    ``spin_fields`` is ``(h0, h1)``: the ms = 0 and ms = -1 nuclear
    Hamiltonians, each as a field 3-vector or a 2x2 matrix.
    """
    b0, b1 = (_as_field(x) for x in spin_fields)
    q0, q1 = cpmg_quaternions(b0, b1, sequence.n_pulses, sequence.half_interval)
    return ConditionalPropagators.from_quaternions(q0, q1, bool(sequence.n_pulses % 2))


def coherence_signal(cp: ConditionalPropagators) -> float:
    """M = Re Tr(W0 W1^dagger)/2 for a maximally mixed nucleus."""
    return float(np.real(np.trace(cp.w0 @ cp.w1.conj().T)) / 2.0)


def coherence_products(b0s, b1s, n_pulses: int, half_intervals) -> np.ndarray:
    """Product over spins of single-spin coherences on a grid of half intervals.

    ``b0s``/``b1s`` have shape (n_spins, 3); returns shape of ``half_intervals``.
    """
    b0s = np.asarray(b0s, float).reshape(-1, 3)
    b1s = np.asarray(b1s, float).reshape(-1, 3)
    t = np.atleast_1d(np.asarray(half_intervals, float))
    if b0s.shape[0] == 0 or n_pulses == 0:
        return np.ones(t.shape)
    flat = t.ravel()

    def chunk(s: slice) -> np.ndarray:
        tt = flat[s][:, None]
        q0, q1 = cpmg_quaternions(b0s[None, :, :], b1s[None, :, :], n_pulses, tt)
        return np.prod(_su2.dot(q0, q1), axis=1)

    out = concat(map_chunks(chunk, flat.size, max(1, _CHUNK * 16 // b0s.shape[0])))
    return out.reshape(t.shape)


def branch_fields(config: SystemConfig, model: str = "secular") -> tuple[np.ndarray, np.ndarray]:
    """(ms=0 fields, ms=-1 fields) for every spin of a config."""
    mf = manifold_fields(config, model)
    return mf[0], mf[-1]


def multi_spin_coherence(
    config: SystemConfig, sequence: PulseSequence, model: str = "secular"
) -> float:
    """Electron coherence M_total = prod_i M_i over resolved and bath spins."""
    b0, b1 = branch_fields(config, model)
    return float(coherence_products(b0, b1, sequence.n_pulses, sequence.half_interval)[0])


def coherence_curve(
    config: SystemConfig,
    n_pulses: int,
    taus,
    pulse_width: float = 0.0,
    model: str = "secular",
) -> np.ndarray:
    """M_total over a grid of tau values (ns)."""
    b0, b1 = branch_fields(config, model)
    return coherence_products(b0, b1, n_pulses, np.asarray(taus, float) + 0.5 * pulse_width)


def coherence_with_pulse_errors(
    b0s,
    b1s,
    sequence: PulseSequence,
    taus,
    p_error: float,
    rng: np.random.Generator,
    n_patterns: int = 64,
) -> np.ndarray:
    """Coherence averaged over random flip-failure patterns.

    Each pulse independently fails (acts as identity) with probability
    ``p_error``; one failure pattern is shared by all spins within a
    realisation. Pulse phases enter through the relative branch phase: a
    successful pulse about the y axis contributes a factor -1, so an ideal
    XY-8 block is equivalent to CPMG.
    """
    b0s = np.asarray(b0s, float).reshape(-1, 3)
    b1s = np.asarray(b1s, float).reshape(-1, 3)
    taus = np.asarray(taus, float)
    n = sequence.n_pulses
    fails = rng.random((n_patterns, n)) < p_error
    phases = sequence.pulse_phases()
    th = taus + 0.5 * sequence.pulse_width  # (T,)
    if n == 0:
        return np.ones(taus.shape)
    fields = np.stack([b0s, b1s])  # (2, S, 3)
    half = _su2.from_field(fields[:, None, :, :], th[None, :, None])  # (2, T, S, 4)
    full = _su2.from_field(fields[:, None, :, :], 2 * th[None, :, None])
    out = np.zeros(taus.shape)
    for k in range(n_patterns):
        state_a = 0  # electron state of the branch that started in |0>
        qa = np.broadcast_to(_su2.IDENTITY_Q, half.shape[1:]).copy()
        qb = qa.copy()
        sign = 1.0
        for j in range(n):
            seg_a = half[state_a] if j == 0 else full[state_a]
            seg_b = half[1 - state_a] if j == 0 else full[1 - state_a]
            qa = _su2.mul(seg_a, qa)
            qb = _su2.mul(seg_b, qb)
            if not fails[k, j]:
                state_a = 1 - state_a
                if np.isclose(np.cos(phases[j]), 0.0):
                    sign = -sign
        qa = _su2.mul(half[state_a], qa)
        qb = _su2.mul(half[1 - state_a], qb)
        out += sign * np.prod(_su2.dot(qa, qb), axis=-1)
    return out / n_patterns


# ---------------------------------------------------------------------------
# Full-tensor reference simulation
# ---------------------------------------------------------------------------


def _embed(op: np.ndarray, i: int, k: int) -> np.ndarray:
    out = np.array([[1.0 + 0j]])
    for j in range(k):
        out = np.kron(out, op if j == i else np.eye(2))
    return out


def _nuclear_block(fields: np.ndarray) -> np.ndarray:
    k = fields.shape[0]
    h = np.zeros((2**k, 2**k), dtype=complex)
    for i, b in enumerate(fields):
        for axis in range(3):
            h += 0.5 * b[axis] * _embed(_su2.PAULI[axis], i, k)
    return h


def full_tensor_state_evolution(
    b0s, b1s, sequence: PulseSequence, rho0: np.ndarray
) -> np.ndarray:
    """Evolve a dense electron (x) nuclei density matrix through a CPMG train.

    Ideal pi pulses about x or y follow the sequence phase pattern.
    """
    b0s = np.asarray(b0s, float).reshape(-1, 3)
    b1s = np.asarray(b1s, float).reshape(-1, 3)
    k = b0s.shape[0]
    dim = 2**k
    h0, h1 = _nuclear_block(b0s), _nuclear_block(b1s)
    h = np.zeros((2 * dim, 2 * dim), dtype=complex)
    h[:dim, :dim] = h0
    h[dim:, dim:] = h1

    def prop(t_ns: float) -> np.ndarray:
        return expm(-1j * phase(1.0, t_ns) * h)

    u_half = prop(sequence.half_interval)
    u_full = prop(2 * sequence.half_interval)
    rho = np.asarray(rho0, dtype=complex)
    phases = sequence.pulse_phases()
    for j in range(sequence.n_pulses):
        u = u_half if j == 0 else u_full
        rho = u @ rho @ u.conj().T
        c, s = np.cos(phases[j]), np.sin(phases[j])
        pulse = np.kron(np.array([[0, c - 1j * s], [c + 1j * s, 0]]), np.eye(dim))
        rho = pulse @ rho @ pulse.conj().T
    if sequence.n_pulses:
        rho = u_half @ rho @ u_half.conj().T
    return rho


def full_tensor_coherence(
    b0s, b1s, sequence: PulseSequence, cap: int = 6
) -> float:
    """Electron coherence <sigma_x> from a dense simulation of electron (x) k nuclei.

    The electron starts in (|0> + |-1>)/sqrt(2) and the nuclei maximally mixed.
    """
    b0s = np.asarray(b0s, float).reshape(-1, 3)
    k = b0s.shape[0]
    if k > cap:
        raise ValueError(f"full-tensor simulation of {k} nuclei exceeds the cap of {cap}")
    dim = 2**k
    plus = np.full((2, 2), 0.5, dtype=complex)
    rho0 = np.kron(plus, np.eye(dim) / dim)
    rho = full_tensor_state_evolution(b0s, b1s, sequence, rho0)
    rho_e = np.einsum("aibi->ab", rho.reshape(2, dim, 2, dim))
    return float(2.0 * np.real(rho_e[0, 1]))


# ---------------------------------------------------------------------------
# Readout and shot noise
# ---------------------------------------------------------------------------


def apply_readout_model(p_true, noise: NoiseModel):
    """Probability of a bright outcome given the true |0> population."""
    p = np.asarray(p_true, dtype=float)
    out = p * noise.readout_f_bright + (1.0 - p) * (1.0 - noise.readout_f_dark)
    return float(out) if out.ndim == 0 else out


def invert_readout(p_observed, noise: NoiseModel):
    """Inverse of :func:`apply_readout_model` (not clipped)."""
    p = np.asarray(p_observed, dtype=float)
    span = noise.readout_f_bright + noise.readout_f_dark - 1.0
    if span <= 0:
        raise ValueError("readout carries no information (F_b + F_d <= 1)")
    out = (p - (1.0 - noise.readout_f_dark)) / span
    return float(out) if out.ndim == 0 else out


def rng_stream(seed: int | None, index: int = 0) -> np.random.Generator:
    """Independent generator for stream ``index`` of a run seeded with ``seed``."""
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_shots(p, shots: int, seed=None):
    """Binomial estimate of a probability and its standard error."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = _as_rng(seed)
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    p_hat = rng.binomial(shots, p) / shots
    stderr = np.sqrt(p_hat * (1.0 - p_hat) / shots)
    if np.ndim(p_hat) == 0:
        return float(p_hat), float(stderr)
    return p_hat, stderr


def survival_probability(m):
    """|0> population after the closing pi/2 pulse, (1 + M)/2."""
    return 0.5 * (1.0 + np.asarray(m, dtype=float))


def dd_decay(duration_ns, noise: NoiseModel | None):
    """Electron coherence envelope exp(-T/T2) under decoupling (1 if unset)."""
    if noise is None or noise.electron_dd_t2 is None:
        return np.ones(np.shape(duration_ns))
    return np.exp(-np.asarray(duration_ns, float) * 1e-6 / noise.electron_dd_t2)
