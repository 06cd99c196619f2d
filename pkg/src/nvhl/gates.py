"""Nuclear gates from dynamical decoupling, crosstalk and decay benchmarks.

Fidelity conventions
--------------------
For a sequence with branch propagators (W0, W1) and target pair (V0, V1)
let g_j = Re Tr(V_j^dagger W_j) / 2. The relative electron phase between
branches is free, and so is the orientation of the target's x axis
(conjugation by a common R_z(phi)); the reported fidelity is the average
gate fidelity ((|g0| + |g1|)^2 + 1) / 5 maximised over phi.

A bystander is scored by f = max_phi (|Tr R_z(phi) W0| + |Tr R_z(phi) W1|) / 4,
i.e. it only has to act as the identity up to one tracked Z frame; the
crosstalk is 1 - f.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import _su2
from .dynamics import (
    PulseSequence,
    QuantumState,
    branch_fields,
    cpmg_quaternions,
)
from .spin_model import DEFAULT_BATH_BOUND_KHZ, HyperfineTensor, SystemConfig

SEQUENCE_BUDGET_NS = 32e6


class GateKind(str, enum.Enum):
    NUCLEAR_X_HALF_PI = "nuclear_x_half_pi"
    NUCLEAR_Z_HALF_PI = "nuclear_z_half_pi"
    NUCLEAR_Z_QUARTER_PI = "nuclear_z_quarter_pi"
    CONTROLLED_X_HALF_PI = "controlled_x_half_pi"
    ELECTRON_SINGLE_QUBIT = "electron_single_qubit"


#: Per-branch rotation magnitude of the entangling gate: the ms = 0 branch
#: rotates by +angle and the ms = -1 branch by -angle about x.
CX_BRANCH_ANGLE = 0.25 * math.pi

_Z_ANGLES = {GateKind.NUCLEAR_Z_HALF_PI: 0.5 * math.pi, GateKind.NUCLEAR_Z_QUARTER_PI: 0.25 * math.pi}
_X = np.array([1.0, 0.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])


def target_rotations(kind: GateKind | str, cx_branch_angle: float = CX_BRANCH_ANGLE) -> tuple[np.ndarray, np.ndarray]:
    """Ideal (V0, V1) quaternions for the two electron branches."""
    kind = GateKind(kind)
    if kind is GateKind.NUCLEAR_X_HALF_PI:
        v = _su2.rotation(_X, 0.5 * math.pi)
        return v, v.copy()
    if kind in _Z_ANGLES:
        v = _su2.rotation(_Z, _Z_ANGLES[kind])
        return v, v.copy()
    if kind is GateKind.CONTROLLED_X_HALF_PI:
        return _su2.rotation(_X, cx_branch_angle), _su2.rotation(_X, -cx_branch_angle)
    raise ValueError(f"{kind.value} has no nuclear target")


def identity_period(kind: GateKind | str, cx_branch_angle: float = CX_BRANCH_ANGLE) -> int:
    """Number of applications whose ideal product is the identity (up to phase)."""
    kind = GateKind(kind)
    if kind is GateKind.NUCLEAR_X_HALF_PI or kind is GateKind.NUCLEAR_Z_HALF_PI:
        return 4
    if kind is GateKind.NUCLEAR_Z_QUARTER_PI:
        return 8
    if kind is GateKind.CONTROLLED_X_HALF_PI:
        r = 2.0 * math.pi / cx_branch_angle
        if abs(r - round(r)) > 1e-9:
            raise ValueError("entangling-gate branch angle must divide 2 pi")
        return int(round(r))
    raise ValueError(f"{kind.value} has no identity period")


@dataclass(frozen=True)
class GateSpec:
    kind: GateKind
    target_spin: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", GateKind(self.kind))
        if self.kind is not GateKind.ELECTRON_SINGLE_QUBIT and self.target_spin is None:
            raise ValueError(f"{self.kind.value} needs a target spin")


@dataclass(frozen=True)
class RotationDescriptor:
    axis: tuple[float, float, float]
    angle: float

    @classmethod
    def from_quaternion(cls, q: np.ndarray) -> "RotationDescriptor":
        q = np.asarray(q, float)
        if q[0] < 0:
            q = -q
        axis, angle = _su2.axis_angle(q)
        return cls(tuple(float(a) for a in axis), float(angle))


@dataclass(frozen=True)
class Crosstalk:
    label: str
    fidelity: float
    angle: float

    @property
    def crosstalk(self) -> float:
        return 1.0 - self.fidelity


@dataclass
class GateReport:
    spec: GateSpec
    sequence: PulseSequence
    target_fidelity: float
    frame_phi: float
    rotations: dict[int, RotationDescriptor]
    w0: np.ndarray
    w1: np.ndarray
    crosstalk: list[Crosstalk]
    relative_angle: float
    axis_dot: float
    flags: list[str] = field(default_factory=list)
    software_z: float = 0.0

    @property
    def duration(self) -> float:
        return self.sequence.duration

    @property
    def target_infidelity(self) -> float:
        return 1.0 - self.target_fidelity

    @property
    def max_crosstalk(self) -> float:
        return max((c.crosstalk for c in self.crosstalk), default=0.0)

    @property
    def mean_crosstalk(self) -> float:
        return float(np.mean([c.crosstalk for c in self.crosstalk])) if self.crosstalk else 0.0

    def corrected_propagators(self) -> tuple[np.ndarray, np.ndarray]:
        """Target (W0, W1) in the optimal x-axis frame, branch signs aligned to the target."""
        r = _su2.rz(self.frame_phi)
        w0 = _su2.mul(r, _su2.mul(self.w0, _su2.conj(r)))
        w1 = _su2.mul(r, _su2.mul(self.w1, _su2.conj(r)))
        if self.software_z:
            z = _su2.rz(self.software_z)
            w0, w1 = _su2.mul(z, w0), _su2.mul(z, w1)
        if self.spec.kind is not GateKind.ELECTRON_SINGLE_QUBIT:
            v0, v1 = target_rotations(self.spec.kind)
            w0 = w0 * (1.0 if _su2.dot(v0, w0) >= 0 else -1.0)
            w1 = w1 * (1.0 if _su2.dot(v1, w1) >= 0 else -1.0)
        return w0, w1

    def to_dict(self) -> dict:
        return {
            "kind": self.spec.kind.value,
            "target_spin": self.spec.target_spin,
            "n_pulses": self.sequence.n_pulses,
            "tau_ns": self.sequence.tau,
            "pulse_width_ns": self.sequence.pulse_width,
            "duration_ns": self.duration,
            "target_fidelity": self.target_fidelity,
            "target_infidelity": self.target_infidelity,
            "frame_phi_rad": self.frame_phi,
            "software_z_rad": self.software_z,
            "relative_angle_rad": self.relative_angle,
            "axis_dot": self.axis_dot,
            "rotations": {
                str(ms): {"axis": list(r.axis), "angle_rad": r.angle} for ms, r in sorted(self.rotations.items())
            },
            "crosstalk": [
                {"spin": c.label, "fidelity": c.fidelity, "crosstalk": c.crosstalk, "angle_rad": c.angle}
                for c in self.crosstalk
            ],
            "max_crosstalk": self.max_crosstalk,
            "mean_crosstalk": self.mean_crosstalk,
            "flags": list(self.flags),
        }


class NoFeasibleSequenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Frame maximisation
# ---------------------------------------------------------------------------


def _max_abs_sum(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """max_x sum_j |a_j + b_j cos x + c_j sin x| over the last axis (two terms).

    The function is a sinusoid on every interval where the signs of the
    terms are fixed, so its maximum is at a stationary point of one of the
    combinations g0 +/- g1 or at a zero of one term. All those points are
    evaluated. Returns (maximum, argmax).
    """
    a, b, c = np.broadcast_arrays(a, b, c)
    cands = []
    for s in (1.0, -1.0):
        bb = b[..., 0] + s * b[..., 1]
        cc = c[..., 0] + s * c[..., 1]
        psi = np.arctan2(cc, bb)
        cands += [psi, psi + np.pi]
    for j in range(2):
        r = np.hypot(b[..., j], c[..., j])
        psi = np.arctan2(c[..., j], b[..., j])
        with np.errstate(over="ignore"):  # subnormal r saturates the clip
            ratio = np.clip(-a[..., j] / np.where(r > 0, r, 1.0), -1.0, 1.0)
        d = np.arccos(ratio)
        cands += [psi + d, psi - d]
    x = np.stack(cands, axis=-1)  # (..., K)
    val = np.abs(a[..., 0, None] + b[..., 0, None] * np.cos(x) + c[..., 0, None] * np.sin(x)) + np.abs(
        a[..., 1, None] + b[..., 1, None] * np.cos(x) + c[..., 1, None] * np.sin(x)
    )
    i = np.argmax(val, axis=-1)
    best = np.take_along_axis(val, i[..., None], -1)[..., 0]
    arg = np.take_along_axis(x, i[..., None], -1)[..., 0]
    return best, np.mod(arg, 2 * np.pi)


def target_overlap(v0, v1, w0, w1) -> tuple[np.ndarray, np.ndarray]:
    """max over the x-axis frame of |g0| + |g1|, and the optimal frame angle."""
    v = np.stack(np.broadcast_arrays(v0, v1), axis=-2)  # (..., 2, 4)
    w = np.stack(np.broadcast_arrays(w0, w1), axis=-2)
    v, w = np.broadcast_arrays(v, w)
    a = v[..., 0] * w[..., 0] + v[..., 3] * w[..., 3]
    b = v[..., 1] * w[..., 1] + v[..., 2] * w[..., 2]
    c = v[..., 2] * w[..., 1] - v[..., 1] * w[..., 2]
    return _max_abs_sum(a, b, c)


def average_gate_fidelity(overlap_sum) -> np.ndarray:
    """((|g0| + |g1|)^2 + 1) / 5."""
    return (np.asarray(overlap_sum) ** 2 + 1.0) / 5.0


def bystander_fidelity(w0, w1) -> tuple[np.ndarray, np.ndarray]:
    """Frame-corrected closeness to identity, averaged over branches, and the frame angle."""
    w = np.stack(np.broadcast_arrays(w0, w1), axis=-2)
    zero = np.zeros(w.shape[:-1])
    best, x = _max_abs_sum(zero, w[..., 0], -w[..., 3])
    return 0.5 * best, 2.0 * x


# ---------------------------------------------------------------------------
# Sequence evaluation
# ---------------------------------------------------------------------------


def _spin_index(config: SystemConfig, target_spin: int) -> int:
    ids = [s.id for s in config.resolved_spins]
    if target_spin not in ids:
        raise KeyError(f"no resolved spin with id {target_spin}")
    return ids.index(target_spin)


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


def evaluate_sequence(
    sequence: PulseSequence,
    config: SystemConfig,
    target_spin: int,
    kind: GateKind | str = GateKind.CONTROLLED_X_HALF_PI,
    model: str = "secular",
) -> GateReport:
    """Propagate every spin through ``sequence`` and score it as a gate on ``target_spin``."""
    kind = GateKind(kind)
    b0, b1 = branch_fields(config, model)
    idx = _spin_index(config, target_spin)
    q0, q1 = cpmg_quaternions(b0, b1, sequence.n_pulses, sequence.half_interval)
    v0, v1 = target_rotations(kind)
    s, phi = target_overlap(v0, v1, q0[idx], q1[idx])
    labels = config.labels()
    cross = []
    for j, label in enumerate(labels):
        if j == idx:
            continue
        fid, _ = bystander_fidelity(q0[j], q1[j])
        fid = float(min(1.0, fid))
        cross.append(Crosstalk(label, fid, float(2.0 * math.acos(min(1.0, fid)))))
    rot = {0: RotationDescriptor.from_quaternion(q0[idx]), -1: RotationDescriptor.from_quaternion(q1[idx])}
    rel = RotationDescriptor.from_quaternion(_su2.mul(_su2.conj(q1[idx]), q0[idx]))
    flags = []
    if sequence.n_pulses % 2:
        flags.append("odd pulse count: electron ends flipped")
    return GateReport(
        spec=GateSpec(kind, target_spin),
        sequence=sequence,
        target_fidelity=float(min(1.0, average_gate_fidelity(s))),
        frame_phi=float(phi),
        rotations=rot,
        w0=q0[idx].copy(),
        w1=q1[idx].copy(),
        crosstalk=cross,
        relative_angle=rel.angle,
        axis_dot=float(np.dot(rot[0].axis, rot[-1].axis)),
        flags=flags,
    )


def antiparallel_error(report: GateReport) -> float:
    """Angle (rad) between the ms = 0 axis and the reversed ms = -1 axis."""
    return _angle_between(np.array(report.rotations[0].axis), -np.array(report.rotations[-1].axis))


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateSearch:
    """Search box and cost weights for :func:`optimize_gate`."""

    n_range: tuple[int, int] = (2, 40)
    tau_range: tuple[float, float] = (100.0, 2000.0)
    tau_step: float = 2.0
    lam: float = 1.0
    mu: float = 0.1
    cost_ceiling: float = 0.25
    near_tol: float = 1e-4
    even_only: bool = True

    def __post_init__(self) -> None:
        lo, hi = self.n_range
        if hi < lo or hi < 1:
            raise ValueError("empty pulse-number range")
        if not 0 < self.tau_range[0] <= self.tau_range[1]:
            raise ValueError("empty tau range")
        if self.tau_step <= 0:
            raise ValueError("tau_step must be positive")

    def pulse_counts(self) -> np.ndarray:
        lo, hi = self.n_range
        ns = np.arange(max(lo, 1), hi + 1)
        if self.even_only:
            ns = ns[ns % 2 == 0]
        if ns.size == 0:
            raise ValueError("no admissible pulse counts in range")
        return ns

    def taus(self) -> np.ndarray:
        lo, hi = self.tau_range
        return lo + self.tau_step * np.arange(int(math.floor((hi - lo) / self.tau_step + 1e-9)) + 1)

    @property
    def duration_scale(self) -> float:
        return 2.0 * self.tau_range[1] * self.n_range[1]


def _costs(b0, b1, idx, v0, v1, n, taus, search: GateSearch):
    """Cost, infidelity and mean crosstalk for one pulse count over a tau grid."""
    q0, q1 = cpmg_quaternions(b0[None, :, :], b1[None, :, :], int(n), taus[:, None])
    s, _ = target_overlap(v0, v1, q0[:, idx], q1[:, idx])
    infid = 1.0 - average_gate_fidelity(s)
    others = [j for j in range(b0.shape[0]) if j != idx]
    if others:
        fid, _ = bystander_fidelity(q0[:, others], q1[:, others])
        xt = np.mean(1.0 - fid, axis=1)
    else:
        xt = np.zeros_like(infid)
    duration = 2.0 * taus * n
    cost = infid + search.lam * xt + search.mu * duration / search.duration_scale
    return cost, infid, xt


def optimize_gate(
    spec: GateSpec,
    config: SystemConfig,
    search: GateSearch = GateSearch(),
    model: str = "secular",
) -> GateReport:
    """Grid search over (N, tau) followed by golden-section refinement of tau.

    cost = (1 - F_target) + lam * mean bystander crosstalk + mu * duration / scale,
    with scale = 2 tau_max N_max. Among grid points within ``near_tol`` of
    the best cost the shortest sequence wins.
    """
    if spec.kind in _Z_ANGLES:
        return realize_z_rotation(spec, config, model=model)
    if spec.kind is GateKind.ELECTRON_SINGLE_QUBIT:
        raise ValueError("electron gates are ideal and need no sequence design")
    b0, b1 = branch_fields(config, model)
    idx = _spin_index(config, spec.target_spin)
    v0, v1 = target_rotations(spec.kind)
    taus = search.taus()
    rows = []
    for n in search.pulse_counts():
        cost, _, _ = _costs(b0, b1, idx, v0, v1, n, taus, search)
        rows.append(cost)
    grid = np.array(rows)  # (n_counts, n_taus)
    ns = search.pulse_counts()
    best = float(grid.min())
    ii, jj = np.nonzero(grid <= best + search.near_tol)
    dur = 2.0 * taus[jj] * ns[ii]
    k = int(np.argmin(dur))
    n_best, tau_best = int(ns[ii[k]]), float(taus[jj[k]])
    grid_cost = float(grid[ii[k], jj[k]])

    def f(t: float) -> float:
        return float(_costs(b0, b1, idx, v0, v1, n_best, np.array([t]), search)[0][0])

    lo = max(search.tau_range[0], tau_best - search.tau_step)
    hi = min(search.tau_range[1], tau_best + search.tau_step)
    if hi > lo:
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
        if res.fun < grid_cost:
            tau_best = float(res.x)
    if min(grid_cost, f(tau_best)) > search.cost_ceiling:
        raise NoFeasibleSequenceError(
            f"best cost {grid_cost:.3g} for {spec.kind.value} on spin {spec.target_spin} exceeds the ceiling "
            f"{search.cost_ceiling:g}"
        )
    return evaluate_sequence(PulseSequence(n_best, tau_best), config, spec.target_spin, spec.kind, model)


def z_angle(q: np.ndarray) -> np.ndarray:
    """Angle of the z-rotation component of q, in (-2 pi, 2 pi]."""
    q = np.asarray(q, float)
    return 2.0 * np.arctan2(q[..., 3], q[..., 0])


def realize_z_rotation(
    spec: GateSpec,
    config: SystemConfig,
    n_pulses: int = 4,
    tau_range: tuple[float, float] = (1.0, 2000.0),
    scan_step: float = 0.25,
    model: str = "secular",
    angle: float | None = None,
) -> GateReport:
    """Z rotation of the target from a short decoupling block.

    The z-rotation angle accumulated by the target (averaged over the two
    branches) is scanned against tau, and the first crossing of the
    requested angle is solved with a bracketing root finder. If no crossing
    exists the gate falls back to a zero-duration software frame update.
    """
    kind = GateKind(spec.kind)
    target = _Z_ANGLES.get(kind) if angle is None else float(angle)
    if target is None:
        raise ValueError("realize_z_rotation needs a Z gate")
    if abs(target) < 1e-12:
        rep = evaluate_sequence(PulseSequence(0, 1.0), config, spec.target_spin, kind, model)
        rep.flags.append("degenerate: zero angle, zero duration")
        return rep
    b0, b1 = branch_fields(config, model)
    idx = _spin_index(config, spec.target_spin)

    def branch_phases(t):
        q0, q1 = cpmg_quaternions(b0[idx], b1[idx], n_pulses, np.asarray(t, float))
        return np.stack([z_angle(q0), z_angle(q1)], axis=-1)

    grid = np.arange(tau_range[0], tau_range[1] + 1e-9, scan_step)
    ref = np.unwrap(branch_phases(grid), axis=0)  # each branch unwrapped separately
    phi = ref.mean(axis=1)
    # take the target modulo 2 pi in the direction the phase winds
    sense = 1.0 if phi[-1] >= phi[0] else -1.0
    goal = target % (2 * np.pi) if sense > 0 else -((-target) % (2 * np.pi))
    g = phi - goal
    cross = np.flatnonzero(np.sign(g[:-1]) != np.sign(g[1:]))
    if cross.size == 0:
        rep = evaluate_sequence(PulseSequence(0, 1.0), config, spec.target_spin, kind, model)
        rep.flags.append("software-frame Z: no decoupling solution in range")
        rep.software_z = target
        rep.target_fidelity = 1.0
        return rep
    i = int(cross[0])

    def h(t: float) -> float:
        # continue each branch from the bracket's left end
        val = branch_phases(np.array([t]))[0]
        cont = np.angle(np.exp(1j * (val - ref[i]))) + ref[i]
        return float(cont.mean() - goal)

    tau = brentq(h, grid[i], grid[i + 1], xtol=1e-12)
    return evaluate_sequence(PulseSequence(n_pulses, float(tau)), config, spec.target_spin, kind, model)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class DecayFit:
    f_init: float
    f_gate: float
    residual: float
    m_values: list[int]
    fidelities: list[float]
    nonlinear: bool = False
    per_prep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "f_init": self.f_init,
            "f_gate": self.f_gate,
            "fit_residual_rms": self.residual,
            "m_values": list(self.m_values),
            "fidelities": list(self.fidelities),
            "nonlinear": self.nonlinear,
            "per_prep": {k: {"m_values": list(v[0]), "fidelities": list(v[1])} for k, v in self.per_prep.items()},
        }


_ELECTRON_BLOCH = {"0": (0.0, 0.0, 1.0), "1": (0.0, 0.0, -1.0), "-1": (0.0, 0.0, -1.0), "+": (1.0, 0.0, 0.0)}
_NUCLEAR_BLOCH = {"up": (0.0, 0.0, 1.0), "down": (0.0, 0.0, -1.0)}
_PAULI = _su2.PAULI
_I2 = np.eye(2)


def _reduce(rho: np.ndarray, n_nuclei: int, keep: int) -> np.ndarray:
    """Electron (x) nucleus ``keep`` reduced state of electron (x) n nuclei."""
    dims = [2] * (n_nuclei + 1)
    t = rho.reshape(dims + dims)
    axes_keep = [0, keep + 1]
    n = n_nuclei + 1
    letters = "abcdefghijklmnopqrstuvwxyz"
    row = list(letters[:n])
    col = list(letters[n: 2 * n])
    for ax in range(n):
        if ax not in axes_keep:
            col[ax] = row[ax]
    out = "".join(row[a] for a in axes_keep) + "".join(col[a] for a in axes_keep)
    return np.einsum("".join(row) + "".join(col) + "->" + out, t).reshape(4, 4)


def joint_state_fidelity(
    state: QuantumState | np.ndarray,
    ideal: tuple[str, str] = ("0", "up"),
    target_index: int = 0,
) -> float:
    """Overlap with a product ideal state from two-qubit Pauli expectations.

    F = (1 + a.<s x I> + b.<I x s> + sum_ij a_i b_j <s_i s_j>) / 4 with a, b
    the Bloch vectors of the ideal electron and nuclear states; for |0 up>
    this is (<ZI> + <IZ> + <ZZ> + 1) / 4.
    """
    if isinstance(state, QuantumState):
        rho = state.dense()
        k = state.n_nuclei
    else:
        rho = np.asarray(state, complex)
        k = int(round(math.log2(rho.shape[0]))) - 1
    if k != 1:
        rho = _reduce(rho, k, target_index)
    a = np.array(_ELECTRON_BLOCH[ideal[0]])
    b = np.array(_NUCLEAR_BLOCH[ideal[1]])
    f = 1.0
    for i in range(3):
        f += a[i] * np.real(np.trace(rho @ np.kron(_PAULI[i], _I2)))
        f += b[i] * np.real(np.trace(rho @ np.kron(_I2, _PAULI[i])))
        for j in range(3):
            if a[i] and b[j]:
                f += a[i] * b[j] * np.real(np.trace(rho @ np.kron(_PAULI[i], _PAULI[j])))
    return float(f / 4.0)


def ideal_gate_report(spec: GateSpec, duration_ns: float = 1000.0) -> GateReport:
    """A report whose target propagators equal the ideal gate exactly."""
    v0, v1 = target_rotations(spec.kind)
    n = 2
    seq = PulseSequence(n, duration_ns / (2 * n))
    return GateReport(
        spec=spec,
        sequence=seq,
        target_fidelity=1.0,
        frame_phi=0.0,
        rotations={0: RotationDescriptor.from_quaternion(v0), -1: RotationDescriptor.from_quaternion(v1)},
        w0=v0,
        w1=v1,
        crosstalk=[],
        relative_angle=RotationDescriptor.from_quaternion(_su2.mul(_su2.conj(v1), v0)).angle,
        axis_dot=1.0,
        flags=["ideal"],
    )


def _depolarize_nucleus(rho: np.ndarray, p: float) -> np.ndarray:
    """(1 - p) rho + p rho_e (x) I/2 on the nuclear factor of a 4x4 state."""
    if p == 0:
        return rho
    t = rho.reshape(2, 2, 2, 2)
    rho_e = np.einsum("aibi->ab", t)
    return (1.0 - p) * rho + p * np.kron(rho_e, _I2 / 2.0)


def _density(prep: str, f_init: float) -> np.ndarray:
    a = np.array(_ELECTRON_BLOCH[prep])
    rho_e = 0.5 * (np.eye(2) + np.einsum("i,ijk->jk", a, _PAULI))
    rho_n = np.diag([f_init, 1.0 - f_init]).astype(complex)
    return np.kron(rho_e, rho_n)


def _evolve(prep, f_init, w0m, w1m, p, m_values, flipped, bystander):
    """State fidelities after M applications for one electron preparation."""
    u0 = _su2.to_matrix(w0m)
    u1 = _su2.to_matrix(w1m)
    flip = np.kron(np.array([[0, 1], [1, 0]]), _I2)
    u = np.zeros((4, 4), complex)
    u[:2, :2] = u0
    u[2:, 2:] = u1
    if flipped:
        u = flip @ u
    rho = _density(prep, f_init)
    out = []
    m_done = 0
    for m in m_values:
        while m_done < m:
            rho = u @ rho @ u.conj().T
            rho = _depolarize_nucleus(rho, p)
            m_done += 1
        r = rho.copy()
        if bystander is not None:
            c = bystander(m)
            r[:2, 2:] *= c
            r[2:, :2] *= c
        out.append(joint_state_fidelity(r, (prep, "up")) if prep == "+" else _nuclear_fidelity(r))
    return out


def _nuclear_fidelity(rho: np.ndarray) -> float:
    rho_n = np.einsum("aiaj->ij", rho.reshape(2, 2, 2, 2))
    return float(np.real(rho_n[0, 0]))


def benchmark_gate_decay(
    gate: GateReport,
    config: SystemConfig | None = None,
    m_max: int | None = None,
    electron_prep: str | Sequence[str] | None = None,
    depolarizing: float = 0.0,
    f_init: float | None = None,
    nonlinear_threshold: float = 1e-3,
    model: str = "secular",
    budget_ns: float = SEQUENCE_BUDGET_NS,
) -> DecayFit:
    """Apply the gate M = 0, r, 2r, ... times and fit F = f_init - M f_gate.

    Single-qubit gates are scored by the target's |up> population and
    averaged over electron preparations |0> and |-1>; the entangling gate
    is scored by the joint fidelity with |e up> for the chosen electron
    preparation (|0>, |-1> or |+>). ``depolarizing`` is the per-application
    error eps, applied as a depolarizing channel of strength 2 eps on the
    target so that a pure state loses fidelity eps per application. When a
    config is given, bystander spins dephase the electron for the |+>
    preparation.
    """
    kind = gate.spec.kind
    r = identity_period(kind)
    dur = max(gate.duration, 0.0)
    if m_max is None:
        m_max = 4 * r
        if dur > 0:
            m_max = min(m_max, int(budget_ns // dur) // r * r)
    m_max = int(m_max)
    if m_max < r:
        raise ValueError(f"m_max = {m_max} is shorter than one identity period ({r})")
    if dur * m_max > budget_ns:
        raise ValueError(
            f"{m_max} applications of a {dur:.0f} ns gate exceed the {budget_ns / 1e6:g} ms sequence budget"
        )
    if f_init is None:
        f_init = 1.0
        if config is not None and gate.spec.target_spin is not None:
            f_init = config.spin(gate.spec.target_spin).f_init
    if not 0 <= depolarizing <= 0.5:
        raise ValueError("depolarizing error must lie in [0, 0.5]")
    flipped = gate.sequence.n_pulses % 2 == 1
    if kind is GateKind.CONTROLLED_X_HALF_PI:
        if flipped:
            raise ValueError("an entangling gate with an odd pulse count is not benchmarked")
        preps = [electron_prep] if isinstance(electron_prep, str) else list(electron_prep or ["0"])
    else:
        preps = [electron_prep] if isinstance(electron_prep, str) else list(electron_prep or ["0", "1"])
    m_values = list(range(0, m_max + 1, r))
    w0, w1 = gate.corrected_propagators()

    bystander = None
    if config is not None and gate.spec.target_spin is not None and any(p == "+" for p in preps):
        b0, b1 = branch_fields(config, model)
        idx = _spin_index(config, gate.spec.target_spin)
        q0, q1 = cpmg_quaternions(b0, b1, gate.sequence.n_pulses, gate.sequence.half_interval)
        others = [j for j in range(b0.shape[0]) if j != idx]

        def coherence(m: int) -> float:
            if not others:
                return 1.0
            return float(np.prod(_su2.dot(_su2.power(q0[others], m), _su2.power(q1[others], m))))

        bystander = coherence

    per = {}
    for prep in preps:
        if prep not in _ELECTRON_BLOCH:
            raise ValueError(f"unknown electron preparation {prep!r}")
        if prep == "+" and kind is not GateKind.CONTROLLED_X_HALF_PI:
            raise ValueError("the |+> preparation is used for the entangling gate only")
        per[prep] = (m_values, _evolve(prep, f_init, w0, w1, 2.0 * depolarizing, m_values, flipped,
                                       bystander if prep == "+" else None))
    fids = np.mean([v[1] for v in per.values()], axis=0)
    slope, intercept = np.polyfit(np.array(m_values, float), fids, 1)
    pred = intercept + slope * np.array(m_values, float)
    rms = float(np.sqrt(np.mean((fids - pred) ** 2)))
    return DecayFit(
        f_init=float(intercept),
        f_gate=float(-slope),
        residual=rms,
        m_values=m_values,
        fidelities=[float(x) for x in fids],
        nonlinear=bool(rms > nonlinear_threshold),
        per_prep=per,
    )


def analytic_depolarizing_curve(m_values, eps: float, f_init: float = 1.0) -> np.ndarray:
    """F(M) = 1/2 + (f_init - 1/2)(1 - 2 eps)^M for an otherwise perfect gate."""
    m = np.asarray(m_values, float)
    return 0.5 + (f_init - 0.5) * (1.0 - 2.0 * eps) ** m


# ---------------------------------------------------------------------------
# Bath and gate tables
# ---------------------------------------------------------------------------


def sample_bath(n: int = 10, bound: float = DEFAULT_BATH_BOUND_KHZ, seed: int | None = None) -> list[HyperfineTensor]:
    """Weakly coupled bath: azz ~ U(-bound, bound), azx ~ U(0, bound), traceless."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    azz = rng.uniform(-bound, bound, n)
    azx = rng.uniform(0.0, bound, n)
    return [HyperfineTensor.weak_coupling(float(a), float(x)) for a, x in zip(azz, azx)]


_KIND_ALIASES = {
    "cx": GateKind.CONTROLLED_X_HALF_PI,
    "c-x": GateKind.CONTROLLED_X_HALF_PI,
    "x": GateKind.NUCLEAR_X_HALF_PI,
    "z_pi/2": GateKind.NUCLEAR_Z_HALF_PI,
    "z_pi/4": GateKind.NUCLEAR_Z_QUARTER_PI,
}


def parse_gate_kind(label: str) -> GateKind | None:
    """Map a gate-table label to a kind; unknown labels give None."""
    key = label.strip().lower()
    if key in _KIND_ALIASES:
        return _KIND_ALIASES[key]
    try:
        return GateKind(key)
    except ValueError:
        return None


@dataclass(frozen=True)
class GateTableRow:
    spin_id: int
    gate_kind: str
    n_pulses: int
    tau_ns: float

    @property
    def kind(self) -> GateKind | None:
        return parse_gate_kind(self.gate_kind)

    @property
    def sequence(self) -> PulseSequence:
        return PulseSequence(self.n_pulses, self.tau_ns)


def read_gate_table(path: str | Path) -> list[GateTableRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["spin_id", "gate_kind", "n_pulses", "tau_ns"]
        if [c.strip() for c in (reader.fieldnames or [])] != need:
            raise ValueError(f"{path}: expected columns {','.join(need)}")
        return [GateTableRow(int(r["spin_id"]), r["gate_kind"].strip(), int(r["n_pulses"]), float(r["tau_ns"]))
                for r in reader]


def write_gate_table(rows: Iterable[GateTableRow], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spin_id", "gate_kind", "n_pulses", "tau_ns"])
        for r in rows:
            w.writerow([r.spin_id, r.gate_kind, r.n_pulses, repr(r.tau_ns)])


def reports_to_json(reports: Sequence[GateReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=2)
