"""Spin Hamiltonians, precession frequencies and hyperfine inversion.

The electron is a spin-1 with S_z = diag(+1, 0, -1); nuclei are spin-1/2 with
I = sigma/2. All frequencies are ordinary-frequency kHz, fields are gauss.

Two labelings appear throughout:

* *branch* labels refer to the algebraic form of the secular frequency,
  ``plus`` = sqrt(azx^2 + (azz + wn)^2) and ``minus`` = sqrt(azx^2 + (azz - wn)^2);
* *manifold* labels are electron states ms in {+1, 0, -1}.

Which branch belongs to which manifold depends on the sign convention of the
quoted hyperfine values, set by ``SystemConfig.convention``:

``"negated"`` (default)
    the quoted tensor is the negative of the physical coupling, so ms = -1
    precesses at the plus-branch frequency.
``"physical"``
    the quoted tensor is the physical coupling, so ms = +1 precesses at the
    plus-branch frequency.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

if TYPE_CHECKING:  # pragma: no cover
    from .dynamics import NoiseModel

CONVENTIONS = ("negated", "physical")
_CONVENTION_SIGN = {"negated": -1.0, "physical": 1.0}

DEFAULT_DELTA_KHZ = 2.8776e6
DEFAULT_GAMMA_E = 2802.5  # kHz/G
DEFAULT_GAMMA_N = 1.0705  # kHz/G, 13C
DEFAULT_BZ_G = 495.0
DEFAULT_BATH_BOUND_KHZ = 10.0
DEFAULT_FULL_TENSOR_CAP = 6

_SQ2 = math.sqrt(2.0)
SX1 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / _SQ2
SY1 = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / _SQ2
SZ1 = np.diag([1.0, 0.0, -1.0]).astype(complex)
IX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
IY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
IZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
I2 = np.eye(2, dtype=complex)
I3 = np.eye(3, dtype=complex)
_MANIFOLD_INDEX = {1: 0, 0: 1, -1: 2}


class DegenerateFrameError(ValueError):
    """Raised when Delta +/- omega_ez is too small for the rotating-frame expansion."""


class InconsistentFrequenciesError(ValueError):
    """Raised when a frequency pair admits no real (azz, azx)."""


def convention_sign(convention: str) -> float:
    try:
        return _CONVENTION_SIGN[convention]
    except KeyError:
        raise ValueError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}") from None


def branch_of_manifold(ms: int, convention: str = "negated") -> str:
    """Secular branch ('plus' or 'minus') that electron manifold ms precesses at."""
    if ms not in (1, -1):
        raise ValueError("only ms = +1 and ms = -1 have a hyperfine branch")
    s = convention_sign(convention)
    return "plus" if ms * s > 0 else "minus"


def manifold_of_branch(branch: str, convention: str = "negated") -> int:
    for ms in (1, -1):
        if branch_of_manifold(ms, convention) == branch:
            return ms
    raise ValueError(f"unknown branch {branch!r}")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalConstants:
    """Zero-field splitting and gyromagnetic ratios (kHz, kHz/G)."""

    delta: float = DEFAULT_DELTA_KHZ
    gamma_e: float = DEFAULT_GAMMA_E
    gamma_n: float = DEFAULT_GAMMA_N

    def __post_init__(self) -> None:
        for name in ("delta", "gamma_e", "gamma_n"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")


def larmor_vector(gamma: float, bx: float, by: float, bz: float) -> np.ndarray:
    """gamma * (Bx, By, Bz); the single field-to-frequency conversion."""
    return gamma * np.array([bx, by, bz], dtype=float)


@dataclass(frozen=True)
class MagneticField:
    """Static field in gauss."""

    bz: float = DEFAULT_BZ_G
    bx: float = 0.0
    by: float = 0.0

    def __post_init__(self) -> None:
        if not all(np.isfinite([self.bx, self.by, self.bz])):
            raise ValueError("magnetic field components must be finite")

    def electron(self, constants: PhysicalConstants) -> np.ndarray:
        """(omega_ex, omega_ey, omega_ez) in kHz."""
        return larmor_vector(constants.gamma_e, self.bx, self.by, self.bz)

    def nuclear(self, constants: PhysicalConstants) -> np.ndarray:
        """(omega_nx, omega_ny, omega_nz) in kHz."""
        return larmor_vector(constants.gamma_n, self.bx, self.by, self.bz)


@dataclass(frozen=True)
class HyperfineTensor:
    """Hyperfine coupling components in kHz.

    Use :meth:`weak_coupling` for the traceless construction with the
    transverse-isotropic default ``axx = ayy = -azz/2``.
    """

    axx: float
    ayy: float
    azz: float
    azx: float
    azy: float = 0.0

    def __post_init__(self) -> None:
        if not all(np.isfinite(self.as_array())):
            raise ValueError("hyperfine components must be finite")

    @classmethod
    def weak_coupling(
        cls, azz: float, azx: float, azy: float = 0.0, axx: float | None = None
    ) -> "HyperfineTensor":
        """Traceless tensor; ``ayy`` is chosen so that axx + ayy + azz = 0."""
        if axx is None:
            axx = -azz / 2.0
        ayy = -azz - axx
        return cls(axx=float(axx), ayy=float(ayy), azz=float(azz), azx=float(azx), azy=float(azy))

    @classmethod
    def secular_only(cls, azz: float, azx: float, azy: float = 0.0) -> "HyperfineTensor":
        """Tensor with vanishing transverse diagonal components."""
        return cls(axx=0.0, ayy=0.0, azz=float(azz), azx=float(azx), azy=float(azy))

    @property
    def trace(self) -> float:
        return self.axx + self.ayy + self.azz

    def as_array(self) -> np.ndarray:
        return np.array([self.axx, self.ayy, self.azz, self.azx, self.azy], dtype=float)

    def scaled(self, factor: float) -> "HyperfineTensor":
        return HyperfineTensor(*(factor * self.as_array()))

    def secular(self) -> tuple[float, float]:
        """(azz, azx) with azy folded into azx."""
        azx_rot, _, _ = rotate_secular_frame(self.azx, self.azy)
        return self.azz, azx_rot

    @property
    def is_zero(self) -> bool:
        return not np.any(self.as_array())


@dataclass(frozen=True)
class Measurement:
    """A measured value and its one-sigma uncertainty."""

    value: float
    error: float = 0.0

    def __post_init__(self) -> None:
        if self.error < 0:
            raise ValueError("measurement error must be non-negative")


@dataclass(frozen=True)
class NuclearSpinRecord:
    """A resolved nuclear spin.

    Measured frequencies are stored as magnitudes; a reported negative sign
    is kept in ``reported_signs`` (branch name -> +1/-1) and not interpreted.
    """

    id: int
    hyperfine: HyperfineTensor
    f_init: float = 1.0
    measured_f_minusbranch: Measurement | None = None
    measured_f_plusbranch: Measurement | None = None
    measured_omega_n: Measurement | None = None
    reported_signs: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.f_init <= 1.0:
            raise ValueError(f"spin {self.id}: f_init must lie in [0, 1], got {self.f_init}")
        for name in ("measured_f_minusbranch", "measured_f_plusbranch", "measured_omega_n"):
            m = getattr(self, name)
            if m is not None and m.value < 0:
                raise ValueError(f"spin {self.id}: {name} is stored as a magnitude and must be >= 0")


@dataclass(frozen=True)
class SystemConfig:
    """Complete description of an electron with resolved and bath nuclei."""

    constants: PhysicalConstants = PhysicalConstants()
    field: MagneticField = MagneticField()
    resolved_spins: tuple[NuclearSpinRecord, ...] = ()
    bath_spins: tuple[HyperfineTensor, ...] = ()
    bath_seed: int | None = None
    convention: str = "negated"
    bath_bound: float = DEFAULT_BATH_BOUND_KHZ
    full_tensor_cap: int = DEFAULT_FULL_TENSOR_CAP
    noise: "NoiseModel | None" = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "resolved_spins", tuple(self.resolved_spins))
        object.__setattr__(self, "bath_spins", tuple(self.bath_spins))
        convention_sign(self.convention)
        ids = [s.id for s in self.resolved_spins]
        if len(set(ids)) != len(ids):
            raise ValueError("resolved spin ids must be unique")
        for i, t in enumerate(self.bath_spins):
            azz, azx = t.secular()
            if abs(azz) >= self.bath_bound:
                raise ValueError(
                    f"bath spin {i}: |azz| = {abs(azz):g} kHz violates the {self.bath_bound:g} kHz bath bound"
                )
            if abs(azx) >= self.bath_bound:
                raise ValueError(
                    f"bath spin {i}: |azx| = {abs(azx):g} kHz violates the {self.bath_bound:g} kHz bath bound"
                )
        if self.full_tensor_cap < 0:
            raise ValueError("full_tensor_cap must be non-negative")

    @property
    def omega_n(self) -> float:
        """Bare nuclear Larmor frequency gamma_n * Bz (kHz)."""
        return self.constants.gamma_n * self.field.bz

    @property
    def n_spins(self) -> int:
        return len(self.resolved_spins) + len(self.bath_spins)

    def spin(self, spin_id: int) -> NuclearSpinRecord:
        for s in self.resolved_spins:
            if s.id == spin_id:
                return s
        raise KeyError(f"no resolved spin with id {spin_id}")

    def labels(self) -> list[str]:
        return [f"spin{s.id}" for s in self.resolved_spins] + [
            f"bath{i}" for i in range(len(self.bath_spins))
        ]

    def tensors(self) -> list[HyperfineTensor]:
        """Quoted tensors of all spins, resolved first."""
        return [s.hyperfine for s in self.resolved_spins] + list(self.bath_spins)

    def physical_tensors(self) -> list[HyperfineTensor]:
        """Tensors in the sign convention of the Hamiltonian."""
        s = convention_sign(self.convention)
        return [t.scaled(s) for t in self.tensors()]

    def check_full_tensor(self, n: int | None = None) -> None:
        n = self.n_spins if n is None else n
        if n > self.full_tensor_cap:
            raise ValueError(
                f"full-tensor simulation of {n} nuclei exceeds the configured cap of {self.full_tensor_cap}"
            )

    def with_spins(
        self,
        resolved: Iterable[NuclearSpinRecord] | None = None,
        bath: Iterable[HyperfineTensor] | None = None,
    ) -> "SystemConfig":
        return replace(
            self,
            resolved_spins=tuple(self.resolved_spins if resolved is None else resolved),
            bath_spins=tuple(self.bath_spins if bath is None else bath),
        )


@dataclass(frozen=True)
class NuclearEffectiveHamiltonian:
    """Traceless 2x2 nuclear Hamiltonians (kHz) for ms = +1, 0, -1."""

    h_plus: np.ndarray
    h_zero: np.ndarray
    h_minus: np.ndarray

    def __post_init__(self) -> None:
        for name in ("h_plus", "h_zero", "h_minus"):
            h = np.asarray(getattr(self, name), dtype=complex)
            scale = max(np.max(np.abs(h)), 1.0)
            if np.max(np.abs(h - h.conj().T)) > 1e-12 * scale:
                raise ValueError(f"{name} is not Hermitian")
            object.__setattr__(self, name, h)

    def manifold(self, ms: int) -> np.ndarray:
        return {1: self.h_plus, 0: self.h_zero, -1: self.h_minus}[ms]

    def field(self, ms: int) -> np.ndarray:
        """Field vector b with h = b . sigma / 2."""
        return field_vector(self.manifold(ms))

    def frequencies(self) -> dict[int, float]:
        return {ms: precession_axis_frequency(self.manifold(ms))[0] for ms in (1, 0, -1)}


@dataclass(frozen=True)
class ManifoldFields:
    """Per-spin effective field vectors (kHz) for each electron manifold."""

    labels: tuple[str, ...]
    fields: Mapping[int, np.ndarray]

    def __getitem__(self, ms: int) -> np.ndarray:
        return self.fields[ms]


# ---------------------------------------------------------------------------
# Secular model
# ---------------------------------------------------------------------------


def rotate_secular_frame(azx: float, azy: float) -> tuple[float, float, float]:
    """Fold azy into azx by rotating the nuclear x axis.

    Returns ``(azx_rot, 0.0, angle)`` where ``angle`` is the rotation of the
    x axis about z (rad).
    """
    return math.hypot(azx, azy), 0.0, math.atan2(azy, azx)


def manifold_field(tensor: HyperfineTensor, ms: int, omega_n: float) -> np.ndarray:
    """Secular field (ms*Azx, ms*Azy, ms*Azz + wn) for a physical tensor."""
    return np.array([ms * tensor.azx, ms * tensor.azy, ms * tensor.azz + omega_n], dtype=float)


def effective_hamiltonian(config: SystemConfig) -> ManifoldFields:
    """Secular per-spin nuclear fields for every electron manifold."""
    tensors = config.physical_tensors()
    wn = config.omega_n
    fields = {}
    for ms in (1, 0, -1):
        if tensors:
            fields[ms] = np.array([manifold_field(t, ms, wn) for t in tensors])
        else:
            fields[ms] = np.zeros((0, 3))
    return ManifoldFields(labels=tuple(config.labels()), fields=fields)


def precession_frequencies_secular(azz, azx, omega_n):
    """Branch frequencies (plus, minus) in kHz; broadcasts over arrays."""
    azz = np.asarray(azz, dtype=float)
    azx = np.asarray(azx, dtype=float)
    plus = np.hypot(azx, azz + omega_n)
    minus = np.hypot(azx, azz - omega_n)
    if plus.ndim == 0:
        return float(plus), float(minus)
    return plus, minus


def _manifold_shift(ms, azz_p, azx_p, omega_n, omega_ex, omega_nx, delta, omega_e):
    """First-order transverse-field shift of the ms = +/-1 precession frequency.

    ``azz_p``/``azx_p`` are physical-convention components.
    """
    if ms == 1:
        f = np.hypot(azx_p, azz_p + omega_n)
        num = (azz_p + omega_n) * azx_p * omega_ex / (delta + omega_e) + azx_p * omega_nx
    else:
        f = np.hypot(azx_p, azz_p - omega_n)
        num = (omega_n - azz_p) * azx_p * omega_ex / (delta - omega_e) - azx_p * omega_nx
    if np.any(f == 0):
        raise ZeroDivisionError("frequency deviation undefined for a vanishing precession frequency")
    return num / f


def frequency_deviation(
    azz,
    azx,
    omega_n,
    omega_ex,
    omega_nx,
    delta: float = DEFAULT_DELTA_KHZ,
    omega_e: float = DEFAULT_GAMMA_E * DEFAULT_BZ_G,
    convention: str = "negated",
):
    """First-order transverse-field shifts (d_plus, d_minus) of the branch frequencies.

    Parameters are quoted-convention (azz, azx), the nuclear Larmor frequency,
    transverse electron/nuclear Zeeman frequencies and the longitudinal
    electron Zeeman frequency ``omega_e``, all in kHz.
    """
    s = convention_sign(convention)
    azz_p, azx_p = s * np.asarray(azz, float), s * np.asarray(azx, float)
    out = {}
    for ms in (1, -1):
        out[branch_of_manifold(ms, convention)] = _manifold_shift(
            ms, azz_p, azx_p, omega_n, omega_ex, omega_nx, delta, omega_e
        )
    d_plus, d_minus = out["plus"], out["minus"]
    if np.ndim(d_plus) == 0:
        return float(d_plus), float(d_minus)
    return d_plus, d_minus


def branch_frequencies(
    azz,
    azx,
    omega_n,
    bx: float = 0.0,
    constants: PhysicalConstants = PhysicalConstants(),
    bz: float = DEFAULT_BZ_G,
    convention: str = "negated",
):
    """Secular branch frequencies plus the first-order Bx correction."""
    plus, minus = precession_frequencies_secular(azz, azx, omega_n)
    if bx == 0.0:
        return plus, minus
    d_plus, d_minus = frequency_deviation(
        azz,
        azx,
        omega_n,
        constants.gamma_e * bx,
        constants.gamma_n * bx,
        constants.delta,
        constants.gamma_e * bz,
        convention,
    )
    return plus + d_plus, minus + d_minus


def _invert_zeroth(f_plus: float, f_minus: float, omega_n: float) -> tuple[float, float]:
    if omega_n == 0:
        raise ZeroDivisionError("omega_n must be non-zero for inversion")
    azz = (f_plus**2 - f_minus**2) / (4.0 * omega_n)
    s = azz + omega_n
    rad = (f_plus - s) * (f_plus + s)
    tol = 1e-9 * max(f_plus**2, f_minus**2, 1.0)
    if rad < -tol:
        raise InconsistentFrequenciesError(
            f"frequency pair ({f_plus:g}, {f_minus:g}) kHz with wn = {omega_n:g} kHz has no real azx"
        )
    return azz, math.sqrt(max(rad, 0.0))


def invert_hyperfine(
    f_plusbranch: float,
    f_minusbranch: float,
    omega_n: float,
    bx: float | None = None,
    *,
    constants: PhysicalConstants = PhysicalConstants(),
    bz: float = DEFAULT_BZ_G,
    convention: str = "negated",
    max_iter: int = 10,
    tol: float = 1e-6,
) -> tuple[float, float]:
    """Recover (azz, azx) in kHz from a branch-frequency pair.

    With ``bx`` given, the measured frequencies are de-biased by the
    first-order transverse-field shift and the inversion is iterated to a
    fixed point.
    """
    azz, azx = _invert_zeroth(f_plusbranch, f_minusbranch, omega_n)
    if not bx:
        return azz, azx
    for _ in range(max_iter):
        d_plus, d_minus = frequency_deviation(
            azz,
            azx,
            omega_n,
            constants.gamma_e * bx,
            constants.gamma_n * bx,
            constants.delta,
            constants.gamma_e * bz,
            convention,
        )
        new = _invert_zeroth(f_plusbranch - d_plus, f_minusbranch - d_minus, omega_n)
        delta = max(abs(new[0] - azz), abs(new[1] - azx))
        azz, azx = new
        if delta < tol:
            break
    return azz, azx


@dataclass(frozen=True)
class TransverseFieldFit:
    bx: float
    residuals: np.ndarray
    pinned: bool

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0


def fit_transverse_field(
    azz: Sequence[float],
    azx: Sequence[float],
    f_plus: Sequence[float],
    f_minus: Sequence[float],
    omega_n,
    bound: float = 2.5,
    *,
    constants: PhysicalConstants = PhysicalConstants(),
    bz: float = DEFAULT_BZ_G,
    convention: str = "negated",
) -> TransverseFieldFit:
    """Fit one shared Bx in [-bound, bound] with the hyperfine tensors held fixed.

    Residuals are model minus measurement, ordered (plus_1, minus_1, plus_2, ...).
    """
    azz = np.asarray(azz, float)
    azx = np.asarray(azx, float)
    meas = np.column_stack([f_plus, f_minus]).astype(float)
    wn = np.broadcast_to(np.asarray(omega_n, float), azz.shape)

    def resid(bx: float) -> np.ndarray:
        p, m = branch_frequencies(azz, azx, wn, bx, constants, bz, convention)
        return (np.column_stack([p, m]) - meas).ravel()

    res = minimize_scalar(lambda b: float(np.sum(resid(b) ** 2)), bounds=(-bound, bound), method="bounded",
                          options={"xatol": 1e-8})
    bx = float(res.x)
    pinned = abs(abs(bx) - bound) < 1e-3 * bound
    if pinned:
        warnings.warn(f"fitted Bx = {bx:.4f} G is pinned at the {bound} G bound", RuntimeWarning, stacklevel=2)
    return TransverseFieldFit(bx=bx, residuals=resid(bx), pinned=pinned)


# ---------------------------------------------------------------------------
# Full Hamiltonian and Floquet expansion
# ---------------------------------------------------------------------------


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise ValueError("non-finite input")


def full_hamiltonian(
    constants: PhysicalConstants, field: MagneticField, hyperfine: HyperfineTensor
) -> np.ndarray:
    """6x6 lab-frame Hamiltonian (kHz), basis (ms=+1, 0, -1) x (up, down).

    ``hyperfine`` is taken in the physical sign convention.
    """
    _check_finite(constants.delta, field.bx, field.by, field.bz, hyperfine.as_array())
    we = field.electron(constants)
    wn = field.nuclear(constants)
    a = hyperfine
    h = constants.delta * np.kron(SZ1 @ SZ1, I2)
    h += np.kron(we[0] * SX1 + we[1] * SY1 + we[2] * SZ1, I2)
    h += np.kron(I3, wn[0] * IX + wn[1] * IY + wn[2] * IZ)
    h += a.axx * np.kron(SX1, IX) + a.ayy * np.kron(SY1, IY) + a.azz * np.kron(SZ1, IZ)
    h += a.azx * (np.kron(SZ1, IX) + np.kron(SX1, IZ))
    h += a.azy * (np.kron(SZ1, IY) + np.kron(SY1, IZ))
    return 0.5 * (h + h.conj().T)


def exact_manifold_gaps(
    constants: PhysicalConstants, field: MagneticField, hyperfine: HyperfineTensor
) -> dict[int, float]:
    """Nuclear splitting within each electron manifold from exact diagonalisation.

    Eigenstates are assigned to the manifold carrying most of their weight.
    """
    vals, vecs = np.linalg.eigh(full_hamiltonian(constants, field, hyperfine))
    weights = np.abs(vecs.reshape(3, 2, 6)) ** 2
    weights = weights.sum(axis=1)  # (manifold, eigenstate)
    owner = np.argmax(weights, axis=0)
    gaps = {}
    for ms, idx in _MANIFOLD_INDEX.items():
        e = np.sort(vals[owner == idx])
        if e.size != 2:
            raise RuntimeError("could not assign eigenstates to electron manifolds")
        gaps[ms] = float(e[1] - e[0])
    return gaps


def _frame_denominators(constants: PhysicalConstants, field: MagneticField, tol: float) -> tuple[float, float]:
    wez = field.electron(constants)[2]
    d_plus = constants.delta + wez
    d_minus = constants.delta - wez
    if abs(d_plus) < tol or abs(d_minus) < tol:
        raise DegenerateFrameError(
            f"rotating frame is degenerate: Delta + wez = {d_plus:g}, Delta - wez = {d_minus:g} kHz"
        )
    return d_plus, d_minus


def _traceless(h: np.ndarray) -> np.ndarray:
    h = h - 0.5 * np.trace(h) * I2
    return 0.5 * (h + h.conj().T)


def floquet_hamiltonians(
    constants: PhysicalConstants,
    field: MagneticField,
    hyperfine: HyperfineTensor,
    tol: float = 1e-6,
) -> NuclearEffectiveHamiltonian:
    """Zeroth- plus first-order rotating-frame nuclear Hamiltonians.

    ``hyperfine`` is in the physical sign convention. The electron energy
    offsets and any scalar second-order term are dropped, so the returned
    matrices are traceless.
    """
    _check_finite(constants.delta, field.bx, field.by, field.bz, hyperfine.as_array())
    d_plus, d_minus = _frame_denominators(constants, field, tol)
    we = field.electron(constants)
    wn = field.nuclear(constants)
    a = hyperfine
    h_nuc = wn[0] * IX + wn[1] * IY + wn[2] * IZ
    h_hf = a.azz * IZ + a.azx * IX + a.azy * IY
    # <+1|H|0> and <-1|H|0> as nuclear operators
    x = ((we[0] - 1j * we[1]) * I2 + a.axx * IX - 1j * a.ayy * IY + (a.azx - 1j * a.azy) * IZ) / _SQ2
    y = ((we[0] + 1j * we[1]) * I2 + a.axx * IX + 1j * a.ayy * IY + (a.azx + 1j * a.azy) * IZ) / _SQ2
    xd, yd = x.conj().T, y.conj().T
    h_p = h_nuc + h_hf + x @ xd / d_plus
    h_0 = h_nuc - xd @ x / d_plus - yd @ y / d_minus
    h_m = h_nuc - h_hf + y @ yd / d_minus
    return NuclearEffectiveHamiltonian(_traceless(h_p), _traceless(h_0), _traceless(h_m))


def floquet_hamiltonians_commutator(
    constants: PhysicalConstants,
    field: MagneticField,
    hyperfine: HyperfineTensor,
    tol: float = 1e-6,
) -> NuclearEffectiveHamiltonian:
    """Same expansion built from commutators of the 6x6 Fourier components.

    ``H1 = [H_++, H_+-]/(Delta + wez) + [H_-+, H_--]/(Delta - wez)``, where the
    components are the parts of the full Hamiltonian rotating at
    exp(+/- i (Delta +/- wez) t) in the frame of Delta Sz^2 + wez Sz.
    """
    d_plus, d_minus = _frame_denominators(constants, field, tol)
    h = full_hamiltonian(constants, field, hyperfine)
    blocks = h.reshape(3, 2, 3, 2)

    def component(row: int, col: int) -> np.ndarray:
        out = np.zeros((3, 2, 3, 2), dtype=complex)
        out[row, :, col, :] = blocks[row, :, col, :]
        return out.reshape(6, 6)

    p, z, m = _MANIFOLD_INDEX[1], _MANIFOLD_INDEX[0], _MANIFOLD_INDEX[-1]
    hpp, hpm = component(p, z), component(z, p)
    hmp, hmm = component(m, z), component(z, m)
    h0 = sum(component(i, i) for i in range(3))
    h1 = (hpp @ hpm - hpm @ hpp) / d_plus + (hmp @ hmm - hmm @ hmp) / d_minus
    heff = (h0 + h1).reshape(3, 2, 3, 2)
    return NuclearEffectiveHamiltonian(
        _traceless(heff[p, :, p, :]), _traceless(heff[z, :, z, :]), _traceless(heff[m, :, m, :])
    )


def field_vector(h: np.ndarray) -> np.ndarray:
    """n = (Tr sigma_x h, Tr sigma_y h, Tr sigma_z h)."""
    h = np.asarray(h, dtype=complex)
    return 2.0 * np.real(
        np.array([np.trace(IX @ h), np.trace(IY @ h), np.trace(IZ @ h)])
    )


def precession_axis_frequency(h: np.ndarray) -> tuple[float, np.ndarray | None]:
    """Precession frequency (kHz) and unit axis of a 2x2 nuclear Hamiltonian.

    The axis is ``None`` when the frequency vanishes (no precession).
    """
    n = field_vector(h)
    f = float(np.linalg.norm(n))
    if f == 0.0:
        return 0.0, None
    return f, n / f


def floquet_fields(config: SystemConfig) -> ManifoldFields:
    """Per-spin field vectors from the Floquet Hamiltonians of each spin."""
    fields = {ms: [] for ms in (1, 0, -1)}
    for t in config.physical_tensors():
        heff = floquet_hamiltonians(config.constants, config.field, t)
        for ms in fields:
            fields[ms].append(heff.field(ms))
    return ManifoldFields(
        labels=tuple(config.labels()),
        fields={ms: np.array(v).reshape(-1, 3) for ms, v in fields.items()},
    )


def manifold_fields(config: SystemConfig, model: str = "secular") -> ManifoldFields:
    """Per-spin fields under the ``"secular"`` or ``"floquet"`` model."""
    if model == "secular":
        return effective_hamiltonian(config)
    if model == "floquet":
        return floquet_fields(config)
    raise ValueError(f"unknown Hamiltonian model {model!r}")
