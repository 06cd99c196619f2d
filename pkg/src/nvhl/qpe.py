"""Adaptive phase estimation of nuclear precession frequencies.

Step n of an N-step run lets the target precess for t_n = 2**(N - n) * t_min
and reads it out in a basis rotated by theta_n. The bright probability is
P_n = (1 + C cos(2 pi f t_n - theta_n)) / 2 and the digit is k_n = 0 for
P_n > 0.5, else 1. With theta_1 = pi/2 and theta_{n+1} = theta_n/2 + k_n pi/2
the phase contributed by the already-read digits is cancelled, so the digits
read out f = sum_n 2**(n-1) k_n f0 + eps with f0 = 1 / (2**N t_min), least
significant first.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.special import betainc

from .dynamics import NoiseModel, apply_readout_model, invert_readout, rng_stream
from .spin_model import (
    DEFAULT_BZ_G,
    HyperfineTensor,
    MagneticField,
    PhysicalConstants,
    SystemConfig,
    branch_frequencies,
    branch_of_manifold,
    convention_sign,
    floquet_hamiltonians,
    invert_hyperfine,
    manifold_field,
    precession_axis_frequency,
)
from .units import NS_TO_MS, phase

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class QpeConfig:
    """Timing and contrast settings; times in ns.

    The contrast is C = (2 F_init - 1) exp(-(t/T2*)^2) with the polarization
    and dephasing factors switchable. ``contrast`` overrides the
    polarization factor. ``use_readout`` passes outcomes through the readout
    confusion model and corrects the estimate before choosing a digit.
    """

    t_min: float = 800.0
    n_steps: int = 13
    shots: int = 1000
    theta_1: float = 0.5 * math.pi
    use_polarization: bool = True
    use_dephasing: bool = True
    contrast: float | None = None
    use_readout: bool = False

    def __post_init__(self) -> None:
        if self.t_min <= 0:
            raise ValueError("t_min must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.contrast is not None and not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")

    def times(self) -> np.ndarray:
        """t_n for n = 1..N (ns), longest first."""
        n = np.arange(1, self.n_steps + 1)
        return self.t_min * 2.0 ** (self.n_steps - n)

    @property
    def f0(self) -> float:
        """Frequency resolution 1 / (2**N t_min) in kHz."""
        return 1.0 / (2.0**self.n_steps * self.t_min * NS_TO_MS)

    @property
    def unambiguous_range(self) -> float:
        """1 / t_min in kHz."""
        return 1.0 / (self.t_min * NS_TO_MS)


@dataclass(frozen=True)
class DigitDecision:
    k: int
    confidence: float
    tie: bool = False


@dataclass(frozen=True)
class QpeStep:
    n: int
    t_ns: float
    theta: float
    p_hat: float
    stderr: float
    shots: int
    k: int
    confidence: float
    tie: bool
    posterior_k1: float


@dataclass
class QpeRecord:
    steps: list[QpeStep]
    f0: float
    t_min: float
    manifold: int | None = None
    spin_id: int | None = None
    provenance: dict = field(default_factory=dict)
    f_estimate: float | None = None
    alias_risk: bool = False
    f_unwrapped: float | None = None

    def __post_init__(self) -> None:
        if self.f_estimate is None and self.complete:
            self.f_estimate = estimate_from_digits(self.digits, self.f0)

    @property
    def complete(self) -> bool:
        return bool(self.steps) and len(self.steps) == int(round(math.log2(
            1.0 / (self.f0 * self.t_min * NS_TO_MS))))

    @property
    def digits(self) -> tuple[int, ...]:
        return tuple(s.k for s in self.steps)

    @property
    def f_error(self) -> float:
        return 0.5 * self.f0

    @property
    def f_value(self) -> float:
        """Alias-resolved estimate if available, else the raw estimate."""
        return self.f_unwrapped if self.f_unwrapped is not None else float(self.f_estimate)

    @property
    def string_posterior(self) -> float:
        """Probability of the decided digit string under per-digit posteriors."""
        p = 1.0
        for s in self.steps:
            p *= s.posterior_k1 if s.k == 1 else 1.0 - s.posterior_k1
        return p

    def to_dict(self) -> dict:
        return {
            "spin_id": self.spin_id,
            "manifold": self.manifold,
            "t_min_ns": self.t_min,
            "f0_khz": self.f0,
            "f_estimate_khz": self.f_estimate,
            "f_error_khz": self.f_error,
            "f_unwrapped_khz": self.f_unwrapped,
            "alias_risk": self.alias_risk,
            "digits": list(self.digits),
            "steps": [
                {
                    "step": s.n,
                    "t_ns": s.t_ns,
                    "theta_rad": s.theta,
                    "p_hat": s.p_hat,
                    "stderr": s.stderr,
                    "shots": s.shots,
                    "k": s.k,
                    "confidence": s.confidence if math.isfinite(s.confidence) else None,
                    "tie": s.tie,
                    "posterior_k1": s.posterior_k1,
                }
                for s in self.steps
            ],
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QpeRecord":
        steps = [
            QpeStep(
                n=int(s["step"]),
                t_ns=float(s["t_ns"]),
                theta=float(s["theta_rad"]),
                p_hat=float(s["p_hat"]),
                stderr=float(s["stderr"]),
                shots=int(s["shots"]),
                k=int(s["k"]),
                confidence=math.inf if s.get("confidence") is None else float(s["confidence"]),
                tie=bool(s.get("tie", False)),
                posterior_k1=float(s.get("posterior_k1", float(s["k"]))),
            )
            for s in d["steps"]
        ]
        return cls(
            steps=steps,
            f0=float(d["f0_khz"]),
            t_min=float(d["t_min_ns"]),
            manifold=d.get("manifold"),
            spin_id=d.get("spin_id"),
            provenance=dict(d.get("provenance", {})),
            f_estimate=d.get("f_estimate_khz"),
            alias_risk=bool(d.get("alias_risk", False)),
            f_unwrapped=d.get("f_unwrapped_khz"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


class QpeBackendError(RuntimeError):
    """A measurement backend failed; ``partial`` holds the steps completed so far."""

    def __init__(self, message: str, partial: QpeRecord):
        super().__init__(message)
        self.partial = partial


class MeasurementBackend(Protocol):
    def measure(self, step: int, t_ns: float, theta: float, manifold: int | None) -> tuple[float, float, int]:
        """Return (p_hat, stderr, shots) for one Ramsey setting."""
        ...


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def ramsey_probability(f, t_ns, theta, contrast: float = 1.0, detunings=None):
    """Bright probability (1 + C cos(2 pi f t - theta)) / 2.

    ``detunings`` (kHz) are quasi-static frequency offsets; the result is
    averaged over them.
    """
    if not 0.0 <= contrast <= 1.0:
        raise ValueError("contrast must lie in [0, 1]")
    if np.any(np.asarray(t_ns) < 0):
        raise ValueError("t must be non-negative")
    if detunings is None:
        p = 0.5 * (1.0 + contrast * np.cos(phase(f, t_ns) - theta))
    else:
        d = np.asarray(detunings, float)
        p = np.mean(0.5 * (1.0 + contrast * np.cos(phase(np.add.outer(f, d), t_ns) - theta)), axis=-1)
    return float(p) if np.ndim(p) == 0 else p


def digit_decision(p_hat: float, stderr: float | None = None) -> DigitDecision:
    """k = 0 when p_hat > 0.5, else 1; an exact 0.5 gives k = 0 flagged as a tie."""
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError("p_hat must lie in [0, 1]")
    if p_hat == 0.5:
        return DigitDecision(0, 0.0, True)
    margin = abs(p_hat - 0.5)
    conf = math.inf if not stderr else margin / stderr
    return DigitDecision(0 if p_hat > 0.5 else 1, conf, False)


def update_basis(theta_n: float, k_n: int) -> float:
    """theta_{n+1} = theta_n / 2 + k_n pi / 2, reduced to [0, 2 pi)."""
    return (0.5 * theta_n + 0.5 * k_n * math.pi) % TWO_PI


def estimate_from_digits(digits: Sequence[int], f0: float) -> float:
    """Centre-of-bin estimate sum 2**(n-1) k_n f0 + f0 / 2."""
    return float(sum(k << n for n, k in enumerate(digits)) * f0 + 0.5 * f0)


def digit_posterior(p_hat: float, shots: int) -> float:
    """Posterior probability that the true P is below 0.5 (k = 1), flat prior."""
    s = int(round(p_hat * shots))
    return float(betainc(s + 1, shots - s + 1, 0.5))


def unwrap_alias(f_hat: float, prior: float, t_min: float) -> float:
    """The alias f_hat + m / t_min (m integer, result >= 0) nearest the prior."""
    period = 1.0 / (t_min * NS_TO_MS)
    m = round((prior - f_hat) / period)
    out = f_hat + m * period
    if out < 0:
        out += period * math.ceil(-out / period)
    return float(out)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class SimulatorBackend:
    """Shot-by-shot Ramsey simulation of one spin in one electron manifold.

    Each shot draws a quasi-static detuning and a Bernoulli outcome. The
    other nuclei stay maximally mixed and, with no inter-nuclear coupling,
    do not affect the target's reduced dynamics; they are therefore not
    simulated.
    """

    def __init__(
        self,
        config: SystemConfig,
        spin_id: int,
        qpe_config: QpeConfig = QpeConfig(),
        seed: int | None = None,
        noise: NoiseModel | None = None,
        model: str = "floquet",
        stream: int = 0,
    ):
        self.config = config
        self.spin = config.spin(spin_id)
        self.qpe = qpe_config
        self.noise = noise if noise is not None else (config.noise or NoiseModel())
        self.model = model
        self.seed = seed
        self._rng = rng_stream(seed, stream)
        self._freq: dict[int, float] = {}

    def frequency(self, manifold: int) -> float:
        if manifold not in self._freq:
            tensor = self.spin.hyperfine.scaled(convention_sign(self.config.convention))
            if self.model == "floquet":
                h = floquet_hamiltonians(self.config.constants, self.config.field, tensor)
                f = precession_axis_frequency(h.manifold(manifold))[0]
            elif self.model == "secular":
                f = float(np.linalg.norm(manifold_field(tensor, manifold, self.config.omega_n)))
            else:
                raise ValueError(f"unknown model {self.model!r}")
            self._freq[manifold] = f
        return self._freq[manifold]

    def contrast(self) -> float:
        if self.qpe.contrast is not None:
            return self.qpe.contrast
        if self.qpe.use_polarization:
            return max(0.0, 2.0 * self.spin.f_init - 1.0)
        return 1.0

    def measure(self, step: int, t_ns: float, theta: float, manifold: int | None) -> tuple[float, float, int]:
        if manifold is None:
            raise ValueError("the simulator needs an electron manifold")
        f = self.frequency(manifold)
        shots = self.qpe.shots
        c = self.contrast()
        sigma = self.noise.detuning_sigma(f"spin{self.spin.id}") if self.qpe.use_dephasing else 0.0
        if sigma > 0:
            det = self._rng.normal(0.0, sigma, shots)
            p = 0.5 * (1.0 + c * np.cos(phase(f + det, t_ns) - theta))
        else:
            p = np.full(shots, 0.5 * (1.0 + c * math.cos(phase(f, t_ns) - theta)))
        if self.qpe.use_readout:
            p = apply_readout_model(p, self.noise)
        bright = int(np.count_nonzero(self._rng.random(shots) < p))
        p_hat = bright / shots
        if self.qpe.use_readout:
            p_hat = float(np.clip(invert_readout(p_hat, self.noise), 0.0, 1.0))
        stderr = math.sqrt(p_hat * (1.0 - p_hat) / shots)
        return p_hat, stderr, shots


class ToneBackend:
    """Ramsey outcomes for a known frequency; ``shots=None`` returns exact probabilities."""

    def __init__(self, f_khz: float, contrast: float = 1.0, shots: int | None = 1000, seed: int | None = None,
                 stream: int = 0):
        if not 0.0 <= contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")
        self.f = float(f_khz)
        self.contrast = contrast
        self.shots = shots
        self._rng = rng_stream(seed, stream)

    def measure(self, step: int, t_ns: float, theta: float, manifold: int | None) -> tuple[float, float, int]:
        p = ramsey_probability(self.f, t_ns, theta, self.contrast)
        if self.shots is None:
            return p, 0.0, 0
        p_hat = self._rng.binomial(self.shots, p) / self.shots
        return p_hat, math.sqrt(p_hat * (1.0 - p_hat) / self.shots), self.shots


@dataclass(frozen=True)
class MeasurementRow:
    step: int
    t_ns: float
    theta_rad: float
    p_hat: float
    stderr: float
    shots: int


MEASUREMENT_COLUMNS = ("step", "t_ns", "theta_rad", "p_hat", "stderr", "shots")


class ReplayBackend:
    """Answers from a recorded measurement file, keyed by step number."""

    def __init__(self, rows: Sequence[MeasurementRow]):
        self.rows = {r.step: r for r in rows}

    @classmethod
    def from_csv(cls, path: str | Path) -> "ReplayBackend":
        return cls(read_measurement_csv(path))

    def measure(self, step: int, t_ns: float, theta: float, manifold: int | None) -> tuple[float, float, int]:
        if step not in self.rows:
            raise KeyError(f"no recorded measurement for step {step}")
        r = self.rows[step]
        if not math.isclose(r.t_ns, t_ns, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(f"step {step}: recorded t = {r.t_ns} ns but the schedule requires {t_ns} ns")
        if not math.isclose(r.theta_rad % TWO_PI, theta % TWO_PI, rel_tol=0, abs_tol=1e-9):
            warnings.warn(
                f"step {step}: recorded basis angle {r.theta_rad:.6f} differs from the adaptive angle {theta:.6f}",
                RuntimeWarning,
                stacklevel=2,
            )
        return r.p_hat, r.stderr, r.shots


def read_measurement_csv(path: str | Path) -> list[MeasurementRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MEASUREMENT_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(MEASUREMENT_COLUMNS)}")
        return [
            MeasurementRow(int(r["step"]), float(r["t_ns"]), float(r["theta_rad"]), float(r["p_hat"]),
                           float(r["stderr"]), int(r["shots"]))
            for r in reader
        ]


def write_measurement_csv(record: QpeRecord, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_COLUMNS)
        for s in record.steps:
            w.writerow([s.n, repr(s.t_ns), repr(s.theta), repr(s.p_hat), repr(s.stderr), s.shots])


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def run_adaptive_qpe(
    backend: MeasurementBackend,
    qpe_config: QpeConfig = QpeConfig(),
    manifold: int | None = None,
    provenance: Mapping | None = None,
    spin_id: int | None = None,
) -> QpeRecord:
    """Execute the N Ramsey steps sequentially and return the record."""
    record = QpeRecord([], qpe_config.f0, qpe_config.t_min, manifold, spin_id, dict(provenance or {}))
    theta = qpe_config.theta_1 % TWO_PI
    for n, t in enumerate(qpe_config.times(), start=1):
        try:
            p_hat, stderr, shots = backend.measure(n, float(t), theta, manifold)
        except Exception as exc:
            raise QpeBackendError(f"backend failed at step {n}: {exc}", record) from exc
        d = digit_decision(p_hat, stderr)
        record.steps.append(
            QpeStep(n, float(t), theta, float(p_hat), float(stderr), int(shots), d.k, d.confidence, d.tie,
                    digit_posterior(p_hat, shots))
        )
        theta = update_basis(theta, d.k)
    record.f_estimate = estimate_from_digits(record.digits, record.f0)
    return record


@dataclass
class FrequencyPair:
    """QPE results for the electron in ms = +1 and ms = -1."""

    spin_id: int
    plus: QpeRecord
    minus: QpeRecord
    convention: str = "negated"

    @property
    def f_ms_plus(self) -> float:
        return self.plus.f_value

    @property
    def f_ms_minus(self) -> float:
        return self.minus.f_value

    @property
    def alias_risk(self) -> bool:
        return self.plus.alias_risk or self.minus.alias_risk

    def branches(self) -> tuple[float, float]:
        """(plus-branch, minus-branch) frequencies under the pair's convention."""
        by_ms = {1: self.f_ms_plus, -1: self.f_ms_minus}
        out = {branch_of_manifold(ms, self.convention): f for ms, f in by_ms.items()}
        return out["plus"], out["minus"]

    @property
    def error(self) -> float:
        return max(self.plus.f_error, self.minus.f_error)

    def to_dict(self) -> dict:
        p, m = self.branches()
        return {
            "spin_id": self.spin_id,
            "f_ms_plus_khz": self.f_ms_plus,
            "f_ms_minus_khz": self.f_ms_minus,
            "f_plusbranch_khz": p,
            "f_minusbranch_khz": m,
            "error_khz": self.error,
            "alias_risk": self.alias_risk,
            "records": {"ms_plus": self.plus.to_dict(), "ms_minus": self.minus.to_dict()},
        }


def _apply_alias(record: QpeRecord, prior: float | None, qpe: QpeConfig) -> None:
    half = 0.5 * qpe.unambiguous_range
    ref = prior if prior is not None else record.f_estimate
    record.alias_risk = bool(ref > half)
    if prior is not None:
        record.f_unwrapped = unwrap_alias(record.f_estimate, prior, qpe.t_min)


def measure_frequency_pair(
    config: SystemConfig,
    spin_id: int,
    qpe_config: QpeConfig = QpeConfig(),
    seed: int | None = None,
    prior: Mapping[int, float] | None = None,
    noise: NoiseModel | None = None,
    model: str = "floquet",
    provenance: Mapping | None = None,
) -> FrequencyPair:
    """Run adaptive QPE with the electron in ms = +1 and in ms = -1.

    ``prior`` maps ms to a coarse frequency (e.g. from the rough fit). A
    prior or estimate above 1 / (2 t_min) raises the alias flag; with a
    prior, the estimate is moved to the alias f + m / t_min nearest to it.
    """
    index = [s.id for s in config.resolved_spins].index(spin_id)
    records = {}
    for j, ms in enumerate((1, -1)):
        backend = SimulatorBackend(config, spin_id, qpe_config, seed, noise, model, stream=1000 + 2 * index + j)
        prov = dict(provenance or {}, seed=seed)
        rec = run_adaptive_qpe(backend, qpe_config, ms, prov, spin_id)
        _apply_alias(rec, None if prior is None else prior.get(ms), qpe_config)
        records[ms] = rec
    return FrequencyPair(spin_id, records[1], records[-1], config.convention)


# ---------------------------------------------------------------------------
# Hyperfine refinement
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    azz: np.ndarray
    azx: np.ndarray
    azz_err: np.ndarray
    azx_err: np.ndarray
    bx: float
    bx_err: float
    identifiable: bool
    pinned: bool
    residuals: np.ndarray
    method: str
    spin_ids: list | None = None

    def to_dict(self) -> dict:
        ids = self.spin_ids or list(range(1, len(self.azz) + 1))
        return {
            "method": self.method,
            "bx_gauss": self.bx,
            "bx_err_gauss": self.bx_err,
            "bx_identifiable": self.identifiable,
            "bx_pinned": self.pinned,
            "max_abs_residual_khz": float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0,
            "spins": [
                {"spin_id": i, "azz_khz": float(a), "azz_err_khz": float(ae), "azx_khz": float(x),
                 "azx_err_khz": float(xe)}
                for i, a, ae, x, xe in zip(ids, self.azz, self.azz_err, self.azx, self.azx_err)
            ],
        }


def _zero_manifold_frequency(azz, azx, omega_n, bx, constants, bz, convention):
    """Leading transverse-field model of the ms = 0 precession frequency."""
    s = convention_sign(convention)
    wex = constants.gamma_e * bx
    wez = constants.gamma_e * bz
    d = constants.delta
    return omega_n - 2.0 * d * (s * azx) * wex / (d**2 - wez**2)


def _floquet_frequencies(azz, azx, omega_n, bx, constants, bz, convention):
    s = convention_sign(convention)
    out = np.empty((len(azz), 3))
    for i, (a, x, wn) in enumerate(zip(azz, azx, omega_n)):
        c = PhysicalConstants(constants.delta, constants.gamma_e, wn / bz)
        h = floquet_hamiltonians(c, MagneticField(bz, bx), HyperfineTensor.weak_coupling(s * a, s * x))
        f = h.frequencies()
        by_branch = {branch_of_manifold(ms, convention): f[ms] for ms in (1, -1)}
        out[i] = by_branch["plus"], by_branch["minus"], f[0]
    return out


def refine_hyperfine(
    pairs: Sequence[Sequence[float]],
    omega_n,
    bx_prior_bound: float = 2.5,
    *,
    errors: Sequence[Sequence[float]] | None = None,
    zero_frequencies: Sequence[float] | None = None,
    zero_errors: Sequence[float] | None = None,
    forward_model: str = "perturbative",
    constants: PhysicalConstants = PhysicalConstants(),
    bz: float = DEFAULT_BZ_G,
    convention: str = "negated",
    bx: float | None = None,
    spin_ids: Sequence | None = None,
) -> RefineResult:
    """Joint least-squares fit of per-spin (azz, azx) and one shared Bx.

    ``pairs`` holds (plus-branch, minus-branch) frequencies in kHz. The
    forward model is either the secular frequencies with the first-order
    transverse-field shift (``"perturbative"``) or the Floquet Hamiltonian gaps of a
    traceless tensor (``"floquet"``). Bx is bounded by ``bx_prior_bound``
    and carries a weak zero-mean prior of the same width, which fixes it
    when the data cannot (pairs alone leave one direction unconstrained);
    ``identifiable`` reports whether the data alone determine it. Optional
    ms = 0 frequencies make Bx identifiable. A fixed ``bx`` removes it from
    the fit. With a single spin and no ms = 0 data the per-spin inversion
    is used instead.
    """
    pairs = np.asarray(pairs, float).reshape(-1, 2)
    n = pairs.shape[0]
    if n == 0:
        raise ValueError("at least one frequency pair is required")
    wn = np.broadcast_to(np.asarray(omega_n, float), (n,)).copy()
    sig = np.ones((n, 2)) if errors is None else np.maximum(np.asarray(errors, float).reshape(n, 2), 1e-6)
    zf = None if zero_frequencies is None else np.asarray(zero_frequencies, float)
    zs = None
    if zf is not None:
        zs = np.ones(n) if zero_errors is None else np.maximum(np.asarray(zero_errors, float), 1e-6)
    if forward_model not in ("perturbative", "floquet"):
        raise ValueError(f"unknown forward model {forward_model!r}")

    init = np.array([invert_hyperfine(p, m, w, constants=constants, bz=bz, convention=convention)
                     for (p, m), w in zip(_clamp_pairs(pairs, wn), wn)])

    if n == 1 and zf is None:
        b = 0.0 if bx is None else float(bx)
        azz, azx = invert_hyperfine(pairs[0, 0], pairs[0, 1], wn[0], b or None, constants=constants, bz=bz,
                                    convention=convention)
        model = np.array(branch_frequencies(azz, azx, wn[0], b, constants, bz, convention))
        return RefineResult(np.array([azz]), np.array([azx]), sig[0, :1] * 2, sig[0, :1] * 2, b, 0.0,
                            bx is not None, False, model - pairs[0], "per-spin inversion",
                            list(spin_ids) if spin_ids is not None else None)

    fit_bx = bx is None

    def unpack(x):
        hf = x[: 2 * n].reshape(n, 2)
        return hf[:, 0], hf[:, 1], (x[-1] if fit_bx else float(bx))

    def forward(x):
        azz, azx, b = unpack(x)
        if forward_model == "perturbative":
            p, m = branch_frequencies(azz, azx, wn, b, constants, bz, convention)
            z = _zero_manifold_frequency(azz, azx, wn, b, constants, bz, convention) if zf is not None else None
        else:
            f = _floquet_frequencies(azz, azx, wn, b, constants, bz, convention)
            p, m, z = f[:, 0], f[:, 1], f[:, 2]
        return np.asarray(p), np.asarray(m), z

    def data_resid(x):
        p, m, z = forward(x)
        r = [((p - pairs[:, 0]) / sig[:, 0]), ((m - pairs[:, 1]) / sig[:, 1])]
        if zf is not None:
            r.append((z - zf) / zs)
        return np.concatenate(r)

    def resid(x):
        r = data_resid(x)
        if fit_bx:
            r = np.append(r, x[-1] / bx_prior_bound)
        return r

    x0 = init.ravel()
    lo = np.tile([-np.inf, 0.0], n)
    hi = np.full(2 * n, np.inf)
    if fit_bx:
        x0 = np.append(x0, 0.0)
        lo = np.append(lo, -bx_prior_bound)
        hi = np.append(hi, bx_prior_bound)
    x0 = np.clip(x0, lo + 1e-12 * (np.isfinite(lo)), hi)
    res = least_squares(resid, x0, bounds=(lo, hi), method="trf", x_scale="jac", xtol=1e-14, ftol=1e-14,
                        gtol=1e-14, max_nfev=2000)
    x = res.x
    azz, azx, b = unpack(x)
    jac = res.jac
    try:
        cov = np.linalg.pinv(jac.T @ jac)
        err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        err = np.full(x.size, np.inf)
    identifiable = not fit_bx
    pinned = False
    if fit_bx:
        jd = jac[:-1]
        sv = np.linalg.svd(jd, compute_uv=False)
        identifiable = bool(sv.size == x.size and sv[-1] > 1e-8 * sv[0])
        pinned = bool(abs(abs(b) - bx_prior_bound) < 1e-3 * bx_prior_bound)
        if pinned:
            warnings.warn(f"fitted Bx = {b:.4f} G is pinned at the {bx_prior_bound} G bound (model mismatch)",
                          RuntimeWarning, stacklevel=2)
    p, m, _ = forward(x)
    residuals = np.column_stack([p - pairs[:, 0], m - pairs[:, 1]]).ravel()
    hf_err = err[: 2 * n].reshape(n, 2)
    return RefineResult(
        azz=np.asarray(azz, float),
        azx=np.asarray(azx, float),
        azz_err=hf_err[:, 0],
        azx_err=hf_err[:, 1],
        bx=float(b),
        bx_err=float(err[-1]) if fit_bx else 0.0,
        identifiable=identifiable,
        pinned=pinned,
        residuals=residuals,
        method=f"joint least squares ({forward_model})",
        spin_ids=list(spin_ids) if spin_ids is not None else None,
    )


def _clamp_pairs(pairs: np.ndarray, wn: np.ndarray) -> np.ndarray:
    """Nudge pairs that admit no real azx onto the feasible boundary for initialisation."""
    out = pairs.copy()
    for i, ((p, m), w) in enumerate(zip(pairs, wn)):
        azz = (p**2 - m**2) / (4 * w)
        if p**2 - (azz + w) ** 2 < 0:
            # |p - m| <= 2 wn is implied by feasibility; move to azx = 0
            out[i, 0] = abs(azz + w)
            out[i, 1] = abs(azz - w)
    return out
