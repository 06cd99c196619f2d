"""Dynamical-decoupling spectroscopy: synthetic traces, dips and rough fits.

A nucleus that sees the field b0 = (0, 0, wn) with the electron in ms = 0 and
b1 with the electron in ms = -1 produces coherence dips at the half
intervals tau_k = (2k - 1) / (2 (|b0| + |b1|)). :func:`rough_fit` peels
spins off a trace one at a time: the deepest remaining dip fixes |b1| for
each candidate harmonic k, a pruned search over the transverse coupling
picks the candidate that best explains the whole trace, and a local
least-squares refinement polishes it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from . import _su2
from .dynamics import (
    NoiseModel,
    apply_readout_model,
    coherence_curve,
    coherence_with_pulse_errors,
    branch_fields,
    dd_decay,
    invert_readout,
    rng_stream,
    sample_shots,
    survival_probability,
)
from .parallel import concat, map_chunks
from .spin_model import SystemConfig, convention_sign
from .units import phase

AZZ_BOX = (-700.0, 700.0)
AZX_BOX = (0.0, 250.0)


@dataclass
class SpectroscopyTrace:
    """Coherence (or |0> probability) versus the CPMG half interval."""

    tau: np.ndarray
    coherence: np.ndarray
    n_pulses: int = 32
    kind: str = "coherence"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tau = np.asarray(self.tau, dtype=float)
        self.coherence = np.asarray(self.coherence, dtype=float)
        if self.tau.shape != self.coherence.shape or self.tau.ndim != 1:
            raise ValueError("tau and coherence must be 1-d arrays of equal length")
        if self.tau.size > 1 and np.any(np.diff(self.tau) <= 0):
            raise ValueError("tau grid must be strictly increasing")
        lo, hi = (-1.0, 1.0) if self.kind == "coherence" else (0.0, 1.0)
        if self.kind not in ("coherence", "probability"):
            raise ValueError(f"unknown trace kind {self.kind!r}")
        if self.coherence.size and (self.coherence.min() < lo - 1e-12 or self.coherence.max() > hi + 1e-12):
            raise ValueError(f"{self.kind} values must lie in [{lo}, {hi}]")

    def as_coherence(self) -> np.ndarray:
        if self.kind == "coherence":
            return self.coherence
        return 2.0 * self.coherence - 1.0

    @property
    def step(self) -> float:
        return float(np.median(np.diff(self.tau))) if self.tau.size > 1 else 0.0


@dataclass(frozen=True)
class Dip:
    tau_center: float
    depth: float
    width: float
    harmonic: int | None = None


@dataclass(frozen=True)
class RoughEstimate:
    azz: float
    azz_err: float
    azx: float
    azx_err: float
    residual: float
    harmonic: int
    unresolvable: bool = False

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# Trace generation and IO
# ---------------------------------------------------------------------------


def tau_grid(tau_min: float, tau_max: float, tau_step: float) -> np.ndarray:
    if not 0 < tau_min < tau_max:
        raise ValueError("require 0 < tau_min < tau_max")
    if tau_step <= 0:
        raise ValueError("tau_step must be positive")
    n = int(math.floor((tau_max - tau_min) / tau_step + 1e-9)) + 1
    return tau_min + tau_step * np.arange(n)


def generate_trace(
    config: SystemConfig,
    tau_min: float,
    tau_max: float,
    tau_step: float,
    n_pulses: int = 32,
    noise: NoiseModel | None = None,
    seed: int | None = None,
    model: str = "secular",
    pulse_width: float = 0.0,
    n_patterns: int = 64,
) -> SpectroscopyTrace:
    """CPMG-N spectrum of a config on a regular tau grid (ns).

    Without ``noise`` the exact coherence is returned. With ``noise`` the
    survival probability is passed through the readout model, sampled with
    ``noise.shots`` shots, corrected for the known readout fidelities and
    converted back to a coherence estimate.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    taus = tau_grid(tau_min, tau_max, tau_step)
    duration = n_pulses * (2 * taus + pulse_width)
    rng = rng_stream(seed, 0)
    if noise is not None and noise.pi_pulse_error > 0:
        from .dynamics import PulseSequence

        b0, b1 = branch_fields(config, model)
        seq = PulseSequence(n_pulses, float(taus[0]), pulse_width=pulse_width)
        m = coherence_with_pulse_errors(b0, b1, seq, taus, noise.pi_pulse_error, rng, n_patterns)
    else:
        m = coherence_curve(config, n_pulses, taus, pulse_width, model)
    m = m * dd_decay(duration, noise)
    if noise is not None:
        p_obs = apply_readout_model(survival_probability(m), noise)
        p_hat, _ = sample_shots(p_obs, noise.shots, rng)
        m = np.clip(2.0 * invert_readout(p_hat, noise) - 1.0, -1.0, 1.0)
    meta = {"omega_n": config.omega_n, "convention": config.convention, "seed": seed,
            "pulse_width": pulse_width}
    return SpectroscopyTrace(taus, m, n_pulses, "coherence", meta)


def write_trace_csv(trace: SpectroscopyTrace, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        meta = dict(trace.metadata, n_pulses=trace.n_pulses, kind=trace.kind)
        for key in sorted(meta):
            fh.write(f"# {key}: {meta[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tau_ns", "coherence"])
        for t, c in zip(trace.tau, trace.coherence):
            writer.writerow([repr(float(t)), repr(float(c))])


def _parse_meta(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return None if value == "None" else value


def read_trace_csv(path: str | Path) -> SpectroscopyTrace:
    meta: dict = {}
    rows: list[list[str]] = []
    with Path(path).open(newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = _parse_meta(value.strip())
            elif line.strip():
                lines.append(line)
        rows = list(csv.reader(lines))
    if not rows or [c.strip() for c in rows[0]] != ["tau_ns", "coherence"]:
        raise ValueError(f"{path}: header row 'tau_ns,coherence' is required")
    data = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, 2)
    n_pulses = int(meta.pop("n_pulses", 32))
    kind = str(meta.pop("kind", "coherence"))
    return SpectroscopyTrace(data[:, 0], data[:, 1], n_pulses, kind, meta)


# ---------------------------------------------------------------------------
# Dips
# ---------------------------------------------------------------------------


def _harmonic_guess(tau: float, omega_n: float | None) -> int | None:
    if not omega_n:
        return None
    # weak-coupling guess |b1| ~ wn
    return max(1, int(round(2.0 * tau * 1e-6 * omega_n + 0.5)))


def detect_dips(
    trace: SpectroscopyTrace,
    threshold: float = 0.9,
    min_separation: float = 100.0,
    values: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> list[Dip]:
    """Local minima below ``threshold``, merged within ``min_separation`` ns.

    Dip centres are refined by a parabola through the minimum and its two
    neighbours. Returned dips are sorted deepest first.
    """
    y = trace.as_coherence() if values is None else np.asarray(values, float)
    x = trace.tau
    n = y.size
    if n == 0:
        return []
    ok = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    candidates = []
    for i in range(n):
        if not ok[i] or y[i] >= threshold:
            continue
        left = y[i - 1] if i > 0 and ok[i - 1] else np.inf
        right = y[i + 1] if i < n - 1 and ok[i + 1] else np.inf
        if y[i] <= left and y[i] < right or (y[i] < left and y[i] <= right):
            candidates.append(i)
    candidates.sort(key=lambda i: y[i])
    kept: list[int] = []
    for i in candidates:
        if all(abs(x[i] - x[j]) >= min_separation for j in kept):
            kept.append(i)
    omega_n = trace.metadata.get("omega_n")
    dips = []
    for i in kept:
        center, value = x[i], y[i]
        if 0 < i < n - 1 and np.isfinite(y[i - 1]) and np.isfinite(y[i + 1]) and ok[i - 1] and ok[i + 1]:
            y0, y1, y2 = y[i - 1], y[i], y[i + 1]
            h = 0.5 * (x[i + 1] - x[i - 1])
            denom = y0 - 2 * y1 + y2
            if denom > 0 and abs(x[i + 1] - x[i] - (x[i] - x[i - 1])) < 1e-9 * max(h, 1.0):
                shift = 0.5 * (y0 - y2) / denom
                center = x[i] + shift * h
                value = y1 - 0.25 * (y0 - y2) * shift
        half = 0.5 * (1.0 + y[i])
        lo = i
        while lo > 0 and ok[lo - 1] and y[lo - 1] < half:
            lo -= 1
        hi = i
        while hi < n - 1 and ok[hi + 1] and y[hi + 1] < half:
            hi += 1
        width = float(x[hi] - x[lo]) if hi > lo else float(trace.step)
        depth = float(np.clip(1.0 - value, 0.0, 2.0))
        dips.append(Dip(float(center), depth, width, _harmonic_guess(center, omega_n)))
    dips.sort(key=lambda d: -d.depth)
    return dips


# ---------------------------------------------------------------------------
# Rough fit
# ---------------------------------------------------------------------------


def single_spin_coherence(b1, omega_n: float, n_pulses: int, taus: np.ndarray) -> np.ndarray:
    """Coherence of candidate spins with ms=-1 field ``b1`` (shape (C, 3)) on ``taus``.

    The ms = 0 field is (0, 0, omega_n). For even ``n_pulses`` the closed form
    M = 1 - (1 - n0.n1) sin^2(N psi / 2) is used, with
    cos psi = cos a cos b - m_z sin a sin b, a = 2 pi wn tau, b = 2 pi |b1| tau
    and m_z the ms=-1 axis z component. Returns shape (C, T).
    """
    b1 = np.asarray(b1, float).reshape(-1, 3)
    taus = np.asarray(taus, float)
    if n_pulses % 2:
        from .dynamics import cpmg_quaternions

        b0 = np.array([0.0, 0.0, omega_n])
        q0, q1 = cpmg_quaternions(b0[None, None, :], b1[:, None, :], n_pulses, taus[None, :])
        return _su2.dot(q0, q1)
    f1 = np.linalg.norm(b1, axis=1)[:, None]
    safe = np.where(f1 > 0, f1, 1.0)
    mz = np.where(f1 > 0, b1[:, 2:3] / safe, 1.0)
    a = phase(omega_n, taus)[None, :]
    b = phase(f1, taus[None, :])
    ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
    cpsi = ca * cb - mz * sa * sb
    den = 1.0 + cpsi
    one_minus = (1.0 - mz**2) * (1.0 - ca) * (1.0 - cb) / np.where(den > 1e-300, den, 1.0)
    psi = np.arccos(np.clip(cpsi, -1.0, 1.0))
    return 1.0 - one_minus * np.sin(0.5 * n_pulses * psi) ** 2


def _to_hyperfine(b1x: float, b1z: float, omega_n: float, convention: str) -> tuple[float, float]:
    # ms=-1 field of a quoted tensor A is (-s*azx, -s*azy, wn - s*azz)
    s = convention_sign(convention)
    return (omega_n - b1z) / s, abs(b1x)


def _rss(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.dot(d, d))


def rough_fit(
    trace: SpectroscopyTrace,
    max_spins: int = 10,
    omega_n: float | None = None,
    convention: str | None = None,
    threshold: float = 0.9,
    min_separation: float = 100.0,
    azx_step: float = 5.0,
    min_improvement: float = 0.01,
) -> list[RoughEstimate]:
    """Greedy peel of single-spin signals from a coherence trace.

    Each iteration looks at the trace divided by the signal of the spins
    already fitted (points where that signal is small are masked) and takes
    the earliest dip whose depth is within 30 % of the deepest one. For every
    harmonic k the dip could belong to, |b1| is fixed by tau_k and the
    transverse coupling is scanned on ``azx_step``. Candidates are scored by
    the squared residual of the trace against the product of their signal
    and the fitted spins' signals, first on the points near structure and
    then, for the best few, on the full grid. The winner is refined by least
    squares on (azz, azx). Peeling stops after ``max_spins`` spins or when
    the residual improves by less than ``min_improvement`` (relative).
    """
    omega_n = float(trace.metadata.get("omega_n") if omega_n is None else omega_n)
    convention = str(trace.metadata.get("convention", "negated") if convention is None else convention)
    taus = trace.tau + 0.5 * float(trace.metadata.get("pulse_width") or 0.0)
    data = trace.as_coherence()
    n_pulses = trace.n_pulses
    step = trace.step
    model = np.ones_like(data)
    rss = _rss(data, model)
    estimates: list[RoughEstimate] = []
    fields: list[np.ndarray] = []
    harmonics: list[int] = []
    flags: list[bool] = []
    history: list[float] = [rss]
    f1_max = math.hypot(AZX_BOX[1], max(abs(AZZ_BOX[0] + omega_n), abs(AZZ_BOX[1] + omega_n)))
    tried: list[float] = []
    while len(estimates) < max_spins and rss > 0:
        safe = np.abs(model) > 0.5
        peeled = np.where(safe, data / np.where(safe, model, 1.0), 1.0)
        dips = [d for d in detect_dips(trace, threshold, min_separation, peeled, safe)
                if all(abs(d.tau_center - t) > 0.5 * step for t in tried)]
        if not dips:
            break
        deep = [d for d in dips if d.depth >= 0.7 * dips[0].depth]
        dip = min(deep, key=lambda d: d.tau_center)
        tried.append(dip.tau_center)
        best = _search_dip(dip, data, model, taus, omega_n, n_pulses, step, f1_max, azx_step)
        if best is None:
            continue
        b1, k, ambiguous = best
        b1, jac, new_rss = _refine(b1, data, model, taus, omega_n, n_pulses)
        if rss - new_rss < min_improvement * rss:
            continue
        fields.append(b1)
        harmonics.append(k)
        flags.append(ambiguous)
        fields, jac, rss = _joint_refine(fields, data, taus, omega_n, n_pulses)
        model = _product_signal(fields, omega_n, n_pulses, taus)
        errs = _uncertainties(jac, rss, data.size, 2 * len(fields)).reshape(-1, 2)
        estimates = []
        for b, e, kk, fl in zip(fields, errs, harmonics, flags):
            azz, azx = _to_hyperfine(b[0], b[2], omega_n, convention)
            estimates.append(RoughEstimate(float(azz), float(e[1]), float(azx), float(e[0]), rss, kk, fl))
        history.append(rss)
        tried = []
    return _flag_overlaps(estimates, fields, omega_n, taus[-1] if taus.size else 0.0, step)


def _box(omega_n: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Bounds on (b1x, b1z) per spin equivalent to the (azz, azx) search box."""
    lo = np.tile([AZX_BOX[0], AZZ_BOX[0] + omega_n], n)
    hi = np.tile([AZX_BOX[1], AZZ_BOX[1] + omega_n], n)
    return lo, hi


def _bounded_lsq(resid, x0, lo, hi):
    """Unconstrained LM when it stays inside the box, else trust-region within it."""
    opts = dict(x_scale=10.0, xtol=1e-12, ftol=1e-12)
    res = least_squares(resid, x0, method="lm", **opts)
    if res.success and np.all(res.x >= lo) and np.all(res.x <= hi):
        return res
    return least_squares(resid, x0, bounds=(lo, hi), method="trf", **opts)


def _product_signal(fields, omega_n, n_pulses, taus) -> np.ndarray:
    if not fields:
        return np.ones_like(taus)
    return np.prod(single_spin_coherence(np.array(fields), omega_n, n_pulses, taus), axis=0)


def _joint_refine(fields, data, taus, omega_n, n_pulses):
    """Least squares over all peeled spins' (b1x, b1z); never increases the residual."""
    x0 = np.array([[b[0], b[2]] for b in fields]).ravel()

    def to_fields(x):
        x = x.reshape(-1, 2)
        return [np.array([abs(p[0]), 0.0, p[1]]) for p in x]

    def resid(x):
        return _product_signal(to_fields(x), omega_n, n_pulses, taus) - data

    lo, hi = _box(omega_n, len(fields))
    x0 = np.clip(x0, lo, hi)
    r0 = _rss(resid(x0), 0.0)
    res = _bounded_lsq(resid, x0, lo, hi)
    if res.cost * 2 <= r0:
        return to_fields(res.x), res.jac, float(2 * res.cost)
    return to_fields(x0), None, r0


def _structure_points(data: np.ndarray, model: np.ndarray, stride: int = 8, pad: int = 2) -> np.ndarray:
    """Indices where the trace departs from the current model, plus a sparse subsample."""
    dev = np.abs(data - model) > 0.02
    idx = np.flatnonzero(dev)
    keep = np.zeros(data.size, bool)
    for off in range(-pad, pad + 1):
        j = np.clip(idx + off, 0, data.size - 1)
        keep[j] = True
    keep[::stride] = True
    return np.flatnonzero(keep)


def _search_dip(dip, data, model, taus, omega_n, n_pulses, step, f1_max, azx_step, n_keep=64):
    tau_d = dip.tau_center * 1e-6  # ms
    if tau_d <= 0:
        return None
    k_max = int(math.floor(((f1_max + omega_n) * 2 * tau_d + 1) / 2))
    azx_grid = np.arange(azx_step, AZX_BOX[1] + 1e-9, azx_step)
    cands = []
    meta = []
    for k in range(1, k_max + 1):
        f1 = (2 * k - 1) / (2 * tau_d) - omega_n
        if f1 <= 0:
            continue
        band = (2 * k - 1) * step * 1e-6 / (2 * tau_d**2)
        for df in (-0.5 * band, 0.0, 0.5 * band):
            ff = f1 + df
            ax = azx_grid[azx_grid < ff]
            if ax.size == 0:
                continue
            bz = np.sqrt(ff**2 - ax**2)
            for sgn in (1.0, -1.0):
                azz_equiv = sgn * bz - omega_n
                ok = (azz_equiv >= AZZ_BOX[0]) & (azz_equiv <= AZZ_BOX[1])
                if not np.any(ok):
                    continue
                c = np.column_stack([ax[ok], np.zeros(ok.sum()), sgn * bz[ok]])
                cands.append(c)
                meta.extend([k] * int(ok.sum()))
    if not cands:
        return None
    cands = np.concatenate(cands)
    meta = np.array(meta)

    def scorer(points: np.ndarray, pool: np.ndarray):
        d, m, t = data[points], model[points], taus[points]

        def score(s: slice) -> np.ndarray:
            sig = single_spin_coherence(pool[s], omega_n, n_pulses, t)
            r = d[None, :] - sig * m[None, :]
            return np.einsum("ct,ct->c", r, r)

        return concat(map_chunks(score, pool.shape[0], max(1, 4_000_000 // max(1, t.size))))

    pts = _structure_points(data, model)
    coarse = scorer(pts, cands)
    top = np.argsort(coarse)[:n_keep]
    fine = scorer(np.arange(data.size), cands[top])
    order = top[np.argsort(fine)]
    scores = dict(zip(top, fine))
    i = order[0]
    ambiguous = False
    for j in order[1:]:
        if meta[j] != meta[i]:
            ambiguous = scores[j] - scores[i] < 1e-3 * max(scores[i], 1e-12)
            break
    return cands[i], int(meta[i]), bool(ambiguous)


def _refine(b1, data, model, taus, omega_n, n_pulses):
    def resid(p):
        b = np.array([p[0], 0.0, p[1]])
        return single_spin_coherence(b, omega_n, n_pulses, taus)[0] * model - data

    lo, hi = _box(omega_n, 1)
    x0 = np.clip(np.array([b1[0], b1[2]]), lo, hi)
    res = _bounded_lsq(resid, x0, lo, hi)
    x = res.x
    if _rss(resid(x), 0.0) > _rss(resid(x0), 0.0):
        x = x0
    b = np.array([abs(x[0]), 0.0, x[1]])
    # jacobian w.r.t. (azx, azz); d(azz)/d(b1z) = -1/s only flips a sign
    jac = res.jac if x is res.x else None
    return b, jac, _rss(resid(x), 0.0)


def _uncertainties(jac, rss, n, n_par=2) -> np.ndarray:
    floor = 1e-3
    if jac is None:
        return np.full(n_par, floor)
    dof = max(n - n_par, 1)
    s2 = max(rss / dof, 1e-16)
    try:
        cov = s2 * np.linalg.inv(jac.T @ jac)
        err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        err = np.full(n_par, np.inf)
    return np.maximum(err, floor)


def _flag_overlaps(estimates, fields, omega_n, tau_max, step):
    if len(estimates) < 2:
        return estimates
    # two families are indistinguishable when their resonance sums differ by
    # less than what the grid resolves at the longest tau
    sums = [np.linalg.norm(f) + omega_n for f in fields]
    tau_ms = max(tau_max, 1.0) * 1e-6
    out = list(estimates)
    for i in range(len(sums)):
        for j in range(i + 1, len(sums)):
            tol = sums[i] * step / max(tau_max, 1.0)
            if abs(sums[i] - sums[j]) < max(tol, 1e-9 / tau_ms):
                out[i] = _replace_flag(out[i])
                out[j] = _replace_flag(out[j])
    return out


def _replace_flag(e: RoughEstimate) -> RoughEstimate:
    from dataclasses import replace

    return replace(e, unresolvable=True)
