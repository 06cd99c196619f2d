"""Command-line pipeline: spectroscopy, rough fit, QPE, refinement, gates, benchmark."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, LoadedConfig, canonical_hash, load_config
from .dynamics import PulseSequence
from .gates import (
    GateKind,
    GateSearch,
    GateSpec,
    benchmark_gate_decay,
    evaluate_sequence,
    optimize_gate,
)
from .qpe import (
    QpeConfig,
    ReplayBackend,
    measure_frequency_pair,
    refine_hyperfine,
    run_adaptive_qpe,
)
from .spectroscopy import generate_trace, read_trace_csv, rough_fit, write_trace_csv
from .spin_model import branch_frequencies, manifold_of_branch

log = logging.getLogger("nvhl")

COMMANDS = ("spectroscopy", "fit", "qpe", "refine", "design-gate", "benchmark", "full")
EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD = 0, 1, 2

OUTPUT_NAMES = {
    "spectroscopy": "trace.csv",
    "fit": "rough_fit.json",
    "qpe": "qpe_records.json",
    "refine": "hyperfine.json",
    "design-gate": "gate_reports.json",
    "benchmark": "decay_fits.json",
}
STAGE_ORDER = ("spectroscopy", "fit", "qpe", "refine", "design-gate", "benchmark")


@dataclass
class RunManifest:
    config_path: str | None
    config_sha256: str
    command: str
    seed: int
    tool_version: str
    outputs: list[str] = field(default_factory=list)
    timings_s: dict[str, float] = field(default_factory=dict)
    status: str = "running"
    error: str | None = None
    threshold_failures: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if self.status == "failed":
            return EXIT_ERROR
        return EXIT_THRESHOLD if self.threshold_failures else EXIT_OK

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"exit_code": self.exit_code}


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_plain) + "\n")


class _Run:
    def __init__(self, loaded: LoadedConfig, seed: int, out: Path, manifest: RunManifest):
        self.loaded = loaded
        self.cfg = loaded.system
        self.seed = seed
        self.out = out
        self.manifest = manifest
        self.header = {
            "config_sha256": loaded.sha256,
            "options_sha256": canonical_hash(loaded.stages),
            "seed": seed,
            "tool_version": __version__,
        }
        self.results: dict[str, object] = {}

    def opt(self, name: str) -> dict:
        return self.loaded.stages[name]

    def write_json(self, stage: str, payload) -> None:
        path = self.out / OUTPUT_NAMES[stage]
        _dump(dict(self.header, **{"result": payload}), path)
        self._record(path)

    def _record(self, path: Path) -> None:
        if path.name not in self.manifest.outputs:
            self.manifest.outputs.append(path.name)

    def _read(self, stage: str):
        path = self.out / OUTPUT_NAMES[stage]
        if not path.is_file():
            return None
        return json.loads(path.read_text())["result"]

    # -- stages -------------------------------------------------------------

    def spectroscopy(self):
        o = self.opt("spectroscopy")
        trace = generate_trace(
            self.cfg, o["tau_min_ns"], o["tau_max_ns"], o["tau_step_ns"], o["n_pulses"],
            noise=self.cfg.noise if o["noisy"] else None, seed=self.seed, model=o["model"],
        )
        trace.metadata.update({"config_sha256": self.loaded.sha256})
        path = self.out / OUTPUT_NAMES["spectroscopy"]
        write_trace_csv(trace, path)
        self._record(path)
        self.results["spectroscopy"] = trace
        return trace

    def fit(self):
        trace = self.results.get("spectroscopy")
        path = self.out / OUTPUT_NAMES["spectroscopy"]
        if trace is None:
            trace = read_trace_csv(path) if path.is_file() else self.spectroscopy()
        o = self.opt("rough_fit")
        est = rough_fit(trace, max_spins=o["max_spins"], omega_n=self.cfg.omega_n, convention=self.cfg.convention,
                        threshold=o["threshold"], min_separation=o["min_separation_ns"])
        self.results["fit"] = est
        self.write_json("fit", [e.to_dict() for e in est])
        return est

    def _qpe_config(self) -> QpeConfig:
        o = self.opt("qpe")
        return QpeConfig(t_min=o["t_min_ns"], n_steps=o["n_steps"], shots=o["shots"], contrast=o["contrast"],
                         use_polarization=o["use_polarization"], use_dephasing=o["use_dephasing"],
                         use_readout=o["use_readout"])

    def qpe(self):
        q = self._qpe_config()
        o = self.opt("qpe")
        if o.get("replay"):
            path = Path(o["replay"])
            if not path.is_absolute() and self.loaded.source:
                path = Path(self.loaded.source).parent / path
            rec = run_adaptive_qpe(ReplayBackend.from_csv(path), q, provenance={"replay": path.name})
            payload = {"replay": rec.to_dict(), "pairs": []}
            self.results["qpe"] = []
            self.write_json("qpe", payload)
            return []
        pairs = []
        for s in self.cfg.resolved_spins:
            azz, azx = s.hyperfine.secular()
            plus, minus = branch_frequencies(azz, azx, self.cfg.omega_n, self.cfg.field.bx, self.cfg.constants,
                                             self.cfg.field.bz, self.cfg.convention)
            prior = {manifold_of_branch("plus", self.cfg.convention): float(abs(plus)),
                     manifold_of_branch("minus", self.cfg.convention): float(abs(minus))}
            pairs.append(measure_frequency_pair(self.cfg, s.id, q, self.seed, prior, self.cfg.noise,
                                                provenance={"source": "simulator"}))
        self.results["qpe"] = pairs
        self.write_json("qpe", {"pairs": [p.to_dict() for p in pairs]})
        return pairs

    def refine(self):
        pairs = self.results.get("qpe")
        if pairs is None:
            stored = self._read("qpe")
            pairs = stored["pairs"] if stored is not None else [p.to_dict() for p in self.qpe()]
        else:
            pairs = [p.to_dict() for p in pairs]
        if not pairs:
            raise ValueError("refinement needs frequency pairs for ms = +1 and ms = -1")
        ids = [p["spin_id"] for p in pairs]
        freqs = [(p["f_plusbranch_khz"], p["f_minusbranch_khz"]) for p in pairs]
        errs = [(p["error_khz"], p["error_khz"]) for p in pairs]
        # the frequencies come from the simulator, whose Larmor frequency is gamma_n Bz
        omega = np.full(len(ids), self.cfg.omega_n)
        o = self.opt("refine")
        res = refine_hyperfine(freqs, omega, o["bx_prior_bound_g"], errors=errs,
                               forward_model=o["forward_model"], constants=self.cfg.constants,
                               bz=self.cfg.field.bz, convention=self.cfg.convention, spin_ids=ids)
        th = self.opt("thresholds")
        out = res.to_dict()
        for entry in out["spins"]:
            nominal = self.cfg.spin(entry["spin_id"]).hyperfine.secular()
            entry["azz_deviation_khz"] = entry["azz_khz"] - nominal[0]
            entry["azx_deviation_khz"] = entry["azx_khz"] - nominal[1]
            ok = abs(entry["azz_deviation_khz"]) <= th["azz_khz"] and abs(entry["azx_deviation_khz"]) <= th["azx_khz"]
            entry["within_tolerance"] = bool(ok)
            if not ok:
                self.manifest.threshold_failures.append(f"refine: spin {entry['spin_id']} outside tolerance")
        out["tolerance_khz"] = {"azz": th["azz_khz"], "azx": th["azx_khz"]}
        self.results["refine"] = res
        self.write_json("refine", out)
        return res

    def _search(self) -> GateSearch:
        o = self.opt("gates")
        return GateSearch(n_range=tuple(o["n_range"]), tau_range=tuple(o["tau_range_ns"]), tau_step=o["tau_step_ns"],
                          lam=o["lambda"], mu=o["mu"], cost_ceiling=o["cost_ceiling"])

    def design_gate(self):
        search = self._search()
        reports = []
        limit = self.opt("thresholds")["gate_infidelity"]
        for t in self.opt("gates")["targets"]:
            rep = optimize_gate(GateSpec(t["kind"], t["spin"]), self.cfg, search)
            reports.append(rep)
            if rep.target_infidelity > limit:
                self.manifest.threshold_failures.append(
                    f"design-gate: {t['kind']} on spin {t['spin']} infidelity {rep.target_infidelity:.3g} > {limit:g}")
        self.results["design-gate"] = reports
        self.write_json("design-gate", [r.to_dict() for r in reports])
        return reports

    def benchmark(self):
        reports = self.results.get("design-gate")
        if reports is None:
            stored = self._read("design-gate")
            if stored is None:
                reports = self.design_gate()
            else:
                reports = [evaluate_sequence(PulseSequence(d["n_pulses"], d["tau_ns"], pulse_width=d["pulse_width_ns"]),
                                             self.cfg, d["target_spin"], d["kind"]) for d in stored]
        o = self.opt("benchmark")
        fits = []
        for rep in reports:
            preps = o["electron_preps"] or None
            if preps and rep.spec.kind is not GateKind.CONTROLLED_X_HALF_PI:
                preps = [p for p in preps if p != "+"] or None
            fit = benchmark_gate_decay(rep, self.cfg, m_max=o["m_max"], electron_prep=preps,
                                       depolarizing=o["depolarizing"])
            fits.append({"kind": rep.spec.kind.value, "target_spin": rep.spec.target_spin, **fit.to_dict()})
        self.results["benchmark"] = fits
        self.write_json("benchmark", fits)
        return fits


def _summary(run: _Run) -> dict:
    s: dict = {}
    if "refine" in run.results:
        r = run.results["refine"]
        s["refine"] = {"bx_gauss": r.bx, "max_abs_residual_khz": float(np.max(np.abs(r.residuals)))}
    if "design-gate" in run.results:
        s["gates"] = [{"kind": g.spec.kind.value, "spin": g.spec.target_spin, "infidelity": g.target_infidelity,
                       "max_crosstalk": g.max_crosstalk, "duration_ns": g.duration}
                      for g in run.results["design-gate"]]
    if "benchmark" in run.results:
        s["benchmark"] = [{"kind": f["kind"], "spin": f["target_spin"], "f_gate": f["f_gate"],
                           "f_init": f["f_init"]} for f in run.results["benchmark"]]
    if "fit" in run.results:
        s["rough_fit"] = [e.to_dict() for e in run.results["fit"]]
    return s


def run_pipeline(
    command: str,
    config: LoadedConfig,
    seed: int = 0,
    out_dir: str | Path = "nvhl_out",
) -> RunManifest:
    """Run one stage (or all of them) and write outputs plus manifest.json into ``out_dir``."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config.source, config.sha256, command, int(seed), __version__)
    run = _Run(config, int(seed), out, manifest)
    stages: Sequence[str] = STAGE_ORDER if command == "full" else (command,)
    methods: dict[str, Callable] = {
        "spectroscopy": run.spectroscopy, "fit": run.fit, "qpe": run.qpe, "refine": run.refine,
        "design-gate": run.design_gate, "benchmark": run.benchmark,
    }
    try:
        for name in stages:
            log.info("stage %s", name)
            t0 = time.perf_counter()
            methods[name]()
            manifest.timings_s[name] = time.perf_counter() - t0
        manifest.status = "ok"
    except Exception as exc:  # any stage failure is reported through the manifest
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        log.error("%s", manifest.error)
    report = dict(run.header, command=command, status=manifest.status, error=manifest.error,
                  threshold_failures=list(manifest.threshold_failures), summary=_summary(run))
    _dump(report, out / "report.json")
    run._record(out / "report.json")
    _dump(manifest.to_dict(), out / "manifest.json")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvhl", description="Hamiltonian learning and gate design for an NV nuclear-spin register.")
    p.add_argument("command", nargs="?", choices=COMMANDS, help="pipeline stage (default: full)")
    p.add_argument("--stage", choices=COMMANDS, help="same as the positional command")
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (default 0)")
    p.add_argument("--out", default="nvhl_out", help="output directory")
    p.add_argument("--tau-step", type=float, help="spectroscopy tau step in ns")
    p.add_argument("--shots", type=int, help="QPE shots per step")
    p.add_argument("--quiet", action="store_true", help="only report errors")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(name)s: %(message)s")
    if args.command and args.stage and args.command != args.stage:
        log.error("conflicting stage selections: %s and %s", args.command, args.stage)
        return EXIT_ERROR
    command = args.command or args.stage or "full"
    if args.seed < 0 or args.seed >= 2**64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_ERROR
    try:
        loaded = load_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    if args.tau_step is not None:
        if args.tau_step <= 0:
            log.error("--tau-step must be positive")
            return EXIT_ERROR
        loaded.stages["spectroscopy"]["tau_step_ns"] = args.tau_step
    if args.shots is not None:
        if args.shots < 1:
            log.error("--shots must be >= 1")
            return EXIT_ERROR
        loaded.stages["qpe"]["shots"] = args.shots
    manifest = run_pipeline(command, loaded, args.seed, args.out)
    if not args.quiet:
        print(json.dumps({"status": manifest.status, "exit_code": manifest.exit_code, "outputs": manifest.outputs}))
    return manifest.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
