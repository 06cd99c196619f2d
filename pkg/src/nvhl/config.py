"""JSON configuration: schema, defaults and conversion to a SystemConfig."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .dynamics import NoiseModel
from .gates import sample_bath
from .spin_model import (
    CONVENTIONS,
    DEFAULT_BATH_BOUND_KHZ,
    DEFAULT_BZ_G,
    DEFAULT_DELTA_KHZ,
    DEFAULT_FULL_TENSOR_CAP,
    DEFAULT_GAMMA_E,
    DEFAULT_GAMMA_N,
    HyperfineTensor,
    MagneticField,
    Measurement,
    NuclearSpinRecord,
    PhysicalConstants,
    SystemConfig,
    branch_of_manifold,
)

_NUM = {"type": "number"}
_MEAS = {
    "oneOf": [
        {"type": "number", "minimum": 0},
        {"type": "array", "items": [{"type": "number", "minimum": 0}, {"type": "number", "minimum": 0}],
         "minItems": 2, "maxItems": 2},
    ]
}
_SPIN = {
    "type": "object",
    "required": ["id", "azz_khz", "azx_khz"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "integer"},
        "azz_khz": _NUM,
        "azx_khz": _NUM,
        "azy_khz": _NUM,
        "axx_khz": _NUM,
        "f_init": {"type": "number", "minimum": 0, "maximum": 1},
        "measured": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"f_ms_plus_khz": _MEAS, "f_ms_minus_khz": _MEAS, "omega_n_khz": _MEAS},
        },
        "reported_signs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"ms_plus": {"enum": [1, -1]}, "ms_minus": {"enum": [1, -1]}},
        },
    },
}
_BATH_SPIN = {
    "type": "object",
    "required": ["azz_khz", "azx_khz"],
    "additionalProperties": False,
    "properties": {"azz_khz": _NUM, "azx_khz": _NUM, "azy_khz": _NUM, "axx_khz": _NUM},
}
_TARGET = {
    "type": "object",
    "required": ["spin", "kind"],
    "additionalProperties": False,
    "properties": {
        "spin": {"type": "integer"},
        "kind": {"enum": ["nuclear_x_half_pi", "nuclear_z_half_pi", "nuclear_z_quarter_pi", "controlled_x_half_pi"]},
    },
}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "description": {"type": "string"},
        "convention": {"enum": list(CONVENTIONS)},
        "constants": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta_khz": {"type": "number", "exclusiveMinimum": 0},
                "gamma_e_khz_per_g": {"type": "number", "exclusiveMinimum": 0},
                "gamma_n_khz_per_g": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "field": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"bz_g": _NUM, "bx_g": _NUM, "by_g": _NUM},
        },
        "resolved_spins": {"type": "array", "items": _SPIN},
        "bath": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 0},
                "bound_khz": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": ["integer", "null"], "minimum": 0},
                "spins": {"type": "array", "items": _BATH_SPIN},
            },
        },
        "full_tensor_cap": {"type": "integer", "minimum": 0},
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nuclear_t2star_ms": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "null"},
                                                {"type": "object", "additionalProperties": {"type": "number"}}]},
                "electron_dd_t2_ms": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "quasistatic_detuning_sigma_khz": {"type": ["number", "null"], "minimum": 0},
                "pi_pulse_error": {"type": "number", "minimum": 0, "maximum": 1},
                "readout_f_bright": {"type": "number", "minimum": 0, "maximum": 1},
                "readout_f_dark": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "stages": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spectroscopy": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "tau_min_ns": {"type": "number", "exclusiveMinimum": 0},
                        "tau_max_ns": {"type": "number", "exclusiveMinimum": 0},
                        "tau_step_ns": {"type": "number", "exclusiveMinimum": 0},
                        "n_pulses": {"type": "integer", "minimum": 1},
                        "model": {"enum": ["secular", "floquet"]},
                        "noisy": {"type": "boolean"},
                    },
                },
                "rough_fit": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "max_spins": {"type": "integer", "minimum": 0},
                        "threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "min_separation_ns": {"type": "number", "minimum": 0},
                    },
                },
                "qpe": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "t_min_ns": {"type": "number", "exclusiveMinimum": 0},
                        "n_steps": {"type": "integer", "minimum": 1},
                        "shots": {"type": "integer", "minimum": 1},
                        "contrast": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "use_polarization": {"type": "boolean"},
                        "use_dephasing": {"type": "boolean"},
                        "use_readout": {"type": "boolean"},
                        "replay": {"type": ["string", "null"]},
                    },
                },
                "refine": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "bx_prior_bound_g": {"type": "number", "exclusiveMinimum": 0},
                        "forward_model": {"enum": ["perturbative", "floquet"]},
                    },
                },
                "gates": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "targets": {"type": "array", "items": _TARGET},
                        "n_range": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                    "minItems": 2, "maxItems": 2},
                        "tau_range_ns": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                         "minItems": 2, "maxItems": 2},
                        "tau_step_ns": {"type": "number", "exclusiveMinimum": 0},
                        "lambda": {"type": "number", "minimum": 0},
                        "mu": {"type": "number", "minimum": 0},
                        "cost_ceiling": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "benchmark": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "m_max": {"type": ["integer", "null"], "minimum": 1},
                        "depolarizing": {"type": "number", "minimum": 0, "maximum": 0.5},
                        "electron_preps": {"type": "array", "items": {"enum": ["0", "1", "+"]}},
                    },
                },
                "thresholds": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "azz_khz": {"type": "number", "exclusiveMinimum": 0},
                        "azx_khz": {"type": "number", "exclusiveMinimum": 0},
                        "gate_infidelity": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
    },
}

DEFAULT_STAGES: dict = {
    "spectroscopy": {"tau_min_ns": 4.0, "tau_max_ns": 50000.0, "tau_step_ns": 4.0, "n_pulses": 32,
                     "model": "secular", "noisy": False},
    "rough_fit": {"max_spins": 10, "threshold": 0.9, "min_separation_ns": 100.0},
    "qpe": {"t_min_ns": 800.0, "n_steps": 13, "shots": 1000, "contrast": None, "use_polarization": True,
            "use_dephasing": True, "use_readout": False, "replay": None},
    "refine": {"bx_prior_bound_g": 2.5, "forward_model": "perturbative"},
    "gates": {"targets": [], "n_range": [2, 40], "tau_range_ns": [100.0, 2000.0], "tau_step_ns": 2.0,
              "lambda": 1.0, "mu": 0.1, "cost_ceiling": 0.25},
    "benchmark": {"m_max": None, "depolarizing": 0.0, "electron_preps": []},
    "thresholds": {"azz_khz": 3.0, "azx_khz": 4.0, "gate_infidelity": 0.05},
}


class ConfigError(ValueError):
    """Schema or invariant violation; the message starts with the field path."""


@dataclass
class LoadedConfig:
    system: SystemConfig
    stages: dict
    source: str | None = None
    sha256: str = ""
    raw: dict = field(default_factory=dict)


def _path(err: jsonschema.ValidationError) -> str:
    parts = ["$"]
    for p in err.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def _measurement(x) -> Measurement | None:
    if x is None:
        return None
    if isinstance(x, (list, tuple)):
        return Measurement(float(x[0]), float(x[1]))
    return Measurement(float(x))


def _tensor(d: dict) -> HyperfineTensor:
    return HyperfineTensor.weak_coupling(
        float(d["azz_khz"]), float(d["azx_khz"]), float(d.get("azy_khz", 0.0)), d.get("axx_khz")
    )


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(copy.deepcopy(v))
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def config_from_dict(data: dict, source: str | None = None) -> LoadedConfig:
    """Validate ``data`` against the schema and build the system config."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))
    convention = data.get("convention", "negated")
    c = data.get("constants", {})
    constants = PhysicalConstants(
        c.get("delta_khz", DEFAULT_DELTA_KHZ), c.get("gamma_e_khz_per_g", DEFAULT_GAMMA_E),
        c.get("gamma_n_khz_per_g", DEFAULT_GAMMA_N),
    )
    f = data.get("field", {})
    fld = MagneticField(f.get("bz_g", DEFAULT_BZ_G), f.get("bx_g", 0.0), f.get("by_g", 0.0))
    spins = []
    for i, s in enumerate(data.get("resolved_spins", [])):
        meas = s.get("measured", {})
        by_branch = {}
        signs = {}
        for ms, key in ((1, "f_ms_plus_khz"), (-1, "f_ms_minus_khz")):
            branch = branch_of_manifold(ms, convention)
            by_branch[branch] = _measurement(meas.get(key))
            sign = s.get("reported_signs", {}).get("ms_plus" if ms == 1 else "ms_minus")
            if sign is not None:
                signs[branch] = int(sign)
        try:
            spins.append(NuclearSpinRecord(
                id=int(s["id"]),
                hyperfine=_tensor(s),
                f_init=float(s.get("f_init", 1.0)),
                measured_f_minusbranch=by_branch["minus"],
                measured_f_plusbranch=by_branch["plus"],
                measured_omega_n=_measurement(meas.get("omega_n_khz")),
                reported_signs=signs,
            ))
        except ValueError as exc:
            raise ConfigError(f"$.resolved_spins[{i}]: {exc}") from exc
    bath = data.get("bath", {})
    bound = bath.get("bound_khz", DEFAULT_BATH_BOUND_KHZ)
    if "spins" in bath:
        bath_spins = [_tensor(b) for b in bath["spins"]]
    else:
        bath_spins = sample_bath(bath.get("n", 0), bound, bath.get("seed"))
    n = data.get("noise")
    noise = None
    if n is not None:
        try:
            noise = NoiseModel(
                nuclear_t2star=n.get("nuclear_t2star_ms", 10.0),
                electron_dd_t2=n.get("electron_dd_t2_ms"),
                quasistatic_detuning_sigma=n.get("quasistatic_detuning_sigma_khz"),
                pi_pulse_error=n.get("pi_pulse_error", 0.0),
                readout_f_bright=n.get("readout_f_bright", 0.81),
                readout_f_dark=n.get("readout_f_dark", 0.99),
            )
        except ValueError as exc:
            raise ConfigError(f"$.noise: {exc}") from exc
    try:
        system = SystemConfig(
            constants=constants,
            field=fld,
            resolved_spins=spins,
            bath_spins=bath_spins,
            bath_seed=bath.get("seed"),
            convention=convention,
            bath_bound=bound,
            full_tensor_cap=data.get("full_tensor_cap", DEFAULT_FULL_TENSOR_CAP),
            noise=noise,
        )
    except ValueError as exc:
        where = "$.bath" if str(exc).startswith("bath") else "$"
        raise ConfigError(f"{where}: {exc}") from exc
    stages = _merge(DEFAULT_STAGES, data.get("stages", {}))
    ids = {s.id for s in spins}
    for j, t in enumerate(stages["gates"]["targets"]):
        if t["spin"] not in ids:
            raise ConfigError(f"$.stages.gates.targets[{j}].spin: no resolved spin with id {t['spin']}")
    return LoadedConfig(system, stages, source, canonical_hash(data), copy.deepcopy(data))


def load_config(path: str | Path) -> LoadedConfig:
    """Read, validate and convert a JSON config file."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"$: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("$: top level must be an object")
    return config_from_dict(data, str(p))


def bundled_config_path(name: str = "register.json") -> Path:
    return Path(__file__).parent / "data" / name


def load_bundled(name: str = "register.json") -> LoadedConfig:
    return load_config(bundled_config_path(name))


def stage(loaded: LoadedConfig, name: str) -> dict[str, Any]:
    return loaded.stages[name]
