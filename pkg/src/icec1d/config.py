"""Run configuration: flat INI sections with typed, documented defaults.

Every key has a default; unknown sections or keys are rejected. Values
of ``None`` are written as ``none``. Parsing then serializing then
parsing again is the identity.
"""
import configparser
import hashlib
import io
import json
from dataclasses import dataclass

from .grids import Grid1D, Grid3D
from .model import ModelParams

# (default, type, help). Types: float, int, str, bool, "float?" (nullable), "floats" (list)
SCHEMA = {
    "model": {
        "l_c": (1.25, float, "confinement length (a.u.)"),
        "l_alpha": (1.986, float, "Yukawa screening length (a.u.)"),
        "q_He": (1.453, float, "effective He+ charge"),
        "q_Ne": (1.307, float, "effective Ne+ charge"),
        "beta": (0.8, float, "cation-cation interaction factor"),
        "m_Ne": (36785.339, float, "Ne mass (a.u.)"),
        "m_He": (7296.293, float, "He mass (a.u.)"),
    },
    "calibration": {
        "target_He": (-0.904, float, "He ground-state target energy (a.u.)"),
        "target_Ne": (None, "float?", "Ne target energy; none = forward solve with q_Ne"),
        "z_half_width": (60.0, float, "half width of the atomic grid (a.u.)"),
        "z_spacing": (0.05, float, "atomic grid spacing (a.u.)"),
        "l_alpha_curve": ([1.0, 1.5, 1.986, 2.5, 3.0, 4.0], "floats", "l_alpha values for q(l_alpha)"),
        "use_calibrated": (False, bool, "replace model charges by calibrated ones downstream"),
    },
    "pec": {
        "R_min": (0.5, float, "first R of the scan (a.u.)"),
        "R_max": (20.0, float, "last R of the scan (a.u.)"),
        "R_step": (0.05, float, "R step (a.u.)"),
        "n_curves": (6, int, "number of curves"),
        "z_half_width": (80.0, float, "half width of the electronic grid (a.u.)"),
        "z_spacing": (0.05, float, "electronic grid spacing (a.u.)"),
        "n_vib": (4, int, "vibrational states on the ground curve"),
        "dump_states": (False, bool, "write electronic states as raw float64"),
    },
    "grid": {
        "z_min": (-128.0, float, "electronic domain start (periodic)"),
        "z_max": (128.0, float, "electronic domain end (excluded node)"),
        "n_z": (640, int, "electronic points"),
        "R_min": (0.6, float, "R wall (Dirichlet)"),
        "R_max": (6.0, float, "R wall (Dirichlet)"),
        "n_R": (91, int, "R points including both walls"),
    },
    "projectile": {
        "epsilon_in": (0.8, float, "mean incoming kinetic energy (a.u.)"),
        "delta_epsilon": (0.06, float, "kinetic energy spread (a.u.)"),
        "z0": (-60.0, float, "initial packet centre (a.u.)"),
        "symmetry": ("symmetric", str, "symmetric | antisymmetric"),
    },
    "relaxation": {
        "tau_total": (82.684, float, "nominal imaginary-time horizon (a.u.)"),
        "dtau": (0.413, float, "imaginary time step (a.u.)"),
        "energy_tol": (1e-8, float, "stationarity threshold (a.u.)"),
    },
    "propagation": {
        "dt": (0.05, float, "time step (a.u.)"),
        "t_final_fs": (8.0, float, "final time (fs)"),
        "output_stride": (8, int, "steps between snapshots"),
        "eta": (1e-3, float, "electronic CAP strength"),
        "z_cap_left": (-100.0, "float?", "left electronic CAP onset; none = off"),
        "z_cap_right": (100.0, "float?", "right electronic CAP onset; none = off"),
        "R_cap": (4.8, "float?", "nuclear CAP onset; none = off"),
        "eta_R": (0.05, "float?", "nuclear CAP strength; none = eta"),
        "stop_norm": (None, "float?", "stop once the norm falls below this"),
    },
    "analysis": {
        "stride": (5, int, "analyze every n-th snapshot"),
        "delta_t_fs": (2.0, float, "half width of the collision window (fs)"),
        "entropy_convention": ("raw", str, "raw | normalized"),
        "n_populations": (8, int, "natural populations written per row"),
        "R_out": (3.0, float, "R beyond which nuclear density counts as dissociating"),
        "stage_prominence": (0.1, float, "relative prominence of norm-loss peaks"),
    },
    "io": {
        "run_dir": ("run", str, "output directory"),
        "snapshots": ("analyzed", str, "snapshot retention: none | analyzed | all"),
    },
    "sweep": {
        "energies": ([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2], "floats",
                     "incoming energies of a sweep (a.u.)"),
    },
}

_CHOICES = {
    ("projectile", "symmetry"): ("symmetric", "antisymmetric"),
    ("analysis", "entropy_convention"): ("raw", "normalized"),
    ("io", "snapshots"): ("none", "analyzed", "all"),
}


class ConfigError(ValueError):
    pass


def _parse_value(text, kind, where):
    text = text.strip()
    try:
        if kind is float:
            return float(text)
        if kind is int:
            return int(text)
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind == "float?":
            return None if text.lower() in ("none", "") else float(text)
        if kind == "floats":
            return [float(v) for v in text.replace(",", " ").split()]
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc


def _format_value(value, kind):
    if value is None:
        return "none"
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind is bool:
        return "true" if value else "false"
    if kind is float or kind == "float?":
        return repr(float(value))
    return str(value)


@dataclass
class RunConfig:
    """Parsed configuration: ``values[section][key]``."""

    values: dict

    @classmethod
    def defaults(cls):
        return cls({s: {k: (list(v[0]) if isinstance(v[0], list) else v[0])
                        for k, v in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_string(cls, text):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str  # keys are case sensitive (q_He)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls.defaults()
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                kind = SCHEMA[section][key][1]
                cfg.values[section][key] = _parse_value(raw, kind, f"[{section}] {key}")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_string(fh.read())

    def to_string(self):
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key, (_, kind, doc) in keys.items():
                out.write(f"# {doc}\n{key} = {_format_value(self.values[section][key], kind)}\n")
            out.write("\n")
        return out.getvalue()

    def validate(self):
        for (section, key), choices in _CHOICES.items():
            if self.values[section][key] not in choices:
                raise ConfigError(f"[{section}] {key} must be one of {choices}")
        for section, key in (("propagation", "output_stride"), ("analysis", "stride")):
            if self.values[section][key] < 1:
                raise ConfigError(f"[{section}] {key} must be >= 1")
        try:
            self.model_params()
            self.grid3d()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def __getitem__(self, section):
        return self.values[section]

    # typed views -------------------------------------------------------------
    def model_params(self):
        return ModelParams.from_dict(self.values["model"])

    def grid3d(self):
        g = self.values["grid"]
        return Grid3D(Grid1D(g["n_z"], g["z_min"], g["z_max"], "periodic"),
                      Grid1D(g["n_R"], g["R_min"], g["R_max"], "dirichlet"))

    def section_hash(self, *sections):
        """Stable hash of the canonical serialization of the given sections."""
        payload = {s: {k: self.values[s][k] for k in SCHEMA[s]} for s in sections}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def full_hash(self):
        return self.section_hash(*SCHEMA)

    def with_values(self, section, **updates):
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, v in updates.items():
            if k not in SCHEMA[section]:
                raise ConfigError(f"unknown key {k!r} in [{section}]")
            vals[section][k] = v
        cfg = RunConfig(vals)
        cfg.validate()
        return cfg
