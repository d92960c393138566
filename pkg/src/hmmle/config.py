"""Flat ``key = value`` configuration files for models and experiments.

An experiment file uses the prefixes ``model.``, ``run.`` and ``output.``::

    model.file = two_state.model     # relative to this file
    run.theta0 = 1.0
    run.T = 400
    run.seed = 12345
    output.dir = out/normality

A model file holds ``family`` (``two_state`` or ``affine``), ``theta_min``,
``theta_max``, ``nu`` and, for ``affine``, ``h``, ``A`` and ``B``. Vectors are
comma- or space-separated; matrix rows are separated by ``;``. Any ``model.*``
key other than ``model.file`` overrides the corresponding model-file entry.
Blank lines and text after ``#`` are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelError, ParamModel, affine_model, two_state_model
from .rng import MASK64

COMMANDS = (
    "simulate", "filter", "estimate", "fisher", "profile", "study-consistency",
    "study-normality", "study-moments", "study-lln", "stability-suite", "identifiability",
)

REQUIRED = object()


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _path(text: str) -> str:
    return text.strip()


_GRID = {"grid_size": (int, 64), "refine_tol": (float, 1e-6)}
_STUDY = {"M": (int, REQUIRED), **_GRID}

SCHEMAS: dict[str, dict] = {
    "simulate": {"theta0": (float, REQUIRED), "T": (float, 10.0)},
    "filter": {"theta": (float, REQUIRED), "theta0": (float, None), "T": (float, 10.0),
               "obs_file": (_path, None), "init": (_floats, None), "sensitivity": (_bool, False)},
    "estimate": {"theta0": (float, REQUIRED), "T": (float, 400.0), "obs_file": (_path, None),
                 "eta": (float, None), **_GRID},
    "fisher": {"theta0": (float, REQUIRED), "T": (float, 400.0), "fisher_runs": (int, 20)},
    "profile": {"theta0": (float, REQUIRED), "T": (float, 400.0), "obs_file": (_path, None),
                "u_grid": (_floats, None)},
    "study-consistency": {"theta0": (float, REQUIRED), "T_list": (_floats, [100.0, 200.0, 400.0]),
                          "eps_list": (_floats, [0.05, 0.1, 0.2]), **_STUDY, "M": (int, 100)},
    "study-normality": {"theta0": (float, REQUIRED), "T": (float, 400.0),
                        "fisher_runs": (int, 20), **_STUDY, "M": (int, 300)},
    "study-moments": {"theta0": (float, REQUIRED), "T_list": (_floats, [100.0, 200.0, 400.0]),
                      "p_list": (_ints, [1, 2, 4]), "fisher_runs": (int, 20), **_STUDY,
                      "M": (int, 300)},
    "study-lln": {"theta0": (float, REQUIRED), "theta": (float, REQUIRED),
                  "T_list": (_floats, [50.0, 100.0, 200.0, 400.0]), "M": (int, 200),
                  "pilot_T_burn": (float, None), "pilot_T_avg": (float, None)},
    "stability-suite": {"theta": (float, REQUIRED), "n_paths": (int, 100),
                        "T_contraction": (float, 15.0), "robustness_offsets": (_floats, [0.1, 0.2, 0.4]),
                        "T_robust": (float, 20.0), "M_robust": (int, 100),
                        "T_boundary": (float, 50.0), "M_boundary": (int, 100),
                        "m_list": (_ints, [1, 2, 4]), "T_coupling": (float, 10.0),
                        "N_coupling": (int, 10_000)},
    "identifiability": {"theta0": (float, REQUIRED), "theta_grid": (_floats, REQUIRED),
                        "n_seeds": (int, 10), "T_burn": (float, None), "T_avg": (float, None)},
}
_COMMON = {"dt": (float, 1e-3), "seed": (int, None), "workers": (int, 1)}


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines; duplicate keys are an error."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(file) -> dict[str, str]:
    path = Path(file)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def _matrix(text: str) -> list[list[float]]:
    rows = [_floats(r) for r in text.split(";") if r.strip()]
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ConfigError(f"matrix must be square with ';'-separated rows, got {text!r}")
    return rows


def model_from_kv(kv: dict[str, str], source: str = "<model>") -> ParamModel:
    """Build and validate a model from parsed model-file entries."""
    try:
        family = kv.get("family", "")
        known = {"family", "theta_min", "theta_max", "nu", "h", "A", "B", "dim"}
        extra = sorted(set(kv) - known)
        if extra:
            raise ConfigError(f"{source}: unknown model key(s) {', '.join(extra)}")
        for key in ("theta_min", "theta_max"):
            if key not in kv:
                raise ConfigError(f"{source}: missing model key {key!r}")
        interval = (float(kv["theta_min"]), float(kv["theta_max"]))
        if family == "two_state":
            model = two_state_model(interval, _floats(kv.get("nu", "0.5, 0.5")))
        elif family == "affine":
            for key in ("h", "A", "B"):
                if key not in kv:
                    raise ConfigError(f"{source}: affine model needs {key!r}")
            h = _floats(kv["h"])
            nu = _floats(kv["nu"]) if "nu" in kv else [1.0 / len(h)] * len(h)
            model = affine_model(_matrix(kv["A"]), _matrix(kv["B"]), h, interval, nu)
        else:
            raise ConfigError(f"{source}: unknown model family {family!r} "
                              "(expected two_state or affine)")
        if "dim" in kv and int(kv["dim"]) != model.dim:
            raise ConfigError(f"{source}: dim={kv['dim']} but h has {model.dim} entries")
    except (ModelError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: {exc}") from exc
    problems = model.validate()
    if problems:
        raise ConfigError(f"{source}: invalid model: {problems[0]}"
                          + (f" (and {len(problems) - 1} more)" if len(problems) > 1 else ""))
    return model


def load_model(file) -> ParamModel:
    return model_from_kv(read_kv(file), str(file))


@dataclass
class ExperimentConfig:
    command: str
    model_file: Path
    model: ParamModel
    params: dict
    seed: int
    out_dir: Path
    workers: int
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {"command": self.command, "model_file": str(self.model_file),
                "seed": self.seed, "workers": self.workers, "params": dict(self.params),
                "model": self.model.describe()}


def _convert(key, conv, text):
    try:
        return conv(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def build_config(command: str, kv: dict[str, str], base_dir: Path, *, seed: int | None = None,
                 out: str | None = None, workers: int | None = None,
                 source: Path | None = None) -> ExperimentConfig:
    """Resolve a parsed experiment file plus command-line overrides."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    schema = {**_COMMON, **SCHEMAS[command]}
    params: dict = {}
    model_kv: dict[str, str] = {}
    model_file = None
    out_dir = None
    for key, text in kv.items():
        section, _, name = key.partition(".")
        if section == "model" and name == "file":
            model_file = base_dir / text
        elif section == "model" and name:
            model_kv[name] = text
        elif section == "run" and name in schema:
            params[name] = _convert(key, schema[name][0], text)
        elif section == "run" and name == "command":
            if text != command:
                raise ConfigError(f"config is for command {text!r}, not {command!r}")
        elif section == "output" and name == "dir":
            out_dir = base_dir / text
        else:
            raise ConfigError(f"unknown config key {key!r} for command {command!r}")
    for name, (_, default) in schema.items():
        if name not in params:
            if default is REQUIRED:
                raise ConfigError(f"missing required key run.{name} for command {command!r}")
            params[name] = default
    if model_file is None:
        raise ConfigError("missing required key model.file")
    if not model_file.is_file():
        raise ConfigError(f"model file not found: {model_file}")
    model_kv = {**read_kv(model_file), **model_kv}
    model = model_from_kv(model_kv, str(model_file))

    seed = seed if seed is not None else params.pop("seed")
    params.pop("seed", None)
    if seed is None:
        raise ConfigError("no master seed: pass --seed or set run.seed")
    if not 0 <= seed <= MASK64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    workers = workers if workers is not None else params.pop("workers")
    params.pop("workers", None)
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    if out is not None:
        out_dir = Path(out)
    if out_dir is None:
        raise ConfigError("no output directory: pass --out or set output.dir")

    for name in ("dt", "T"):
        if name in params and params[name] is not None and not params[name] > 0:
            raise ConfigError(f"run.{name} must be positive, got {params[name]}")
    for name in ("obs_file",):
        if params.get(name):
            p = base_dir / params[name]
            if not p.is_file():
                raise ConfigError(f"observation file not found: {p}")
            params[name] = str(p)
    return ExperimentConfig(command, model_file, model, params, int(seed), out_dir,
                            int(workers), source, dict(kv))


def load_config(command: str, file, **overrides) -> ExperimentConfig:
    path = Path(file)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return build_config(command, read_kv(path), path.parent, source=path, **overrides)
