"""Scenario and config file handling, plus the bundled benchmark pack.

Scenario files are JSON: a dose grid, true toxicity and efficacy (either
explicit matrices, row i giving drug A level i, or logistic-model
coefficients), and a hazard pattern for response timing.  Validation
errors carry the offending field path so the CLI can point at the exact
entry.  A 12-scenario benchmark pack and the three-arm allocation-only
rate sets ship as package data.
"""

import json
from importlib import resources

import numpy as np

from .dose_models import DoseGrid, LogisticCoeffs, logistic_truth
from .trial_engine import HAZARD_PATTERNS, DesignConfig, Scenario

__all__ = [
    "ConfigFileError",
    "scenario_from_dict",
    "load_scenario",
    "load_config",
    "load_ar_rates",
    "bundled_names",
    "load_bundled_scenario",
    "bundled_config",
]


class ConfigFileError(ValueError):
    """Input-file validation failure, pointing at the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigFileError(f"{where}.{key}" if where else key, "missing required field")
    return d[key]


def _grid_from_dict(d: dict) -> DoseGrid:
    g = _require(d, "grid", "")
    a = _require(g, "a", "grid")
    b = _require(g, "b", "grid")
    try:
        return DoseGrid(tuple(a), tuple(b))
    except (TypeError, ValueError) as exc:
        raise ConfigFileError("grid", str(exc)) from exc


def _truth_matrix(spec, grid: DoseGrid, field: str) -> np.ndarray:
    ni, nj = grid.shape
    if isinstance(spec, dict):
        lg = spec.get("logistic")
        if lg is None:
            raise ConfigFileError(field, "expected a matrix or a 'logistic' object")
        try:
            coeffs = LogisticCoeffs(
                b0=float(_require(lg, "b0", f"{field}.logistic")),
                b1=float(_require(lg, "b1", f"{field}.logistic")),
                b2=float(_require(lg, "b2", f"{field}.logistic")),
                b3=float(_require(lg, "b3", f"{field}.logistic")),
                z_a=tuple(lg.get("z_a", grid.a)),
                z_b=tuple(lg.get("z_b", grid.b)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"{field}.logistic", str(exc)) from exc
        if len(coeffs.z_a) != ni or len(coeffs.z_b) != nj:
            raise ConfigFileError(
                f"{field}.logistic", f"z vectors must have lengths {ni} and {nj}"
            )
        return logistic_truth(coeffs)
    if not isinstance(spec, list) or len(spec) != ni:
        raise ConfigFileError(field, f"expected {ni} rows (one per drug A level)")
    for i, row in enumerate(spec):
        if not isinstance(row, list) or len(row) != nj:
            raise ConfigFileError(f"{field}[{i}]", f"expected {nj} values")
        for j, v in enumerate(row):
            if not isinstance(v, (int, float)) or not 0.0 <= float(v) <= 1.0:
                raise ConfigFileError(f"{field}[{i}][{j}]", "must be a probability in [0, 1]")
    return np.asarray(spec, dtype=float)


def scenario_from_dict(d: dict) -> Scenario:
    grid = _grid_from_dict(d)
    tox = _truth_matrix(_require(d, "toxicity", ""), grid, "toxicity")
    eff = _truth_matrix(_require(d, "efficacy", ""), grid, "efficacy")
    hazard = d.get("hazard", "constant")
    if hazard not in HAZARD_PATTERNS:
        raise ConfigFileError("hazard", f"must be one of {', '.join(HAZARD_PATTERNS)}")
    return Scenario(grid=grid, tox=tox, eff=eff, hazard=hazard, name=str(d.get("name", "")))


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigFileError(str(path), "file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigFileError(str(path), f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc


def load_scenario(path) -> Scenario:
    return scenario_from_dict(_read_json(path))


def load_config(path) -> DesignConfig:
    from .events import config_from_dict

    d = _read_json(path)
    try:
        return config_from_dict(d)
    except (TypeError, ValueError) as exc:
        # config_from_dict raises with the field baked into the message
        raise ConfigFileError("config", str(exc)) from exc


def load_ar_rates(path) -> tuple[float, ...]:
    d = _read_json(path)
    rates = _require(d, "rates", "")
    if not isinstance(rates, list) or len(rates) < 2:
        raise ConfigFileError("rates", "expected a list of two or more response rates")
    for k, v in enumerate(rates):
        if not isinstance(v, (int, float)) or not 0.0 <= float(v) <= 1.0:
            raise ConfigFileError(f"rates[{k}]", "must be a probability in [0, 1]")
    return tuple(float(v) for v in rates)


def _data_root():
    return resources.files("combotrial") / "data"


def bundled_names() -> dict[str, list[str]]:
    root = _data_root()
    out = {"scenarios": [], "ar": []}
    for kind in out:
        folder = root / kind
        out[kind] = sorted(p.name[: -len(".json")] for p in folder.iterdir() if p.name.endswith(".json"))
    return out


def resolve_scenario_path(name_or_path: str):
    """A bundled scenario name (s01..s12, ar01..ar08) or a filesystem path."""
    root = _data_root()
    for kind in ("scenarios", "ar"):
        candidate = root / kind / f"{name_or_path}.json"
        if candidate.is_file():
            return candidate
    return name_or_path


def load_bundled_scenario(name: str) -> Scenario:
    return load_scenario(_data_root() / "scenarios" / f"{name}.json")


def bundled_config() -> DesignConfig:
    """The melanoma-trial defaults shipped as the canonical configuration."""
    return load_config(_data_root() / "melanoma_config.json")
