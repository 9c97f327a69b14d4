"""
Scenario configuration for CollapseLab.
Handles loading, validating, and snapshotting scenario settings.
"""
import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv

from core.errors import ConfigError

load_dotenv()

# Configure logging
logging.basicConfig(
    level=os.getenv("COLLAPSELAB_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(name)s %(levelname)s: %(message)s",
)
logger = logging.getLogger(__name__)

SCHEMA = "collapselab/1"
SUBCOMMANDS = ("solve", "collapse-sweep", "gh", "mirror", "verify")
OUT_ENV = "COLLAPSELAB_OUT"


class ScenarioConfig:
    """Validated scenario configuration read from a JSON file."""

    # Default configuration values
    DEFAULTS: Dict[str, Any] = {
        "schema": SCHEMA,
        "subcommand": "collapse-sweep",
        "model": {
            "family": "B",
            "n": 2,
            "m": 1,
            "epsilon": 0.3,
            "polarization": [1],
            "fiber_wobble": 0.01,
            "mu": "HolomorphicSquare",
            "grid": {"base": [16, 16], "fiber": [16, 16]},
        },
        "t": 0.2,
        "t_schedule": [0.2, 0.1, 0.05, 0.025],
        "solver": {
            "tol": 1e-9,
            "max_iter": 50,
            "damping": 0.5,
            "min_step": 2.0 ** -20,
            "linear_rtol": 1e-11,
            "positivity_floor": 1e-8,
        },
        "diagnostics": {
            "interior_fraction": 0.5,
            "n_planes": 8,
        },
        "gh": {
            "stencil_order": 1,
            "radius_fraction": 0.4,
            "n_section_points": 5,
            "volume_radii": [0.75],
        },
        "mirror": {
            "lattice": "UU",
            "gram": None,
            "E": [1, 0, 0, 0],
            "sigma": [1, 1, 0, 0],
            "alpha": [[0, 0], [0, 0], [0, 1], [0, 1]],
            "omega": [0, 0, 1, 1],
            "omega_check": [0, 0, 1, 1],
            "s": 3,
            "s0": 1,
            "path_t": ["1/4", "1/2", "1", "2"],
            "exact": True,
            "sampling_ranks": [0, 1, 2, 19],
            "samples": 1000,
            "exact_samples": 20,
        },
        "seed": 0,
        "output": {"dir": "collapselab-out"},
    }

    def __init__(self, path: Optional[Path] = None, data: Optional[Mapping[str, Any]] = None):
        """
        Build a configuration from defaults, then a JSON file, then a dict.

        Args:
            path: JSON scenario file; keys not present keep their defaults
            data: in-memory overrides applied after the file
        """
        self.config_path = Path(path) if path is not None else None
        self._data = copy.deepcopy(self.DEFAULTS)
        if self.config_path is not None:
            self._load()
        if data:
            self.update(data)
        self.validate()

    def _load(self) -> None:
        """Load configuration from file."""
        try:
            with open(self.config_path, "r") as f:
                loaded = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {self.config_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {self.config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        if loaded.get("schema") != SCHEMA:
            raise ConfigError(f"schema must be {SCHEMA!r}, got {loaded.get('schema')!r}")
        self.update(loaded)
        logger.info("Configuration loaded from %s", self.config_path)

    def save(self, path: Path) -> Path:
        """Write the resolved configuration as canonical JSON."""
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self._data, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.debug("Configuration saved to %s", path)
        return path

    def get(self, key: str, default: Any = None) -> Any:
        """Get a configuration value; dotted keys reach into blocks."""
        node: Any = self._data
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value; unknown keys are rejected."""
        parts = key.split(".")
        node = self._data
        template: Any = self.DEFAULTS
        for part in parts[:-1]:
            if not isinstance(template, dict) or part not in template:
                raise ConfigError(f"unknown config key: {key}")
            template = template[part]
            node = node[part]
        if not isinstance(template, dict) or parts[-1] not in template:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = copy.deepcopy(value)

    def update(self, updates: Mapping[str, Any]) -> None:
        """Deep-merge a mapping of values; unknown keys are rejected."""
        _merge(self._data, updates, self.DEFAULTS, prefix="")

    def reset_to_defaults(self) -> None:
        """Reset configuration to default values."""
        self._data = copy.deepcopy(self.DEFAULTS)
        logger.info("Configuration reset to defaults")

    def as_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._data)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = json.dumps(self._data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def output_dir(self, cli_out: Optional[str] = None) -> Path:
        """Resolve the output directory: environment, then flag, then config."""
        env_out = os.getenv(OUT_ENV)
        if env_out:
            return Path(env_out)
        if cli_out:
            return Path(cli_out)
        return Path(self._data["output"]["dir"])

    def validate(self) -> None:
        """Check types and ranges; raise ConfigError on the first problem."""
        d = self._data
        if d["schema"] != SCHEMA:
            raise ConfigError(f"schema must be {SCHEMA!r}")
        if d["subcommand"] not in SUBCOMMANDS:
            raise ConfigError(f"subcommand must be one of {SUBCOMMANDS}, got {d['subcommand']!r}")

        model = d["model"]
        if model["family"] not in ("A", "B"):
            raise ConfigError(f"model.family must be 'A' or 'B', got {model['family']!r}")
        n, m = model["n"], model["m"]
        if not (isinstance(n, int) and isinstance(m, int) and 0 < m < n):
            raise ConfigError(f"model requires integers 0 < m < n, got n={n}, m={m}")
        if (n, m) != (2, 1):
            raise ConfigError(f"families A and B are built with n=2, m=1, got n={n}, m={m}")
        r = n - m
        if len(model["polarization"]) != r or any(
            not isinstance(p, int) or p < 1 for p in model["polarization"]
        ):
            raise ConfigError(f"model.polarization must list {r} positive integers")
        if model["mu"] not in ("HolomorphicSquare", "OmegaMPower"):
            raise ConfigError(f"model.mu must be HolomorphicSquare or OmegaMPower, got {model['mu']!r}")
        _require_number(model["epsilon"], "model.epsilon")
        _require_number(model["fiber_wobble"], "model.fiber_wobble", lower=0.0)
        base, fiber = model["grid"]["base"], model["grid"]["fiber"]
        _require_sizes(base, 2 * m, "model.grid.base", minimum=8)
        _require_sizes(fiber, 2 * r, "model.grid.fiber", minimum=4)

        _require_number(d["t"], "t", strict_lower=0.0)
        schedule = d["t_schedule"]
        if not isinstance(schedule, list):
            raise ConfigError("t_schedule must be a list")
        for i, t in enumerate(schedule):
            _require_number(t, f"t_schedule[{i}]", strict_lower=0.0)
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError("t_schedule must be strictly decreasing")

        solver = d["solver"]
        _require_number(solver["tol"], "solver.tol", lower=1e-12)
        if not isinstance(solver["max_iter"], int) or solver["max_iter"] < 1:
            raise ConfigError("solver.max_iter must be a positive integer")
        _require_number(solver["damping"], "solver.damping", strict_lower=0.0, strict_upper=1.0)
        _require_number(solver["min_step"], "solver.min_step", strict_lower=0.0)
        _require_number(solver["linear_rtol"], "solver.linear_rtol", strict_lower=0.0)
        _require_number(solver["positivity_floor"], "solver.positivity_floor", strict_lower=0.0)

        diag = d["diagnostics"]
        _require_number(diag["interior_fraction"], "diagnostics.interior_fraction",
                        strict_lower=0.0, upper=1.0)
        if not isinstance(diag["n_planes"], int) or diag["n_planes"] < 1:
            raise ConfigError("diagnostics.n_planes must be a positive integer")

        gh = d["gh"]
        if gh["stencil_order"] not in (1, 2):
            raise ConfigError("gh.stencil_order must be 1 or 2")
        _require_number(gh["radius_fraction"], "gh.radius_fraction", strict_lower=0.0, upper=1.0)
        if not isinstance(gh["n_section_points"], int) or gh["n_section_points"] < 2:
            raise ConfigError("gh.n_section_points must be an integer >= 2")
        if not isinstance(gh["volume_radii"], list) or not gh["volume_radii"]:
            raise ConfigError("gh.volume_radii must be a non-empty list of fractions of the reference radius")
        for i, rad in enumerate(gh["volume_radii"]):
            _require_number(rad, f"gh.volume_radii[{i}]", strict_lower=0.0, strict_upper=1.0)

        mirror = d["mirror"]
        if mirror["lattice"] not in ("UU", "UUU", "K3", "custom"):
            raise ConfigError("mirror.lattice must be UU, UUU, K3 or custom")
        if mirror["lattice"] == "custom" and not mirror["gram"]:
            raise ConfigError("mirror.gram is required for a custom lattice")
        if not isinstance(mirror["exact"], bool):
            raise ConfigError("mirror.exact must be a boolean")
        ranks = mirror["sampling_ranks"]
        if not isinstance(ranks, list) or not ranks or any(not isinstance(k, int) or k < 0 for k in ranks):
            raise ConfigError("mirror.sampling_ranks must be a non-empty list of non-negative integers")
        for key in ("samples", "exact_samples"):
            if not isinstance(mirror[key], int) or mirror[key] < 0:
                raise ConfigError(f"mirror.{key} must be a non-negative integer")

        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(d["output"]["dir"], str):
            raise ConfigError("output.dir must be a string")


def _merge(target: Dict[str, Any], updates: Mapping[str, Any], template: Mapping[str, Any],
           prefix: str) -> None:
    for key, value in updates.items():
        dotted = f"{prefix}{key}"
        if key not in template:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(template[key], dict) and template[key]:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {dotted} must be an object")
            _merge(target[key], value, template[key], prefix=f"{dotted}.")
        else:
            target[key] = copy.deepcopy(value)


def _require_number(value: Any, name: str, lower: Optional[float] = None,
                    upper: Optional[float] = None, strict_lower: Optional[float] = None,
                    strict_upper: Optional[float] = None) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if lower is not None and value < lower:
        raise ConfigError(f"{name} must be >= {lower}, got {value}")
    if upper is not None and value > upper:
        raise ConfigError(f"{name} must be <= {upper}, got {value}")
    if strict_lower is not None and value <= strict_lower:
        raise ConfigError(f"{name} must be > {strict_lower}, got {value}")
    if strict_upper is not None and value >= strict_upper:
        raise ConfigError(f"{name} must be < {strict_upper}, got {value}")


def _require_sizes(sizes: Any, count: int, name: str, minimum: int) -> None:
    if not isinstance(sizes, list) or len(sizes) != count:
        raise ConfigError(f"{name} must list {count} grid sizes")
    for s in sizes:
        if not isinstance(s, int) or s < minimum:
            raise ConfigError(f"{name} sizes must be integers >= {minimum}, got {s!r}")
