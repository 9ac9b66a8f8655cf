#!/usr/bin/env python3
"""
CochainFEM - Experiment Configuration
=====================================
Validated experiment configuration with dataclasses, JSON files and
environment overrides for the logging setup.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from cochainfem.utils import ConfigError

# Load environment variables
load_dotenv()

# Project paths
BASE_DIR = Path(__file__).parent.parent
CONFIG_DIR = BASE_DIR / "configs"
LOG_DIR = BASE_DIR / "logs"

DENSITIES = ("nonlinear_wave_poisson", "shift_symmetric_wave", "so2_pair", "broken_pair", "manufactured")
TRACES = ("zero", "constant", "traveling_wave", "harmonic")
CHECKS = ("derivatives", "cartan", "multisymplectic", "noether", "equivariance", "localized",
          "tensor_equivalence", "quadrature_ordering", "stencil")
STUDIES = ("manufactured", "noether_current", "cartan_ring", "phase", "trajectory_equivalence")
GENERATORS = ("shift", "rotation", "zero", "cube")
STEPPERS = ("midpoint", "euler")


class ConfigInvalid(ConfigError):
    """Configuration file cannot be loaded or violates a constraint."""

    def __init__(self, path: Optional[str], message: str):
        super().__init__(f"{path or '<config>'}: {message}")
        self.path = path
        self.message = message


def _is_range(value) -> bool:
    return isinstance(value, (list, tuple)) and len(value) == 2 and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)


# =============================================================================
# SECTIONS
# =============================================================================

@dataclass
class ProblemConfig:
    """Builtin density and its parameters."""
    density: str = "shift_symmetric_wave"
    epsilon: int = -1
    potential: List[float] = field(default_factory=list)   # N or G coefficients c_k of phi^k
    breaking: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.5])

    def validate(self) -> bool:
        if self.density not in DENSITIES:
            raise ValueError(f"problem.density must be one of {DENSITIES}")
        if self.epsilon not in (-1, 1):
            raise ValueError("problem.epsilon must be -1 (wave) or +1 (Poisson)")
        return True


@dataclass
class MeshConfig:
    """Spacetime mesh; the x part is also the canonical slice."""
    t_range: List[float] = field(default_factory=lambda: [0.0, 0.7])
    x_range: List[float] = field(default_factory=lambda: [0.0, 1.0])
    M: int = 7
    N: int = 8
    periodic_x: bool = False

    def validate(self) -> bool:
        for name in ("t_range", "x_range"):
            value = getattr(self, name)
            if not _is_range(value) or not value[0] < value[1]:
                raise ValueError(f"mesh.{name} must be [lo, hi] with lo < hi")
        if self.M < 1 or self.N < 1:
            raise ValueError("mesh.M and mesh.N must be positive")
        if self.periodic_x and self.N < 2:
            raise ValueError("periodic meshes need N >= 2")
        return True


@dataclass
class BoundaryConfig:
    """Named analytic trace used for Dirichlet data and canonical initial states."""
    kind: str = "traveling_wave"
    value: float = 0.0
    amplitude: float = 0.1
    wavenumber: float = 1.0

    def validate(self) -> bool:
        if self.kind not in TRACES:
            raise ValueError(f"boundary.kind must be one of {TRACES}")
        return True


@dataclass
class SolverConfig:
    """Newton settings."""
    tol: float = 1e-10
    max_iter: int = 50
    dense_limit: int = 4000

    def validate(self) -> bool:
        if not 0.0 < self.tol < 1.0:
            raise ValueError("solver.tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("solver.max_iter must be positive")
        if self.dense_limit < 0:
            raise ValueError("solver.dense_limit must be non-negative")
        return True


@dataclass
class VerifyConfig:
    """Structure checks, the regions and generators they run on, and tolerances."""
    checks: List[str] = field(default_factory=lambda: list(CHECKS))
    regions: List[List[int]] = field(default_factory=lambda: [[1, 4, 1, 4], [2, 6, 2, 7], [0, 7, 0, 8]])
    generators: List[str] = field(default_factory=lambda: ["shift"])
    cartan_rtol: float = 1e-8
    multisymplectic_rtol: float = 1e-8
    noether_rtol: float = 1e-8
    equivariance_tol: float = 1e-8
    equivalence_rtol: float = 1e-12
    random_probes: int = 3
    max_workers: int = 4

    def validate(self) -> bool:
        unknown = sorted(set(self.checks) - set(CHECKS))
        if unknown:
            raise ValueError(f"verify.checks has unknown entries {unknown}")
        unknown = sorted(set(self.generators) - set(GENERATORS))
        if unknown:
            raise ValueError(f"verify.generators has unknown entries {unknown}")
        for box in self.regions:
            if not (isinstance(box, list) and len(box) == 4 and all(isinstance(b, int) for b in box)):
                raise ValueError("verify.regions entries must be [i0, i1, j0, j1] integer lists")
        if self.max_workers < 1 or self.random_probes < 1:
            raise ValueError("verify.max_workers and verify.random_probes must be positive")
        return True


@dataclass
class CanonicalConfig:
    """Semi-discrete simulation settings."""
    dt: float = 0.01
    steps: int = 1000
    stepper: str = "midpoint"
    mode: int = 1
    snapshots: bool = False
    snapshot_every: int = 100
    symplecticity_steps: int = 10
    energy_rtol: float = 1e-10
    momentum_tol: float = 1e-10
    symplecticity_tol: float = 1e-6

    def validate(self) -> bool:
        if self.dt <= 0.0:
            raise ValueError("canonical.dt must be positive")
        if self.steps < 0 or self.symplecticity_steps < 0:
            raise ValueError("canonical step counts must be non-negative")
        if self.stepper not in STEPPERS:
            raise ValueError(f"canonical.stepper must be one of {STEPPERS}")
        if self.snapshot_every < 1:
            raise ValueError("canonical.snapshot_every must be positive")
        return True


@dataclass
class StudyConfig:
    """Refinement studies."""
    studies: List[str] = field(default_factory=lambda: ["manufactured"])
    levels: List[int] = field(default_factory=lambda: [8, 16, 32])
    dts: List[float] = field(default_factory=lambda: [0.1, 0.05, 0.025])
    ring_box: List[float] = field(default_factory=lambda: [0.25, 0.75, 0.25, 0.75])
    # the ring ratio reaches its O(h) rate only on fine meshes
    ring_levels: List[int] = field(default_factory=lambda: [32, 64, 128])
    ring_min_rate: float = 0.9
    reference: str = "analytic"
    min_rate: float = 0.95
    rate_band: List[float] = field(default_factory=lambda: [1.8, 2.2])

    def validate(self) -> bool:
        unknown = sorted(set(self.studies) - set(STUDIES))
        if unknown:
            raise ValueError(f"study.studies has unknown entries {unknown}")
        for name in ("levels", "ring_levels"):
            levels = getattr(self, name)
            if len(levels) < 2 or any(n < 1 for n in levels):
                raise ValueError(f"study.{name} needs at least two positive levels")
            if any(fine != 2 * coarse for coarse, fine in zip(levels[:-1], levels[1:])):
                raise ValueError(f"study.{name} must double from one level to the next")
        if len(self.dts) < 2 or any(dt <= 0 for dt in self.dts):
            raise ValueError("study.dts needs at least two positive steps")
        if sorted(set(self.dts), reverse=True) != list(self.dts):
            raise ValueError("study.dts must strictly decrease")
        if self.ring_min_rate <= 0:
            raise ValueError("study.ring_min_rate must be positive")
        if self.reference not in ("analytic", "discrete"):
            raise ValueError("study.reference must be 'analytic' or 'discrete'")
        if len(self.ring_box) != 4 or not _is_range(self.rate_band):
            raise ValueError("study.ring_box needs 4 entries and study.rate_band 2")
        return True


@dataclass
class SystemConfig:
    """Logging setup; environment only, never numerical settings."""
    log_level: str = field(default_factory=lambda: os.getenv("COCHAINFEM_LOG_LEVEL", "INFO"))
    log_dir: str = field(default_factory=lambda: os.getenv("COCHAINFEM_LOG_DIR", str(LOG_DIR)))

    def validate(self) -> bool:
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"system.log_level {self.log_level!r} is not a logging level")
        return True


SECTIONS = {
    "problem": ProblemConfig,
    "mesh": MeshConfig,
    "boundary": BoundaryConfig,
    "solver": SolverConfig,
    "verify": VerifyConfig,
    "canonical": CanonicalConfig,
    "study": StudyConfig,
    "system": SystemConfig,
}


def _check_type(path: Optional[str], where: str, expected: Any, value: Any):
    if isinstance(expected, bool):
        ok = isinstance(value, bool)
    elif isinstance(expected, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(expected, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(expected, str):
        ok = isinstance(value, str)
    elif isinstance(expected, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigInvalid(path, f"{where} expects {type(expected).__name__}, got {type(value).__name__}")


# =============================================================================
# AGGREGATE
# =============================================================================

class ExperimentConfig:
    """Main configuration - aggregates all sections."""

    def __init__(self, config_file: Optional[str] = None):
        self.path: Optional[str] = None
        self.seed: int = 0
        for name, section in SECTIONS.items():
            setattr(self, name, section())
        if config_file is not None:
            self.load_from_file(config_file)

    def validate_all(self) -> bool:
        """Validate all sections; raises ConfigInvalid on the first violation."""
        try:
            for name in SECTIONS:
                getattr(self, name).validate()
        except ValueError as e:
            raise ConfigInvalid(self.path, str(e)) from e
        if self.seed < 0:
            raise ConfigInvalid(self.path, "seed must be non-negative")
        return True

    def load_from_file(self, filepath: str):
        """Load configuration from a JSON file, rejecting unknown keys and wrong types."""
        self.path = str(filepath)
        try:
            with open(filepath, encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigInvalid(self.path, "file not found") from e
        except json.JSONDecodeError as e:
            raise ConfigInvalid(self.path, f"invalid JSON ({e.msg} at line {e.lineno})") from e
        if not isinstance(data, dict):
            raise ConfigInvalid(self.path, "top level must be an object")

        unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigInvalid(self.path, f"unknown top-level keys {unknown}")

        if "seed" in data:
            _check_type(self.path, "seed", 0, data["seed"])
            self.seed = data["seed"]

        for name, section_cls in SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, dict):
                raise ConfigInvalid(self.path, f"section {name!r} must be an object")
            section = getattr(self, name)
            known = {f.name for f in fields(section_cls)}
            extra = sorted(set(values) - known)
            if extra:
                raise ConfigInvalid(self.path, f"unknown keys in {name!r}: {extra}")
            for key, value in values.items():
                _check_type(self.path, f"{name}.{key}", getattr(section, key), value)
                if isinstance(getattr(section, key), float):
                    value = float(value)
                setattr(section, key, value)
        self.validate_all()

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {name: asdict(getattr(self, name)) for name in SECTIONS if name != "system"}
        data["seed"] = self.seed
        return data

    def save_to_file(self, filepath: str):
        """Save current configuration to a JSON file."""
        data = self.to_dict()
        data["system"] = asdict(self.system)
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
