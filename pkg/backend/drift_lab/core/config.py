"""
Experiment configuration: flat YAML sections parsed into frozen dataclasses,
validation that runs before any study executes, built-in presets, and the
config hash recorded in every output.
"""

import hashlib
import math
import os
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .errors import ConfigError, LabError
from .grid import GridSpec

# backend/.env, the same place the original services kept their keys
load_dotenv(Path(__file__).resolve().parents[2] / ".env")

STUDIES = (
    "baseline", "conservativeness", "chapman", "energy", "resolvent", "weighted",
    "convergence", "envelope", "mc", "duhamel", "uniqueness", "weak_form", "markov",
)
# studies that compare consecutive members of the mollification ladder
LADDER_STUDIES = ("convergence",)
FIELD_KINDS = ("zero", "cellular", "singular", "dfsl")
DIFFUSION_KINDS = ("identity", "constant", "cosine", "dfsl")


def output_root() -> Path:
    return Path(os.getenv("DRIFT_LAB_OUTPUT_ROOT", "results"))


def default_workers() -> int:
    try:
        return max(1, int(os.getenv("DRIFT_LAB_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class GridSection:
    n: int = 2
    points: int = 128
    box_length: float = 8.0


@dataclass(frozen=True)
class FieldSection:
    kind: str = "zero"
    amplitude: float = 1.0
    mode: int = 1
    s: float = 1.5
    core_radius: float = 0.05
    target_q: float = 2.0
    support_radius: Optional[float] = None
    path: Optional[str] = None


@dataclass(frozen=True)
class DiffusionSection:
    kind: str = "identity"
    matrix: Optional[List[List[float]]] = None
    amplitude: float = 0.0
    path: Optional[str] = None
    mode: str = "spectral"


@dataclass(frozen=True)
class LadderSection:
    epsilon0: float = 0.4
    halvings: int = 3

    @property
    def epsilons(self) -> List[float]:
        return [self.epsilon0 * 2.0 ** (-k) for k in range(self.halvings + 1)]


@dataclass(frozen=True)
class SchemeSection:
    dt: float = 1e-3
    theta: float = 0.5
    T: float = 0.1


@dataclass(frozen=True)
class StudiesSection:
    run: Tuple[str, ...] = ("baseline", "conservativeness", "chapman", "energy")
    alphas: Tuple[float, ...] = (0.1, 1.0, 10.0)
    random_draws: int = 100
    gamma_ws: Tuple[float, ...] = (0.05, 0.1, 0.2)
    envelope_times: Tuple[float, ...] = (0.05, 0.1, 0.2)
    aronson_l: float = math.inf
    aronson_q: float = 2.0
    uniqueness_iterations: int = 256
    source_offset: Tuple[float, ...] = ()


@dataclass(frozen=True)
class SeedsSection:
    base: int = 20240607
    mc: int = 7


@dataclass(frozen=True)
class ThresholdsSection:
    baseline_l1: float = 0.01
    mass: float = 1e-8
    chapman_matched: float = 1e-12
    chapman_mismatched: float = 0.02
    energy_residual: float = 1e-3
    energy_order: float = 1.8
    bound_slack: float = 1e-8
    identity_residual: float = 1e-8
    weighted_spread: float = 0.20
    duhamel_slack: float = 0.05
    kernel_final_difference: float = 0.02
    violation_factor: float = 1.05
    near_exponent_min: float = 1.7
    near_exponent_max: float = 2.3
    tv_smooth: float = 0.05
    tv_singular: float = 0.08
    uniqueness_gap: float = 0.02
    weak_form: float = 1e-3


@dataclass(frozen=True)
class McSection:
    paths: int = 100000
    T: Optional[float] = None
    dt: Optional[float] = None
    exit_radius: Optional[float] = None
    bins_per_axis: int = 16
    block_size: int = 4096


@dataclass(frozen=True)
class OutputSection:
    directory: Optional[str] = None
    write_fields: bool = False


@dataclass(frozen=True)
class MetaSection:
    name: str = "experiment"
    description: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSection = dc_field(default_factory=GridSection)
    field: FieldSection = dc_field(default_factory=FieldSection)
    diffusion: DiffusionSection = dc_field(default_factory=DiffusionSection)
    ladder: LadderSection = dc_field(default_factory=LadderSection)
    scheme: SchemeSection = dc_field(default_factory=SchemeSection)
    studies: StudiesSection = dc_field(default_factory=StudiesSection)
    seeds: SeedsSection = dc_field(default_factory=SeedsSection)
    thresholds: ThresholdsSection = dc_field(default_factory=ThresholdsSection)
    mc: McSection = dc_field(default_factory=McSection)
    output: OutputSection = dc_field(default_factory=OutputSection)
    meta: MetaSection = dc_field(default_factory=MetaSection)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid.n, self.grid.points, self.grid.box_length)

    @property
    def output_dir(self) -> Path:
        if self.output.directory:
            return Path(self.output.directory)
        return output_root() / self.meta.name

    @property
    def is_singular(self) -> bool:
        return self.field.kind == "singular"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for section in data.values():
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
                elif isinstance(value, float) and math.isinf(value):
                    section[key] = ".inf"
        return data


_SECTION_TYPES = {
    "grid": GridSection, "field": FieldSection, "diffusion": DiffusionSection,
    "ladder": LadderSection, "scheme": SchemeSection, "studies": StudiesSection,
    "seeds": SeedsSection, "thresholds": ThresholdsSection, "mc": McSection,
    "output": OutputSection, "meta": MetaSection,
}


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in (".inf", "inf", "infinity"):
        return math.inf
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _section(name: str, data: Any):
    cls = _SECTION_TYPES[name]
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be a mapping of key: value pairs")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    defaults = cls()
    values = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"'{name}.{key}': nested mappings are not allowed")
        values[key] = _coerce(value, getattr(defaults, key))
    return cls(**values)


def from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a parsed YAML document"""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = sorted(set(data) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    try:
        cfg = ExperimentConfig(**{name: _section(name, data.get(name)) for name in _SECTION_TYPES})
    except TypeError as e:
        raise ConfigError(f"malformed config: {e}") from e
    validate(cfg)
    return cfg


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def canonical_bytes(data: Dict[str, Any]) -> bytes:
    return yaml.safe_dump(data, sort_keys=True).encode("utf-8")


def load_config(path) -> Tuple[ExperimentConfig, str]:
    """
    Read a YAML config file.

    Returns:
        (config, SHA-256 of the file bytes)
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from e
    return from_dict(data or {}), config_hash(raw)


def validate(cfg: ExperimentConfig) -> None:
    """Raise ConfigError for anything that would fail before or during execution"""
    problems = []
    try:
        grid = cfg.grid_spec
    except LabError as e:
        raise ConfigError(f"grid: {e}") from e

    unknown = [s for s in cfg.studies.run if s not in STUDIES]
    if unknown:
        problems.append(f"unknown study name(s): {', '.join(unknown)} (valid: {', '.join(STUDIES)})")
    if len(set(cfg.studies.run)) != len(cfg.studies.run):
        problems.append("study names must not repeat")
    members = cfg.ladder.halvings + 1
    for name in LADDER_STUDIES:
        if name in cfg.studies.run and members < 3:
            problems.append(f"study '{name}' needs a ladder of at least 3 members, got {members}")
    if not 0 < cfg.ladder.epsilon0 < grid.box_length / 4:
        problems.append(f"ladder.epsilon0 must lie in (0, L/4), got {cfg.ladder.epsilon0}")
    if cfg.ladder.halvings < 0:
        problems.append("ladder.halvings must be >= 0")

    if cfg.field.kind not in FIELD_KINDS:
        problems.append(f"field.kind must be one of {FIELD_KINDS}, got '{cfg.field.kind}'")
    if cfg.field.kind == "dfsl" and not cfg.field.path:
        problems.append("field.kind 'dfsl' needs field.path")
    if cfg.field.kind == "singular":
        upper = 1.0 + grid.n / max(2.0, cfg.field.target_q)
        if not 0.0 <= cfg.field.s < upper:
            problems.append(f"field.s={cfg.field.s} outside the admissible range [0, {upper:g})")
        if cfg.field.core_radius <= 0:
            problems.append("field.core_radius must be positive")

    if cfg.diffusion.kind not in DIFFUSION_KINDS:
        problems.append(f"diffusion.kind must be one of {DIFFUSION_KINDS}, got '{cfg.diffusion.kind}'")
    if cfg.diffusion.mode not in ("spectral", "flux"):
        problems.append(f"diffusion.mode must be 'spectral' or 'flux', got '{cfg.diffusion.mode}'")
    if cfg.diffusion.kind == "constant" and cfg.diffusion.matrix is None:
        problems.append("diffusion.kind 'constant' needs diffusion.matrix")
    if cfg.diffusion.kind == "dfsl" and not cfg.diffusion.path:
        problems.append("diffusion.kind 'dfsl' needs diffusion.path")

    s = cfg.scheme
    if not 0.5 <= s.theta <= 1.0:
        problems.append(f"scheme.theta must lie in [0.5, 1], got {s.theta}")
    if s.theta == 1.0 and cfg.diffusion.kind == "constant" and cfg.diffusion.matrix is not None:
        off = [v for i, row in enumerate(cfg.diffusion.matrix) for j, v in enumerate(row) if i != j and v != 0]
        if off:
            problems.append("scheme.theta = 1 steps on the upwind operator, which needs a diagonal diffusion.matrix")
    if not (s.T > 0 and s.dt > 0) or abs(round(s.T / s.dt) * s.dt - s.T) > 1e-9 * s.T:
        problems.append(f"scheme.dt={s.dt} must be positive and divide scheme.T={s.T}")
    if any(a <= 0 for a in cfg.studies.alphas):
        problems.append("studies.alphas must be positive")
    if any(t <= 0 for t in cfg.studies.envelope_times):
        problems.append("studies.envelope_times must be positive")
    if "envelope" in cfg.studies.run and len(set(cfg.studies.envelope_times)) < 3:
        problems.append("study 'envelope' needs at least 3 distinct envelope_times")
    if cfg.studies.source_offset and len(cfg.studies.source_offset) != grid.n:
        problems.append(f"studies.source_offset must have {grid.n} entries")
    if cfg.studies.random_draws < 1 or cfg.studies.uniqueness_iterations < 1:
        problems.append("studies.random_draws and studies.uniqueness_iterations must be >= 1")

    if cfg.mc.paths < 1:
        problems.append("mc.paths must be >= 1")
    if grid.points_per_axis % cfg.mc.bins_per_axis:
        problems.append(f"mc.bins_per_axis={cfg.mc.bins_per_axis} must divide grid.points={grid.points_per_axis}")
    if cfg.mc.exit_radius is not None and not 0 < cfg.mc.exit_radius < grid.box_length / 2:
        problems.append("mc.exit_radius must lie in (0, L/2)")

    if problems:
        raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_ALL_STUDIES = list(STUDIES)

PRESETS: Dict[str, Dict[str, Any]] = {
    "gaussian-baseline": {
        "meta": {"name": "gaussian-baseline", "description": "b = 0, a = I; exact heat-kernel oracles"},
        "grid": {"n": 2, "points": 128, "box_length": 8.0},
        "field": {"kind": "zero"},
        "scheme": {"dt": 0.001, "theta": 0.5, "T": 0.1},
        "studies": {"run": _ALL_STUDIES, "aronson_q": 2.0},
    },
    "cellular-vortex": {
        "meta": {"name": "cellular-vortex", "description": "smooth cellular flow, n = 2 (exploratory)"},
        "grid": {"n": 2, "points": 128, "box_length": 8.0},
        "field": {"kind": "cellular", "amplitude": 2.0, "mode": 1},
        "scheme": {"dt": 0.001, "theta": 0.5, "T": 0.1},
        "studies": {"run": _ALL_STUDIES, "aronson_q": 2.0},
    },
    "singular-vortex-2d": {
        "meta": {"name": "singular-vortex-2d", "description": "point vortex |b| ~ r^(1-s), n = 2 (exploratory)"},
        "grid": {"n": 2, "points": 128, "box_length": 8.0},
        "field": {"kind": "singular", "s": 1.5, "core_radius": 0.02, "target_q": 2.0},
        "ladder": {"epsilon0": 0.4, "halvings": 3},
        "scheme": {"dt": 0.001, "theta": 0.5, "T": 0.1},
        "studies": {"run": _ALL_STUDIES, "aronson_q": 2.0, "source_offset": [0.5, 0.0]},
    },
    "singular-vortex-3d": {
        "meta": {"name": "singular-vortex-3d",
                 "description": "n = 3, b in L^2 and L^q with q > 3/2: conservativeness regime"},
        "grid": {"n": 3, "points": 48, "box_length": 8.0},
        "field": {"kind": "singular", "s": 1.5, "core_radius": 0.05, "target_q": 2.0},
        "ladder": {"epsilon0": 0.6, "halvings": 3},
        "scheme": {"dt": 0.002, "theta": 0.5, "T": 0.1},
        "studies": {"run": _ALL_STUDIES, "aronson_q": 2.0, "uniqueness_iterations": 256,
                    "source_offset": [0.5, 0.0, 0.0]},
        "mc": {"paths": 100000, "bins_per_axis": 8},
    },
    "mu1-envelope": {
        "meta": {"name": "mu1-envelope", "description": "bounded drift, q = inf: the mu = 1 envelope branch"},
        "grid": {"n": 3, "points": 32, "box_length": 8.0},
        "field": {"kind": "cellular", "amplitude": 1.0, "mode": 1},
        "scheme": {"dt": 0.002, "theta": 0.5, "T": 0.1},
        "studies": {"run": ["baseline", "conservativeness", "envelope"], "aronson_l": 2.0,
                    "aronson_q": ".inf"},
        "mc": {"bins_per_axis": 8},
    },
}


def preset_names() -> List[str]:
    return list(PRESETS)


def preset(name: str) -> Tuple[ExperimentConfig, str]:
    """
    Look up a built-in config.

    Returns:
        (config, SHA-256 of its canonical YAML rendering)
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (available: {', '.join(PRESETS)})")
    data = PRESETS[name]
    return from_dict(data), config_hash(canonical_bytes(data))


def presets() -> List[ExperimentConfig]:
    """Every built-in config, validated"""
    return [preset(name)[0] for name in PRESETS]


def resolve_config(target: str) -> Tuple[ExperimentConfig, str]:
    """A preset name or a path to a YAML file"""
    if target in PRESETS:
        return preset(target)
    return load_config(target)
