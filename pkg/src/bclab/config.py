"""Experiment configuration: TOML files plus environment defaults."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
from pathlib import Path
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Sequence

from dotenv import load_dotenv
from platformdirs import user_cache_dir

from .errors import ValidationError
from .models import BoundaryPatch, GridSpec

STAGES = ("forward", "dtn", "reconstruct", "propagate", "plots")
SUITES = (
    "gauge",
    "diffeo",
    "green",
    "coercivity",
    "causality",
    "time_reversal",
    "refinement",
)
SLICE_METHODS = ("adjoint-field", "probe")


@dataclass(slots=True)
class GridConfig:
    extents: list[float] = field(default_factory=lambda: [1.0])
    spacing: list[float] = field(default_factory=lambda: [1.0 / 64])
    time_ratio: int = 2
    horizon: float = 1.0
    cfl_factor: float = 0.7

    def build(self) -> GridSpec:
        return GridSpec(
            extents=tuple(self.extents),
            spacing=tuple(self.spacing),
            time_step=self.spacing[-1] / self.time_ratio,
            horizon=self.horizon,
            cfl_factor=self.cfl_factor,
        )


@dataclass(slots=True)
class PatchConfig:
    start: int = 0
    stop: int | None = None
    window: float | None = None

    def build(self, grid: GridSpec) -> BoundaryPatch:
        stop = grid.face_size if self.stop is None else self.stop
        window = grid.horizon if self.window is None else self.window
        patch = BoundaryPatch(self.start, stop, window, grid.horizon)
        patch.validate(grid)
        return patch


@dataclass(slots=True)
class CoefficientConfig:
    family: str = "flat"
    path: Path | None = None
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(slots=True)
class BasisConfig:
    kind: str = "impulse"
    centers: int = 8
    shifts: int = 16
    spatial_width: float | None = None
    temporal_width: float | None = None


@dataclass(slots=True)
class ScheduleConfig:
    epsilons: list[float] = field(
        default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]
    )
    wavenumbers: list[float] = field(default_factory=lambda: [40.0, 80.0, 160.0])
    mollifiers: list[float] = field(default_factory=lambda: [0.0])


@dataclass(slots=True)
class ProbeConfig:
    plateau: float = 0.05
    order: int = 2
    budget: int | None = None
    k_tolerance: float = 0.25
    residual_wavenumbers: list[float] = field(
        default_factory=lambda: [20.0, 40.0, 80.0, 160.0]
    )


@dataclass(slots=True)
class RecoveryConfig:
    slices: str = "probe"
    layers: int = 8
    start: int | None = None
    stop: int | None = None
    stride: int = 1
    sources: int | None = None
    sigma_cut: float = 1e-8
    max_condition: float = 1e6


@dataclass(slots=True)
class PropagationConfig:
    inner_layer: int = 0
    cutoff: float = 1e-6
    threshold: float = 1e-2


@dataclass(slots=True)
class NoiseConfig:
    level: float = 0.0


@dataclass(slots=True)
class VerifyConfig:
    suites: list[str] = field(default_factory=lambda: list(SUITES))
    pairs: int = 10
    break_gauge: bool = False
    window_scale: float = 1.0
    thresholds: dict[str, float] = field(default_factory=dict)


@dataclass(slots=True)
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    coefficients: CoefficientConfig = field(default_factory=CoefficientConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    seed: int = 0
    stages: list[str] = field(default_factory=lambda: ["forward", "dtn", "reconstruct"])
    output: Path = Path("runs/default")
    threads: int = 1
    cache_dir: Path = field(default_factory=lambda: Path(user_cache_dir("bclab")))

    def section(self, name: str) -> dict[str, Any]:
        return _plain(asdict(getattr(self, name)))

    def section_digest(self, names: Sequence[str], upstream: Sequence[str] = ()) -> str:
        """Cache key of a stage: its config sections, the seed and upstream hashes."""
        payload = {
            "sections": {name: self.section(name) for name in names},
            "seed": self.seed,
            "upstream": list(upstream),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        grid = self.grid.build()
        if grid.time_ratio is None or grid.time_ratio != self.grid.time_ratio:
            raise ValidationError("grid.time_ratio must make h_n / dt an integer")
        self.patch.build(grid)
        _strictly(self.schedules.epsilons, decreasing=True, name="schedules.epsilons")
        _strictly(
            self.schedules.wavenumbers, decreasing=False, name="schedules.wavenumbers"
        )
        _strictly(self.schedules.mollifiers, decreasing=True, name="schedules.mollifiers")
        _strictly(
            self.probe.residual_wavenumbers,
            decreasing=False,
            name="probe.residual_wavenumbers",
        )
        for name, value in (
            ("probe.plateau", self.probe.plateau),
            ("basis.spatial_width", self.basis.spatial_width),
            ("basis.temporal_width", self.basis.temporal_width),
            ("recovery.max_condition", self.recovery.max_condition),
        ):
            if value is not None and value <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if any(w < 0 for w in self.schedules.mollifiers):
            raise ValidationError("schedules.mollifiers must be non-negative")
        if self.basis.kind not in ("bump", "impulse"):
            raise ValidationError(
                f"basis.kind '{self.basis.kind}' is not bump or impulse"
            )
        if self.recovery.slices not in SLICE_METHODS:
            raise ValidationError(
                f"recovery.slices '{self.recovery.slices}'"
                f" not in {', '.join(SLICE_METHODS)}"
            )
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValidationError(f"unknown stages: {', '.join(sorted(unknown))}")
        unknown = set(self.verify.suites) - set(SUITES)
        if unknown:
            raise ValidationError(f"unknown verify suites: {', '.join(sorted(unknown))}")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")
        if self.noise.level < 0 or self.verify.window_scale <= 0:
            raise ValidationError("noise.level must be >= 0 and verify.window_scale > 0")


def _strictly(values: list[float], *, decreasing: bool, name: str) -> None:
    if not values:
        raise ValidationError(f"{name} must not be empty")
    pairs = list(zip(values, values[1:]))
    if any((b >= a) if decreasing else (b <= a) for a, b in pairs):
        order = "decreasing" if decreasing else "increasing"
        raise ValidationError(f"{name} {values} must be strictly {order}")


def _plain(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build_section(cls: type, data: Any, name: str) -> Any:
    if not isinstance(data, dict):
        raise ValidationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"[{name}] has unknown keys: {', '.join(sorted(unknown))}")
    try:
        section = cls(**data)
    except TypeError as err:
        raise ValidationError(f"[{name}] is malformed: {err}") from err
    if isinstance(section, CoefficientConfig) and section.path is not None:
        section.path = Path(section.path)
    return section


SECTIONS = {
    "grid": GridConfig,
    "patch": PatchConfig,
    "coefficients": CoefficientConfig,
    "basis": BasisConfig,
    "schedules": ScheduleConfig,
    "probe": ProbeConfig,
    "recovery": RecoveryConfig,
    "propagation": PropagationConfig,
    "noise": NoiseConfig,
    "verify": VerifyConfig,
}


def load_config(
    path: Path | None = None,
    *,
    output: Path | None = None,
    threads: int | None = None,
    seed: int | None = None,
) -> ExperimentConfig:
    """Read a TOML experiment file; CLI values override file and environment values."""
    load_dotenv()
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with path.open("rb") as handle:
                data = tomllib.load(handle)
        except FileNotFoundError as err:
            raise ValidationError(f"config file {path} does not exist") from err
        except tomllib.TOMLDecodeError as err:
            raise ValidationError(f"config file {path} is not valid TOML: {err}") from err
    sections = {
        name: _build_section(cls, data.pop(name, {}), name)
        for name, cls in SECTIONS.items()
    }
    top = {
        key: data.pop(key)
        for key in ("seed", "stages", "output", "threads")
        if key in data
    }
    if data:
        raise ValidationError(f"unknown top-level keys: {', '.join(sorted(data))}")

    config = ExperimentConfig(**sections)
    config.seed = int(top.get("seed", 0)) if seed is None else seed
    config.stages = list(top.get("stages", config.stages))
    config.output = output or Path(top.get("output", config.output))
    try:
        env_threads = int(_get_env("BCLAB_THREADS", default="1"))
    except ValueError as err:
        raise ValidationError("BCLAB_THREADS must be an integer") from err
    config.threads = threads or int(top.get("threads", env_threads))
    cache = _get_env("BCLAB_CACHE_DIR")
    if cache:
        config.cache_dir = Path(cache)
    config.validate()
    return config


def _get_env(name: str, *, default: str = "") -> str:
    from os import getenv

    value = getenv(name)
    return value or default
