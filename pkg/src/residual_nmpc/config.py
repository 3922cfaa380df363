"""JSON experiment configuration.

Every section is optional except ``reference``, which must give ``v_max``
and ``dt``. Unknown keys are rejected so typos surface as errors naming the
offending field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from residual_nmpc.dynamics import PlantConfig
from residual_nmpc.errors import ConfigError, DomainError
from residual_nmpc.gp.kernels import KernelHyperparams
from residual_nmpc.nmpc.solver import NmpcConfig


def _default_nmpc() -> NmpcConfig:
    # the controller keeps a 0.1 m buffer over the assessed safety distance
    return NmpcConfig(d_o=1.1, x_min=(-1e3, -1e3, 0.5, -1e3), x_max=(1e3, 1e3, 4.5, 1e3))


@dataclass
class SgpSettings:
    m: int = 30
    bias: float = 0.0
    hyp_init: KernelHyperparams = field(default_factory=lambda: KernelHyperparams(1.0, 1.0, 0.1))
    max_iter: int = 1000


@dataclass
class WorldSettings:
    """``obstacle_count`` points per evaluation world; ``d_o`` is the assessed safety distance."""

    obstacle_count: int = 6
    bounds: tuple[float, float, float] = (20.0, 20.0, 5.0)
    d_o: float = 1.0
    sensing_radius: float = 5.0
    path_offset: float = 0.5
    endpoint_keepout: float = 3.0


@dataclass
class GeneratorSpec:
    """Random waypoint sequences inside the world bounds."""

    count: int = 20
    n_waypoints: int = 10
    margin: float = 2.0
    z_range: tuple[float, float] = (1.5, 3.5)
    min_step: float = 4.0
    max_step: float = 8.0
    speed_range: tuple[float, float] = (0.4, 1.0)


@dataclass
class ReferenceSettings:
    v_max: float
    dt: float
    waypoints: list[list[float]] | None = None
    generator: GeneratorSpec | None = field(default_factory=GeneratorSpec)


@dataclass
class RunSettings:
    max_steps: int = 1000
    threshold: float = 2.0
    goal_tol: float = 0.3
    regenerate: bool = True
    detour_margin: float = 1.0
    train_fraction: float = 0.8


@dataclass
class SweepSettings:
    m_values: list[int] = field(default_factory=lambda: [5, 10, 20, 30, 50])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    solves: int = 50
    repeats: int = 10


@dataclass
class ExperimentConfig:
    reference: ReferenceSettings
    seed: int = 0
    plant: PlantConfig = field(default_factory=PlantConfig)
    nmpc: NmpcConfig = field(default_factory=_default_nmpc)
    sgp: SgpSettings = field(default_factory=SgpSettings)
    world: WorldSettings = field(default_factory=WorldSettings)
    run: RunSettings = field(default_factory=RunSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    out: str = "out"

    def to_dict(self) -> dict:
        gen = self.reference.generator
        return {
            "seed": self.seed,
            "plant": asdict(self.plant),
            "nmpc": self.nmpc.to_dict(),
            "sgp": {**asdict(self.sgp), "hyp_init": self.sgp.hyp_init.to_dict()},
            "world": {**asdict(self.world), "bounds": list(self.world.bounds)},
            "reference": {
                "v_max": self.reference.v_max,
                "dt": self.reference.dt,
                "waypoints": self.reference.waypoints,
                "generator": None if gen is None else {**asdict(gen), "z_range": list(gen.z_range), "speed_range": list(gen.speed_range)},
            },
            "run": asdict(self.run),
            "sweep": asdict(self.sweep),
            "paths": {"out": self.out},
        }

    @property
    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, d, where: str, required=(), convert=None):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    for r in required:
        if r not in d:
            raise ConfigError(f"{where}.{r}: required field is missing")
    kw = dict(d)
    for k, fn in (convert or {}).items():
        if k in kw and kw[k] is not None:
            try:
                kw[k] = fn(kw[k])
            except ConfigError:
                raise
            except (TypeError, ValueError, DomainError) as exc:
                raise ConfigError(f"{where}.{k}: {exc}") from None
    try:
        return cls(**kw)
    except (TypeError, ValueError, DomainError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _pair(v):
    t = tuple(float(a) for a in v)
    if len(t) != 2 or t[0] > t[1]:
        raise ValueError(f"expected [low, high], got {v}")
    return t


def _triple(v):
    t = tuple(float(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 numbers, got {v}")
    return t


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be an object")
    top = {"seed", "plant", "nmpc", "sgp", "world", "reference", "run", "sweep", "paths"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
    if "reference" not in d:
        raise ConfigError("reference: required section is missing")
    ref_d = dict(d["reference"]) if isinstance(d["reference"], dict) else d["reference"]
    ref = _build(
        ReferenceSettings,
        ref_d,
        "reference",
        required=("v_max", "dt"),
        convert={
            "generator": lambda g: _build(
                GeneratorSpec, g, "reference.generator", convert={"z_range": _pair, "speed_range": _pair}
            ),
            "waypoints": lambda w: [list(_triple(p)) for p in w],
        },
    )
    if ref.waypoints is None and ref.generator is None:
        raise ConfigError("reference: give either waypoints or generator")
    if not (isinstance(ref.v_max, (int, float)) and ref.v_max > 0):
        raise ConfigError(f"reference.v_max: must be a positive number, got {ref.v_max!r}")
    if not (isinstance(ref.dt, (int, float)) and ref.dt > 0):
        raise ConfigError(f"reference.dt: must be a positive number, got {ref.dt!r}")

    nmpc_d = d.get("nmpc")
    if nmpc_d is None:
        base = _default_nmpc()
        nmpc = NmpcConfig.from_dict({**base.to_dict(), "dt": ref.dt})
    else:
        if not isinstance(nmpc_d, dict):
            raise ConfigError("nmpc: expected an object")
        try:
            nmpc = NmpcConfig.from_dict({**_default_nmpc().to_dict(), "dt": ref.dt, **nmpc_d})
        except ConfigError as exc:
            raise ConfigError(f"nmpc: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"nmpc: {exc}") from None
    if abs(nmpc.dt - ref.dt) > 1e-12:
        raise ConfigError(f"nmpc.dt: {nmpc.dt} differs from reference.dt {ref.dt}")

    paths = d.get("paths", {})
    if not isinstance(paths, dict) or set(paths) - {"out"}:
        raise ConfigError("paths: only the field 'out' is supported")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: must be an integer, got {seed!r}")

    cfg = ExperimentConfig(
        reference=ref,
        seed=seed,
        plant=_build(PlantConfig, d.get("plant", {}), "plant"),
        nmpc=nmpc,
        sgp=_build(
            SgpSettings,
            d.get("sgp", {}),
            "sgp",
            convert={"hyp_init": lambda h: _build(KernelHyperparams, h, "sgp.hyp_init")},
        ),
        world=_build(WorldSettings, d.get("world", {}), "world", convert={"bounds": _triple}),
        run=_build(RunSettings, d.get("run", {}), "run"),
        sweep=_build(SweepSettings, d.get("sweep", {}), "sweep"),
        out=str(paths.get("out", "out")),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    problems = []
    if not (isinstance(cfg.sgp.m, int) and cfg.sgp.m >= 1):
        problems.append(f"sgp.m: must be a positive integer, got {cfg.sgp.m!r}")
    if cfg.world.d_o <= 0:
        problems.append("world.d_o: must be > 0")
    if cfg.nmpc.d_o < cfg.world.d_o:
        problems.append(f"nmpc.d_o: {cfg.nmpc.d_o} is below world.d_o {cfg.world.d_o}")
    if cfg.world.obstacle_count < 0:
        problems.append("world.obstacle_count: must be >= 0")
    if cfg.reference.v_max > cfg.nmpc.v_max:
        problems.append(f"reference.v_max: {cfg.reference.v_max} exceeds nmpc.v_max {cfg.nmpc.v_max}")
    if not 0 < cfg.run.train_fraction < 1:
        problems.append("run.train_fraction: must lie in (0, 1)")
    if cfg.run.threshold <= 0:
        problems.append("run.threshold: must be > 0")
    if cfg.sweep.m_values != sorted(cfg.sweep.m_values) or not cfg.sweep.m_values:
        problems.append("sweep.m_values: must be a non-empty ascending list")
    if cfg.sweep.solves < 1 or cfg.sweep.repeats < 1:
        problems.append("sweep.solves/repeats: must be >= 1")
    gen = cfg.reference.generator
    if gen is not None:
        if gen.count < 1:
            problems.append("reference.generator.count: must be >= 1")
        if gen.n_waypoints < 4:
            problems.append("reference.generator.n_waypoints: need at least 4")
        if not 0 < gen.min_step <= gen.max_step:
            problems.append("reference.generator.min_step/max_step: need 0 < min_step <= max_step")
        if not 0 < gen.speed_range[0]:
            problems.append("reference.generator.speed_range: fractions must be > 0")
    if cfg.reference.waypoints is not None and len(cfg.reference.waypoints) < 4:
        problems.append("reference.waypoints: need at least 4")
    if problems:
        raise ConfigError("; ".join(problems))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    try:
        return config_from_dict(d)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def default_config() -> ExperimentConfig:
    return config_from_dict({"reference": {"v_max": 1.5, "dt": 0.1}})


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
