"""Pipeline configuration: every tunable default in one JSON document.

Sections map onto the dataclasses the modules already use, so the defaults
live in exactly one place.  Unknown keys, at any level, are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .association import CHI2_2DOF_95, CHI2_6DOF_99, MODES, AnchorParams
from .errors import InvalidConfig
from .octree import OctreeParams
from .perception import ProjectionNoise
from .season_map import ClusterParams
from .simulator import Lawnmower, NoiseModel, WorldConfig
from .simulator.world import GrowthModel


@dataclass
class SimulationSection:
    plots: str | list[str] = "all"   # "all", "conmod" or explicit plot ids
    seasons: list[int] = field(default_factory=lambda: [0, 1])   # seasons surveyed by ``generate``
    label_masks: bool = True

    def __post_init__(self):
        if not self.seasons or len(set(self.seasons)) != len(self.seasons):
            raise InvalidConfig("simulation.seasons must list distinct seasons")
        if isinstance(self.plots, str) and self.plots not in ("all", "conmod"):
            raise InvalidConfig("simulation.plots must be 'all', 'conmod' or a list of plot ids")


@dataclass
class AssociationSection:
    mode: str = "anchor_relative"
    chi2_threshold: float = CHI2_2DOF_95
    localization_sigma: float | None = None   # None: use the sessions' pose covariances
    season_a: int = 0
    season_b: int = 1
    descriptor_gate: bool = False
    descriptor_threshold: float = CHI2_6DOF_99

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"association.mode must be one of {MODES}")
        if not self.chi2_threshold > 0 or not self.descriptor_threshold > 0:
            raise InvalidConfig("gate thresholds must be positive")
        if self.localization_sigma is not None and self.localization_sigma < 0:
            raise InvalidConfig("association.localization_sigma must be non-negative")
        if self.season_a == self.season_b:
            raise InvalidConfig("association.season_a and season_b must differ")


@dataclass
class PersistenceSection:
    hazard_rate: float = 0.1
    p_detect: float = 0.9
    p_false: float = 0.05
    survey_radius: float = 0.8

    def __post_init__(self):
        if self.hazard_rate < 0 or self.survey_radius < 0:
            raise InvalidConfig("persistence.hazard_rate and survey_radius must be non-negative")
        if not (0 <= self.p_detect <= 1 and 0 <= self.p_false <= 1):
            raise InvalidConfig("persistence probabilities must lie in [0, 1]")


@dataclass
class ReportSection:
    noise_sweep: list[float] = field(default_factory=lambda: [0.05, 0.15, 0.3, 0.5])
    sweep_seeds: int = 3
    histogram_bins: int = 20

    def __post_init__(self):
        if any(s < 0 for s in self.noise_sweep) or self.sweep_seeds < 1 or self.histogram_bins < 1:
            raise InvalidConfig("report settings out of range")


@dataclass
class PipelineConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    trajectory: Lawnmower = field(default_factory=Lawnmower)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    octree: OctreeParams = field(default_factory=OctreeParams)
    projection: ProjectionNoise = field(default_factory=ProjectionNoise)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    association: AssociationSection = field(default_factory=AssociationSection)
    anchors: AnchorParams = field(default_factory=AnchorParams)
    persistence: PersistenceSection = field(default_factory=PersistenceSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        self.world.rng_seed = self.seed
        self.world.validate()
        n = len(self.world.season_tags)
        if any(not 0 <= k < n for k in self.simulation.seasons):
            raise InvalidConfig(f"simulation.seasons must lie in [0, {n})")
        if not {self.association.season_a, self.association.season_b} <= set(self.simulation.seasons):
            raise InvalidConfig("association seasons must be among simulation.seasons")

    def with_seed(self, seed: int) -> "PipelineConfig":
        d = self.to_dict()
        d["seed"] = seed
        return PipelineConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = json.loads(json.dumps(asdict(self)))
        d["world"].pop("rng_seed")   # the top-level seed is authoritative
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d, "config")


# nested dataclass types that appear as field values
_NESTED = {"growth_model": GrowthModel}
_TUPLE_FIELDS = {"microsite_radius_range", "initial_radius_range", "season_tags", "origin", "color_drift"}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise InvalidConfig(f"{where} must be an object")
    known = {f.name: f for f in fields(cls)}
    if cls is WorldConfig:
        known.pop("rng_seed")
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for name, value in d.items():
        sub = _NESTED.get(name)
        if sub is None and cls is PipelineConfig:
            sub = _SECTIONS.get(name)
        if sub is not None:
            kw[name] = _build(sub, value, f"{where}.{name}")
        elif name in _TUPLE_FIELDS:
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except InvalidConfig:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where}: {exc}") from None


_SECTIONS = {f.name: type(f.default_factory()) for f in fields(PipelineConfig) if f.name != "seed"}


def load_config(path) -> PipelineConfig:
    from .schemas import loads
    doc = loads(Path(path).read_text(encoding="utf-8"), "config", str(path))
    doc.pop("header")
    return PipelineConfig.from_dict(doc)


def dump_config(cfg: PipelineConfig) -> str:
    from .schemas import dumps
    return dumps("config", cfg.to_dict())
