"""Field layout, plant lifecycles and static features of a simulated site."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig
from ..geo import GeoCoordinate, LocalFrame

TREATMENTS = ("drill_seeded", "conmod", "control")
MICROSITE_KINDS = ("crack", "dip", "litter")

# mean RGB per species; all green-dominant and close to each other
SPECIES_COLORS = {
    "ricegrass": (0.32, 0.55, 0.24),
    "saltbush": (0.36, 0.56, 0.30),
    "galleta": (0.30, 0.52, 0.22),
}
MICROSITE_COLORS = {
    "crack": (0.17, 0.15, 0.13),
    "dip": (0.24, 0.21, 0.19),
    "litter": (0.47, 0.36, 0.22),
}
CONMOD_COLOR = (0.62, 0.62, 0.64)
SHRUB_COLOR = (0.28, 0.45, 0.22)


@dataclass
class GrowthModel:
    """Per-season radius multiplier ~ lognormal; colour drifts slightly toward brown."""
    log_mean: float = 0.18
    log_sigma: float = 0.08
    max_radius: float = 0.14
    color_drift: tuple[float, float, float] = (0.008, -0.012, 0.0)


@dataclass
class WorldConfig:
    plot_count: int = 18
    plots_per_treatment: int = 6
    plots_per_row: int = 6
    plot_size: float = 10.0
    plot_gap: float = 5.0
    conmod_diameter: float = 0.30
    conmod_grid: int = 4
    conmod_spacing: float = 2.5
    conmod_jitter: float = 0.15
    microsite_radius_range: tuple[float, float] = (0.05, 0.10)
    microsite_density: float = 0.2
    plant_density: float = 1.0
    min_plant_spacing: float = 0.3
    initial_radius_range: tuple[float, float] = (0.04, 0.08)
    hazard_rate: float = 0.1
    recruitment_density: float = 0.0
    drill_row_spacing: float = 0.5
    shrubs_per_plot: int = 0
    growth_model: GrowthModel = field(default_factory=GrowthModel)
    season_tags: tuple[str, ...] = ("2021-02", "2021-11", "2022-05", "2022-11")
    origin: tuple[float, float, float] = (38.0510, -109.6010, 1520.0)
    rng_seed: int = 0

    def validate(self) -> None:
        if self.plot_count <= 0 or self.plots_per_treatment <= 0 or self.plots_per_row <= 0:
            raise InvalidConfig("plot counts must be positive")
        if self.plot_count != len(TREATMENTS) * self.plots_per_treatment:
            raise InvalidConfig(
                f"plot_count {self.plot_count} != {len(TREATMENTS)} treatments x {self.plots_per_treatment}")
        if not self.plot_size > 0 or self.plot_gap < 0:
            raise InvalidConfig("plot_size must be positive and plot_gap non-negative")
        lo, hi = self.microsite_radius_range
        if not 0 < lo <= hi:
            raise InvalidConfig("microsite radius range must satisfy 0 < lo <= hi")
        if min(self.plant_density, self.microsite_density, self.hazard_rate, self.recruitment_density) < 0:
            raise InvalidConfig("densities and rates must be non-negative")
        if not self.season_tags:
            raise InvalidConfig("at least one season is required")
        if self.conmod_grid * self.conmod_spacing > self.plot_size:
            raise InvalidConfig("ConMod grid does not fit inside a plot")
        if self.growth_model.max_radius >= self.min_plant_spacing:
            raise InvalidConfig("plants may not be wider than their spacing")


@dataclass(frozen=True)
class Plot:
    plot_id: str
    treatment: str
    x0: float
    y0: float
    size: float

    def contains(self, p, margin: float = 0.0) -> bool:
        return (self.x0 + margin <= p[0] <= self.x0 + self.size - margin
                and self.y0 + margin <= p[1] <= self.y0 + self.size - margin)


@dataclass
class Plant:
    """A plant; alive in season ``s`` iff ``birth_season <= s < death_season``."""
    plant_id: str
    plot_id: str
    species: str
    position: np.ndarray
    birth_season: int
    death_season: int
    radius: list[float]
    color: list[tuple[float, float, float]]
    aspect: float
    angle: float

    def alive(self, season: int) -> bool:
        return self.birth_season <= season < self.death_season


@dataclass
class ConMod:
    conmod_id: str
    plot_id: str
    position: np.ndarray


@dataclass
class Microsite:
    microsite_id: str
    plot_id: str
    kind: str
    position: np.ndarray
    radius: float
    aspect: float
    angle: float


@dataclass
class Shrub:
    """Upright shrub in the gap east of a plot, seen by the front-facing camera.

    Modelled as a vertical cylinder standing on the ground.
    """
    shrub_id: str
    plot_id: str
    position: np.ndarray
    radius: float
    height: float


@dataclass
class GroundTruth:
    config: WorldConfig
    frame: LocalFrame
    plots: list[Plot]
    plants: list[Plant]
    conmods: list[ConMod]
    microsites: list[Microsite]
    shrubs: list[Shrub] = field(default_factory=list)

    @property
    def n_seasons(self) -> int:
        return len(self.config.season_tags)

    def plot(self, plot_id: str) -> Plot:
        return next(p for p in self.plots if p.plot_id == plot_id)

    def alive_plants(self, season: int, plots=None) -> list[Plant]:
        keep = None if plots is None else set(plots)
        return [p for p in self.plants if p.alive(season) and (keep is None or p.plot_id in keep)]


def _poisson_disk(rng, plot: Plot, n: int, spacing: float, blocked: list[tuple[np.ndarray, float]],
                  rows: float | None = None, margin: float = 0.0, tries: int = 30) -> list[np.ndarray]:
    """Dart throwing: up to ``n`` points at least ``spacing`` apart and clear of ``blocked`` discs."""
    pts: list[np.ndarray] = []
    grid: dict[tuple[int, int], list[np.ndarray]] = {}
    cell = spacing
    blk = np.array([b[0] for b in blocked]).reshape(-1, 2)
    blk_r = np.array([b[1] for b in blocked])

    def ok(p):
        if len(blk) and np.any(np.hypot(*(blk - p).T) < blk_r):
            return False
        gx, gy = int(p[0] // cell), int(p[1] // cell)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for q in grid.get((gx + dx, gy + dy), ()):
                    if math.hypot(p[0] - q[0], p[1] - q[1]) < spacing:
                        return False
        return True

    lo = np.array([plot.x0 + margin, plot.y0 + margin])
    span = plot.size - 2 * margin
    for _ in range(n):
        for _ in range(tries):
            p = lo + rng.random(2) * span
            if rows is not None:
                # snap to the nearest drill row, with a little scatter
                k = np.round((p[1] - plot.y0 - rows / 2) / rows)
                k = np.clip(k, 0, int(plot.size / rows) - 1)
                p[1] = plot.y0 + rows / 2 + k * rows + rng.normal() * 0.03
                if not plot.contains(p, margin):
                    continue
            if ok(p):
                pts.append(p)
                grid.setdefault((int(p[0] // cell), int(p[1] // cell)), []).append(p)
                break
    return pts


def _lifecycle(rng, cfg: WorldConfig, birth: int, n_seasons: int) -> int:
    if cfg.hazard_rate == 0:
        return n_seasons
    life = rng.exponential(1.0 / cfg.hazard_rate)
    return int(min(n_seasons, birth + math.floor(life) + 1))


def _grow(rng, cfg: WorldConfig, species: str, birth: int, n_seasons: int):
    g = cfg.growth_model
    r = rng.uniform(*cfg.initial_radius_range)
    base = np.array(SPECIES_COLORS[species]) + rng.normal(size=3) * 0.01
    radii, colors = [], []
    for s in range(n_seasons):
        age = max(0, s - birth)
        if s > birth:
            r = min(g.max_radius, r * math.exp(rng.normal(g.log_mean, g.log_sigma)))
        radii.append(float(r))
        colors.append(tuple(float(c) for c in np.clip(base + age * np.array(g.color_drift), 0, 1)))
    return radii, colors


def generate_world(cfg: WorldConfig | None = None) -> GroundTruth:
    """Lay out plots and populate them; one RNG stream, fully determined by the seed."""
    cfg = cfg or WorldConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    n_seasons = len(cfg.season_tags)
    frame = LocalFrame(GeoCoordinate(*cfg.origin))

    treatments = [t for t in TREATMENTS for _ in range(cfg.plots_per_treatment)]
    treatments = [treatments[i] for i in rng.permutation(len(treatments))]
    step = cfg.plot_size + cfg.plot_gap
    plots = [
        Plot(f"P{i + 1:02d}", t, (i % cfg.plots_per_row) * step, (i // cfg.plots_per_row) * step, cfg.plot_size)
        for i, t in enumerate(treatments)
    ]

    plants, conmods, microsites, shrubs = [], [], [], []
    for plot in plots:
        blocked: list[tuple[np.ndarray, float]] = []
        if plot.treatment == "conmod":
            off = (cfg.plot_size - (cfg.conmod_grid - 1) * cfg.conmod_spacing) / 2
            for gx in range(cfg.conmod_grid):
                for gy in range(cfg.conmod_grid):
                    p = np.array([plot.x0 + off + gx * cfg.conmod_spacing,
                                  plot.y0 + off + gy * cfg.conmod_spacing]) + rng.normal(size=2) * cfg.conmod_jitter
                    c = ConMod(f"{plot.plot_id}-C{len(conmods):03d}", plot.plot_id, p)
                    conmods.append(c)
                    blocked.append((p, cfg.conmod_diameter / 2 + cfg.growth_model.max_radius + 0.05))

        n_micro = rng.poisson(cfg.microsite_density * plot.size ** 2)
        rmax = cfg.microsite_radius_range[1]
        for p in _poisson_disk(rng, plot, n_micro, 2 * rmax + 0.1, blocked, margin=rmax):
            kind = MICROSITE_KINDS[int(rng.integers(len(MICROSITE_KINDS)))]
            r = float(rng.uniform(*cfg.microsite_radius_range))
            aspect = float(rng.uniform(10, 14)) if kind == "crack" else float(rng.uniform(1.0, 1.4))
            ms = Microsite(f"{plot.plot_id}-M{len(microsites):04d}", plot.plot_id, kind, p, r, aspect,
                           float(rng.uniform(0, math.pi)))
            microsites.append(ms)
            blocked.append((p, r + cfg.growth_model.max_radius + 0.05))

        def add_plants(n, birth):
            rows = cfg.drill_row_spacing if plot.treatment == "drill_seeded" else None
            existing = [(q.position, cfg.min_plant_spacing) for q in plants if q.plot_id == plot.plot_id]
            for p in _poisson_disk(rng, plot, n, cfg.min_plant_spacing, blocked + existing, rows,
                                   margin=cfg.growth_model.max_radius):
                species = tuple(SPECIES_COLORS)[int(rng.integers(len(SPECIES_COLORS)))]
                death = _lifecycle(rng, cfg, birth, n_seasons)
                radii, colors = _grow(rng, cfg, species, birth, n_seasons)
                plants.append(Plant(f"{plot.plot_id}-V{len(plants):05d}", plot.plot_id, species, p, birth, death,
                                    radii, colors, float(rng.uniform(1.0, 1.4)), float(rng.uniform(0, math.pi))))

        add_plants(rng.poisson(cfg.plant_density * plot.size ** 2), 0)
        for s in range(1, n_seasons):
            if cfg.recruitment_density > 0:
                add_plants(rng.poisson(cfg.recruitment_density * plot.size ** 2), s)

        # one shrub per north-south band, so shrubs stay well apart
        band = (plot.size - 2.0) / max(cfg.shrubs_per_plot, 1)
        for i in range(cfg.shrubs_per_plot):
            p = np.array([plot.x0 + plot.size + min(1.5, cfg.plot_gap / 2),
                          plot.y0 + 1.0 + band * (i + rng.uniform(0.25, 0.75))])
            shrubs.append(Shrub(f"{plot.plot_id}-S{len(shrubs):03d}", plot.plot_id, p,
                                float(rng.uniform(0.05, 0.09)), float(rng.uniform(0.6, 1.0))))

    return GroundTruth(cfg, frame, plots, plants, conmods, microsites, shrubs)
