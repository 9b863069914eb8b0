"""Repeatable simulator experiments: association trials, count trials, noise sweeps."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .association import (
    ANCHOR_RELATIVE,
    LOCATION_ONLY,
    DescriptorGate,
    FeatureTransition,
    GateParams,
    fit_feature_transition,
    match_cross_season,
)
from .season_map import ClusterParams, SeasonMap, build_season_map
from .simulator import (
    Deployment,
    GroundTruth,
    NoiseModel,
    WorldConfig,
    evaluate_association,
    generate_world,
    majority_source,
    simulate_deployment,
)
from .simulator.evaluation import AssociationMetrics


def location_gate(noise: NoiseModel) -> GateParams:
    """Gate covariance from the pose covariance both sessions report."""
    return GateParams(np.eye(2) * 2 * noise.horizontal_variance)


def conmod_plots(world: GroundTruth) -> list[str]:
    return [p.plot_id for p in world.plots if p.treatment == "conmod"]


@dataclass
class SeasonPair:
    world: GroundTruth
    a: Deployment
    b: Deployment
    map_a: SeasonMap
    map_b: SeasonMap


def simulate_pair(seed: int, noise: NoiseModel, seasons=(0, 1), plots=None,
                  config: WorldConfig | None = None, params: ClusterParams | None = None) -> SeasonPair:
    """World ``seed``, surveyed in two seasons and mapped.

    ``plots`` defaults to the ConMod plots, the only ones anchors can help.
    """
    cfg = config or WorldConfig()
    cfg = WorldConfig(**{**cfg.__dict__, "rng_seed": seed})
    world = generate_world(cfg)
    plots = conmod_plots(world) if plots is None else plots
    da = simulate_deployment(world, seasons[0], noise, plots=plots)
    db = simulate_deployment(world, seasons[1], noise, plots=plots)
    ma = build_season_map(da.session, params, georeference=False)
    mb = build_season_map(db.session, params, georeference=False)
    return SeasonPair(world, da, db, ma, mb)


def score(pair: SeasonPair, mode: str, noise: NoiseModel,
          descriptor_gate: DescriptorGate | None = None) -> AssociationMetrics:
    matches = match_cross_season(pair.map_a, pair.map_b, location_gate(noise), mode,
                                 descriptor_gate=descriptor_gate)
    return evaluate_association(matches, pair.world, pair.map_a, pair.map_b, pair.a.truth, pair.b.truth)


@dataclass
class TrialSummary:
    per_seed: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed)) if self.per_seed else float("nan")


def association_trials(seeds, noise: NoiseModel, modes=(LOCATION_ONLY, ANCHOR_RELATIVE),
                       seasons=(0, 1), config: WorldConfig | None = None) -> dict[str, TrialSummary]:
    """F1 of each mode on the same simulated season pairs."""
    out = {m: TrialSummary() for m in modes}
    for seed in seeds:
        pair = simulate_pair(seed, noise, seasons, config=config)
        for m in modes:
            out[m].per_seed.append(score(pair, m, noise).f1)
    return out


def count_error(seed: int, noise: NoiseModel, season: int = 0, plots=None) -> tuple[int, int]:
    """(vegetation instances mapped, plants alive) for one surveyed session."""
    world = generate_world(WorldConfig(rng_seed=seed))
    d = simulate_deployment(world, season, noise, plots=plots)
    m = build_season_map(d.session, georeference=False)
    found = sum(1 for i in m.instances if i.class_label == "vegetation")
    return found, len(world.alive_plants(season, plots))


def same_plant_pairs(pair: SeasonPair) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Descriptor pairs of instances whose majority source is the same plant in both seasons."""
    by_src_a = {}
    for i in pair.map_a.instances:
        if i.class_label == "vegetation":
            by_src_a.setdefault(majority_source(i, pair.a.truth), i)
    dt = pair.map_b.season_time - pair.map_a.season_time
    out = []
    for j in pair.map_b.instances:
        if j.class_label != "vegetation":
            continue
        i = by_src_a.get(majority_source(j, pair.b.truth))
        if i is not None and not majority_source(j, pair.b.truth) == "false":
            out.append((i.descriptor_mean, j.descriptor_mean, dt))
    return out


def calibrate_transition(seed: int = 1000, noise: NoiseModel | None = None,
                         season_pairs=((0, 1), (1, 2), (2, 3))) -> FeatureTransition:
    """Fit the appearance drift on a calibration world with known identities."""
    noise = noise or NoiseModel.rtk()
    pairs = []
    for sa, sb in season_pairs:
        pairs += same_plant_pairs(simulate_pair(seed, noise, (sa, sb)))
    return fit_feature_transition(pairs)


def transition_trials(seeds, transition: FeatureTransition, noise: NoiseModel | None = None,
                      seasons=(0, 2)) -> tuple[list[float], list[float]]:
    """Paired recall with static and with predicted descriptor gating (anchor-relative)."""
    noise = noise or NoiseModel()
    static, predicted = [], []
    for seed in seeds:
        pair = simulate_pair(seed, noise, seasons)
        static.append(score(pair, ANCHOR_RELATIVE, noise, DescriptorGate()).recall)
        predicted.append(score(pair, ANCHOR_RELATIVE, noise, DescriptorGate(transition=transition)).recall)
    return static, predicted


def noise_sweep(sigmas, seeds, modes=(LOCATION_ONLY, ANCHOR_RELATIVE), base: NoiseModel | None = None,
                config: WorldConfig | None = None) -> list[dict]:
    """Mean F1 per mode for each per-plot pose sigma; other noise terms come from ``base``."""
    base = base or NoiseModel()
    rows = []
    for s in sigmas:
        noise = replace(base, pose_noise_sigma=float(s), rtk_mode=False,
                        pose_noise_max=max(base.pose_noise_max, 2 * float(s)))
        res = association_trials(seeds, noise, modes, config=config)
        rows.append({"sigma": float(s), **{m: res[m].mean for m in modes}})
    return rows
