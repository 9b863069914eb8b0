"""Follow one ConMod plot from raw masks to persistence beliefs.

Surveys a single plot in two seasons under RTK-grade localisation, builds
each season's landmark map, matches the maps through the ConMod anchors and
updates the survival belief of every season-one landmark.

    python3 demos/one_plot_two_seasons.py [seed]
"""
import sys
from collections import Counter

from restorebot.association import AnchorParams, GateParams, match_cross_season, track_persistence
from restorebot.season_map import build_season_map
from restorebot.simulator import NoiseModel, WorldConfig, evaluate_association, generate_world, simulate_deployment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
world = generate_world(WorldConfig(rng_seed=seed))
plot = next(p.plot_id for p in world.plots if p.treatment == "conmod")
noise = NoiseModel.rtk()

deps = [simulate_deployment(world, s, noise, plots=[plot]) for s in (0, 1)]
maps = []
for d in deps:
    m = build_season_map(d.session)
    maps.append(m)
    classes = Counter(i.class_label for i in m.instances)
    print(f"{m.session_id}: {len(d.session.frames)} frames, {len(d.session.masks)} masks -> "
          f"{len(m.instances)} landmarks {dict(sorted(classes.items()))}, {len(m.static_anchors)} ConMods")
    print(f"  plants alive in the plot: {len(world.alive_plants(d.truth.season, [plot]))}")

a, b = maps
gate = GateParams.isotropic(noise.effective_sigma * 2 ** 0.5)
matches = match_cross_season(a, b, gate, "anchor_relative", anchors=AnchorParams())
metrics = evaluate_association(matches, world, a, b, deps[0].truth, deps[1].truth)
print(f"\n{len(matches)} matches; precision {metrics.precision:.3f}, recall {metrics.recall:.3f}, "
      f"F1 {metrics.f1:.3f}")

beliefs = track_persistence(a, b, matches)
veg = [bel for k, bel in beliefs.items() if ":vegetation:" in k]
seen = sum(1 for bel in veg if bel.evidence_log[-1][1])
print(f"vegetation beliefs: {seen} re-detected, {len(veg) - seen} missed")
for bel in sorted(veg, key=lambda x: x.survival_posterior)[:5]:
    print(f"  {bel.landmark_id}  P(alive) = {bel.survival_posterior:.3f}")
