"""Why plants cannot be re-identified from GNSS position alone.

A world of restoration plots is surveyed in two seasons.  Every plot survey
carries its own slowly varying localisation offset of up to a metre, so the
same plant lands in a different place in each season's map.  Matching by
position then pairs neighbours with each other.  Measuring every plant
relative to the nearby ConMods removes the shared offset.

    python3 demos/localization_is_not_enough.py [n_seeds]
"""
import sys

from restorebot.experiments import association_trials, noise_sweep
from restorebot.simulator import NoiseModel

n = int(sys.argv[1]) if len(sys.argv) > 1 else 3
seeds = range(n)

print(f"ConMod plots, seasons 0 -> 1, {n} worlds\n")
noise = NoiseModel()
res = association_trials(seeds, noise)
print(f"per-plot pose sigma {noise.pose_noise_sigma} m, capped at {noise.pose_noise_max} m")
for mode, summary in res.items():
    per_seed = " ".join(f"{f:.2f}" for f in summary.per_seed)
    print(f"  {mode:16s} mean F1 {summary.mean:.3f}   [{per_seed}]")

print("\nF1 as the localisation error grows:")
print("  sigma   location_only   anchor_relative")
for row in noise_sweep([0.02, 0.1, 0.25, 0.5], seeds):
    print(f"  {row['sigma']:5.2f}   {row['location_only']:13.3f}   {row['anchor_relative']:15.3f}")
