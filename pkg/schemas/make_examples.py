"""Regenerate the canonical example artifacts in ``schemas/examples``.

    python schemas/make_examples.py

Runs the full CLI pipeline on a three-plot world and keeps one file of each
artifact type.  The output is deterministic, so a clean rerun leaves git
with nothing to commit.
"""
import json
import shutil
import sys
import tempfile
from pathlib import Path

from restorebot.cli import main

HERE = Path(__file__).resolve().parent
TINY = {
    "header": {"schema": "config", "version": 1},
    "seed": 1,
    "world": {"plot_count": 3, "plots_per_treatment": 1, "plots_per_row": 3, "plot_size": 3.0,
              "conmod_grid": 2, "conmod_spacing": 1.5, "shrubs_per_plot": 1},
    "simulation": {"plots": "conmod"},
    "report": {"noise_sweep": [0.05, 0.5], "sweep_seeds": 1},
}
PAIR = "S0-2021-02__S1-2021-11__anchor_relative"
KEEP = {
    "config.json": "config.json",
    "world.json": "world.json",
    "truth.json": "truth.json",
    "sessions/S0-2021-02/session.json": "session/session.json",
    "sessions/S0-2021-02/masks.jsonl": "session/masks.jsonl",
    "sessions/S0-2021-02/octree.bin": "session/octree.bin",
    "maps/S0-2021-02.json": "season_map.json",
    f"matches/{PAIR}.json": "matches.json",
    f"matches/{PAIR}.csv": "matches.csv",
    f"metrics/{PAIR}.json": "metrics.json",
    "report/metrics.csv": "report/metrics.csv",
    "report/matches.csv": "report/matches.csv",
    "report/noise_sweep.csv": "report/noise_sweep.csv",
    "report/match_distance_histogram.svg": "report/match_distance_histogram.svg",
    "report/f1_vs_noise.svg": "report/f1_vs_noise.svg",
}


def build(dest: Path) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp)
        cfg = run / "tiny.json"
        cfg.write_text(json.dumps(TINY))
        for cmd in ("generate", "map", "associate", "evaluate", "report"):
            if main([cmd, "--config", str(cfg), "--out", str(run / "out")]) != 0:
                sys.exit(f"{cmd} failed")
        if dest.exists():
            shutil.rmtree(dest)
        for src, dst in KEEP.items():
            (dest / dst).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(run / "out" / src, dest / dst)


if __name__ == "__main__":
    build(HERE / "examples")
