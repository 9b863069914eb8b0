"""CSV tables and SVG plots for a finished run.

Plots go through matplotlib's Agg/SVG backend with a fixed hash salt and no
date metadata, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .schemas import atomic_write

METRIC_COLUMNS = ("pair", "mode", "precision", "recall", "f1", "true_positives", "false_positives",
                  "false_negatives", "n_matches", "n_persisting", "precision_undefined")
MATCH_COLUMNS = ("instance_a_id", "instance_b_id", "mahalanobis_distance", "descriptor_distance",
                 "method", "posterior")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def match_rows(matches) -> list[tuple]:
    return [(m.instance_a_id, m.instance_b_id, repr(m.mahalanobis_distance), repr(m.descriptor_distance),
             m.method, None if m.posterior is None else repr(m.posterior)) for m in matches]


def write_match_report(path, matches) -> Path:
    """One row per match: ids, distances, method, posterior."""
    return atomic_write(path, csv_text(MATCH_COLUMNS, match_rows(matches)))


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "restorebot"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    fig.clf()
    return atomic_write(path, buf.getvalue())


def distance_histogram(distances: dict[str, list[float]], path, bins: int = 20) -> Path:
    """Overlaid histograms of gate distances, one series per session pair."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    allv = np.concatenate([np.asarray(v, float) for v in distances.values()]) if distances else np.zeros(0)
    hi = float(allv.max()) if allv.size else 1.0
    edges = np.linspace(0.0, max(hi, 1e-9), bins + 1)
    for label, v in sorted(distances.items()):
        ax.hist(v, bins=edges, histtype="step", label=label)
    ax.set_xlabel("gate distance (sqrt chi-square)")
    ax.set_ylabel("matches")
    if distances:
        ax.legend(fontsize="small")
    out = _save_svg(fig, path)
    plt.close(fig)
    return out


def f1_vs_noise(rows: list[dict], modes, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    sig = [r["sigma"] for r in rows]
    for m in modes:
        ax.plot(sig, [r[m] for r in rows], marker="o", label=m.replace("_", "-"))
    ax.set_xlabel("per-plot pose sigma (m)")
    ax.set_ylabel("association F1")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize="small")
    out = _save_svg(fig, path)
    plt.close(fig)
    return out
