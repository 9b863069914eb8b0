"""``restorebot`` command line: generate, map, associate, evaluate, report.

Every subcommand reads and writes files under ``--out``::

    config.json                 resolved configuration (written by generate)
    world.json                  site layout and session list
    truth.json                  simulator ground truth (evaluate only)
    sessions/<sid>/             session.json, masks.jsonl, octree.bin
    maps/<sid>.json             one season map per session
    matches/<a>__<b>__<mode>.json   matches and persistence beliefs
    matches/<a>__<b>__<mode>.csv    tabular match report
    metrics/<a>__<b>__<mode>.json   association metrics
    report/                     CSV tables and SVG plots

Failures print one JSON error record on stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report as rep
from .association import (
    DescriptorGate,
    DetectorModel,
    GateParams,
    SurvivalPrior,
    match_cross_season,
    track_persistence,
)
from .config import PipelineConfig, dump_config, load_config
from .errors import InvalidConfig, RestoreBotError
from .schemas import (
    atomic_write,
    read_doc,
    read_matches,
    read_metrics,
    read_season_map,
    read_session,
    read_truth,
    read_world,
    write_matches,
    write_metrics,
    write_season_map,
    write_session,
    write_truth,
    write_world,
)

log = logging.getLogger("restorebot")


class SessionMismatch(RestoreBotError):
    """Artifacts that should describe the same sessions do not."""


class CliError(RestoreBotError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _mode(text: str) -> str:
    mode = text.replace("-", "_")
    if mode not in ("location_only", "anchor_relative"):
        raise argparse.ArgumentTypeError("mode must be location-only or anchor-relative")
    return mode


def _sigmas(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of sigmas: {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("sigmas must be a non-empty list of non-negative numbers")
    return vals


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline configuration (JSON)")
    common.add_argument("--seed", type=_seed, help="override the configured seed")
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="restorebot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="simulate a world and its survey sessions")
    m = sub.add_parser("map", parents=[common], help="build a season map per session")
    m.add_argument("--sessions", nargs="+", type=Path, help="session manifests (default: all in --out)")
    a = sub.add_parser("associate", parents=[common], help="match two season maps")
    a.add_argument("--mode", type=_mode)
    a.add_argument("--maps", nargs=2, type=Path, metavar=("MAP_A", "MAP_B"))
    e = sub.add_parser("evaluate", parents=[common], help="score matches against ground truth")
    e.add_argument("--mode", type=_mode, help="which matches to score (ignored with --matches)")
    e.add_argument("--matches", type=Path)
    e.add_argument("--maps", nargs=2, type=Path, metavar=("MAP_A", "MAP_B"))
    e.add_argument("--truth", type=Path)
    r = sub.add_parser("report", parents=[common], help="CSV tables and SVG plots")
    r.add_argument("--noise-sweep", type=_sigmas, help="pose sigmas for the F1 sweep, e.g. 0.05,0.3,0.5")
    return p


# -- configuration -------------------------------------------------------------

def resolve_config(args) -> PipelineConfig:
    """``--config``, else the run's ``config.json``, else defaults; ``--seed`` wins."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif (args.out / "config.json").is_file():
        cfg = load_config(args.out / "config.json")
    else:
        cfg = PipelineConfig()
    return cfg if args.seed is None else cfg.with_seed(args.seed)


def _pair_name(a: str, b: str, mode: str) -> str:
    return f"{a}__{b}__{mode}"


def _session_id(world_doc: dict, season: int) -> str:
    tags = world_doc["season_tags"]
    if not 0 <= season < len(tags):
        raise InvalidConfig(f"season {season} not in world ({len(tags)} seasons)")
    return f"S{season}-{tags[season]}"


# -- subcommands ---------------------------------------------------------------

def cmd_generate(args, cfg: PipelineConfig) -> list[Path]:
    from .simulator import generate_world, session_id_for, simulate_deployment
    world = generate_world(cfg.world)
    plots = cfg.simulation.plots
    if plots == "all":
        plots = None
    elif plots == "conmod":
        plots = [p.plot_id for p in world.plots if p.treatment == "conmod"]
    out = [atomic_write(args.out / "config.json", dump_config(cfg))]
    truths, sids = [], []
    for season in sorted(cfg.simulation.seasons):
        d = simulate_deployment(world, season, cfg.noise, cfg.trajectory, plots=plots,
                                label_masks=cfg.simulation.label_masks, octree_params=cfg.octree)
        sid = session_id_for(world, season)
        out.append(write_session(args.out / "sessions" / sid, d.session))
        truths.append(d.truth)
        sids.append(sid)
    out.append(write_world(args.out / "world.json", world, sids))
    out.append(write_truth(args.out / "truth.json", world, truths))
    return out


def cmd_map(args, cfg: PipelineConfig) -> list[Path]:
    from .season_map import build_season_map
    paths = args.sessions or sorted((args.out / "sessions").glob("*/session.json"))
    if not paths:
        raise FileNotFoundError(f"no sessions under {args.out / 'sessions'}")
    out = []
    for path in paths:
        s = read_session(path)
        m = build_season_map(s, cfg.cluster, noise=cfg.projection)
        out.append(write_season_map(args.out / "maps" / f"{s.session_id}.json", m))
    return out


def _default_maps(args, cfg: PipelineConfig) -> tuple[Path, Path]:
    world = read_world(args.out / "world.json")
    a = _session_id(world, cfg.association.season_a)
    b = _session_id(world, cfg.association.season_b)
    return args.out / "maps" / f"{a}.json", args.out / "maps" / f"{b}.json"


def _session_horizontal_cov(out: Path, session_id: str) -> np.ndarray:
    doc = read_doc(out / "sessions" / session_id / "session.json", "session")
    covs = [np.asarray(f["covariance"], float)[:2, :2] for f in doc["frames"] if f.get("covariance")]
    if not covs:
        raise InvalidConfig(f"session {session_id} reports no pose covariance; "
                            "set association.localization_sigma")
    return np.mean(covs, axis=0)


def gate_for(args, cfg: PipelineConfig, sid_a: str, sid_b: str) -> GateParams:
    """Location gate: configured sigma, or the two sessions' reported pose covariances."""
    ac = cfg.association
    if ac.localization_sigma is not None:
        return GateParams(np.eye(2) * 2 * ac.localization_sigma ** 2, ac.chi2_threshold)
    cov = _session_horizontal_cov(args.out, sid_a) + _session_horizontal_cov(args.out, sid_b)
    return GateParams(0.5 * (cov + cov.T), ac.chi2_threshold)


def cmd_associate(args, cfg: PipelineConfig) -> list[Path]:
    pa, pb = args.maps or _default_maps(args, cfg)
    ma, mb = read_season_map(pa), read_season_map(pb)
    mode = args.mode or cfg.association.mode
    gate = gate_for(args, cfg, ma.session_id, mb.session_id)
    dgate = DescriptorGate(cfg.association.descriptor_threshold) if cfg.association.descriptor_gate else None
    matches = match_cross_season(ma, mb, gate, mode, descriptor_gate=dgate, anchors=cfg.anchors)
    ps = cfg.persistence
    beliefs = track_persistence(ma, mb, matches, DetectorModel(ps.p_detect, ps.p_false),
                                SurvivalPrior(ps.hazard_rate), ps.survey_radius)
    matches = [replace(m, posterior=beliefs[m.instance_a_id].survival_posterior) for m in matches]
    name = _pair_name(ma.session_id, mb.session_id, mode)
    return [
        write_matches(args.out / "matches" / f"{name}.json", ma.session_id, mb.session_id, mode, matches, beliefs),
        rep.write_match_report(args.out / "matches" / f"{name}.csv", matches),
    ]


def cmd_evaluate(args, cfg: PipelineConfig) -> list[Path]:
    from .simulator import evaluate_association
    if args.matches is not None:
        mpath = args.matches
    else:
        a, b = (p.stem for p in _default_maps(args, cfg))
        mode = args.mode or cfg.association.mode
        mpath = args.out / "matches" / f"{_pair_name(a, b, mode)}.json"
    doc = read_matches(mpath)
    sa, sb = doc["session_a"], doc["session_b"]
    if args.maps:
        pa, pb = args.maps
    else:
        pa, pb = args.out / "maps" / f"{sa}.json", args.out / "maps" / f"{sb}.json"
    ma, mb = read_season_map(pa), read_season_map(pb)
    if (ma.session_id, mb.session_id) != (sa, sb):
        raise SessionMismatch(
            f"matches in {mpath.name} are between sessions {sa} and {sb}, "
            f"but the maps given are sessions {ma.session_id} and {mb.session_id}")
    world, truths = read_truth(args.truth or args.out / "truth.json")
    for sid in (sa, sb):
        if sid not in truths:
            raise SessionMismatch(f"ground truth has no session {sid} (has {', '.join(sorted(truths))})")
    metrics = evaluate_association(doc["matches"], world, ma, mb, truths[sa], truths[sb])
    body = {"session_a": sa, "session_b": sb, "mode": doc["mode"], **metrics.as_dict()}
    return [write_metrics(args.out / "metrics" / f"{_pair_name(sa, sb, doc['mode'])}.json", body)]


def cmd_report(args, cfg: PipelineConfig) -> list[Path]:
    from .experiments import noise_sweep
    rdir = args.out / "report"
    out = []
    rows, distances = [], {}
    for path in sorted((args.out / "metrics").glob("*.json")):
        m = read_metrics(path)
        rows.append((path.stem, m["mode"], *(m[k] for k in rep.METRIC_COLUMNS[2:])))
    out.append(atomic_write(rdir / "metrics.csv", rep.csv_text(rep.METRIC_COLUMNS, rows)))
    match_rows = []
    for path in sorted((args.out / "matches").glob("*.json")):
        doc = read_matches(path)
        distances[path.stem] = [m.mahalanobis_distance for m in doc["matches"]]
        match_rows += [(path.stem, *r) for r in rep.match_rows(doc["matches"])]
    out.append(atomic_write(rdir / "matches.csv", rep.csv_text(("pair", *rep.MATCH_COLUMNS), match_rows)))
    out.append(rep.distance_histogram(distances, rdir / "match_distance_histogram.svg",
                                      cfg.report.histogram_bins))
    sigmas = args.noise_sweep if args.noise_sweep is not None else cfg.report.noise_sweep
    if sigmas:
        modes = ("location_only", "anchor_relative")
        seeds = range(cfg.seed, cfg.seed + cfg.report.sweep_seeds)
        sweep = noise_sweep(sigmas, seeds, modes, base=cfg.noise, config=cfg.world)
        out.append(atomic_write(rdir / "noise_sweep.csv", rep.csv_text(
            ("sigma", *modes), [(r["sigma"], *(repr(r[m]) for m in modes)) for r in sweep])))
        out.append(rep.f1_vs_noise(sweep, modes, rdir / "f1_vs_noise.svg"))
    return out


COMMANDS = {
    "generate": cmd_generate,
    "map": cmd_map,
    "associate": cmd_associate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def error_record(command: str | None, exc: BaseException) -> str:
    return json.dumps({"error": {"command": command, "type": type(exc).__name__, "message": str(exc)}},
                      sort_keys=True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = argv[0] if argv and argv[0] in COMMANDS else None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        for path in COMMANDS[command](args, cfg):
            log.info("wrote %s", path)
    except (RestoreBotError, OSError, ValueError) as exc:
        print(error_record(command, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
