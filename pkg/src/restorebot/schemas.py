"""On-disk formats for sessions, maps, matches, metrics and simulator truth.

Every structured file is UTF-8 JSON whose first key is a header
``{"schema": <kind>, "version": <int>}``.  Mask lists are JSON Lines: one
header line, then one mask per line.  A file written by a newer version is
rejected rather than half-read.  Floats round-trip exactly (``json`` writes
``repr``).  All writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .association import CrossSeasonMatch, PersistenceBelief
from .errors import SchemaError
from .geo import Ellipsoid, GeoCoordinate, LocalFrame
from .octree import OccupancyOctree
from .perception import CameraIntrinsics, CameraPose, ImageStats, LandmarkObservation, SegmentMask
from .season_map import LandmarkInstance, SeasonMap
from .session import FrameRecord, Session

VERSION = 1


# -- plumbing ------------------------------------------------------------------

def atomic_write(path, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.chmod(tmp, 0o644)   # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _header(kind: str) -> dict:
    return {"schema": kind, "version": VERSION}


def check_header(doc, kind: str, source="") -> None:
    if not isinstance(doc, dict) or "schema" not in doc or "version" not in doc:
        raise SchemaError(f"{source or kind}: missing schema header")
    if doc["schema"] != kind:
        raise SchemaError(f"{source or kind}: expected schema {kind!r}, found {doc['schema']!r}")
    v = doc["version"]
    if not isinstance(v, int) or v < 1:
        raise SchemaError(f"{source or kind}: bad schema version {v!r}")
    if v > VERSION:
        raise SchemaError(f"{source or kind}: schema version {v} is newer than supported version {VERSION}")


def dumps(kind: str, body: dict) -> str:
    return json.dumps({"header": _header(kind), **body}, indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def loads(text: str, kind: str, source="") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source or kind}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{source or kind}: top level must be an object")
    check_header(doc.get("header"), kind, source)
    return doc


def read_doc(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    return loads(path.read_text(encoding="utf-8"), kind, str(path))


def _req(doc: dict, key: str, source: str):
    if key not in doc:
        raise SchemaError(f"{source}: missing field {key!r}")
    return doc[key]


def _arr(x) -> list:
    return np.asarray(x, dtype=float).tolist()


# -- shared pieces -------------------------------------------------------------

def frame_to_dict(f: LocalFrame) -> dict:
    o = f.origin
    return {"origin": [o.latitude, o.longitude, o.height],
            "ellipsoid": [f.ellipsoid.semi_major_axis, f.ellipsoid.flattening]}


def frame_from_dict(d: dict) -> LocalFrame:
    return LocalFrame(GeoCoordinate(*d["origin"]), Ellipsoid(*d["ellipsoid"]))


def _intrinsics_to_dict(k: CameraIntrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def _pose_to_dict(p: CameraPose) -> dict:
    return {"position": _arr(p.position), "rotation": _arr(p.rotation),
            "covariance": None if p.covariance is None else _arr(p.covariance)}


def _pose_from_dict(d: dict) -> CameraPose:
    return CameraPose(d["position"], d["rotation"], d["covariance"])


# -- sessions ------------------------------------------------------------------

def mask_to_dict(m: SegmentMask) -> dict:
    return {
        "frame_id": m.frame_id, "mask_id": m.mask_id, "width": m.width, "height": m.height,
        "runs": [[int(v), int(n)] for v, n in m.runs],
        "class_label": m.class_label, "confidence": m.confidence,
        "stats": None if m.stats is None else {"color_mean": list(m.stats.color_mean),
                                               "color_var": list(m.stats.color_var)},
    }


def mask_from_dict(d: dict) -> SegmentMask:
    st = d.get("stats")
    stats = None if st is None else ImageStats(tuple(st["color_mean"]), tuple(st["color_var"]))
    return SegmentMask(d["frame_id"], [tuple(r) for r in d["runs"]], d["width"], d["height"],
                       d.get("class_label"), d.get("confidence", 0.0), stats, d.get("mask_id", ""))


def write_masks(path, masks: list[SegmentMask]) -> Path:
    lines = [json.dumps(_header("masks"))]
    lines += [json.dumps(mask_to_dict(m), allow_nan=False) for m in masks]
    return atomic_write(path, "\n".join(lines) + "\n")


def read_masks(path) -> list[SegmentMask]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty mask file")
    try:
        check_header(json.loads(lines[0]), "masks", str(path))
        out = []
        for line in lines[1:]:
            if line.strip():
                out.append(mask_from_dict(json.loads(line)))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad mask record ({exc})") from None
    return out


def write_session(directory, s: Session) -> Path:
    """``session.json`` manifest plus ``masks.jsonl`` and, when present, ``octree.bin``."""
    directory = Path(directory)
    files = {"masks": "masks.jsonl"}
    write_masks(directory / files["masks"], s.masks)
    if s.octree is not None:
        files["octree"] = "octree.bin"
        atomic_write(directory / files["octree"], s.octree.dump())
    body = {
        "session_id": s.session_id,
        "season_tag": s.season_tag,
        "season_time": s.season_time,
        "frame": frame_to_dict(s.frame),
        "ground_height": s.ground_height,
        "cameras": {cid: _intrinsics_to_dict(k) for cid, k in sorted(s.cameras.items())},
        "camera_roles": dict(sorted(s.camera_roles.items())),
        "frames": [{"frame_id": f.frame_id, "timestamp": f.timestamp, "camera_id": f.camera_id,
                    "plot": f.plot, **_pose_to_dict(f.pose)} for f in s.frames],
        "files": files,
    }
    return atomic_write(directory / "session.json", dumps("session", body))


def read_session(path) -> Session:
    """Load a manifest (or the directory holding ``session.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / "session.json"
    doc = read_doc(path, "session")
    src = str(path)
    try:
        files = _req(doc, "files", src)
        for name in files.values():
            if not (path.parent / name).is_file():
                raise FileNotFoundError(f"{src}: referenced file {name} does not exist")
        frames = [FrameRecord(f["frame_id"], float(f["timestamp"]), f["camera_id"], _pose_from_dict(f),
                              f.get("plot", "")) for f in _req(doc, "frames", src)]
        times = [f.timestamp for f in frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise SchemaError(f"{src}: frames are not time-ordered")
        cameras = {cid: CameraIntrinsics(**k) for cid, k in _req(doc, "cameras", src).items()}
        for f in frames:
            if f.camera_id not in cameras:
                raise SchemaError(f"{src}: frame {f.frame_id} uses unknown camera {f.camera_id!r}")
        octree = None
        if "octree" in files:
            octree = OccupancyOctree.load((path.parent / files["octree"]).read_bytes())
        return Session(
            _req(doc, "session_id", src), _req(doc, "season_tag", src), float(_req(doc, "season_time", src)),
            frame_from_dict(_req(doc, "frame", src)), cameras, frames,
            read_masks(path.parent / files["masks"]), float(doc.get("ground_height", 0.0)), octree,
            dict(doc.get("camera_roles", {})),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{src}: malformed session ({exc!r})") from None
    except ValueError as exc:
        raise SchemaError(f"{src}: {exc}") from None


# -- season maps ---------------------------------------------------------------

def _obs_to_dict(o: LandmarkObservation) -> dict:
    return {
        "position": _arr(o.position), "position_covariance": _arr(o.position_covariance),
        "class_label": o.class_label, "descriptor": _arr(o.descriptor), "timestamp": o.timestamp,
        "frame_id": o.frame_id, "mask_id": o.mask_id, "confidence": o.confidence,
        "geo": None if o.geo is None else [o.geo.latitude, o.geo.longitude, o.geo.height],
    }


def _obs_from_dict(d: dict) -> LandmarkObservation:
    return LandmarkObservation(
        np.array(d["position"], dtype=float), np.array(d["position_covariance"], dtype=float),
        d["class_label"], np.array(d["descriptor"], dtype=float), d["timestamp"], d["frame_id"],
        None if d["geo"] is None else GeoCoordinate(*d["geo"]), d["mask_id"], d["confidence"],
    )


def _inst_to_dict(i: LandmarkInstance) -> dict:
    return {
        "instance_id": i.instance_id, "class_label": i.class_label,
        "mean_position": _arr(i.mean_position), "position_spread": _arr(i.position_spread),
        "descriptor_mean": _arr(i.descriptor_mean), "descriptor_var": _arr(i.descriptor_var),
        "anchor_offsets": [[cid, _arr(off)] for cid, off in i.anchor_offsets],
        "observations": [_obs_to_dict(o) for o in i.observations],
    }


def _inst_from_dict(d: dict) -> LandmarkInstance:
    return LandmarkInstance(
        d["instance_id"], d["class_label"], np.array(d["mean_position"], dtype=float),
        np.array(d["position_spread"], dtype=float), np.array(d["descriptor_mean"], dtype=float),
        np.array(d["descriptor_var"], dtype=float), [_obs_from_dict(o) for o in d["observations"]],
        [(cid, np.array(off, dtype=float)) for cid, off in d["anchor_offsets"]],
    )


def season_map_to_dict(m: SeasonMap) -> dict:
    return {
        "session_id": m.session_id, "season_tag": m.season_tag, "season_time": m.season_time,
        "frame": frame_to_dict(m.frame),
        "instances": [_inst_to_dict(i) for i in m.instances],
        "static_anchors": [_inst_to_dict(i) for i in m.static_anchors],
        "trajectory": [[t, _arr(p)] for t, p in m.trajectory],
        "skipped": dict(sorted(m.skipped.items())),
    }


def season_map_from_dict(d: dict, source="season_map") -> SeasonMap:
    try:
        return SeasonMap(
            d["session_id"], d["season_tag"], float(d["season_time"]), frame_from_dict(d["frame"]),
            [_inst_from_dict(i) for i in d["instances"]], [_inst_from_dict(i) for i in d["static_anchors"]],
            [(t, np.array(p, dtype=float)) for t, p in d["trajectory"]], dict(d["skipped"]),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{source}: malformed season map ({exc!r})") from None


def write_season_map(path, m: SeasonMap) -> Path:
    return atomic_write(path, dumps("season_map", season_map_to_dict(m)))


def read_season_map(path) -> SeasonMap:
    return season_map_from_dict(read_doc(path, "season_map"), str(path))


# -- matches -------------------------------------------------------------------

def write_matches(path, session_a: str, session_b: str, mode: str, matches: list[CrossSeasonMatch],
                  beliefs: dict[str, PersistenceBelief] | None = None) -> Path:
    body = {
        "session_a": session_a, "session_b": session_b, "mode": mode,
        "matches": [{"instance_a_id": m.instance_a_id, "instance_b_id": m.instance_b_id,
                     "mahalanobis_distance": m.mahalanobis_distance,
                     "descriptor_distance": m.descriptor_distance, "method": m.method,
                     "posterior": m.posterior} for m in matches],
        "beliefs": [{"landmark_id": b.landmark_id, "survival_posterior": b.survival_posterior,
                     "last_update_time": b.last_update_time,
                     "evidence_log": [[t, d] for t, d in b.evidence_log],
                     # infinite log-odds are implied by a posterior of exactly 0 or 1
                     "log_odds": b.log_odds if math.isfinite(b.log_odds) else None}
                    for _, b in sorted((beliefs or {}).items())],
    }
    return atomic_write(path, dumps("matches", body))


def read_matches(path) -> dict:
    """``{"session_a", "session_b", "mode", "matches": [...], "beliefs": {...}}``."""
    doc = read_doc(path, "matches")
    try:
        return {
            "session_a": doc["session_a"], "session_b": doc["session_b"], "mode": doc["mode"],
            "matches": [CrossSeasonMatch(**m) for m in doc["matches"]],
            "beliefs": {b["landmark_id"]: PersistenceBelief(
                b["landmark_id"], b["survival_posterior"], b["last_update_time"],
                tuple((t, bool(x)) for t, x in b["evidence_log"]), b.get("log_odds"))
                for b in doc["beliefs"]},
        }
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed matches ({exc!r})") from None


# -- metrics -------------------------------------------------------------------

def write_metrics(path, body: dict) -> Path:
    return atomic_write(path, dumps("metrics", body))


def read_metrics(path) -> dict:
    doc = read_doc(path, "metrics")
    doc.pop("header")
    return doc


# -- simulator world and truth -------------------------------------------------

def _config_to_dict(cfg) -> dict:
    from dataclasses import asdict
    d = asdict(cfg)
    return json.loads(json.dumps(d))  # tuples -> lists


def _config_from_dict(d: dict):
    from .simulator.world import GrowthModel, WorldConfig
    d = dict(d)
    g = d.pop("growth_model")
    g["color_drift"] = tuple(g["color_drift"])
    for key in ("microsite_radius_range", "initial_radius_range", "season_tags", "origin"):
        d[key] = tuple(d[key])
    return WorldConfig(**d, growth_model=GrowthModel(**g))


def write_world(path, world, session_ids: list[str]) -> Path:
    """Site description the pipeline may read: layout and sessions, no identities."""
    body = {
        "frame": frame_to_dict(world.frame),
        "season_tags": list(world.config.season_tags),
        "plots": [{"plot_id": p.plot_id, "treatment": p.treatment, "x0": p.x0, "y0": p.y0, "size": p.size}
                  for p in world.plots],
        "sessions": list(session_ids),
    }
    return atomic_write(path, dumps("world", body))


def read_world(path) -> dict:
    doc = read_doc(path, "world")
    doc.pop("header")
    return doc


def write_truth(path, world, truths) -> Path:
    """Sidecar ground truth; the mapping and association steps never open it."""
    body = {
        "config": _config_to_dict(world.config),
        "frame": frame_to_dict(world.frame),
        "plots": [{"plot_id": p.plot_id, "treatment": p.treatment, "x0": p.x0, "y0": p.y0, "size": p.size}
                  for p in world.plots],
        "plants": [{"plant_id": p.plant_id, "plot_id": p.plot_id, "species": p.species,
                    "position": _arr(p.position), "birth_season": p.birth_season,
                    "death_season": p.death_season, "radius": list(p.radius),
                    "color": [list(c) for c in p.color], "aspect": p.aspect, "angle": p.angle}
                   for p in world.plants],
        "conmods": [{"conmod_id": c.conmod_id, "plot_id": c.plot_id, "position": _arr(c.position)}
                    for c in world.conmods],
        "microsites": [{"microsite_id": m.microsite_id, "plot_id": m.plot_id, "kind": m.kind,
                        "position": _arr(m.position), "radius": m.radius, "aspect": m.aspect, "angle": m.angle}
                       for m in world.microsites],
        "shrubs": [{"shrub_id": s.shrub_id, "plot_id": s.plot_id, "position": _arr(s.position),
                    "radius": s.radius, "height": s.height} for s in world.shrubs],
        "sessions": [{"session_id": t.session_id, "season": t.season,
                      "mask_source": dict(sorted(t.mask_source.items())),
                      "pose_error": {k: _arr(v) for k, v in sorted(t.pose_error.items())}}
                     for t in truths],
    }
    return atomic_write(path, dumps("truth", body))


def read_truth(path):
    """``(GroundTruth, {session_id: SessionTruth})``."""
    from .simulator.deployment import SessionTruth
    from .simulator.world import ConMod, GroundTruth, Microsite, Plant, Plot, Shrub
    doc = read_doc(path, "truth")
    try:
        world = GroundTruth(
            _config_from_dict(doc["config"]), frame_from_dict(doc["frame"]),
            [Plot(**p) for p in doc["plots"]],
            [Plant(p["plant_id"], p["plot_id"], p["species"], np.array(p["position"]), p["birth_season"],
                   p["death_season"], list(p["radius"]), [tuple(c) for c in p["color"]], p["aspect"], p["angle"])
             for p in doc["plants"]],
            [ConMod(c["conmod_id"], c["plot_id"], np.array(c["position"])) for c in doc["conmods"]],
            [Microsite(m["microsite_id"], m["plot_id"], m["kind"], np.array(m["position"]), m["radius"],
                       m["aspect"], m["angle"]) for m in doc["microsites"]],
            [Shrub(s["shrub_id"], s["plot_id"], np.array(s["position"]), s["radius"], s["height"])
             for s in doc["shrubs"]],
        )
        truths = {t["session_id"]: SessionTruth(t["session_id"], t["season"], dict(t["mask_source"]),
                                                {k: np.array(v) for k, v in t["pose_error"].items()})
                  for t in doc["sessions"]}
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed truth ({exc!r})") from None
    return world, truths
