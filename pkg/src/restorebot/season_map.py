"""Within-season association: observations to landmark instances.

Observations of one class are first split into spatially connected groups
(single linkage at ``link_radius``); each group is clustered with k-means
(k-means++ seeding, Lloyd iterations) and over-split clusters are merged
back when both their centroids and their descriptors agree.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import EmptySession, NoAnchors, RestoreBotError
from .geo import LocalFrame
from .perception import (
    DESCRIPTOR_FIELDS,
    LandmarkObservation,
    ProjectionNoise,
    project_down_facing,
    project_front_facing,
)
from .session import Session

log = logging.getLogger(__name__)

ORIENTATION = DESCRIPTOR_FIELDS.index("orientation")
# typical within-instance spread of each descriptor component
DESCRIPTOR_SCALE = np.array([0.004, 0.04, 0.04, 0.04, 0.01, 0.01, 0.01, 0.5, 1.0, 15.0])
CONMOD_DIAMETER = 0.30


@dataclass
class ClusterParams:
    k: int | None = None
    merge_radius: float = 0.15
    descriptor_gate: float = 4.0
    max_k: int = 20
    silhouette_threshold: float = 0.5
    link_radius: float = 0.15
    seed: int = 0
    n_init: int = 3
    max_iter: int = 300
    # wider link/merge radius for classes much larger than a seedling; shrub
    # positions also carry the octree's voxel quantisation
    class_radius: dict[str, float] = field(default_factory=lambda: {"shrub": 0.45})

    def for_class(self, label: str) -> "ClusterParams":
        r = self.class_radius.get(label)
        if r is None:
            return self
        return replace(self, link_radius=r, merge_radius=max(self.merge_radius, r))


@dataclass
class LandmarkInstance:
    instance_id: str
    class_label: str
    mean_position: np.ndarray
    position_spread: np.ndarray
    descriptor_mean: np.ndarray
    descriptor_var: np.ndarray
    observations: list[LandmarkObservation]
    anchor_offsets: list[tuple[str, np.ndarray]] = field(default_factory=list)

    @classmethod
    def from_observations(cls, instance_id: str, obs: list[LandmarkObservation]) -> "LandmarkInstance":
        labels = {o.class_label for o in obs}
        if len(labels) != 1:
            raise ValueError(f"instance members must share one class, got {sorted(labels)}")
        pos = np.array([o.position for o in obs])
        desc = np.array([o.descriptor for o in obs])
        mean = pos.mean(axis=0)
        d = pos - mean
        spread = d.T @ d / len(obs)
        dmean = desc.mean(axis=0)
        # orientation is an axis angle in [0, pi): average on the doubled circle
        two = 2 * desc[:, ORIENTATION]
        dmean[ORIENTATION] = (0.5 * math.atan2(np.sin(two).mean(), np.cos(two).mean())) % math.pi
        return cls(instance_id, labels.pop(), mean, spread, dmean, desc.var(axis=0), list(obs))

    def anchor_dict(self) -> dict[str, np.ndarray]:
        return dict(self.anchor_offsets)


@dataclass
class SeasonMap:
    session_id: str
    season_tag: str
    season_time: float
    frame: LocalFrame
    instances: list[LandmarkInstance]
    static_anchors: list[LandmarkInstance]
    trajectory: list[tuple[float, np.ndarray]] = field(default_factory=list)
    skipped: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [i.instance_id for i in self.instances + self.static_anchors]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")
        if any(a.class_label != "conmod" for a in self.static_anchors):
            raise ValueError("static anchors must be conmod instances")

    def by_id(self) -> dict[str, LandmarkInstance]:
        return {i.instance_id: i for i in self.instances + self.static_anchors}


# -- k-means -------------------------------------------------------------------

def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability ~ D^2."""
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a centre
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy()


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per point; ties go to the lowest centroid index."""
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int = 300):
    """Lloyd iterations from the given centres. Empty clusters keep their centre."""
    c = np.array(centroids, dtype=float)
    labels = None
    for _ in range(max_iter):
        new = assign(x, c)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(c)):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return labels, c


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_init: int = 3, max_iter: int = 300):
    """Best of ``n_init`` seeded runs by inertia; deterministic for a fixed seed."""
    x = np.asarray(x, dtype=float)
    k = max(1, min(k, len(x)))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, c = lloyd(x, kmeans_pp_init(x, k, rng), max_iter)
        inertia = float(((x - c[labels]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, labels, c)
    return best[1], best[2]


def silhouette(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient; singleton clusters score 0."""
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    d = cdist(x, x)
    n = len(x)
    onehot = labels[:, None] == uniq[None, :]
    sizes = onehot.sum(axis=0)
    sums = d @ onehot
    own = np.searchsorted(uniq, labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = sums / sizes
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1), 0.0)
    return float(s.mean())


def choose_k(x: np.ndarray, params: ClusterParams) -> int:
    """Silhouette sweep; k = 1 unless some k >= 2 scores above the threshold."""
    n = len(x)
    best_k, best_s = 1, -math.inf
    for k in range(2, min(params.max_k, n - 1) + 1):
        labels, _ = kmeans(x, k, params.seed, params.n_init, params.max_iter)
        s = silhouette(x, labels)
        if s > best_s + 1e-12:
            best_k, best_s = k, s
    return best_k if best_s >= params.silhouette_threshold else 1


def descriptor_distance(a: np.ndarray, b: np.ndarray, scale: np.ndarray = DESCRIPTOR_SCALE) -> float:
    """Scaled Euclidean distance, orientation excluded."""
    z = (np.asarray(a) - np.asarray(b)) / scale
    z[ORIENTATION] = 0.0
    return float(np.sqrt(np.sum(z * z)))


def _merge_groups(centroids, descriptors, params: ClusterParams) -> np.ndarray:
    """Union clusters that agree in position and descriptor; returns a group per cluster."""
    k = len(centroids)
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(k):
        for j in range(i + 1, k):
            if (np.linalg.norm(centroids[i] - centroids[j]) <= params.merge_radius
                    and descriptor_distance(descriptors[i], descriptors[j]) <= params.descriptor_gate):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(k)]
    _, groups = np.unique(roots, return_inverse=True)
    return groups


def _cluster_labels(obs: list[LandmarkObservation], params: ClusterParams) -> np.ndarray:
    x = np.array([o.position for o in obs], dtype=float)
    if np.all(x == x[0]):
        return np.zeros(len(obs), dtype=int)
    k = params.k if params.k is not None else choose_k(x, params)
    labels, _ = kmeans(x, k, params.seed, params.n_init, params.max_iter)
    _, labels = np.unique(labels, return_inverse=True)
    desc = np.array([o.descriptor for o in obs])
    m = labels.max() + 1
    cents = np.array([x[labels == j].mean(axis=0) for j in range(m)])
    dmeans = np.array([desc[labels == j].mean(axis=0) for j in range(m)])
    return _merge_groups(cents, dmeans, params)[labels]


def cluster_observations(obs: list[LandmarkObservation], params: ClusterParams | None = None,
                         id_prefix: str = "") -> list[LandmarkInstance]:
    """Cluster single-class observations into instances.

    Every observation lands in exactly one instance.  Instances are returned
    in order of their first member.
    """
    params = params or ClusterParams()
    if not obs:
        raise ValueError("no observations to cluster")
    labels = _cluster_labels(obs, params)
    order = []
    for lab in labels.tolist():
        if lab not in order:
            order.append(lab)
    return [
        LandmarkInstance.from_observations(f"{id_prefix}{i:04d}",
                                           [o for o, l in zip(obs, labels) if l == lab])
        for i, lab in enumerate(order)
    ]


def connected_groups(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage component label of each point at the given link radius."""
    n = len(points)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp


def cluster_class(obs: list[LandmarkObservation], params: ClusterParams,
                  id_prefix: str = "") -> list[LandmarkInstance]:
    """Cluster a whole class: connected groups first, k-means inside each group.

    A group no wider than ``link_radius`` is taken as one instance without
    running k-means.
    """
    if not obs:
        return []
    pts = np.array([o.position for o in obs])
    comp = connected_groups(pts[:, :2], params.link_radius)
    members: dict[int, list[int]] = {}
    for i, c in enumerate(comp.tolist()):
        members.setdefault(c, []).append(i)
    groups = []
    for idx in members.values():
        sub = [obs[i] for i in idx]
        p = pts[idx]
        if np.max(np.ptp(p[:, :2], axis=0)) <= params.link_radius or len(sub) < 3:
            groups.append(sub)
            continue
        for inst in cluster_observations(sub, params):
            groups.append(inst.observations)
    # stable ids: order by mean position
    groups.sort(key=lambda g: tuple(np.round(np.mean([o.position for o in g], axis=0), 9)))
    return [LandmarkInstance.from_observations(f"{id_prefix}{i:04d}", g) for i, g in enumerate(groups)]


# -- map building --------------------------------------------------------------

def project_session(session: Session, noise: ProjectionNoise | None = None,
                    classifier=None, georeference: bool = True,
                    drop_border: bool = True) -> tuple[list[LandmarkObservation], dict[str, int]]:
    """Run perception on every mask; failures are counted, not raised."""
    frames = session.frame_index()
    skipped = {"no_pose": 0, "border": 0, "projection": 0}
    out = []
    geo_frame = session.frame if georeference else None
    for m in sorted(session.masks, key=lambda m: (m.frame_id, m.mask_id)):
        fr = frames.get(m.frame_id)
        if fr is None:
            skipped["no_pose"] += 1
            continue
        try:
            if drop_border and m.touches_border():
                skipped["border"] += 1
                continue
            k = session.cameras[fr.camera_id]
            if session.role(fr.camera_id) == "front":
                if session.octree is None:
                    raise RestoreBotError("front-facing mask without an octree")
                o = project_front_facing(m, k, fr.pose, session.octree, timestamp=fr.timestamp,
                                         frame=geo_frame, classifier=classifier)
            else:
                o = project_down_facing(m, k, fr.pose, session.ground_height, timestamp=fr.timestamp,
                                        frame=geo_frame, noise=noise, classifier=classifier)
        except RestoreBotError as exc:
            log.debug("skipping mask %s: %s", m.mask_id, exc)
            skipped["projection"] += 1
            continue
        out.append(o)
    return out, skipped


def build_season_map(session: Session, params: ClusterParams | None = None, *,
                     noise: ProjectionNoise | None = None, classifier=None,
                     georeference: bool = True) -> SeasonMap:
    """Project, partition by class, cluster, and split off ConMod anchors."""
    params = params or ClusterParams()
    if not session.frames or not session.masks:
        raise EmptySession(f"session {session.session_id} has no frames or masks")
    obs, skipped = project_session(session, noise, classifier, georeference)
    if not obs:
        raise EmptySession(f"session {session.session_id}: no usable observations")
    if any(skipped.values()):
        log.info("session %s: skipped %s", session.session_id, skipped)
    by_class: dict[str, list[LandmarkObservation]] = {}
    for o in obs:
        by_class.setdefault(o.class_label, []).append(o)
    instances, anchors = [], []
    for label in sorted(by_class):
        found = cluster_class(by_class[label], params.for_class(label), f"{session.session_id}:{label}:")
        if label == "conmod":
            for inst in found:
                # a ConMod is ~30 cm across; wider spreads are not one ConMod
                if math.sqrt(np.trace(inst.position_spread[:2, :2])) <= CONMOD_DIAMETER:
                    anchors.append(inst)
                else:
                    skipped["conmod_spread"] = skipped.get("conmod_spread", 0) + 1
                    instances.append(inst)
        else:
            instances.extend(found)
    trajectory = [(f.timestamp, f.pose.position.copy()) for f in sorted(session.frames, key=lambda f: f.timestamp)]
    return SeasonMap(session.session_id, session.season_tag, session.season_time, session.frame,
                     instances, anchors, trajectory, skipped)


def anchor_to_static(season_map: SeasonMap, n_anchors: int = 3,
                     max_distance: float | None = None) -> SeasonMap:
    """Fill each instance's offsets to its ``n_anchors`` nearest ConMods.

    Offsets are ``instance - anchor`` and are listed by anchor id.  Anchors
    farther than ``max_distance`` (horizontal) are ignored when it is given.
    The map is updated in place and returned.
    """
    anchors = season_map.static_anchors
    if not anchors:
        raise NoAnchors(f"map {season_map.session_id} has no static anchors")
    apos = np.array([a.mean_position for a in anchors])
    n = min(n_anchors, len(anchors))
    for inst in season_map.instances:
        d = np.linalg.norm(apos[:, :2] - inst.mean_position[:2], axis=1)
        nearest = sorted(range(len(anchors)), key=lambda j: (d[j], anchors[j].instance_id))[:n]
        if max_distance is not None:
            nearest = [j for j in nearest if d[j] <= max_distance]
        inst.anchor_offsets = sorted(
            ((anchors[j].instance_id, inst.mean_position - anchors[j].mean_position) for j in nearest),
            key=lambda t: t[0],
        )
    return season_map
