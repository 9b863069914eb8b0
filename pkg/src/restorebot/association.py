"""Cross-season association and per-landmark persistence beliefs.

Two matching modes are offered.  ``location_only`` compares absolute
positions in the shared local frame.  ``anchor_relative`` first pairs the
ConMod anchors of the two maps, then compares each instance's offsets to
those anchors, which cancels any localisation error shared by a plant and
its nearby anchors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientAnchors, NonMonotonicTime
from .perception import DESCRIPTOR_FIELDS
from .season_map import DESCRIPTOR_SCALE, LandmarkInstance, SeasonMap, anchor_to_static
from .session import Session

LOCATION_ONLY = "location_only"
ANCHOR_RELATIVE = "anchor_relative"
MODES = (LOCATION_ONLY, ANCHOR_RELATIVE)

CHI2_2DOF_95 = 5.991
# area, mean colour, elongation, perimeter/area
GATED_COMPONENTS = tuple(DESCRIPTOR_FIELDS.index(n) for n in
                         ("area_m2", "color_r", "color_g", "color_b", "elongation", "perimeter_per_area"))
CHI2_6DOF_99 = 16.812


@dataclass
class GateParams:
    localization_covariance: np.ndarray
    chi2_threshold: float = CHI2_2DOF_95

    def __post_init__(self):
        c = np.asarray(self.localization_covariance, dtype=float).reshape(2, 2)
        if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
            raise ValueError("localization covariance must be symmetric PSD")
        if not self.chi2_threshold > 0:
            raise ValueError("chi2_threshold must be positive")
        self.localization_covariance = c

    @classmethod
    def isotropic(cls, sigma: float, chi2_threshold: float = CHI2_2DOF_95) -> "GateParams":
        return cls(np.eye(2) * sigma ** 2, chi2_threshold)


@dataclass
class FeatureTransition:
    """Expected per-season change of each descriptor component."""
    drift: np.ndarray
    drift_variance: np.ndarray

    def __post_init__(self):
        self.drift = np.asarray(self.drift, dtype=float)
        self.drift_variance = np.asarray(self.drift_variance, dtype=float)
        if np.any(self.drift_variance < 0):
            raise ValueError("drift variance must be non-negative")

    @classmethod
    def static(cls, n: int = len(DESCRIPTOR_FIELDS)) -> "FeatureTransition":
        return cls(np.zeros(n), np.zeros(n))


def predict_features(desc, dt: float, f: FeatureTransition, variance=None):
    """Propagate a descriptor ``dt`` seasons ahead: mean drifts, variance grows linearly."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    desc = np.asarray(desc, dtype=float)
    var = np.zeros_like(desc) if variance is None else np.asarray(variance, dtype=float)
    return desc + f.drift * dt, var + f.drift_variance * dt


def fit_feature_transition(pairs) -> FeatureTransition:
    """Estimate drift from ``(desc_before, desc_after, dt)`` triples of known same-plant pairs."""
    a = np.array([p[0] for p in pairs], dtype=float)
    b = np.array([p[1] for p in pairs], dtype=float)
    dt = np.array([p[2] for p in pairs], dtype=float)
    if len(a) == 0 or np.any(dt <= 0):
        raise ValueError("need at least one pair with dt > 0")
    rate = (b - a) / dt[:, None]
    drift = rate.mean(axis=0)
    resid = (b - a - drift * dt[:, None]) / np.sqrt(dt)[:, None]
    var = (resid ** 2).mean(axis=0)
    orient = DESCRIPTOR_FIELDS.index("orientation")
    drift[orient] = 0.0
    var[orient] = 0.0
    return FeatureTransition(drift, var)


@dataclass
class DescriptorGate:
    """Optional appearance gate applied after the location gate.

    The gate centre is the season-A descriptor, shifted by ``transition``
    when one is given.  Differences are scored as a diagonal chi-square over
    ``GATED_COMPONENTS`` with variance ``var_a + var_b + floor (+ drift
    variance * dt)``.
    """
    threshold: float = CHI2_6DOF_99
    transition: FeatureTransition | None = None
    floor: np.ndarray = field(default_factory=lambda: DESCRIPTOR_SCALE ** 2)

    def score(self, a: LandmarkInstance, b: LandmarkInstance, dt: float) -> float:
        center, var = a.descriptor_mean, a.descriptor_var
        if self.transition is not None:
            center, var = predict_features(center, max(dt, 0.0), self.transition, var)
        var = var + b.descriptor_var + self.floor
        idx = list(GATED_COMPONENTS)
        z = (b.descriptor_mean[idx] - center[idx]) ** 2 / var[idx]
        return float(z.sum())


@dataclass(frozen=True)
class CrossSeasonMatch:
    instance_a_id: str
    instance_b_id: str
    mahalanobis_distance: float
    descriptor_distance: float
    method: str
    posterior: float | None = None


# -- gating --------------------------------------------------------------------

# keeps the gate defined when every covariance term is zero (noiseless input)
COVARIANCE_FLOOR = 1e-12


def _mahalanobis_sq(delta, cov) -> float:
    a, b, c = cov[0, 0] + COVARIANCE_FLOOR, cov[0, 1], cov[1, 1] + COVARIANCE_FLOOR
    x, y = delta[0], delta[1]
    # closed-form 2x2 inverse
    return float((c * x * x - 2 * b * x * y + a * y * y) / (a * c - b * b))


def _location_sq(a: LandmarkInstance, b: LandmarkInstance, g: GateParams) -> float:
    cov = g.localization_covariance + a.position_spread[:2, :2] + b.position_spread[:2, :2]
    return _mahalanobis_sq(b.mean_position[:2] - a.mean_position[:2], cov)


def gate_candidates(inst: LandmarkInstance, other: SeasonMap, g: GateParams) -> list[LandmarkInstance]:
    """Same-class instances of ``other`` inside the horizontal chi-square gate."""
    out = []
    for c in other.instances:
        if c.class_label != inst.class_label:
            continue
        if _location_sq(inst, c, g) <= g.chi2_threshold:
            out.append(c)
    return out


def _location_pairs(map_a: SeasonMap, map_b: SeasonMap, g: GateParams):
    """Same pairs as ``gate_candidates`` over all of ``map_a``, found with a KD-tree.

    The gate ellipse lies inside a disc whose radius uses the trace of the
    summed covariance as a bound on its largest eigenvalue.
    """
    by_class: dict[str, list[LandmarkInstance]] = {}
    for b in map_b.instances:
        by_class.setdefault(b.class_label, []).append(b)
    trees = {c: (cKDTree(np.array([b.mean_position[:2] for b in bs])), bs,
                 max(float(np.trace(b.position_spread[:2, :2])) for b in bs))
             for c, bs in by_class.items()}
    loc = float(np.trace(g.localization_covariance)) + 2 * COVARIANCE_FLOOR
    for a in map_a.instances:
        if a.class_label not in trees:
            continue
        tree, bs, spread_b = trees[a.class_label]
        bound = g.chi2_threshold * (loc + float(np.trace(a.position_spread[:2, :2])) + spread_b)
        for j in sorted(tree.query_ball_point(a.mean_position[:2], math.sqrt(bound) * (1 + 1e-9))):
            if _location_sq(a, bs[j], g) <= g.chi2_threshold:
                yield a, bs[j]


# -- anchor pairing ------------------------------------------------------------

@dataclass
class AnchorParams:
    neighbourhood: float = 4.0   # anchors considered when scoring a translation
    match_radius: float = 0.2    # residual allowed after translation
    n_anchors: int = 3
    max_distance: float = 6.0    # anchors farther from a plant are not used
    anchor_sigma: float = 0.05   # per-axis noise of an anchor offset in one season


def match_anchors(map_a: SeasonMap, map_b: SeasonMap, p: AnchorParams | None = None) -> dict[str, str]:
    """Pair ConMods across seasons by local translation consensus.

    For every candidate pair (a, b) the translation ``b - a`` is applied to
    the anchors around ``a``; its score is how many of them land within
    ``match_radius`` of a season-B anchor.  Pairs are then accepted greedily
    by score.  Only differences between positions enter, so the result does
    not depend on where either frame's origin sits.
    """
    p = p or AnchorParams()
    A, B = map_a.static_anchors, map_b.static_anchors
    if not A or not B:
        return {}
    pa = np.array([x.mean_position[:2] for x in A])
    pb = np.array([x.mean_position[:2] for x in B])
    tree_a, tree_b = cKDTree(pa), cKDTree(pb)
    candidates = []
    for i in range(len(A)):
        nb = np.array(tree_a.query_ball_point(pa[i], p.neighbourhood), dtype=int)
        rel = pa[nb] - pa[i]
        for j in range(len(B)):
            d, _ = tree_b.query(rel + pb[j], distance_upper_bound=p.match_radius)
            ok = np.isfinite(d)
            score = int(ok.sum())
            resid = float(d[ok].sum())
            candidates.append((-score, resid, A[i].instance_id, B[j].instance_id))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), {}
    for neg, _, ia, ib in candidates:
        if -neg < 2:
            break
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        pairs[ia] = ib
    return pairs


def _anchor_sq(a: LandmarkInstance, b: LandmarkInstance, pairs: dict[str, str], cov: np.ndarray):
    ob = b.anchor_dict()
    diffs = [off - ob[pairs[cid]] for cid, off in a.anchor_offsets if pairs.get(cid) in ob]
    if not diffs:
        return None
    delta = np.mean(diffs, axis=0)[:2]
    c = cov + a.position_spread[:2, :2] + b.position_spread[:2, :2]
    return _mahalanobis_sq(delta, c)


# -- assignment ----------------------------------------------------------------

def _greedy(scored):
    """One-to-one assignment in ascending distance; ties broken by ids."""
    scored.sort(key=lambda t: (t[0], t[1], t[2]))
    used_a, used_b, out = set(), set(), []
    for item in scored:
        if item[1] in used_a or item[2] in used_b:
            continue
        used_a.add(item[1])
        used_b.add(item[2])
        out.append(item)
    return out


def match_cross_season(map_a: SeasonMap, map_b: SeasonMap, g: GateParams,
                       mode: str = LOCATION_ONLY, *,
                       descriptor_gate: DescriptorGate | None = None,
                       anchors: AnchorParams | None = None) -> list[CrossSeasonMatch]:
    """Greedy nearest matching of same-class instances inside the gate.

    In ``anchor_relative`` mode ``g.localization_covariance`` is not used;
    the gate covariance is ``2 * anchor_sigma**2 * I`` plus both spreads.
    Anchor offsets are (re)computed on both maps.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    dt = map_b.season_time - map_a.season_time
    scored = []
    if mode == LOCATION_ONLY:
        for a, b in _location_pairs(map_a, map_b, g):
            scored.append((math.sqrt(_location_sq(a, b, g)), a.instance_id, b.instance_id, a, b))
    else:
        p = anchors or AnchorParams()
        pairs = match_anchors(map_a, map_b, p)
        if len(pairs) < 2:
            raise InsufficientAnchors(
                f"{len(pairs)} ConMod anchors shared by {map_a.session_id} and {map_b.session_id}; need 2")
        # only anchors present in both seasons carry information
        ma = replace(map_a, static_anchors=[x for x in map_a.static_anchors if x.instance_id in pairs])
        inv = set(pairs.values())
        mb = replace(map_b, static_anchors=[x for x in map_b.static_anchors if x.instance_id in inv])
        anchor_to_static(ma, p.n_anchors, p.max_distance)
        anchor_to_static(mb, p.n_anchors, p.max_distance)
        cov = np.eye(2) * 2 * p.anchor_sigma ** 2
        by_class: dict[str, list[LandmarkInstance]] = {}
        for b in mb.instances:
            by_class.setdefault(b.class_label, []).append(b)
        for a in ma.instances:
            for b in by_class.get(a.class_label, []):
                d2 = _anchor_sq(a, b, pairs, cov)
                if d2 is not None and d2 <= g.chi2_threshold:
                    scored.append((math.sqrt(d2), a.instance_id, b.instance_id, a, b))
    if descriptor_gate is not None:
        scored = [s for s in scored if descriptor_gate.score(s[3], s[4], dt) <= descriptor_gate.threshold]
    return [
        CrossSeasonMatch(ia, ib, d, descriptor_distance(a, b), mode)
        for d, ia, ib, a, b in _greedy(scored)
    ]


def descriptor_distance(a: LandmarkInstance, b: LandmarkInstance) -> float:
    idx = list(GATED_COMPONENTS)
    z = (a.descriptor_mean[idx] - b.descriptor_mean[idx]) / DESCRIPTOR_SCALE[idx]
    return float(np.sqrt(np.sum(z * z)))


# -- context -------------------------------------------------------------------

@dataclass
class MatchContext:
    frames_a: list[str]
    frames_b: list[str]
    nearby_a: list[str]
    nearby_b: list[str]


def footprint_center(pose, ground_height: float) -> np.ndarray:
    """Where the optical axis meets the ground; the camera position if it never does."""
    axis = pose.optical_axis
    if axis[2] < -1e-9:
        t = (ground_height - pose.position[2]) / axis[2]
        if t > 0:
            return pose.position + t * axis
    return pose.position.copy()


def gather_context(match: CrossSeasonMatch, map_a: SeasonMap, map_b: SeasonMap,
                   session_a: Session, session_b: Session, radius: float = 2.0) -> MatchContext:
    """Frames and instances within ``radius`` (inclusive) of the matched landmark in each season."""
    a = map_a.by_id()[match.instance_a_id]
    b = map_b.by_id()[match.instance_b_id]

    def frames_near(session, center):
        out = []
        for f in session.frames:
            c = footprint_center(f.pose, session.ground_height)
            if math.dist(c[:2], center[:2]) <= radius:
                out.append(f.frame_id)
        return out

    def instances_near(m, center, own):
        return [i.instance_id for i in m.instances + m.static_anchors
                if i.instance_id != own and math.dist(i.mean_position[:2], center[:2]) <= radius]

    return MatchContext(
        frames_near(session_a, a.mean_position),
        frames_near(session_b, b.mean_position),
        instances_near(map_a, a.mean_position, a.instance_id),
        instances_near(map_b, b.mean_position, b.instance_id),
    )


# -- persistence ---------------------------------------------------------------

@dataclass(frozen=True)
class DetectorModel:
    p_detect: float = 0.9
    p_false: float = 0.05

    def __post_init__(self):
        if not (0 <= self.p_detect <= 1 and 0 <= self.p_false <= 1):
            raise ValueError("detector probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class SurvivalPrior:
    hazard_rate: float = 0.1

    def __post_init__(self):
        if self.hazard_rate < 0:
            raise ValueError("hazard_rate must be non-negative")


@dataclass(frozen=True)
class PersistenceBelief:
    landmark_id: str
    survival_posterior: float
    last_update_time: float
    evidence_log: tuple[tuple[float, bool], ...] = ()
    # log(p / (1 - p)); keeps 1 - p exact when p is within ulps of 1
    log_odds: float | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.survival_posterior <= 1.0:
            raise ValueError("posterior must lie in [0, 1]")
        if self.log_odds is None:
            object.__setattr__(self, "log_odds", _logit(self.survival_posterior))


def _logit(p: float) -> float:
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p) - math.log1p(-p)


def _log_sigmoid(x: float) -> float:
    """log(1 / (1 + e^-x)) without overflow."""
    if x == math.inf:
        return 0.0
    if x == -math.inf:
        return -math.inf
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def _sigmoid(x: float) -> float:
    return math.exp(_log_sigmoid(x))


def persistence_update(b: PersistenceBelief, t: float, detected: bool | None,
                       d: DetectorModel, s: SurvivalPrior) -> PersistenceBelief:
    """Exponential survival decay to ``t``, then a Bayes update if surveyed.

    ``detected=None`` means the area was not surveyed and only the decay is
    applied.  Dead landmarks stay dead.
    """
    if t < b.last_update_time:
        raise NonMonotonicTime(f"update at {t} precedes last update at {b.last_update_time}")
    lo = b.log_odds
    # survival decay p -> p e^{-h dt}; 1 - p grows by p (1 - e^{-h dt})
    decay = s.hazard_rate * (t - b.last_update_time)
    if decay > 0 and lo != -math.inf:
        log_p = _log_sigmoid(lo) - decay
        q = _sigmoid(-lo) - _sigmoid(lo) * math.expm1(-decay)
        lo = log_p - math.log(q)
    log = b.evidence_log
    if detected is not None:
        if detected:
            alive, dead = d.p_detect, d.p_false
        else:
            alive, dead = 1.0 - d.p_detect, 1.0 - d.p_false
        # evidence impossible under the model leaves the belief unchanged
        if alive > 0 and dead > 0:
            lo = lo + math.log(alive) - math.log(dead)
        elif alive > 0 and lo != -math.inf:
            lo = math.inf
        elif dead > 0 and lo != math.inf:
            lo = -math.inf
        log = log + ((t, bool(detected)),)
    return PersistenceBelief(b.landmark_id, _sigmoid(lo), t, log, lo)


def track_persistence(map_a: SeasonMap, map_b: SeasonMap, matches: list[CrossSeasonMatch],
                      d: DetectorModel | None = None, s: SurvivalPrior | None = None,
                      survey_radius: float = 0.8) -> dict[str, PersistenceBelief]:
    """Beliefs for every season-A instance after the season-B survey.

    Matched instances count as detections.  Unmatched ones count as misses
    when the season-B trajectory passed within ``survey_radius``, otherwise
    as not surveyed.
    """
    d = d or DetectorModel()
    s = s or SurvivalPrior()
    matched = {m.instance_a_id for m in matches}
    traj = np.array([p[:2] for _, p in map_b.trajectory]) if map_b.trajectory else np.empty((0, 2))
    tree = cKDTree(traj) if len(traj) else None
    out = {}
    for inst in map_a.instances:
        b = PersistenceBelief(inst.instance_id, 1.0, map_a.season_time, ((map_a.season_time, True),))
        if inst.instance_id in matched:
            outcome = True
        elif tree is not None and tree.query(inst.mean_position[:2])[0] <= survey_radius:
            outcome = False
        else:
            outcome = None
        out[inst.instance_id] = persistence_update(b, map_b.season_time, outcome, d, s)
    return out
