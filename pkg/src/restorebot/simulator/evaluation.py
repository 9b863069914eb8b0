"""Score cross-season matches against simulator ground truth."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from ..association import CrossSeasonMatch
from ..errors import UnknownInstance
from ..season_map import LandmarkInstance, SeasonMap
from .deployment import FALSE_SOURCE, SessionTruth
from .world import GroundTruth

PLANT_CLASSES = ("vegetation", "shrub")


@dataclass
class AssociationMetrics:
    precision: float
    recall: float
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int
    n_matches: int
    n_persisting: int
    precision_undefined: bool = False
    confusion: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "true_positives": self.true_positives, "false_positives": self.false_positives,
            "false_negatives": self.false_negatives, "n_matches": self.n_matches,
            "n_persisting": self.n_persisting, "precision_undefined": self.precision_undefined,
            "confusion": dict(sorted(self.confusion.items())),
        }


def majority_source(inst: LandmarkInstance, truth: SessionTruth) -> str:
    """Most common truth source among the instance's masks; ties go to the smaller id."""
    votes = Counter(truth.mask_source.get(o.mask_id, FALSE_SOURCE) for o in inst.observations)
    best = max(votes.values())
    return min(s for s, n in votes.items() if n == best)


def _sources(m: SeasonMap, truth: SessionTruth) -> dict[str, str]:
    return {i.instance_id: majority_source(i, truth) for i in m.instances}


def evaluate_association(matches: list[CrossSeasonMatch], world: GroundTruth,
                         map_a: SeasonMap, map_b: SeasonMap,
                         truth_a: SessionTruth, truth_b: SessionTruth) -> AssociationMetrics:
    """Precision and recall of plant matches.

    Only matches between plant-class instances are scored.  A match is a
    true positive iff both instances' majority sources are the same plant.
    The persisting set is the plants alive in both seasons that are the
    majority source of some instance in each map.  With no scored matches,
    precision is reported as 1 and flagged undefined.
    """
    src_a, src_b = _sources(map_a, truth_a), _sources(map_b, truth_b)
    label_a = {i.instance_id: i.class_label for i in map_a.instances}
    label_b = {i.instance_id: i.class_label for i in map_b.instances}
    plant_ids = {p.plant_id for p in world.plants} | {s.shrub_id for s in world.shrubs}
    alive = {p.plant_id for p in world.plants
             if p.alive(truth_a.season) and p.alive(truth_b.season)} | {s.shrub_id for s in world.shrubs}

    confusion: Counter = Counter()
    matched_plants: set[str] = set()
    tp = fp = scored = 0
    for m in matches:
        if m.instance_a_id not in src_a:
            raise UnknownInstance(f"{m.instance_a_id} not in map {map_a.session_id}")
        if m.instance_b_id not in src_b:
            raise UnknownInstance(f"{m.instance_b_id} not in map {map_b.session_id}")
        if label_a[m.instance_a_id] not in PLANT_CLASSES or label_b[m.instance_b_id] not in PLANT_CLASSES:
            confusion["non_plant"] += 1
            continue
        scored += 1
        sa, sb = src_a[m.instance_a_id], src_b[m.instance_b_id]
        if sa == sb and sa in plant_ids:
            tp += 1
            matched_plants.add(sa)
            confusion["correct"] += 1
        else:
            fp += 1
            if FALSE_SOURCE in (sa, sb):
                confusion["false_detection"] += 1
            elif sa in plant_ids and sb in plant_ids:
                confusion["wrong_plant"] += 1
            else:
                confusion["plant_vs_static"] += 1

    persisting = (set(src_a.values()) & set(src_b.values()) & alive)
    found = len(matched_plants & persisting)
    fn = len(persisting) - found
    undefined = scored == 0
    precision = 1.0 if undefined else tp / scored
    recall = found / len(persisting) if persisting else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return AssociationMetrics(precision, recall, f1, tp, fp, fn, scored, len(persisting), undefined,
                              dict(confusion))
