"""Deterministic seasonal-field simulator with ground-truth identities."""
from .deployment import (
    DOWN,
    FALSE_SOURCE,
    FRONT,
    RTK_SIGMA,
    Deployment,
    Lawnmower,
    NoiseModel,
    SessionTruth,
    session_id_for,
    simulate_deployment,
)
from .evaluation import AssociationMetrics, evaluate_association, majority_source
from .world import (
    TREATMENTS,
    ConMod,
    GroundTruth,
    GrowthModel,
    Microsite,
    Plant,
    Plot,
    Shrub,
    WorldConfig,
    generate_world,
)

__all__ = [
    "DOWN", "FRONT", "FALSE_SOURCE", "RTK_SIGMA", "TREATMENTS",
    "AssociationMetrics", "ConMod", "Deployment", "GroundTruth", "GrowthModel", "Lawnmower",
    "Microsite", "NoiseModel", "Plant", "Plot", "SessionTruth", "Shrub", "WorldConfig",
    "evaluate_association", "generate_world", "majority_source", "session_id_for", "simulate_deployment",
]
