"""Seeded simulation of the agent loop for training and evaluating the controller."""

from .doubles import (
    SimBoxgen,
    SimCaptioner,
    SimCrop,
    SimDetector,
    SimImage,
    SimScorer,
    SimSegmenter,
    SimSupervisor,
    SimWorker,
    SimWorld,
    match_subjects,
    sim_agents,
    true_issue_counts,
)
from .episode import (
    AblationReport,
    EpisodeTrace,
    PolicyStats,
    SimConfig,
    TrainingResult,
    ablate_policies,
    check_trace_rewards,
    run_episode,
    scene_stream,
    train_controller,
)
from .model import ErrorModel
from .scene import DENSITIES, DefectLedger, SceneObject, SyntheticScene, generate_scene, localize, plant

__all__ = [
    "DENSITIES",
    "AblationReport",
    "DefectLedger",
    "EpisodeTrace",
    "ErrorModel",
    "PolicyStats",
    "SceneObject",
    "SimBoxgen",
    "SimCaptioner",
    "SimConfig",
    "SimCrop",
    "SimDetector",
    "SimImage",
    "SimScorer",
    "SimSegmenter",
    "SimSupervisor",
    "SimWorker",
    "SimWorld",
    "SyntheticScene",
    "TrainingResult",
    "ablate_policies",
    "check_trace_rewards",
    "generate_scene",
    "localize",
    "match_subjects",
    "plant",
    "run_episode",
    "scene_stream",
    "sim_agents",
    "train_controller",
    "true_issue_counts",
]
