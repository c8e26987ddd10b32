"""Style-conditioned 3-point pose generation for rhythm-game beatmaps."""
from .beatmap import Beatmap, BombEvent, NoteEvent, ObstacleEvent, load_beatmap, parse_beatmap, validate_beatmap
from .context import ContextConfig, LaneGeometry, build_training_window, upcoming_events
from .estimator import StylePosePredictor
from .evaluation import HitReport, Outcome, ScoringGeometry, score_hits
from .model import ModelConfig
from .pose import PoseTrace, PoseWindow, load_pose_trace, write_pose_trace
from .rollout import RolloutConfig, rollout, stitch

__version__ = "0.1.0"

__all__ = [
    "Beatmap", "BombEvent", "ContextConfig", "HitReport", "LaneGeometry", "ModelConfig",
    "NoteEvent", "ObstacleEvent", "Outcome", "PoseTrace", "PoseWindow", "RolloutConfig",
    "ScoringGeometry", "StylePosePredictor", "build_training_window", "load_beatmap",
    "load_pose_trace", "parse_beatmap", "rollout", "score_hits", "stitch", "upcoming_events",
    "validate_beatmap", "write_pose_trace",
]
