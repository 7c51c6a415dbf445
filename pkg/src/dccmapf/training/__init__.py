"""Replay, targets, curriculum, runners, learner and the training loop."""
from .curriculum import CurriculumState
from .learner import Learner, NumericalError
from .replay import NotReady, PrioritizedBuffer, SequenceSegment
from .runner import EpisodeResult, play, run_episode, sample_instance
from .targets import bootstrap_plan, td_targets
from .trainer import Trainer, TrainSummary, beta_at, epsilon_at, latest_checkpoint

__all__ = [
    "CurriculumState", "EpisodeResult", "Learner", "NotReady", "NumericalError", "PrioritizedBuffer",
    "SequenceSegment", "TrainSummary", "Trainer", "beta_at", "bootstrap_plan", "epsilon_at",
    "latest_checkpoint", "play", "run_episode", "sample_instance", "td_targets",
]
