"""Closed-loop highway simulation."""
from .env import HighwayEnv, Meta, MetaAction, idm_accel, map_action
from .episode import EpisodeLog, GuardedAgent, UnguardedAgent, run_episode
from .metrics import Metrics, compliant_flags, compute_metrics

__all__ = [
    "HighwayEnv", "Meta", "MetaAction", "idm_accel", "map_action",
    "EpisodeLog", "GuardedAgent", "UnguardedAgent", "run_episode",
    "Metrics", "compliant_flags", "compute_metrics",
]
