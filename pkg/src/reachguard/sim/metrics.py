"""Closed-loop evaluation metrics over a batch of episode logs."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from ..params import RuleConfig
from ..rules import rule_body_holds
from .episode import EpisodeLog


@dataclass
class Metrics:
    episodes: int
    success_rate: float
    collision_free_steps: float
    rule_compliant_steps: Dict[str, float]
    success_steps: float
    traveled_distance: Optional[float]
    fail_safe_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def compliant_flags(log: EpisodeLog, rule: str, config: Optional[RuleConfig] = None) -> List[bool]:
    """Per recorded (collision-free) step: does the rule body hold?"""
    if not log.steps:
        return []
    sc = log.scenario()
    config = config or sc.rule_config
    return [rule_body_holds(rule, st, config, sc) for st in log.steps]


def compute_metrics(logs: Sequence[EpisodeLog], rules: Sequence[str] = ("R_G1", "R_G2", "R_G3"),
                    config: Optional[RuleConfig] = None) -> Metrics:
    if not logs:
        raise ValueError("compute_metrics needs at least one episode log")
    n = len(logs)
    successes = [lg for lg in logs if lg.collision_step is None and len(lg.steps) == lg.duration]
    compliant = {r: 0.0 for r in rules}
    success_steps = 0.0
    for lg in logs:
        flags = {r: compliant_flags(lg, r, config) for r in rules}
        for r in rules:
            compliant[r] += sum(flags[r])
        if rules:
            success_steps += sum(all(f[i] for f in flags.values()) for i in range(len(lg.steps)))
        else:
            success_steps += len(lg.steps)
    decisions = sum(len(lg.actions) for lg in logs)
    return Metrics(
        episodes=n,
        success_rate=len(successes) / n,
        collision_free_steps=sum(lg.collision_free_steps for lg in logs) / n,
        rule_compliant_steps={r: v / n for r, v in compliant.items()},
        success_steps=success_steps / n,
        traveled_distance=(sum(lg.traveled for lg in successes) / len(successes)) if successes else None,
        fail_safe_rate=(sum(lg.fail_safe_count for lg in logs) / decisions) if decisions else 0.0,
    )
