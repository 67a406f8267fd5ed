"""Fail-safe braking plans and the horizon-truncated invariable-safety check."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

from .errors import ReachabilityError
from .params import EgoParams
from .prediction import SET_BASED, OccupancySequence
from .scenario import Lane, Shape, State, occupancy_of


@dataclass(frozen=True)
class FailSafePlan:
    states: Tuple[State, ...]
    decel_profile: Tuple[float, ...]
    dt: float
    lane_id: int
    shape: Shape = Shape(4.5, 1.8)

    @property
    def stop_time(self) -> float:
        if len(self.states) == 1:
            return 0.0
        return self.states[0].v / -self.decel_profile[0]

    @property
    def stop_distance(self) -> float:
        return self.states[-1].s - self.states[0].s

    def state_at(self, k: int) -> State:
        return self.states[min(k, len(self.states) - 1)]

    def to_dict(self) -> dict:
        return {
            "lane": self.lane_id,
            "dt": self.dt,
            "stop_time": self.stop_time,
            "stop_distance": self.stop_distance,
            "s": [st.s for st in self.states],
            "v": [st.v for st in self.states],
            "a": list(self.decel_profile),
        }


def fail_safe_plan(
    ego: State,
    lane: Lane,
    params: EgoParams,
    dt: float = 0.2,
    shape: Shape = Shape(4.5, 1.8),
) -> FailSafePlan:
    """Brake at ``a_min`` along ``lane`` at the current lateral offset until standstill.

    Speed is clamped at zero inside the last braking step, so consecutive states follow
    the clamped double-integrator update and the plan stops after ``v**2 / (2 |a_min|)``.
    """
    s, d = lane.frame.project(ego.position, band=math.inf)
    v = ego.v
    a = params.a_min
    states = [replace(ego, s=s, d=d)]
    profile: List[float] = []
    while v > 0.0:
        if v + a * dt <= 1e-12:
            s += v * v / (-2.0 * a)
            v = 0.0
        else:
            s += v * dt + 0.5 * a * dt * dt
            v += a * dt
        profile.append(a)
        states.append(
            State(lane.frame.point_at(s, d), v, lane.frame.heading_at(s), 0.0, a, s, d)
        )
    profile.append(0.0)
    states[-1] = replace(states[-1], a=0.0)
    if len(states) > 1:
        states[0] = replace(states[0], a=profile[0])
    return FailSafePlan(tuple(states), tuple(profile), dt, lane.id, shape)


def is_invariably_safe(plan: FailSafePlan, occupancies: Sequence[OccupancySequence], h: Optional[int] = None) -> bool:
    """Swept plan occupancy disjoint from every set-based occupancy up to ``h``, and the
    stopped footprint disjoint from the occupancy at ``h``."""
    for occ in occupancies:
        if occ.mode != SET_BASED:
            raise ReachabilityError("invariable safety needs set-based (sound) occupancies")
    if h is None:
        h = min((occ.horizon for occ in occupancies), default=len(plan.states) - 1)
    feet = [occupancy_of(plan.state_at(k), plan.shape) for k in range(h + 1)]
    for k in range(h + 1):
        obstacles = [p for occ in occupancies for p in occ.at(min(k, occ.horizon))]
        if not obstacles:
            continue
        swept = feet[k] if k == 0 else feet[k - 1].union(feet[k]).convex_hull
        if any(swept.intersects(p) and not swept.touches(p) for p in obstacles):
            return False
    final = occupancy_of(plan.states[-1], plan.shape)
    last = [p for occ in occupancies for p in occ.at(min(h, occ.horizon))]
    return not any(final.intersects(p) and not final.touches(p) for p in last)
