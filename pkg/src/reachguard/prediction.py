"""Most-likely and set-based occupancy prediction of obstacles."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from shapely.geometry import Polygon

from .errors import OffRoadError
from .params import SetPredictionParams
from .scenario import Lane, Obstacle, Scenario, Shape, State, current_lane, occupancy_of, wrap_angle

MOST_LIKELY = "most-likely"
SET_BASED = "set-based"
MODES = (MOST_LIKELY, SET_BASED)


@dataclass(frozen=True, eq=False)
class OccupancySequence:
    """Per-step occupied polygons of one obstacle, ``k = 0 .. h``.

    ``states`` are the nominal (constant-velocity or recorded) states; they are kept
    for both modes because rule predicates are evaluated against them.
    """

    obstacle_id: int
    mode: str
    shape: Shape
    polygons: Tuple[Tuple[Polygon, ...], ...]
    states: Tuple[State, ...]

    def __len__(self) -> int:
        return len(self.polygons)

    @property
    def horizon(self) -> int:
        return len(self.polygons) - 1

    def at(self, k: int) -> Tuple[Polygon, ...]:
        return self.polygons[k]


def _lane_of(state: State, scenario: Scenario) -> Optional[Lane]:
    try:
        return current_lane(scenario.network, state.position)
    except OffRoadError:
        return None


def _center(state: State, shape: Shape) -> Tuple[float, float]:
    x, y = state.position
    return x + shape.ref_offset * math.cos(state.theta), y + shape.ref_offset * math.sin(state.theta)


def _constant_velocity(state: State, obstacle: Obstacle, scenario: Scenario, n: int, dt: float) -> List[State]:
    """``n`` successor states of ``state`` at constant speed, along its lane when on-road."""
    if n <= 0:
        return []
    if obstacle.kind == "static" or state.v == 0.0:
        return [state] * n
    lane = _lane_of(state, scenario)
    out = []
    if lane is None:
        c, s = math.cos(state.theta), math.sin(state.theta)
        x, y = state.position
        for k in range(1, n + 1):
            t = k * dt
            out.append(replace(state, position=(x + c * state.v * t, y + s * state.v * t), a=0.0))
        return out
    s0, d0 = lane.frame.project(state.position, band=math.inf)
    offset = wrap_angle(state.theta - lane.frame.heading_at(s0))
    for k in range(1, n + 1):
        sk = s0 + state.v * k * dt
        out.append(
            replace(
                state,
                position=lane.frame.point_at(sk, d0),
                theta=lane.frame.heading_at(sk) + offset,
                a=0.0,
                s=sk,
                d=d0,
            )
        )
    return out


def nominal_states(obstacle: Obstacle, scenario: Scenario, h: int) -> Tuple[State, ...]:
    """Recorded trajectory (extrapolated at constant speed past its end) or constant velocity."""
    dt = scenario.dt
    if obstacle.trajectory is not None:
        rec = list(obstacle.trajectory[: h + 1])
        rec += _constant_velocity(rec[-1], obstacle, scenario, h + 1 - len(rec), dt)
        return tuple(rec)
    st = obstacle.current_state
    return tuple([st] + _constant_velocity(st, obstacle, scenario, h, dt))


def most_likely(obstacle: Obstacle, scenario: Scenario, h: Optional[int] = None) -> OccupancySequence:
    h = scenario.horizon if h is None else h
    states = nominal_states(obstacle, scenario, h)
    polys = tuple((occupancy_of(st, obstacle.shape),) for st in states)
    return OccupancySequence(obstacle.id, MOST_LIKELY, obstacle.shape, polys, states)


# ---------------------------------------------------------------- set-based


def travel_bounds(v0: float, t: float, a_max: float, v_max: float) -> Tuple[float, float]:
    """Closed-form bounds on distance travelled in ``t`` with ``|a| <= a_max`` and ``0 <= v <= v_max``.

    A vehicle already above ``v_max`` is allowed to keep its speed.
    """
    v_cap = max(v0, v_max)
    t_cap = (v_cap - v0) / a_max
    if t <= t_cap:
        hi = v0 * t + 0.5 * a_max * t * t
    else:
        hi = v0 * t_cap + 0.5 * a_max * t_cap * t_cap + v_cap * (t - t_cap)
    t_stop = v0 / a_max
    if t <= t_stop:
        lo = v0 * t - 0.5 * a_max * t * t
    else:
        lo = v0 * v0 / (2.0 * a_max)
    return lo, hi


def speed_bounds(v0: float, t: float, a_max: float, v_max: float) -> Tuple[float, float]:
    return max(0.0, v0 - a_max * t), min(max(v0, v_max), v0 + a_max * t)


def _half_length(shape: Shape, rel_heading: float) -> float:
    """Half of the footprint extent along the lane direction."""
    along = 0.5 * shape.length * abs(math.cos(rel_heading)) + 0.5 * shape.width * abs(math.sin(rel_heading))
    return max(along, 0.5 * shape.length)


def _occupied_lanes(obstacle: Obstacle, state: State, scenario: Scenario, params: SetPredictionParams) -> List[Lane]:
    foot = occupancy_of(state, obstacle.shape)
    lanes = [ln for ln in scenario.network.lanes if ln.polygon.intersects(foot)]
    if not params.lane_following_only:
        extra = []
        for ln in lanes:
            for adj in (ln.adjacent_left, ln.adjacent_right):
                if adj is not None and adj[1] and adj[0] is not None:
                    extra.append(scenario.network.lane(adj[0]))
        for ln in extra:
            if all(ln.id != other.id for other in lanes):
                lanes.append(ln)
    return lanes


def set_based(
    obstacle: Obstacle,
    scenario: Scenario,
    h: Optional[int] = None,
    params: Optional[SetPredictionParams] = None,
) -> OccupancySequence:
    """Lane-following over-approximation of every future with ``|a| <= a_max_abs``.

    Each step covers, for every lane the obstacle currently touches, the full-width lane
    section between the rear of the slowest and the front of the fastest admissible
    behaviour.
    """
    h = scenario.horizon if h is None else h
    params = params or scenario.prediction
    states = nominal_states(obstacle, scenario, h)
    st = obstacle.current_state
    if obstacle.kind == "static":
        poly = occupancy_of(st, obstacle.shape)
        return OccupancySequence(obstacle.id, SET_BASED, obstacle.shape, tuple((poly,) for _ in range(h + 1)), states)
    lanes = _occupied_lanes(obstacle, st, scenario, params)
    if not lanes:
        raise OffRoadError(f"obstacle {obstacle.id} is not on any lane")
    center = _center(st, obstacle.shape)
    frames = []
    for ln in lanes:
        s0, _ = ln.frame.project(center, band=math.inf)
        half = _half_length(obstacle.shape, wrap_angle(st.theta - ln.frame.heading_at(s0)))
        frames.append((ln, s0, half))
    bounds = [travel_bounds(st.v, k * scenario.dt, params.a_max_abs, params.v_max_obs) for k in range(h + 1)]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    per_lane = [ln.slice_polygons(s0 + lo - half, s0 + hi + half) for ln, s0, half in frames]
    polys = [tuple(p[k] for p in per_lane) for k in range(h + 1)]
    return OccupancySequence(obstacle.id, SET_BASED, obstacle.shape, tuple(polys), states)


def predict(scenario: Scenario, mode: str = SET_BASED, h: Optional[int] = None) -> List[OccupancySequence]:
    if mode not in MODES:
        raise ValueError(f"unknown prediction mode {mode!r}; expected one of {MODES}")
    fn = most_likely if mode == MOST_LIKELY else set_based
    return [fn(o, scenario, h) for o in scenario.obstacles]
