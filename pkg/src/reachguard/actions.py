"""High-level action vocabulary, feasibility prefilter, action formulas and trajectory labeling."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import FrozenSet, List, Optional, Sequence

from .errors import ActionError, NoLabelError, OffRoadError
from .ltlf import FG, Atom, Formula, G, And, evaluate_trace
from .params import EgoParams, RuleConfig
from .rules import ACC_ABOVE, ACC_BELOW, ACC_KEEP, STANDSTILL, WorldStep, eval_predicate, in_lane
from .scenario import RoadNetwork, Scenario, Shape, State, current_lane


class Lon(str, Enum):
    KEEP = "KEEP"
    ACCELERATE = "ACCELERATE"
    DECELERATE = "DECELERATE"
    STOP = "STOP"


class Lat(str, Enum):
    FOLLOW_LANE = "FOLLOW-LANE"
    LEFT_LANE = "LEFT-LANE"
    RIGHT_LANE = "RIGHT-LANE"


def parse_lon(name: str) -> Lon:
    key = name.strip().upper().replace("_", "-")
    for m in Lon:
        if m.value == key:
            return m
    raise ActionError(f"unknown longitudinal action {name!r}")


def parse_lat(name: str) -> Lat:
    key = name.strip().upper().replace("_", "-")
    if key in ("FOLLOW", "LEFT", "RIGHT"):
        key += "-LANE"
    for m in Lat:
        if m.value == key:
            return m
    raise ActionError(f"unknown lateral action {name!r}")


@dataclass(frozen=True)
class ActionPair:
    lon: Lon
    lat: Lat

    def __post_init__(self):
        if not isinstance(self.lon, Lon) or not isinstance(self.lat, Lat):
            raise ActionError(f"invalid action pair ({self.lon!r}, {self.lat!r})")

    def __str__(self) -> str:
        return f"{self.lon.value},{self.lat.value}"

    def to_json(self) -> dict:
        return {"longitudinal": self.lon.value, "lateral": self.lat.value}

    @classmethod
    def parse(cls, text: str) -> "ActionPair":
        """Parse ``"ACCELERATE,FOLLOW-LANE"``."""
        parts = [p for p in text.split(",")]
        if len(parts) != 2:
            raise ActionError(f"expected LON,LAT, got {text!r}")
        return cls(parse_lon(parts[0]), parse_lat(parts[1]))


ALL_PAIRS = tuple(ActionPair(lo, la) for lo in Lon for la in Lat)


@dataclass(frozen=True)
class FeasibleActions:
    lon_set: FrozenSet[Lon]
    lat_set: FrozenSet[Lat]

    def __contains__(self, pair: ActionPair) -> bool:
        return pair.lon in self.lon_set and pair.lat in self.lat_set

    def pairs(self) -> List[ActionPair]:
        return [p for p in ALL_PAIRS if p in self]


@dataclass(frozen=True)
class LaneContext:
    current: int
    left: Optional[int] = None
    right: Optional[int] = None

    def as_dict(self) -> dict:
        return {"current": self.current, "left": self.left, "right": self.right}


def lane_context(network: RoadNetwork, position) -> LaneContext:
    """Current lane plus same-direction neighbours of the lane nearest to ``position``."""
    lane = current_lane(network, position)
    left = lane.adjacent_left[0] if lane.adjacent_left and lane.adjacent_left[1] else None
    right = lane.adjacent_right[0] if lane.adjacent_right and lane.adjacent_right[1] else None
    return LaneContext(lane.id, left, right)


def feasible_actions(scenario: Scenario, ego: Optional[State] = None) -> FeasibleActions:
    ego = ego or scenario.ego
    try:
        ctx = lane_context(scenario.network, ego.position)
    except OffRoadError:
        raise
    lat = {Lat.FOLLOW_LANE}
    if ctx.left is not None:
        lat.add(Lat.LEFT_LANE)
    if ctx.right is not None:
        lat.add(Lat.RIGHT_LANE)
    lon = set(Lon)
    if scenario.is_highway:
        lon.discard(Lon.STOP)
    return FeasibleActions(frozenset(lon), frozenset(lat))


def lon_formula(lon: Lon) -> Formula:
    if lon is Lon.KEEP:
        return G(Atom(ACC_KEEP))
    if lon is Lon.ACCELERATE:
        return G(Atom(ACC_ABOVE))
    if lon is Lon.DECELERATE:
        return G(Atom(ACC_BELOW))
    return FG(Atom(STANDSTILL))


def lat_formula(lat: Lat, ctx: LaneContext) -> Formula:
    if lat is Lat.FOLLOW_LANE:
        return G(Atom(in_lane(ctx.current)))
    target = ctx.left if lat is Lat.LEFT_LANE else ctx.right
    if target is None:
        raise ActionError(f"{lat.value} needs an adjacent lane on that side of lane {ctx.current}")
    return FG(Atom(in_lane(target)))


def action_to_ltlf(pair: ActionPair, ctx: LaneContext) -> Formula:
    """Conjunction of the longitudinal and lateral action formulas."""
    return And(lon_formula(pair.lon), lat_formula(pair.lat, ctx))


# ---------------------------------------------------------------- labeling

LON_PRIORITY = (Lon.STOP, Lon.DECELERATE, Lon.ACCELERATE, Lon.KEEP)


def label_trajectory(
    traj: Sequence[State],
    network: RoadNetwork,
    params: EgoParams,
    shape: Shape = Shape(4.5, 1.8),
) -> ActionPair:
    """Action pair whose formulas the trajectory satisfies (most specific first)."""
    if len(traj) < 2:
        raise ActionError("trajectory needs at least two states")
    ctx = lane_context(network, traj[0].position)
    scenario = Scenario(network, traj[0], shape, params, (), dt=1.0, horizon=1)
    cfg = RuleConfig()
    names = {ACC_KEEP, ACC_ABOVE, ACC_BELOW, STANDSTILL, in_lane(ctx.current)}
    names.update(in_lane(x) for x in (ctx.left, ctx.right) if x is not None)
    trace = [
        {n: eval_predicate(n, WorldStep(st, lane_ctx=ctx.as_dict(), step=i), cfg, scenario) for n in names}
        for i, st in enumerate(traj)
    ]
    lon = next((lo for lo in LON_PRIORITY if evaluate_trace(lon_formula(lo), trace)), None)
    if lon is None:
        raise NoLabelError("no longitudinal action formula holds on the trajectory")
    lat = None
    for cand in (Lat.LEFT_LANE, Lat.RIGHT_LANE):
        target = ctx.left if cand is Lat.LEFT_LANE else ctx.right
        if target is not None and evaluate_trace(lat_formula(cand, ctx), trace):
            lat = cand
            break
    if lat is None and evaluate_trace(lat_formula(Lat.FOLLOW_LANE, ctx), trace):
        lat = Lat.FOLLOW_LANE
    if lat is None:
        raise NoLabelError("no lateral action formula holds on the trajectory")
    return ActionPair(lon, lat)
