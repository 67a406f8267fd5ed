"""Lanelet road model, curvilinear frames, vehicle states and the scenario file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.prepared import prep

from .errors import OffRoadError, ScenarioError
from .geometry import Polyline, as_points, rectangle, wrap_angle
from .params import EgoParams, RuleConfig, SetPredictionParams, from_mapping, to_mapping

ADJACENCY_TOL = 1e-3
DEFAULT_BAND = 50.0
RULE_IDS = ("R_G1", "R_G2", "R_G3")


@dataclass(frozen=True, eq=False)
class Lanelet:
    id: int
    left: np.ndarray
    right: np.ndarray
    successors: Tuple[int, ...] = ()
    adjacent_left: Optional[Tuple[int, bool]] = None
    adjacent_right: Optional[Tuple[int, bool]] = None
    speed_limit: Optional[float] = None

    def __post_init__(self):
        if len(self.left) < 2 or len(self.right) < 2:
            raise ScenarioError(f"lanelet {self.id}: boundaries need at least 2 points")
        if len(self.left) != len(self.right):
            raise ScenarioError(f"lanelet {self.id}: left and right boundaries have different point counts")
        if LineString(self.left).intersects(LineString(self.right)):
            raise ScenarioError(f"lanelet {self.id}: left and right boundaries intersect")

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(np.vstack([self.left, self.right[::-1]]))


@dataclass(frozen=True, eq=False)
class Lane:
    """A chain of connected lanelets with a midpoint centerline."""

    id: int
    lanelets: Tuple[int, ...]
    left: np.ndarray
    right: np.ndarray
    speed_limit: Optional[float] = None
    adjacent_left: Optional[Tuple[int, bool]] = None
    adjacent_right: Optional[Tuple[int, bool]] = None

    @cached_property
    def centerline(self) -> np.ndarray:
        return 0.5 * (self.left + self.right)

    @cached_property
    def frame(self) -> Polyline:
        return Polyline(self.centerline)

    @property
    def arclengths(self) -> np.ndarray:
        return self.frame.arclengths

    @property
    def length(self) -> float:
        return self.frame.length

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(np.vstack([self.left, self.right[::-1]]))

    @cached_property
    def cover(self):
        """Prepared, slightly inflated polygon for fast boundary-inclusive point tests."""
        return prep(self.polygon.buffer(1e-9))

    @cached_property
    def width(self) -> float:
        return float(np.mean(np.linalg.norm(self.left - self.right, axis=1)))

    def lateral_extent(self, frame: Polyline) -> Tuple[float, float]:
        """Lateral interval ``(d_lo, d_hi)`` this lane covers in another lane's frame."""
        return _lateral_extent(self, frame)

    def slice_polygon(self, s_lo: float, s_hi: float) -> Polygon:
        """Full-width lane section between two arclengths of the centerline."""
        return self.slice_polygons([s_lo], [s_hi])[0]

    def slice_polygons(self, s_lo: Sequence[float], s_hi: Sequence[float]) -> List[Polygon]:
        """Vectorized :meth:`slice_polygon` over paired bounds."""
        length = self.length
        lo = np.maximum(0.0, np.asarray(s_lo, dtype=float))
        hi = np.minimum(length, np.asarray(s_hi, dtype=float))
        empty = hi <= lo
        hi = np.where(empty, np.minimum(length, lo + 1e-6), hi)
        lo = np.where(empty, hi - 1e-6, lo)
        arc = self.arclengths
        ends = {}
        for name, b in (("l", self.left), ("r", self.right)):
            for tag, q in (("lo", lo), ("hi", hi)):
                ends[name, tag] = np.column_stack([np.interp(q, arc, b[:, 0]), np.interp(q, arc, b[:, 1])])
        out = []
        for i in range(len(lo)):
            inner = np.flatnonzero((arc > lo[i]) & (arc < hi[i]))
            coords = np.concatenate(
                [
                    ends["l", "lo"][i : i + 1],
                    self.left[inner],
                    ends["l", "hi"][i : i + 1],
                    ends["r", "hi"][i : i + 1],
                    self.right[inner][::-1],
                    ends["r", "lo"][i : i + 1],
                ]
            )
            out.append(Polygon(coords))
        return out


def _lateral_extent(lane: Lane, frame: Polyline) -> Tuple[float, float]:
    cache = lane.__dict__.setdefault("_extents", {})
    hit = cache.get(id(frame))
    if hit is not None and hit[0] is frame:
        return hit[1]
    ds = [frame.project(p, band=math.inf)[1] for pts in (lane.left, lane.right) for p in pts]
    ext = (min(ds), max(ds))
    cache[id(frame)] = (frame, ext)
    return ext


@dataclass(frozen=True)
class Shape:
    """Vehicle footprint; ``ref_offset`` is the distance from the reference point forward to the center."""

    length: float
    width: float
    ref_offset: float = 0.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ScenarioError("invariant violated: shape dimensions > 0")

    @property
    def front(self) -> float:
        """Distance from the reference point to the front bumper."""
        return self.ref_offset + self.length / 2.0

    @property
    def rear(self) -> float:
        """Distance from the reference point back to the rear bumper."""
        return self.length / 2.0 - self.ref_offset


@dataclass(frozen=True)
class State:
    """Kinematic state of a vehicle; ``s``/``d`` are filled in relative to its lane."""

    position: Tuple[float, float]
    v: float
    theta: float = 0.0
    delta: float = 0.0
    a: float = 0.0
    s: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if self.v < 0:
            raise ScenarioError("invariant violated: v >= 0")


EgoState = State


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 25.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 3.0
    comfort_decel: float = 2.0
    exponent: float = 4.0

    def __post_init__(self):
        for f in ("desired_speed", "time_headway", "min_gap", "max_accel", "comfort_decel", "exponent"):
            if getattr(self, f) <= 0:
                raise ScenarioError(f"invariant violated: IDM {f} > 0")


OBSTACLE_KINDS = ("car", "truck", "static")


@dataclass(frozen=True)
class Obstacle:
    id: int
    kind: str
    shape: Shape
    trajectory: Optional[Tuple[State, ...]] = None
    behavior: Optional[IdmParams] = None
    state: Optional[State] = None

    def __post_init__(self):
        if self.kind not in OBSTACLE_KINDS:
            raise ScenarioError(f"obstacle {self.id}: unknown kind {self.kind!r}")
        if (self.trajectory is None) == (self.behavior is None):
            raise ScenarioError(f"invariant violated: obstacle {self.id} needs exactly one of trajectory/behavior")
        if self.trajectory is not None and len(self.trajectory) == 0:
            raise ScenarioError(f"obstacle {self.id}: empty trajectory")
        if self.behavior is not None and self.state is None:
            raise ScenarioError(f"obstacle {self.id}: behavior obstacles need a current state")

    @property
    def current_state(self) -> State:
        if self.trajectory is not None:
            return self.trajectory[0]
        return self.state


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    lanelets: Dict[int, Lanelet]
    lanes: Tuple[Lane, ...]

    def lane(self, lane_id: int) -> Lane:
        for ln in self.lanes:
            if ln.id == lane_id:
                return ln
        raise KeyError(f"no lane with id {lane_id}")

    def lanes_at(self, position: Sequence[float]) -> List[Lane]:
        return lanes_at(self, position)

    def lanes_containing_lanelet(self, lanelet_id: int) -> List[Lane]:
        return [ln for ln in self.lanes if lanelet_id in ln.lanelets]


@dataclass(frozen=True, eq=False)
class Scenario:
    network: RoadNetwork
    ego: State
    ego_shape: Shape
    ego_params: EgoParams
    obstacles: Tuple[Obstacle, ...]
    dt: float
    horizon: int
    country: str = "DEU"
    rules_enabled: Tuple[str, ...] = ()
    rule_config: RuleConfig = field(default_factory=RuleConfig)
    prediction: SetPredictionParams = field(default_factory=SetPredictionParams)
    context: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0:
            raise ScenarioError("invariant violated: dt > 0")
        if self.horizon < 1:
            raise ScenarioError("invariant violated: horizon >= 1")
        for r in self.rules_enabled:
            if r not in RULE_IDS:
                raise ScenarioError(f"unknown rule id {r!r}")

    @property
    def is_highway(self) -> bool:
        return bool(self.context.get("highway", False))

    def obstacle(self, obs_id: int) -> Obstacle:
        for o in self.obstacles:
            if o.id == obs_id:
                return o
        raise KeyError(obs_id)

    def current_lane(self) -> Lane:
        return current_lane(self.network, self.ego.position)

    def with_ego(self, ego: State) -> "Scenario":
        return replace(self, ego=ego)


# ---------------------------------------------------------------- operations


def project_to_curvilinear(position: Sequence[float], lane: Lane, band: float = DEFAULT_BAND) -> Tuple[float, float]:
    """Arclength and signed lateral offset (left positive) of ``position`` along ``lane``."""
    return lane.frame.project(position, band=band)


def from_curvilinear(s: float, d: float, lane: Lane) -> Tuple[float, float]:
    return lane.frame.point_at(s, d)


def lanes_at(network: RoadNetwork, position: Sequence[float]) -> List[Lane]:
    """All lanes whose closed polygon contains ``position`` (boundaries inclusive)."""
    pt = Point(float(position[0]), float(position[1]))
    return [ln for ln in network.lanes if ln.cover.covers(pt)]


def current_lane(network: RoadNetwork, position: Sequence[float]) -> Lane:
    """The lane containing ``position`` whose centerline is nearest."""
    cands = lanes_at(network, position)
    if not cands:
        raise OffRoadError(f"position {tuple(position)} is not on any lane")
    return min(cands, key=lambda ln: (abs(ln.frame.project(position, band=math.inf)[1]), ln.id))


def occupancy_of(state: State, shape: Shape) -> Polygon:
    """Oriented rectangle occupied by a vehicle whose reference point is ``state.position``."""
    x, y = state.position
    cx = x + shape.ref_offset * math.cos(state.theta)
    cy = y + shape.ref_offset * math.sin(state.theta)
    return rectangle((cx, cy), state.theta, shape.length, shape.width)


def with_curvilinear(state: State, lane: Lane) -> State:
    s, d = project_to_curvilinear(state.position, lane, band=math.inf)
    return replace(state, s=s, d=d)


def relative_heading(state: State, lane: Lane) -> float:
    return wrap_angle(state.theta - lane.frame.heading_at(state.s))


# ---------------------------------------------------------------- assembly


def assemble_lanes(lanelets: Mapping[int, Lanelet]) -> Tuple[Lane, ...]:
    """Build lanes from maximal successor chains and derive lane-level adjacency."""
    preds: Dict[int, List[int]] = {i: [] for i in lanelets}
    for ll in lanelets.values():
        for succ in ll.successors:
            preds[succ].append(ll.id)
    starts = sorted(i for i, p in preds.items() if not p)
    if not starts:  # pure cycle; break at the smallest id
        starts = [min(lanelets)]

    chains: List[Tuple[int, ...]] = []

    def walk(chain: List[int]) -> None:
        succs = [s for s in lanelets[chain[-1]].successors if s not in chain]
        if not succs:
            chains.append(tuple(chain))
            return
        for s in succs:
            walk(chain + [s])

    for st in starts:
        walk([st])

    used = set()
    next_id = max(lanelets) + 1
    lanes = []
    for chain in chains:
        lane_id = chain[0]
        if lane_id in used:
            lane_id = next_id
            next_id += 1
        used.add(lane_id)
        left = [lanelets[chain[0]].left]
        right = [lanelets[chain[0]].right]
        for lid in chain[1:]:
            ll = lanelets[lid]
            left.append(ll.left[1:] if np.allclose(ll.left[0], left[-1][-1], atol=ADJACENCY_TOL) else ll.left)
            right.append(ll.right[1:] if np.allclose(ll.right[0], right[-1][-1], atol=ADJACENCY_TOL) else ll.right)
        limits = [lanelets[i].speed_limit for i in chain if lanelets[i].speed_limit is not None]
        lanes.append(Lane(lane_id, chain, np.vstack(left), np.vstack(right), min(limits) if limits else None))

    def lane_of(lanelet_id: int) -> Optional[int]:
        for ln in lanes:
            if lanelet_id in ln.lanelets:
                return ln.id
        return None

    out = []
    for ln in lanes:
        adj_l = adj_r = None
        for lid in ln.lanelets:
            ll = lanelets[lid]
            if adj_l is None and ll.adjacent_left is not None:
                adj_l = (lane_of(ll.adjacent_left[0]), ll.adjacent_left[1])
            if adj_r is None and ll.adjacent_right is not None:
                adj_r = (lane_of(ll.adjacent_right[0]), ll.adjacent_right[1])
        out.append(replace(ln, adjacent_left=adj_l, adjacent_right=adj_r))
    return tuple(out)


def shares_border(a: np.ndarray, b: np.ndarray, tol: float = ADJACENCY_TOL) -> bool:
    """Vertex-wise coincidence of two boundary polylines."""
    return a.shape == b.shape and bool(np.all(np.linalg.norm(a - b, axis=1) <= tol))


def check_adjacency(lanelets: Mapping[int, Lanelet]) -> None:
    for ll in lanelets.values():
        for side in ("left", "right"):
            ref = getattr(ll, f"adjacent_{side}")
            if ref is None:
                continue
            other_id, same = ref
            if other_id not in lanelets:
                raise ScenarioError(f"lanelet {ll.id}: adjacent_{side} references missing lanelet {other_id} (dangling reference)")
            other = lanelets[other_id]
            mine = getattr(ll, side)
            if same:
                back_side = "right" if side == "left" else "left"
                theirs = getattr(other, back_side)
            else:
                back_side = side
                theirs = getattr(other, side)[::-1]
            back = getattr(other, f"adjacent_{back_side}")
            if back is None or back[0] != ll.id or back[1] != same:
                raise ScenarioError(
                    f"invariant violated: adjacency not symmetric between lanelets {ll.id} and {other_id}"
                )
            if not shares_border(mine, theirs):
                raise ScenarioError(f"invariant violated: lanelets {ll.id} and {other_id} do not share a border")
        for succ in ll.successors:
            if succ not in lanelets:
                raise ScenarioError(f"lanelet {ll.id}: successor {succ} missing (dangling reference)")


def build_network(lanelets: Sequence[Lanelet]) -> RoadNetwork:
    by_id: Dict[int, Lanelet] = {}
    for ll in lanelets:
        if ll.id in by_id:
            raise ScenarioError(f"duplicate lanelet id {ll.id}")
        by_id[ll.id] = ll
    if not by_id:
        raise ScenarioError("network has no lanelets")
    check_adjacency(by_id)
    return RoadNetwork(by_id, assemble_lanes(by_id))


# ---------------------------------------------------------------- JSON


def _req(obj: Mapping[str, Any], key: str, path: str):
    if not isinstance(obj, Mapping):
        raise ScenarioError(f"{path}: expected an object")
    if key not in obj:
        raise ScenarioError(f"{path}.{key}: missing required field")
    return obj[key]


def _num(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _adj(value: Any, path: str) -> Optional[Tuple[int, bool]]:
    if value is None:
        return None
    if isinstance(value, Mapping):
        return int(_req(value, "id", path)), bool(value.get("same_direction", True))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return int(value[0]), bool(value[1])
    raise ScenarioError(f"{path}: expected {{id, same_direction}}")


def _points(value: Any, path: str) -> np.ndarray:
    try:
        return as_points(value)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def parse_lanelet(obj: Mapping[str, Any], path: str) -> Lanelet:
    lim = obj.get("speed_limit")
    return Lanelet(
        id=int(_req(obj, "id", path)),
        left=_points(_req(obj, "left", path), f"{path}.left"),
        right=_points(_req(obj, "right", path), f"{path}.right"),
        successors=tuple(int(s) for s in obj.get("successors", [])),
        adjacent_left=_adj(obj.get("adjacent_left"), f"{path}.adjacent_left"),
        adjacent_right=_adj(obj.get("adjacent_right"), f"{path}.adjacent_right"),
        speed_limit=None if lim is None else _num(lim, f"{path}.speed_limit"),
    )


def parse_state(obj: Mapping[str, Any], path: str) -> State:
    pos = _req(obj, "position", path)
    if not isinstance(pos, (list, tuple)) or len(pos) != 2:
        raise ScenarioError(f"{path}.position: expected [x, y]")
    try:
        return State(
            position=(_num(pos[0], f"{path}.position[0]"), _num(pos[1], f"{path}.position[1]")),
            v=_num(_req(obj, "v", path), f"{path}.v"),
            theta=_num(obj.get("theta", 0.0), f"{path}.theta"),
            delta=_num(obj.get("delta", 0.0), f"{path}.delta"),
            a=_num(obj.get("a", 0.0), f"{path}.a"),
        )
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def parse_shape(obj: Mapping[str, Any], path: str) -> Shape:
    try:
        return Shape(
            _num(_req(obj, "length", path), f"{path}.length"),
            _num(_req(obj, "width", path), f"{path}.width"),
            _num(obj.get("ref_offset", 0.0), f"{path}.ref_offset"),
        )
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def parse_obstacle(obj: Mapping[str, Any], path: str, network: RoadNetwork) -> Obstacle:
    oid = int(_req(obj, "id", path))
    shape = parse_shape(_req(obj, "shape", path), f"{path}.shape")
    traj = obj.get("trajectory")
    beh = obj.get("behavior")
    state = None
    trajectory = None
    behavior = None
    if traj is not None:
        trajectory = tuple(
            _locate(parse_state(st, f"{path}.trajectory[{i}]"), network) for i, st in enumerate(traj)
        )
    if beh is not None:
        behavior = from_mapping(IdmParams, beh, f"{path}.behavior")
        state = _locate(parse_state(_req(obj, "state", path), f"{path}.state"), network)
    try:
        return Obstacle(oid, str(obj.get("kind", "car")), shape, trajectory, behavior, state)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


def _locate(state: State, network: RoadNetwork) -> State:
    try:
        lane = current_lane(network, state.position)
    except OffRoadError:
        return state
    return with_curvilinear(state, lane)


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    net = _req(data, "network", "$")
    raw_lanelets = _req(net, "lanelets", "$.network")
    if not isinstance(raw_lanelets, list):
        raise ScenarioError("$.network.lanelets: expected a list")
    network = build_network([parse_lanelet(o, f"$.network.lanelets[{i}]") for i, o in enumerate(raw_lanelets)])

    ego_obj = _req(data, "ego", "$")
    ego = parse_state(_req(ego_obj, "state", "$.ego"), "$.ego.state")
    shape_obj = ego_obj.get("shape", {"length": 4.5, "width": 1.8})
    ego_shape = parse_shape(shape_obj, "$.ego.shape")
    ego_params = from_mapping(EgoParams, ego_obj.get("params"), "$.ego.params")
    try:
        lane = current_lane(network, ego.position)
    except OffRoadError as exc:
        raise ScenarioError(f"invariant violated: ego position projects onto no lane ({exc})") from None
    ego = with_curvilinear(ego, lane)

    obstacles = tuple(
        parse_obstacle(o, f"$.obstacles[{i}]", network) for i, o in enumerate(data.get("obstacles", []))
    )
    ids = [o.id for o in obstacles]
    if len(ids) != len(set(ids)):
        raise ScenarioError("duplicate obstacle ids")

    return Scenario(
        network=network,
        ego=ego,
        ego_shape=ego_shape,
        ego_params=ego_params,
        obstacles=obstacles,
        dt=_num(_req(data, "dt", "$"), "$.dt"),
        horizon=int(_req(data, "horizon", "$")),
        country=str(data.get("country", "DEU")),
        rules_enabled=tuple(data.get("rules_enabled", [])),
        rule_config=from_mapping(RuleConfig, data.get("rule_config"), "$.rule_config"),
        prediction=from_mapping(SetPredictionParams, data.get("prediction"), "$.prediction"),
        context=dict(data.get("context", {})),
    )


def load_scenario(path: str | Path) -> Scenario:
    """Read and validate a scenario JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(data)


def state_to_dict(st: State) -> dict:
    return {"position": list(st.position), "v": st.v, "theta": st.theta, "delta": st.delta, "a": st.a}


def scenario_to_dict(sc: Scenario) -> dict:
    def lanelet(ll: Lanelet) -> dict:
        out = {"id": ll.id, "left": ll.left.tolist(), "right": ll.right.tolist(), "successors": list(ll.successors)}
        if ll.adjacent_left is not None:
            out["adjacent_left"] = {"id": ll.adjacent_left[0], "same_direction": ll.adjacent_left[1]}
        if ll.adjacent_right is not None:
            out["adjacent_right"] = {"id": ll.adjacent_right[0], "same_direction": ll.adjacent_right[1]}
        if ll.speed_limit is not None:
            out["speed_limit"] = ll.speed_limit
        return out

    def obstacle(o: Obstacle) -> dict:
        out = {"id": o.id, "kind": o.kind,
               "shape": {"length": o.shape.length, "width": o.shape.width, "ref_offset": o.shape.ref_offset}}
        if o.trajectory is not None:
            out["trajectory"] = [state_to_dict(s) for s in o.trajectory]
        else:
            out["behavior"] = to_mapping(o.behavior)
            out["state"] = state_to_dict(o.state)
        return out

    return {
        "network": {"lanelets": [lanelet(ll) for ll in sc.network.lanelets.values()]},
        "ego": {
            "state": state_to_dict(sc.ego),
            "shape": {"length": sc.ego_shape.length, "width": sc.ego_shape.width, "ref_offset": sc.ego_shape.ref_offset},
            "params": to_mapping(sc.ego_params),
        },
        "obstacles": [obstacle(o) for o in sc.obstacles],
        "dt": sc.dt,
        "horizon": sc.horizon,
        "country": sc.country,
        "rules_enabled": list(sc.rules_enabled),
        "rule_config": to_mapping(sc.rule_config),
        "prediction": to_mapping(sc.prediction),
        "context": dict(sc.context),
    }


# ---------------------------------------------------------------- fixtures


def straight_lanelets(
    lane_count: int,
    length: float = 1000.0,
    lane_width: float = 3.5,
    n_points: int = 11,
    speed_limit: Optional[float] = None,
    start_id: int = 1,
    x0: float = 0.0,
) -> List[Lanelet]:
    """Parallel straight lanelets along +x; id ``start_id`` is the rightmost lane (y in [0, w])."""
    xs = np.linspace(x0, x0 + length, n_points)
    out = []
    for i in range(lane_count):
        right = np.column_stack([xs, np.full_like(xs, i * lane_width)])
        left = np.column_stack([xs, np.full_like(xs, (i + 1) * lane_width)])
        lid = start_id + i
        out.append(
            Lanelet(
                id=lid,
                left=left,
                right=right,
                adjacent_left=(lid + 1, True) if i < lane_count - 1 else None,
                adjacent_right=(lid - 1, True) if i > 0 else None,
                speed_limit=speed_limit,
            )
        )
    return out
