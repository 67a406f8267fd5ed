"""Multi-lane straight highway with IDM traffic and a meta-action controlled ego vehicle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..actions import ActionPair, Lat, Lon
from ..errors import ActionError, SimulationError
from ..params import EgoParams, RuleConfig, SetPredictionParams
from ..prediction import SET_BASED
from ..scenario import IdmParams, Obstacle, Scenario, Shape, State, build_network, straight_lanelets
from ..geometry import rectangle

HIGHWAY_SPEED_LIMIT = 33.33
LANE_WIDTH = 4.0
ROAD_LENGTH = 1500.0
VEHICLE = Shape(5.0, 2.0)
SENSOR_RANGE = 120.0
DENSITY_SPACING = {1: 80.0, 2: 60.0, 3: 40.0}
SETTINGS = {1: (4, 2), 2: (4, 3), 3: (5, 3)}

# ego low-level control
SPEED_STEP = 5.0
TAU_SPEED = 1.0
FAIL_SAFE_STEP = 15.0
TAU_FAIL_SAFE = 0.6
COMFORT_ACCEL = (-1.5, 3.0)
MAX_HEADING = 0.3
LATERAL_GAIN = 1.0 / 0.4
TAU_LATERAL = 0.2


def idm_accel(gap: float, v: float, v_leader: float, p: IdmParams) -> float:
    """Intelligent driver model acceleration, clamped to ``[-8, max_accel]``."""
    if gap <= 0:
        raise SimulationError(f"IDM needs a positive gap, got {gap}")
    s_star = p.min_gap + max(0.0, v * p.time_headway + v * (v - v_leader) / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
    a = p.max_accel * (1.0 - (v / p.desired_speed) ** p.exponent - (s_star / gap) ** 2)
    return min(max(a, -8.0), p.max_accel)


def free_accel(v: float, p: IdmParams) -> float:
    return min(max(p.max_accel * (1.0 - (v / p.desired_speed) ** p.exponent), -8.0), p.max_accel)


class Meta(Enum):
    IDLE = "IDLE"
    FASTER = "FASTER"
    SLOWER = "SLOWER"
    LANE_LEFT = "LANE_LEFT"
    LANE_RIGHT = "LANE_RIGHT"


@dataclass(frozen=True)
class MetaAction:
    kind: Meta
    speed_step: float = SPEED_STEP
    tau: float = TAU_SPEED

    @property
    def fail_safe(self) -> bool:
        return self.kind is Meta.SLOWER and self.speed_step == FAIL_SAFE_STEP

    def __str__(self) -> str:
        return "FAIL_SAFE" if self.fail_safe else self.kind.value


def map_action(pair) -> MetaAction:
    """Translate an action pair (or the fail-safe marker) into a simulator meta-action."""
    from ..decision import FAIL_SAFE

    if pair is FAIL_SAFE:
        return MetaAction(Meta.SLOWER, FAIL_SAFE_STEP, TAU_FAIL_SAFE)
    if not isinstance(pair, ActionPair):
        raise ActionError(f"cannot map {pair!r} to a meta-action")
    if pair.lon is Lon.STOP:
        raise ActionError("STOP has no highway meta-action")
    if pair.lat is Lat.LEFT_LANE:
        return MetaAction(Meta.LANE_LEFT)
    if pair.lat is Lat.RIGHT_LANE:
        return MetaAction(Meta.LANE_RIGHT)
    return MetaAction({Lon.KEEP: Meta.IDLE, Lon.ACCELERATE: Meta.FASTER, Lon.DECELERATE: Meta.SLOWER}[pair.lon])


@dataclass
class Vehicle:
    id: int
    x: float
    y: float
    vx: float
    vy: float = 0.0
    ax: float = 0.0
    idm: Optional[IdmParams] = None
    shape: Shape = VEHICLE

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    @property
    def theta(self) -> float:
        return math.atan2(self.vy, self.vx) if self.vx > 0 or self.vy != 0 else 0.0

    def state(self) -> State:
        return State((self.x, self.y), self.speed, self.theta, 0.0, self.ax)

    def footprint(self):
        return rectangle((self.x, self.y), self.theta, self.shape.length, self.shape.width)


@dataclass
class EgoControl:
    target_speed: float
    target_lane: int
    tau: float = TAU_SPEED
    accel_range: Tuple[float, float] = COMFORT_ACCEL


@dataclass
class HighwayEnv:
    """Straight highway; lane 0 is the rightmost. One ``step`` is one policy period."""

    lane_count: int = 4
    density: int = 2
    seed: int = 0
    dt: float = 0.2
    substeps: int = 3
    ego_speed: float = 25.0
    ego_x: float = 300.0
    ego_lane: Optional[int] = None
    lane_width: float = LANE_WIDTH
    road_length: float = ROAD_LENGTH
    ego_params: EgoParams = field(default_factory=EgoParams)
    spawn: bool = True

    def __post_init__(self):
        if self.lane_count < 1:
            raise SimulationError("need at least one lane")
        if self.spawn and self.density not in DENSITY_SPACING:
            raise SimulationError(f"unknown density class {self.density}; expected one of {sorted(DENSITY_SPACING)}")
        self.network = build_network(
            straight_lanelets(
                self.lane_count, self.road_length, self.lane_width, n_points=2, speed_limit=HIGHWAY_SPEED_LIMIT
            )
        )
        self.rng = np.random.default_rng(self.seed)
        self.step_index = 0
        self.collision_step: Optional[int] = None
        self.terminated = False
        lane = self.ego_lane if self.ego_lane is not None else int(self.rng.integers(self.lane_count))
        self.ego = Vehicle(0, self.ego_x, self.lane_center(lane), self.ego_speed)
        self.control = EgoControl(self.ego_speed, lane)
        self.vehicles: List[Vehicle] = self._spawn(lane) if self.spawn else []
        self.start_x = self.ego.x

    # -- construction

    @classmethod
    def setting(cls, setting: int, seed: int = 0, **kw) -> "HighwayEnv":
        if setting not in SETTINGS:
            raise SimulationError(f"unknown setting {setting}; expected one of {sorted(SETTINGS)}")
        lanes, density = SETTINGS[setting]
        return cls(lane_count=lanes, density=density, seed=seed, **kw)

    @classmethod
    def from_vehicles(cls, lane_count: int, ego: Tuple[int, float, float], others: Sequence[tuple], **kw) -> "HighwayEnv":
        """Hand-built fixture; ``ego = (lane, x, v)``, ``others = [(lane, x, v[, IdmParams]), ...]``."""
        lane, x, v = ego
        env = cls(lane_count=lane_count, ego_lane=lane, ego_x=x, ego_speed=v, spawn=False, **kw)
        for i, entry in enumerate(others, start=1):
            p = entry[3] if len(entry) > 3 else IdmParams()
            env.vehicles.append(Vehicle(i, entry[1], env.lane_center(entry[0]), entry[2], idm=p))
        for a in env.vehicles:
            if a.footprint().intersects(env.ego.footprint()):
                raise SimulationError(f"vehicle {a.id} overlaps the ego at spawn")
        return env

    def _spawn(self, ego_lane: int) -> List[Vehicle]:
        mean = DENSITY_SPACING[self.density]
        out: List[Vehicle] = []
        vid = 1
        for lane in range(self.lane_count):
            x = self.ego.x - 250.0 + self.rng.uniform(0.0, mean)
            while x < self.ego.x + 450.0:
                keep = lane != ego_lane or not (self.ego.x - 25.0 < x < self.ego.x + 30.0)
                desired = self.rng.uniform(21.0, 27.0)
                v = desired * self.rng.uniform(0.85, 1.0)
                if keep:
                    p = IdmParams(desired_speed=desired)
                    out.append(Vehicle(vid, x, self.lane_center(lane), v, idm=p))
                    vid += 1
                x += mean * self.rng.uniform(0.8, 1.2)
        return out

    # -- geometry helpers

    def lane_center(self, index: int) -> float:
        return (index + 0.5) * self.lane_width

    def lane_index(self, y: float) -> int:
        # lane strip containing y; boundary points go to the right-hand lane
        return int(min(max(math.ceil(y / self.lane_width - 1.0), 0), self.lane_count - 1))

    def lane_id(self, index: int) -> int:
        return self.network.lanes[index].id

    # -- dynamics

    def apply(self, meta: MetaAction) -> None:
        """Latch the meta-action into the ego controller setpoints."""
        cur = self.lane_index(self.ego.y)
        v = self.ego.vx
        c = self.control
        c.tau, c.accel_range = TAU_SPEED, COMFORT_ACCEL
        if meta.kind is Meta.LANE_LEFT:
            c.target_lane, c.target_speed = min(cur + 1, self.lane_count - 1), v
        elif meta.kind is Meta.LANE_RIGHT:
            c.target_lane, c.target_speed = max(cur - 1, 0), v
        else:
            c.target_lane = cur
            if meta.kind is Meta.IDLE:
                c.target_speed = v
            elif meta.kind is Meta.FASTER:
                c.target_speed = min(self.ego_params.v_max, v + meta.speed_step)
            else:
                c.target_speed = max(0.0, v - meta.speed_step)
                c.tau = meta.tau
                if meta.fail_safe:
                    c.accel_range = (self.ego_params.a_min, self.ego_params.a_lon_range[1])

    def _ego_substep(self, h: float) -> None:
        e, c = self.ego, self.control
        lo, hi = c.accel_range
        ax = min(max((c.target_speed - e.vx) / c.tau, lo), hi)
        err = self.lane_center(c.target_lane) - e.y
        a_lat_lo, a_lat_hi = self.ego_params.a_lat_range
        # no faster than what half the lateral authority can still shed before the target
        shed = math.sqrt(min(-a_lat_lo, a_lat_hi) * abs(err))
        lim = min(max(e.vx, 0.0) * math.sin(MAX_HEADING), shed)
        vy_des = min(max(LATERAL_GAIN * err, -lim), lim)
        ay = min(max((vy_des - e.vy) / TAU_LATERAL, a_lat_lo), a_lat_hi)
        vx = min(max(e.vx + ax * h, 0.0), self.ego_params.v_max)
        ax_eff = (vx - e.vx) / h
        e.x += e.vx * h + 0.5 * ax_eff * h * h
        e.y += e.vy * h + 0.5 * ay * h * h
        e.vx, e.vy, e.ax = vx, e.vy + ay * h, ax_eff

    def _leaders(self) -> Tuple[np.ndarray, np.ndarray]:
        """Index of each obstacle's leader among ``[ego] + vehicles`` (-1 if none) and the bumper gap."""
        allv = [self.ego] + self.vehicles
        x = np.array([v.x for v in allv])
        y = np.array([v.y for v in allv])
        half_l = np.array([v.shape.length for v in allv]) / 2.0
        half_w = np.array([v.shape.width for v in allv]) / 2.0
        me = slice(1, None)
        ahead = x[None, :] > x[me, None]
        overlap = np.abs(y[None, :] - y[me, None]) < half_w[None, :] + half_w[me, None]
        gap = x[None, :] - x[me, None] - half_l[None, :] - half_l[me, None]
        gap = np.where(ahead & overlap, gap, np.inf)
        idx = np.argmin(gap, axis=1)
        best = gap[np.arange(len(idx)), idx]
        return np.where(np.isfinite(best), idx, -1), best

    def _traffic_substep(self, h: float) -> None:
        if not self.vehicles:
            return
        allv = [self.ego] + self.vehicles
        idx, gaps = self._leaders()
        accels = []
        for veh, i, gap in zip(self.vehicles, idx, gaps):
            if i < 0:
                a = free_accel(veh.vx, veh.idm)
            elif gap <= 0:
                a = -8.0
            else:
                a = idm_accel(float(gap), veh.vx, allv[i].vx, veh.idm)
            accels.append(a)
        for veh, a in zip(self.vehicles, accels):
            v = max(veh.vx + a * h, 0.0)
            a_eff = (v - veh.vx) / h
            veh.x += veh.vx * h + 0.5 * a_eff * h * h
            veh.vx, veh.ax = v, a_eff

    def ego_collides(self) -> bool:
        e = self.ego
        reach = (e.shape.length + VEHICLE.length) / 2.0 + 1.0
        foot = None
        for veh in self.vehicles:
            if abs(veh.x - e.x) > reach or abs(veh.y - e.y) > reach:
                continue
            if foot is None:
                foot = e.footprint()
            other = veh.footprint()
            if foot.intersects(other) and not foot.touches(other):
                return True
        return False

    def step(self, meta: MetaAction) -> bool:
        """Advance one policy period; returns True when a collision happened."""
        if self.terminated:
            raise SimulationError("environment is terminated")
        self.apply(meta)
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            self._traffic_substep(h)
            self._ego_substep(h)
            if self.ego_collides():
                self.collision_step = self.step_index
                self.terminated = True
                return True
        self.step_index += 1
        return False

    # -- observation

    def nearby(self, radius: float = SENSOR_RANGE) -> List[Vehicle]:
        return [v for v in self.vehicles if abs(v.x - self.ego.x) <= radius]

    def observe(
        self,
        prediction: str = SET_BASED,
        rules: Sequence[str] = (),
        horizon: Optional[int] = None,
        radius: float = SENSOR_RANGE,
        rule_config: Optional[RuleConfig] = None,
    ) -> Scenario:
        """The ego's view of the world as a highway scenario."""
        if horizon is None:
            horizon = 8 if prediction == SET_BASED else 15
        obstacles = tuple(
            Obstacle(v.id, "car", v.shape, behavior=v.idm, state=v.state()) for v in self.nearby(radius)
        )
        return Scenario(
            self.network,
            self.ego.state(),
            self.ego.shape,
            self.ego_params,
            obstacles,
            dt=self.dt,
            horizon=horizon,
            rules_enabled=tuple(rules),
            rule_config=rule_config or RuleConfig(),
            prediction=SetPredictionParams(),
            context={"highway": True},
        )

    @property
    def traveled(self) -> float:
        return self.ego.x - self.start_x
