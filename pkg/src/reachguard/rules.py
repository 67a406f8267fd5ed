"""Atomic predicates, the safe distance, formalized traffic rules and robustness margins."""
from __future__ import annotations

import math
import re
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import PredicateError, UnknownRuleError
from .ltlf import Atom, Formula, G, Implies, conjoin
from .params import EgoParams, RuleConfig
from .scenario import RULE_IDS, Lane, Scenario, Shape, State, occupancy_of, project_to_curvilinear

ROBUSTNESS_CAP = 1e6

ACC_KEEP = "abs_acc_within_lim"
ACC_ABOVE = "acc_above_lim"
ACC_BELOW = "acc_below_neg_lim"
STANDSTILL = "in_standstill"
BRAKES_ABRUPTLY = "brakes_abruptly"
BRAKING_JUSTIFIED = "braking_justification"
SPEED_LIMIT_ATOMS = (
    "keeps_lane_speed_limit",
    "keeps_fov_speed_limit",
    "keeps_type_speed_limit",
    "keeps_braking_speed_limit",
)

_ATOM_RE = re.compile(r"^([a-z_]+)(?:\[(-?\d+)\])?$")
_PARAMETRIZED = {"in_lane", "precedes", "keeps_safe_distance"}
_PLAIN = {ACC_KEEP, ACC_ABOVE, ACC_BELOW, STANDSTILL, BRAKES_ABRUPTLY, BRAKING_JUSTIFIED, *SPEED_LIMIT_ATOMS}


def in_lane(lane_id: int) -> str:
    return f"in_lane[{lane_id}]"


def precedes(obs_id: int) -> str:
    return f"precedes[{obs_id}]"


def keeps_safe_distance(obs_id: int) -> str:
    return f"keeps_safe_distance[{obs_id}]"


@lru_cache(maxsize=4096)
def parse_atom(name: str) -> Tuple[str, Optional[int]]:
    """Split ``base[arg]`` into its registry key and integer argument."""
    m = _ATOM_RE.match(name)
    if not m:
        raise PredicateError(f"unknown atom {name!r}")
    base, arg = m.group(1), m.group(2)
    if base in _PARAMETRIZED:
        if arg is None:
            raise PredicateError(f"atom {base!r} needs an argument, e.g. {base}[1]")
        return base, int(arg)
    if base in _PLAIN and arg is None:
        return base, None
    raise PredicateError(f"unknown atom {name!r}")


def is_registered(name: str) -> bool:
    try:
        parse_atom(name)
    except PredicateError:
        return False
    return True


@dataclass(frozen=True)
class WorldStep:
    """Snapshot of the world at one time step, as consumed by predicate evaluation."""

    ego: State
    obstacles: Tuple[Tuple[int, State], ...] = ()
    lane_ctx: Mapping[str, Optional[int]] = field(default_factory=dict)
    fail_safe_active: bool = False
    step: int = 0

    def obstacle_state(self, obs_id: int) -> State:
        for oid, st in self.obstacles:
            if oid == obs_id:
                return st
        raise PredicateError(f"missing obstacle {obs_id} at step {self.step}")


# ---------------------------------------------------------------- safe distance


def _check_braking(params: EgoParams, a_obs_min: float) -> None:
    if not a_obs_min < params.a_min < 0:
        raise PredicateError(
            f"safe distance needs a_obs_min < a_min < 0, got a_obs_min={a_obs_min}, a_min={params.a_min}"
        )


def safe_distance(v: float, v_obs: float, params: EgoParams, a_obs_min: float) -> float:
    """Minimum gap that lets the ego stop behind a leader braking at ``a_obs_min``."""
    if v < 0 or v_obs < 0:
        raise PredicateError("safe distance needs non-negative speeds")
    _check_braking(params, a_obs_min)
    return v_obs**2 / (-2.0 * abs(a_obs_min)) - v**2 / (-2.0 * abs(params.a_min)) + v * params.t_d


def max_speed_for_gap(gap: float, v_obs: float, params: EgoParams, a_obs_min: float) -> float:
    """Largest ``v >= 0`` with ``safe_distance(v, v_obs) <= gap``; ``-inf`` if even ``v = 0`` fails."""
    _check_braking(params, a_obs_min)
    c = v_obs**2 / (-2.0 * abs(a_obs_min)) - gap
    if c > 0:
        return -math.inf
    k = 1.0 / (2.0 * abs(params.a_min))
    # k v^2 + t_d v + c = 0, positive root
    disc = params.t_d**2 - 4.0 * k * c
    return (-params.t_d + math.sqrt(disc)) / (2.0 * k)


# ---------------------------------------------------------------- geometry in the ego lane frame


def _ego_lane(step: WorldStep, scenario: Scenario) -> Lane:
    lane_id = step.lane_ctx.get("current") if step.lane_ctx else None
    if lane_id is not None:
        return scenario.network.lane(lane_id)
    from .scenario import current_lane

    return current_lane(scenario.network, step.ego.position)


def center_sd(st: State, shape: Shape, lane: Lane) -> Tuple[float, float]:
    x, y = st.position
    cx = x + shape.ref_offset * math.cos(st.theta)
    cy = y + shape.ref_offset * math.sin(st.theta)
    return project_to_curvilinear((cx, cy), lane, band=math.inf)


def longitudinal_gap(step: WorldStep, obs_id: int, scenario: Scenario) -> float:
    """Bumper-to-bumper distance from the ego front to the obstacle rear along the ego lane."""
    lane = _ego_lane(step, scenario)
    obs = scenario.obstacle(obs_id)
    s_e, _ = center_sd(step.ego, scenario.ego_shape, lane)
    s_o, _ = center_sd(step.obstacle_state(obs_id), obs.shape, lane)
    return (s_o - obs.shape.length / 2.0) - (s_e + scenario.ego_shape.length / 2.0)


def _precedes(step: WorldStep, obs_id: int, scenario: Scenario) -> bool:
    lane = _ego_lane(step, scenario)
    obs = scenario.obstacle(obs_id)
    ost = step.obstacle_state(obs_id)
    if math.cos(ost.theta - step.ego.theta) <= 0.0:
        return False
    s_e, d_e = center_sd(step.ego, scenario.ego_shape, lane)
    s_o, d_o = center_sd(ost, obs.shape, lane)
    lateral_overlap = abs(d_e - d_o) < (scenario.ego_shape.width + obs.shape.width) / 2.0
    return s_o > s_e and lateral_overlap


def lane_speed_cap(step: WorldStep, config: RuleConfig, scenario: Scenario) -> float:
    try:
        lane = _ego_lane(step, scenario)
    except Exception:
        return config.speed_limit_default
    return lane.speed_limit if lane.speed_limit is not None else config.speed_limit_default


def speed_caps(step: WorldStep, config: RuleConfig, scenario: Scenario) -> Dict[str, float]:
    return {
        "keeps_lane_speed_limit": lane_speed_cap(step, config, scenario),
        "keeps_fov_speed_limit": config.fov_speed_cap,
        "keeps_type_speed_limit": config.type_speed_cap,
        "keeps_braking_speed_limit": config.braking_speed_cap,
    }


def eval_predicate(name: str, step: WorldStep, config: RuleConfig, scenario: Scenario) -> bool:
    """Truth value of a registered atom at one world step."""
    base, arg = parse_atom(name)
    ego = step.ego
    p = scenario.ego_params
    if base == ACC_KEEP:
        return abs(ego.a) <= p.a_lim
    if base == ACC_ABOVE:
        return ego.a > p.a_lim
    if base == ACC_BELOW:
        return ego.a < -p.a_lim
    if base == STANDSTILL:
        return -p.v_err <= ego.v <= p.v_err
    if base == BRAKES_ABRUPTLY:
        return ego.a < -config.a_abrupt
    if base == BRAKING_JUSTIFIED:
        return bool(step.fail_safe_active)
    if base in SPEED_LIMIT_ATOMS:
        return ego.v <= speed_caps(step, config, scenario)[base]
    if base == "in_lane":
        try:
            lane = scenario.network.lane(arg)
        except KeyError:
            raise PredicateError(f"in_lane: unknown lane {arg}") from None
        occ = occupancy_of(ego, scenario.ego_shape)
        return any(occ.intersects(scenario.network.lanelets[lid].polygon) for lid in lane.lanelets)
    if base == "precedes":
        _require_obstacle(step, arg, scenario)
        return _precedes(step, arg, scenario)
    if base == "keeps_safe_distance":
        _require_obstacle(step, arg, scenario)
        gap = longitudinal_gap(step, arg, scenario)
        v_obs = step.obstacle_state(arg).v
        return gap > safe_distance(ego.v, v_obs, p, config.a_obs_min)
    raise PredicateError(f"unknown atom {name!r}")


def _require_obstacle(step: WorldStep, obs_id: int, scenario: Scenario) -> None:
    step.obstacle_state(obs_id)
    try:
        scenario.obstacle(obs_id)
    except KeyError:
        raise PredicateError(f"missing obstacle {obs_id} in scenario") from None


def label_step(names: Iterable[str], step: WorldStep, config: RuleConfig, scenario: Scenario) -> Dict[str, bool]:
    return {n: eval_predicate(n, step, config, scenario) for n in names}


# ---------------------------------------------------------------- rule formulas


def r_g1(obs_id: int) -> Formula:
    return G(Implies(Atom(precedes(obs_id)), Atom(keeps_safe_distance(obs_id))))


def r_g2() -> Formula:
    return G(Implies(Atom(BRAKES_ABRUPTLY), Atom(BRAKING_JUSTIFIED)))


def r_g3() -> Formula:
    return G(conjoin([Atom(a) for a in SPEED_LIMIT_ATOMS]))


def rule_formulas(config: RuleConfig, enabled: Sequence[str], obstacle_ids: Sequence[int] = ()) -> List[Formula]:
    """Formalized rules; the safe-distance rule is instantiated once per obstacle."""
    out: List[Formula] = []
    for rid in enabled:
        if rid not in RULE_IDS:
            raise UnknownRuleError(f"unknown rule id {rid!r}")
    for rid in RULE_IDS:
        if rid not in enabled:
            continue
        if rid == "R_G1":
            out.extend(r_g1(o) for o in obstacle_ids)
        elif rid == "R_G2":
            out.append(r_g2())
        else:
            out.append(r_g3())
    return out


# ---------------------------------------------------------------- per-step bodies and margins


def _steps(log) -> Sequence[WorldStep]:
    return getattr(log, "steps", log)


def rule_body_holds(rule: str, step: WorldStep, config: RuleConfig, scenario: Scenario) -> bool:
    """Whether the propositional body of a rule (the operand of G) holds at one step."""
    if rule == "R_G1":
        for oid, _ in step.obstacles:
            if eval_predicate(precedes(oid), step, config, scenario) and not eval_predicate(
                keeps_safe_distance(oid), step, config, scenario
            ):
                return False
        return True
    if rule == "R_G2":
        return (not eval_predicate(BRAKES_ABRUPTLY, step, config, scenario)) or eval_predicate(
            BRAKING_JUSTIFIED, step, config, scenario
        )
    if rule == "R_G3":
        return all(eval_predicate(a, step, config, scenario) for a in SPEED_LIMIT_ATOMS)
    raise UnknownRuleError(f"unknown rule id {rule!r}")


def step_margin(rule: str, step: WorldStep, config: RuleConfig, scenario: Scenario) -> float:
    if rule == "R_G1":
        m = ROBUSTNESS_CAP
        for oid, ost in step.obstacles:
            if eval_predicate(precedes(oid), step, config, scenario):
                gap = longitudinal_gap(step, oid, scenario)
                m = min(m, gap - safe_distance(step.ego.v, ost.v, scenario.ego_params, config.a_obs_min))
        return m
    if rule == "R_G2":
        if step.fail_safe_active:
            return ROBUSTNESS_CAP
        return step.ego.a + config.a_abrupt
    if rule == "R_G3":
        return min(cap - step.ego.v for cap in speed_caps(step, config, scenario).values())
    raise UnknownRuleError(f"unknown rule id {rule!r}")


def robustness_margin(rule: str, log, config: RuleConfig, scenario: Scenario) -> List[float]:
    """Signed per-step slack of a rule's defining inequality; positive means compliant."""
    if rule not in RULE_IDS:
        raise UnknownRuleError(f"unknown rule id {rule!r}")
    steps = _steps(log)
    if len(steps) == 0:
        raise PredicateError("robustness needs a non-empty log")
    return [step_margin(rule, st, config, scenario) for st in steps]
