"""Scenario describer, decision makers, response parsing and the ranked verification loop."""
from __future__ import annotations

import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import httpx

from .actions import ActionPair, FeasibleActions, Lat, LaneContext, Lon, feasible_actions, lane_context
from .errors import (
    ActionError,
    MakerTimeout,
    OffRoadError,
    ReachGuardError,
    SchemaViolation,
)
from .failsafe import FailSafePlan, fail_safe_plan, is_invariably_safe
from .prediction import SET_BASED, predict
from .reach import ReachContext, VerificationOutcome, verify
from .rules import center_sd, rule_formulas
from .scenario import Scenario, State, current_lane

log = logging.getLogger(__name__)

HISTORY = 5
DEFAULT_TIMEOUT = 10.0
API_KEY_ENV = "REACHGUARD_API_KEY"


class _FailSafe:
    """Marker for the fail-safe fallback in place of an action pair."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "FAIL_SAFE"

    __str__ = __repr__

    def __reduce__(self):
        return (_FailSafe, ())


FAIL_SAFE = _FailSafe()
Chosen = Union[ActionPair, _FailSafe]


# ---------------------------------------------------------------- describer


def _f(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    out = f"{x:.2f}"
    return "0.00" if out == "-0.00" else out


@dataclass(frozen=True)
class PromptBundle:
    system: str
    ego: str
    rules: str
    obstacles: str
    kappa: int
    user_command: Optional[str] = None
    previous_actions: Tuple[Chosen, ...] = ()

    def __post_init__(self):
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")

    def user_text(self) -> str:
        parts = [self.ego, self.rules, self.obstacles]
        if self.user_command:
            parts.append(f"Command: {self.user_command}")
        return "\n\n".join(parts)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "ego": self.ego,
            "rules": self.rules,
            "obstacles": self.obstacles,
            "kappa": self.kappa,
            "user_command": self.user_command,
            "previous_actions": [str(a) for a in self.previous_actions],
        }


def rule_texts(scenario: Scenario, rules: Sequence[str]) -> List[str]:
    p, c = scenario.ego_params, scenario.rule_config
    lane = scenario.current_lane()
    lane_cap = lane.speed_limit if lane.speed_limit is not None else c.speed_limit_default
    texts = {
        "R_G1": (
            "R_G1 safe distance: keep a gap to every preceding vehicle larger than "
            f"v_obs^2/(-2*{_f(abs(c.a_obs_min))}) - v^2/(-2*{_f(abs(p.a_min))}) + v*{_f(p.t_d)} m."
        ),
        "R_G2": f"R_G2 no unnecessary braking: do not decelerate harder than {_f(c.a_abrupt)} m/s^2 "
        "unless a fail-safe manoeuvre is executed.",
        "R_G3": f"R_G3 speed limit: do not exceed {_f(min(lane_cap, c.fov_speed_cap, c.type_speed_cap, c.braking_speed_cap))} m/s.",
    }
    return [texts[r] for r in rules]


def _relation(ctx: LaneContext, scenario: Scenario, st: State) -> str:
    try:
        lane = current_lane(scenario.network, st.position)
    except OffRoadError:
        return "off-road"
    if lane.id == ctx.current:
        return "same lane"
    if lane.id == ctx.left:
        return "left-adjacent lane"
    if lane.id == ctx.right:
        return "right-adjacent lane"
    return f"lane {lane.id}"


def obstacle_summary(scenario: Scenario, ctx: Optional[LaneContext] = None):
    """Per-obstacle relation, signed bumper gap (positive ahead) and speeds, nearest first."""
    ctx = ctx or lane_context(scenario.network, scenario.ego.position)
    lane = scenario.network.lane(ctx.current)
    ego = scenario.ego
    es = scenario.ego_shape
    s_e, _ = center_sd(ego, es, lane)
    rows = []
    for o in scenario.obstacles:
        st = o.current_state
        s_o, d_o = center_sd(st, o.shape, lane)
        if s_o >= s_e:
            gap = (s_o - o.shape.length / 2.0) - (s_e + es.length / 2.0)
            closing = ego.v - st.v
        else:
            gap = -((s_e - es.length / 2.0) - (s_o + o.shape.length / 2.0))
            closing = st.v - ego.v
        ttc = abs(gap) / closing if closing > 0 else math.inf
        same_dir = math.cos(st.theta - ego.theta) > 0.0
        rows.append((o, st, _relation(ctx, scenario, st), same_dir, gap, ttc))
    rows.sort(key=lambda r: (abs(r[4]), r[0].id))
    return rows


def describe(
    scenario: Scenario,
    kappa: int = 3,
    command: Optional[str] = None,
    country: Optional[str] = None,
    criticality: bool = False,
    previous_actions: Sequence[Chosen] = (),
    rules: Optional[Sequence[str]] = None,
) -> PromptBundle:
    """Four text blocks describing the feasible actions, the ego, the rules and the obstacles."""
    feas = feasible_actions(scenario)
    ctx = lane_context(scenario.network, scenario.ego.position)
    rules = scenario.rules_enabled if rules is None else rules
    history = list(previous_actions)[-HISTORY:]
    lon = ", ".join(m.value for m in Lon if m in feas.lon_set)
    lat = ", ".join(m.value for m in Lat if m in feas.lat_set)
    system = "\n".join(
        [
            "You are the decision module of an automated vehicle.",
            f"Rank up to {kappa} action pairs, best first, as JSON: "
            '{"actions": [{"longitudinal": ..., "lateral": ...}]}.',
            f"Feasible longitudinal actions: {lon}.",
            f"Feasible lateral actions: {lat}.",
            "Previous actions: " + ("; ".join(str(a) for a in history) if history else "none") + ".",
        ]
    )
    ego = scenario.ego
    road = "highway" if scenario.is_highway else str(scenario.context.get("road_type", "rural road"))
    ego_block = "\n".join(
        [
            f"Road: {road} in {country or scenario.country}, weather clear.",
            f"Current lane: {ctx.current}; left-adjacent lane: {ctx.left if ctx.left is not None else 'none'}; "
            f"right-adjacent lane: {ctx.right if ctx.right is not None else 'none'}.",
            f"Ego: v={_f(ego.v)} m/s, theta={_f(ego.theta)} rad, delta={_f(ego.delta)} rad, a={_f(ego.a)} m/s^2.",
        ]
    )
    texts = rule_texts(scenario, rules)
    rules_block = "Traffic rules:\n" + ("\n".join(texts) if texts else "none enabled")
    rows = obstacle_summary(scenario, ctx)
    if not rows:
        obs_block = "Obstacles: none relevant."
    else:
        lines = ["Obstacles:"]
        for o, st, rel, same_dir, gap, ttc in rows:
            line = (
                f"{o.kind} {o.id}: {rel}, {'same' if same_dir else 'opposite'} direction, "
                f"ds={_f(gap)} m, v={_f(st.v)} m/s, theta={_f(st.theta)} rad, delta={_f(st.delta)} rad, "
                f"a={_f(st.a)} m/s^2"
            )
            if criticality:
                line += f", ttc={'∞' if math.isinf(ttc) else _f(ttc) + ' s'}"
            lines.append(line + ".")
        obs_block = "\n".join(lines)
    return PromptBundle(system, ego_block, rules_block, obs_block, kappa, command, tuple(history))


# ---------------------------------------------------------------- response parsing


@dataclass(frozen=True)
class RankedActions:
    pairs: Tuple[ActionPair, ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _name(value, what: str) -> str:
    if not isinstance(value, str):
        raise SchemaViolation("shape", f"{what} must be a string, got {value!r}")
    return value


def parse_response(text: str, feasible: FeasibleActions, kappa: int) -> RankedActions:
    """Validate a ranked JSON list of ``{longitudinal, lateral}`` objects.

    A bare array and an object wrapping the array under ``"actions"`` are both accepted.
    """
    try:
        data = json.loads(text)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation("json", f"not valid JSON ({exc})") from None
    if isinstance(data, dict) and "actions" in data:
        data = data["actions"]
    if not isinstance(data, list) or not data:
        raise SchemaViolation("shape", "expected a non-empty JSON array of action pairs")
    if len(data) > kappa:
        raise SchemaViolation("too_long", f"{len(data)} pairs exceed kappa={kappa}")
    pairs: List[ActionPair] = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or set(item) != {"longitudinal", "lateral"}:
            raise SchemaViolation("shape", f"item {i} must have exactly the keys longitudinal and lateral")
        try:
            pair = ActionPair.parse(f"{_name(item['longitudinal'], 'longitudinal')},{_name(item['lateral'], 'lateral')}")
        except ActionError as exc:
            raise SchemaViolation("unknown_action", f"item {i}: {exc}") from None
        if pair not in feasible:
            raise SchemaViolation("infeasible", f"item {i}: {pair} is not feasible here")
        if pair in pairs:
            raise SchemaViolation("duplicate", f"item {i}: {pair} repeated")
        pairs.append(pair)
    return RankedActions(tuple(pairs))


def format_response(pairs: Sequence[ActionPair]) -> str:
    return json.dumps({"actions": [p.to_json() for p in pairs]})


# ---------------------------------------------------------------- decision makers


class DecisionMaker:
    """Synchronous request/response interface; ``query`` returns the raw text answer."""

    name = "maker"

    def query(self, bundle: PromptBundle, scenario: Scenario) -> str:
        raise NotImplementedError


def response_schema(kappa: int) -> dict:
    return {
        "type": "object",
        "properties": {
            "actions": {
                "type": "array",
                "maxItems": kappa,
                "items": {
                    "type": "object",
                    "properties": {
                        "longitudinal": {"type": "string", "enum": [m.value for m in Lon]},
                        "lateral": {"type": "string", "enum": [m.value for m in Lat]},
                    },
                    "required": ["longitudinal", "lateral"],
                    "additionalProperties": False,
                },
            }
        },
        "required": ["actions"],
        "additionalProperties": False,
    }


class RemoteMaker(DecisionMaker):
    """Chat-completions endpoint with a JSON-schema constrained answer.

    Every exchange is appended to ``replay_path`` as one JSON line. With ``replay=True``
    the answers are read back from that file in order instead of calling the endpoint.
    """

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = API_KEY_ENV,
        replay_path: Optional[str] = None,
        replay: bool = False,
        temperature: float = 0.0,
        http_timeout: float = DEFAULT_TIMEOUT,
        client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.replay_path = replay_path
        self.temperature = temperature
        self._client = client
        self._http_timeout = http_timeout
        self._lock = threading.Lock()
        self._replayed: Optional[List[str]] = None
        if replay:
            if not replay_path or not Path(replay_path).exists():
                raise ReachGuardError(f"replay file {replay_path!r} not found")
            with open(replay_path, encoding="utf-8") as fh:
                self._replayed = [json.loads(line)["response"] for line in fh if line.strip()]

    def request_body(self, bundle: PromptBundle) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user_text()},
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": "ranked_actions", "strict": True, "schema": response_schema(bundle.kappa)},
            },
        }

    def query(self, bundle: PromptBundle, scenario: Scenario) -> str:
        with self._lock:
            if self._replayed is not None:
                if not self._replayed:
                    raise ReachGuardError("replay file exhausted")
                return self._replayed.pop(0)
            body = self.request_body(bundle)
            key = os.environ.get(self.api_key_env)
            headers = {"Authorization": f"Bearer {key}"} if key else {}
            client = self._client or httpx.Client(timeout=self._http_timeout)
            try:
                resp = client.post(f"{self.endpoint}/chat/completions", json=body, headers=headers)
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
            finally:
                if self._client is None:
                    client.close()
            if self.replay_path:
                with open(self.replay_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"request": body, "response": text}) + "\n")
            return text


class ScriptedMaker(DecisionMaker):
    """Replays fixed answers in order; the last answer repeats once the script is exhausted."""

    name = "scripted"

    def __init__(self, responses: Sequence[Union[str, Sequence]]):
        if not responses:
            raise ValueError("script needs at least one response")
        self.responses = [r if isinstance(r, str) else _pairs_text(r) for r in responses]
        self.calls = 0

    @classmethod
    def from_file(cls, path: str) -> "ScriptedMaker":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if isinstance(data, dict):
            data = data.get("responses", [])
        return cls(data)

    def query(self, bundle: PromptBundle, scenario: Scenario) -> str:
        text = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        return text


def _pairs_text(items) -> str:
    out = []
    for it in items:
        if isinstance(it, ActionPair):
            out.append(it.to_json())
        elif isinstance(it, str):
            out.append(ActionPair.parse(it).to_json())
        else:
            out.append(dict(it))
    return json.dumps({"actions": out})


class HeuristicMaker(DecisionMaker):
    """Offline stand-in for a language model.

    Prefers keeping the lane and speed, accelerates on a free road, and when the
    leader gets close proposes a lane change towards the freer side or braking.
    An unfinished lane change is continued. ``seed`` jitters the gap thresholds.
    """

    name = "mock"

    def __init__(self, seed: int = 0, desired_speed: float = 27.0):
        rng = random.Random(seed)
        self.headway = 1.6 * rng.uniform(0.9, 1.1)
        self.desired_speed = desired_speed
        self.free_gap = 30.0 * rng.uniform(0.9, 1.1)

    def _gaps(self, scenario: Scenario, lane_id: Optional[int]):
        if lane_id is None:
            return None
        lane = scenario.network.lane(lane_id)
        ego = scenario.ego
        s_e, _ = center_sd(ego, scenario.ego_shape, lane)
        ahead, behind = math.inf, math.inf
        v_ahead = None
        for o in scenario.obstacles:
            st = o.current_state
            try:
                if current_lane(scenario.network, st.position).id != lane_id:
                    continue
            except OffRoadError:
                continue
            s_o, _ = center_sd(st, o.shape, lane)
            half = (o.shape.length + scenario.ego_shape.length) / 2.0
            if s_o >= s_e:
                if s_o - s_e - half < ahead:
                    ahead, v_ahead = s_o - s_e - half, st.v
            else:
                behind = min(behind, s_e - s_o - half)
        return ahead, behind, v_ahead

    def rank(self, bundle: PromptBundle, scenario: Scenario) -> List[ActionPair]:
        feas = feasible_actions(scenario)
        ctx = lane_context(scenario.network, scenario.ego.position)
        v = scenario.ego.v
        ahead, _, v_lead = self._gaps(scenario, ctx.current)
        F = Lat.FOLLOW_LANE
        out: List[ActionPair] = []
        last = next((a for a in reversed(bundle.previous_actions) if isinstance(a, ActionPair)), None)
        lane = scenario.network.lane(ctx.current)
        _, d = lane.frame.project(scenario.ego.position, band=math.inf)
        if last is not None and last.lat is not F and last.lat in feas.lat_set:
            # still on the origin side of the lane boundary: finish the change
            if (d >= 0.0) if last.lat is Lat.LEFT_LANE else (d <= 0.0):
                out.append(ActionPair(Lon.KEEP, last.lat))
        want = self.headway * v + self.free_gap * 0.5
        if ahead > want + self.free_gap:
            first = Lon.ACCELERATE if v < self.desired_speed else Lon.KEEP
            out += [ActionPair(first, F), ActionPair(Lon.KEEP, F), ActionPair(Lon.DECELERATE, F)]
        elif ahead > want:
            out += [ActionPair(Lon.KEEP, F), ActionPair(Lon.DECELERATE, F), ActionPair(Lon.ACCELERATE, F)]
        else:
            best, best_gap = None, ahead
            for lat, lane_id in ((Lat.LEFT_LANE, ctx.left), (Lat.RIGHT_LANE, ctx.right)):
                g = self._gaps(scenario, lane_id)
                if g is None or lat not in feas.lat_set:
                    continue
                a2, b2, _ = g
                if b2 > 15.0 + 0.5 * v and a2 > best_gap + 10.0:
                    best, best_gap = lat, a2
            if best is not None:
                out.append(ActionPair(Lon.KEEP, best))
            slower = v_lead is not None and v_lead < v
            out += [ActionPair(Lon.DECELERATE if slower else Lon.KEEP, F), ActionPair(Lon.DECELERATE, F)]
        ranked: List[ActionPair] = []
        for p in out:
            if p in feas and p not in ranked:
                ranked.append(p)
        return ranked[: bundle.kappa]

    def query(self, bundle: PromptBundle, scenario: Scenario) -> str:
        return format_response(self.rank(bundle, scenario))


class FunctionMaker(DecisionMaker):
    """Adapter for a plain callable ``(bundle, scenario) -> str``."""

    name = "function"

    def __init__(self, fn: Callable[[PromptBundle, Scenario], str]):
        self.fn = fn

    def query(self, bundle: PromptBundle, scenario: Scenario) -> str:
        return self.fn(bundle, scenario)


# ---------------------------------------------------------------- the verification loop


@dataclass
class Decision:
    chosen: Chosen
    rank_used: Optional[int]
    outcomes: List[VerificationOutcome] = field(default_factory=list)
    ranked: Tuple[ActionPair, ...] = ()
    reason: str = "verified"
    fail_safe: Optional[FailSafePlan] = None
    fail_safe_invariably_safe: Optional[bool] = None
    seconds: float = 0.0

    @property
    def is_fail_safe(self) -> bool:
        return self.chosen is FAIL_SAFE

    def to_dict(self) -> dict:
        out = {
            "chosen": str(self.chosen) if self.is_fail_safe else self.chosen.to_json(),
            "rank_used": self.rank_used,
            "reason": self.reason,
            "ranked": [p.to_json() for p in self.ranked],
            "outcomes": [o.to_dict() for o in self.outcomes],
            "seconds": round(self.seconds, 6),
        }
        if self.fail_safe is not None:
            out["fail_safe"] = dict(self.fail_safe.to_dict(), invariably_safe=self.fail_safe_invariably_safe)
        return out


def call_with_timeout(fn: Callable[[], str], timeout: Optional[float]) -> str:
    if timeout is None:
        return fn()
    box: dict = {}

    def run():
        try:
            box["value"] = fn()
        except BaseException as exc:  # re-raised in the caller
            box["error"] = exc

    th = threading.Thread(target=run, daemon=True)
    th.start()
    th.join(timeout)
    if th.is_alive():
        raise MakerTimeout(f"decision maker did not answer within {timeout} s")
    if "error" in box:
        raise box["error"]
    return box["value"]


def decide(
    scenario: Scenario,
    maker: DecisionMaker,
    kappa: int = 3,
    rules: Optional[Sequence[str]] = None,
    prediction: str = SET_BASED,
    timeout: Optional[float] = DEFAULT_TIMEOUT,
    previous_actions: Sequence[Chosen] = (),
    command: Optional[str] = None,
    criticality: bool = False,
    with_plan: bool = True,
) -> Decision:
    """Query the maker and return its best-ranked verified pair, else the fail-safe marker."""
    t0 = time.perf_counter()
    rules = tuple(scenario.rules_enabled if rules is None else rules)

    def fallback(reason: str, outcomes=(), ranked=()) -> Decision:
        plan = safe = None
        if with_plan:
            try:
                lane = scenario.current_lane()
                plan = fail_safe_plan(scenario.ego, lane, scenario.ego_params, scenario.dt, scenario.ego_shape)
                if prediction == SET_BASED:
                    safe = is_invariably_safe(plan, predict(scenario, SET_BASED), scenario.horizon)
            except ReachGuardError as exc:
                log.debug("fail-safe plan unavailable: %s", exc)
        return Decision(FAIL_SAFE, None, list(outcomes), tuple(ranked), reason, plan, safe, time.perf_counter() - t0)

    try:
        feas = feasible_actions(scenario)
        bundle = describe(scenario, kappa, command, criticality=criticality,
                          previous_actions=previous_actions, rules=rules)
    except ReachGuardError as exc:
        return fallback(f"describe: {exc}")
    try:
        text = call_with_timeout(lambda: maker.query(bundle, scenario), timeout)
    except MakerTimeout:
        return fallback("timeout")
    except Exception as exc:  # any maker failure resolves to the fail-safe
        log.warning("decision maker failed: %s", exc)
        return fallback(f"maker error: {exc}")
    try:
        ranked = parse_response(text, feas, kappa)
    except SchemaViolation as exc:
        return fallback(f"schema: {exc.defect}")
    try:
        occs = predict(scenario, prediction)
        ctx = ReachContext(scenario, occs)
        formulas = rule_formulas(scenario.rule_config, rules, [o.id for o in scenario.obstacles])
    except ReachGuardError as exc:
        return fallback(f"verification setup: {exc}", ranked=ranked.pairs)
    outcomes: List[VerificationOutcome] = []
    for rank, pair in enumerate(ranked.pairs, start=1):
        try:
            out = verify(scenario, pair, formulas, context=ctx)
        except ReachGuardError as exc:
            return fallback(f"verification: {exc}", outcomes, ranked.pairs)
        outcomes.append(out)
        if out.verified:
            return Decision(pair, rank, outcomes, ranked.pairs, "verified", seconds=time.perf_counter() - t0)
    return fallback("no verified candidate", outcomes, ranked.pairs)


# ---------------------------------------------------------------- ranking metrics


def safe_at_kappa(outcomes: Sequence[Sequence[VerificationOutcome]], kappa: int) -> float:
    """Share of scenarios with at least one verified pair among the first ``kappa`` candidates."""
    if not outcomes:
        raise ValueError("no scenarios")
    return sum(any(o.verified for o in per[:kappa]) for per in outcomes) / len(outcomes)


def top_kappa(rankings: Sequence[Sequence[ActionPair]], labels: Sequence[ActionPair], kappa: int) -> float:
    """Share of scenarios whose reference label is among the first ``kappa`` ranked pairs."""
    if len(rankings) != len(labels) or not labels:
        raise ValueError("rankings and labels must be non-empty and of equal length")
    return sum(lab in list(r)[:kappa] for r, lab in zip(rankings, labels)) / len(labels)
