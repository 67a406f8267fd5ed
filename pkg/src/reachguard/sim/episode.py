"""Closed-loop episodes, agents wrapping the decision loop, and JSON-lines episode logs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from ..actions import feasible_actions, lane_context
from ..decision import FAIL_SAFE, HISTORY, Decision, DecisionMaker, decide, describe, parse_response
from ..errors import ScenarioError, SchemaViolation, SimulationError
from ..params import EgoParams, RuleConfig, from_mapping, to_mapping
from ..prediction import SET_BASED
from ..rules import WorldStep
from ..scenario import IdmParams, Obstacle, Scenario, Shape, State, build_network, parse_state, state_to_dict, straight_lanelets
from .env import HIGHWAY_SPEED_LIMIT, HighwayEnv, map_action

DURATION = 30

Agent = Callable[[HighwayEnv, Sequence[Any]], Decision]


class GuardedAgent:
    """Maker ranking filtered by reachability verification, with fail-safe fallback."""

    def __init__(
        self,
        maker: DecisionMaker,
        prediction: str = SET_BASED,
        rules: Sequence[str] = (),
        kappa: int = 3,
        timeout: Optional[float] = None,
        horizon: Optional[int] = None,
    ):
        self.maker = maker
        self.prediction = prediction
        self.rules = tuple(rules)
        self.kappa = kappa
        self.timeout = timeout
        self.horizon = horizon

    def __call__(self, env: HighwayEnv, history: Sequence[Any]) -> Decision:
        sc = env.observe(self.prediction, self.rules, self.horizon)
        return decide(
            sc,
            self.maker,
            self.kappa,
            self.rules,
            self.prediction,
            self.timeout,
            previous_actions=tuple(history[-HISTORY:]),
            with_plan=False,
        )


class UnguardedAgent:
    """Executes the maker's first-ranked pair without verification."""

    def __init__(self, maker: DecisionMaker, kappa: int = 3):
        self.maker = maker
        self.kappa = kappa

    def __call__(self, env: HighwayEnv, history: Sequence[Any]) -> Decision:
        sc = env.observe()
        bundle = describe(sc, self.kappa, previous_actions=tuple(history[-HISTORY:]))
        try:
            ranked = parse_response(self.maker.query(bundle, sc), feasible_actions(sc), self.kappa)
        except SchemaViolation as exc:
            return Decision(FAIL_SAFE, None, reason=f"schema: {exc.defect}")
        return Decision(ranked.pairs[0], 1, ranked=ranked.pairs, reason="unverified")


# ---------------------------------------------------------------- logs


def _step_to_dict(ws: WorldStep) -> dict:
    return {
        "step": ws.step,
        "ego": state_to_dict(ws.ego),
        "obstacles": [[oid, state_to_dict(st)] for oid, st in ws.obstacles],
        "lane_ctx": dict(ws.lane_ctx),
        "fail_safe_active": ws.fail_safe_active,
    }


def _step_from_dict(d: dict) -> WorldStep:
    return WorldStep(
        parse_state(d["ego"], "ego"),
        tuple((int(oid), parse_state(st, f"obstacle {oid}")) for oid, st in d["obstacles"]),
        d.get("lane_ctx", {}),
        bool(d.get("fail_safe_active", False)),
        int(d["step"]),
    )


@dataclass
class EpisodeLog:
    header: Dict[str, Any]
    steps: List[WorldStep] = field(default_factory=list)
    actions: List[str] = field(default_factory=list)
    metas: List[str] = field(default_factory=list)
    reasons: List[str] = field(default_factory=list)
    collision_step: Optional[int] = None
    traveled: float = 0.0

    @property
    def duration(self) -> int:
        return int(self.header.get("duration", DURATION))

    @property
    def collision_free_steps(self) -> int:
        return self.duration if self.collision_step is None else self.collision_step

    @property
    def fail_safe_count(self) -> int:
        return sum(a == str(FAIL_SAFE) for a in self.actions)

    def scenario(self) -> Scenario:
        """Static context (road, shapes, parameters) needed to evaluate rules on the steps."""
        h = self.header
        net = build_network(
            straight_lanelets(h["lane_count"], h["road_length"], h["lane_width"], n_points=2,
                              speed_limit=h.get("speed_limit", HIGHWAY_SPEED_LIMIT))
        )
        ego_shape = Shape(*h["ego_shape"])
        obstacles = tuple(
            Obstacle(int(oid), "car", Shape(*dims), behavior=IdmParams(), state=State((0.0, 0.0), 0.0))
            for oid, dims in sorted(h["obstacle_shapes"].items(), key=lambda kv: int(kv[0]))
        )
        first = self.steps[0].ego if self.steps else State((0.0, 0.0), 0.0)
        return Scenario(
            net, first, ego_shape, from_mapping(EgoParams, h.get("ego_params"), "ego_params"), obstacles,
            dt=h["dt"], horizon=1, rules_enabled=tuple(h.get("rules", ())),
            rule_config=from_mapping(RuleConfig, h.get("rule_config"), "rule_config"), context={"highway": True},
        )

    def to_lines(self) -> List[str]:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        for i, ws in enumerate(self.steps):
            rec = {"type": "step", **_step_to_dict(ws), "action": self.actions[i], "meta": self.metas[i],
                   "reason": self.reasons[i]}
            lines.append(json.dumps(rec, sort_keys=True))
        tail = len(self.steps)
        summary = {
            "type": "summary",
            "collision_step": self.collision_step,
            "traveled": self.traveled,
            "actions": self.actions,
            "metas": self.metas,
            "reasons": self.reasons,
        }
        if tail < len(self.actions):
            summary["final_action"] = self.actions[tail]
        lines.append(json.dumps(summary, sort_keys=True))
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EpisodeLog":
        header, steps, summary = None, [], None
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"episode log line {n}: {exc}") from None
            kind = rec.pop("type", None)
            if kind == "header":
                header = rec
            elif kind == "step":
                steps.append(_step_from_dict(rec))
            elif kind == "summary":
                summary = rec
            else:
                raise ScenarioError(f"episode log line {n}: unknown record type {kind!r}")
        if header is None or summary is None:
            raise ScenarioError("episode log needs a header and a summary record")
        return cls(header, steps, list(summary["actions"]), list(summary["metas"]), list(summary["reasons"]),
                   summary["collision_step"], float(summary["traveled"]))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EpisodeLog":
        return cls.loads(Path(path).read_text())


def run_episode(env: HighwayEnv, agent: Agent, duration: int = DURATION, rules: Sequence[str] = (),
                info: Optional[Dict[str, Any]] = None) -> EpisodeLog:
    """Consult ``agent`` once per policy period and execute its choice until the end or a collision."""
    if env.terminated:
        raise SimulationError("environment is terminated")
    header = {
        "duration": duration,
        "seed": env.seed,
        "lane_count": env.lane_count,
        "density": env.density,
        "lane_width": env.lane_width,
        "road_length": env.road_length,
        "speed_limit": HIGHWAY_SPEED_LIMIT,
        "dt": env.dt,
        "substeps": env.substeps,
        "ego_shape": [env.ego.shape.length, env.ego.shape.width],
        "obstacle_shapes": {str(v.id): [v.shape.length, v.shape.width] for v in env.vehicles},
        "ego_params": to_mapping(env.ego_params),
        "rule_config": to_mapping(RuleConfig()),
        "rules": list(rules),
        **(info or {}),
    }
    log = EpisodeLog(header)
    history: List[Any] = []
    for k in range(duration):
        decision = agent(env, history)
        meta = map_action(decision.chosen)
        history.append(decision.chosen)
        log.actions.append(str(decision.chosen))
        log.metas.append(str(meta))
        log.reasons.append(decision.reason)
        if env.step(meta):
            log.collision_step = env.collision_step
            break
        ctx = lane_context(env.network, (env.ego.x, env.ego.y))
        obstacles = tuple((v.id, v.state()) for v in env.nearby())
        log.steps.append(WorldStep(env.ego.state(), obstacles, ctx.as_dict(), decision.is_fail_safe, k + 1))
    log.traveled = env.traveled
    return log
