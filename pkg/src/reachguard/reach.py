"""Specification-compliant reachable sets over box base sets.

The ego is modelled by two decoupled double integrators in the curvilinear frame of
its current lane: ``(s, vs)`` with ``vs`` clamped to ``[0, v_max]`` and ``(d, vd)``.
Base sets are axis-aligned boxes. Each step the boxes are propagated, clipped to the
drivable area, cut against the forbidden (occupied) region, labelled with the
formula's atoms (splitting where a label is not uniform), advanced through the
automaton, and merged when a hull adds neither forbidden nor differently-labelled
states.

Trace convention: the automaton reads positions ``k = 1 .. h``; position ``k`` is
labelled by the state at step ``k`` and by the longitudinal input applied during the
preceding interval. The current state (``k = 0``) is not part of the trace.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .actions import ActionPair, LaneContext, action_to_ltlf, lane_context
from .errors import PredicateError, ReachabilityError
from .ltlf import And, Atom, Const, Dfa, Formula, Implies, Not, Or, atoms, conjoin, to_dfa
from .params import EgoParams
from .prediction import OccupancySequence
from .rules import (
    ACC_ABOVE,
    ACC_BELOW,
    ACC_KEEP,
    BRAKES_ABRUPTLY,
    BRAKING_JUSTIFIED,
    SPEED_LIMIT_ATOMS,
    STANDSTILL,
    max_speed_for_gap,
    parse_atom,
    safe_distance,
)
from .scenario import Lane, Scenario, occupancy_of

log = logging.getLogger(__name__)

NODE_CAP = 2048
INF = math.inf


class Label(Enum):
    TRUE = "TRUE"
    FALSE = "FALSE"
    PARTIAL = "PARTIAL"


def _lab(flag: bool) -> Label:
    return Label.TRUE if flag else Label.FALSE


@dataclass(eq=False)
class BaseSet:
    """Box ``[s] x [vs] x [d] x [vd]`` at one step, produced by inputs in ``[a_lo, a_hi]``."""

    step: int
    s_lo: float
    s_hi: float
    vs_lo: float
    vs_hi: float
    d_lo: float
    d_hi: float
    vd_lo: float
    vd_hi: float
    a_lo: float = 0.0
    a_hi: float = 0.0
    parents: Tuple[int, ...] = ()
    labels: Dict[str, Label] = field(default_factory=dict)
    dfa_states: FrozenSet[int] = frozenset([0])
    id: int = -1
    declared: Dict[str, Label] = field(default_factory=dict)

    @property
    def s_box(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        return (self.s_lo, self.s_hi), (self.vs_lo, self.vs_hi)

    @property
    def d_box(self) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        return (self.d_lo, self.d_hi), (self.vd_lo, self.vd_hi)

    @property
    def volume(self) -> float:
        return (
            (self.s_hi - self.s_lo + 1e-6)
            * (self.vs_hi - self.vs_lo + 1e-6)
            * (self.d_hi - self.d_lo + 1e-6)
            * (self.vd_hi - self.vd_lo + 1e-6)
        )

    def copy(self, **kw) -> "BaseSet":
        vals = {f: getattr(self, f) for f in self.__dataclass_fields__}
        vals["labels"] = {}
        vals["declared"] = dict(self.declared)
        vals["id"] = -1
        vals.update(kw)
        return BaseSet(**vals)

    def contains(self, s: float, vs: float, d: float, vd: float, tol: float = 1e-9) -> bool:
        return (
            self.s_lo - tol <= s <= self.s_hi + tol
            and self.vs_lo - tol <= vs <= self.vs_hi + tol
            and self.d_lo - tol <= d <= self.d_hi + tol
            and self.vd_lo - tol <= vd <= self.vd_hi + tol
        )

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "s": [self.s_lo, self.s_hi],
            "vs": [self.vs_lo, self.vs_hi],
            "d": [self.d_lo, self.d_hi],
            "vd": [self.vd_lo, self.vd_hi],
            "dfa_states": sorted(self.dfa_states),
        }


# ---------------------------------------------------------------- dynamics


def advance_lon(s: float, v: float, a: float, dt: float, v_max: float) -> Tuple[float, float]:
    """Exact one-step update under constant input with ``0 <= v <= v_max`` enforced.

    The map is non-decreasing in ``s``, ``v`` and ``a``, so boxes propagate through corners.
    """
    if a < 0.0 and v + a * dt < 0.0:
        t = v / -a
        return s + v * t + 0.5 * a * t * t, 0.0
    if a > 0.0 and v + a * dt > v_max:
        if v >= v_max:
            return s + v * dt, v
        t = (v_max - v) / a
        return s + v * t + 0.5 * a * t * t + v_max * (dt - t), v_max
    return s + v * dt + 0.5 * a * dt * dt, v + a * dt


def advance_lat(d: float, vd: float, a: float, dt: float) -> Tuple[float, float]:
    return d + vd * dt + 0.5 * a * dt * dt, vd + a * dt


def propagate(
    b: BaseSet,
    params: EgoParams,
    dt: float,
    a_lon: Optional[Tuple[float, float]] = None,
) -> BaseSet:
    """One-step successor box of ``b`` (before pruning) for longitudinal inputs ``a_lon``."""
    a_lo, a_hi = a_lon if a_lon is not None else params.a_lon_range
    l_lo, l_hi = params.a_lat_range
    s_lo, vs_lo = advance_lon(b.s_lo, b.vs_lo, a_lo, dt, params.v_max)
    s_hi, vs_hi = advance_lon(b.s_hi, b.vs_hi, a_hi, dt, params.v_max)
    d_lo, vd_lo = advance_lat(b.d_lo, b.vd_lo, l_lo, dt)
    d_hi, vd_hi = advance_lat(b.d_hi, b.vd_hi, l_hi, dt)
    return BaseSet(b.step + 1, s_lo, s_hi, vs_lo, vs_hi, d_lo, d_hi, vd_lo, vd_hi, a_lo, a_hi, (b.id,),
                   dfa_states=b.dfa_states)


# ---------------------------------------------------------------- context


@dataclass(frozen=True)
class ObstacleFrameState:
    """Nominal obstacle at one step, expressed in the ego reference frame."""

    center_s: float
    center_d: float
    half_length: float
    half_width: float
    v: float
    same_direction: bool


class ReachContext:
    """Scenario data resolved once in the ego reference frame; shared by all candidate verifications."""

    def __init__(
        self,
        scenario: Scenario,
        occupancies: Sequence[OccupancySequence],
        h: Optional[int] = None,
        ignore_followers: bool = True,
    ):
        self.scenario = scenario
        self.params = scenario.ego_params
        self.config = scenario.rule_config
        self.dt = scenario.dt
        self.h = scenario.horizon if h is None else h
        self.lane_ctx: LaneContext = lane_context(scenario.network, scenario.ego.position)
        self.lane: Lane = scenario.network.lane(self.lane_ctx.current)
        self.frame = self.lane.frame
        shape = scenario.ego_shape
        self.ref_offset = shape.ref_offset
        self.front = shape.front
        self.rear = shape.rear
        self.half_width = shape.width / 2.0
        ego = scenario.ego
        self.s0, self.d0 = self.frame.project(ego.position, band=INF)
        rel = ego.theta - self.frame.heading_at(self.s0)
        self.vs0 = max(0.0, ego.v * math.cos(rel))
        self.vd0 = ego.v * math.sin(rel)
        self.speed_cap_lane = (
            self.lane.speed_limit if self.lane.speed_limit is not None else self.config.speed_limit_default
        )
        for occ in occupancies:
            if occ.horizon < self.h:
                raise ReachabilityError(
                    f"occupancy of obstacle {occ.obstacle_id} covers {occ.horizon} steps, horizon is {self.h}"
                )
        self.occupancies = list(occupancies)
        self.obstacles: Dict[int, List[ObstacleFrameState]] = {
            occ.obstacle_id: self._nominal(occ) for occ in self.occupancies
        }
        # vehicles directly behind in the ego's lane are responsible for keeping their distance
        self.followers = set()
        if ignore_followers:
            center = self.s0 + self.ref_offset
            for oid, states in self.obstacles.items():
                o = states[0]
                if o.same_direction and o.center_s < center and abs(o.center_d - self.d0) < o.half_width + self.half_width:
                    self.followers.add(oid)
        self.forbidden: List[List[Tuple[float, float, float, float]]] = [
            self._forbidden_at(k) for k in range(self.h + 1)
        ]
        self._extents: Dict[int, Tuple[float, float]] = {}
        occ_now = occupancy_of(ego, shape)
        self.occupied_lanes = [ln.id for ln in scenario.network.lanes if ln.polygon.intersects(occ_now)]

    # -- geometry in the reference frame

    def lane_extent(self, lane_id: int) -> Tuple[float, float]:
        ext = self._extents.get(lane_id)
        if ext is None:
            try:
                lane = self.scenario.network.lane(lane_id)
            except KeyError:
                raise PredicateError(f"in_lane: unknown lane {lane_id}") from None
            ext = lane.lateral_extent(self.frame)
            self._extents[lane_id] = ext
        return ext

    def _forbidden_at(self, k: int) -> List[Tuple[float, float, float, float]]:
        polys = [poly for occ in self.occupancies if occ.obstacle_id not in self.followers for poly in occ.at(k)]
        if not polys:
            return []
        coords = [np.asarray(poly.exterior.coords) for poly in polys]
        s, d = self.frame.project_many(np.vstack(coords))
        out = []
        start = 0
        for c in coords:
            ss, dd = s[start : start + len(c)], d[start : start + len(c)]
            start += len(c)
            out.append(
                (
                    float(ss.min()) - self.front,
                    float(ss.max()) + self.rear,
                    float(dd.min()) - self.half_width,
                    float(dd.max()) + self.half_width,
                )
            )
        return out

    def _nominal(self, occ: OccupancySequence) -> List[ObstacleFrameState]:
        shape = occ.shape
        out = []
        centers = []
        for st in occ.states:
            x, y = st.position
            centers.append((x + shape.ref_offset * math.cos(st.theta), y + shape.ref_offset * math.sin(st.theta)))
        s_arr, d_arr = self.frame.project_many(np.asarray(centers))
        for st, s, d in zip(occ.states, s_arr, d_arr):
            heading = self.frame.heading_at(float(s))
            out.append(
                ObstacleFrameState(
                    float(s), float(d), shape.length / 2.0, shape.width / 2.0, st.v, math.cos(st.theta - heading) > 0.0
                )
            )
        return out

    def obstacle_at(self, obs_id: int, k: int) -> ObstacleFrameState:
        try:
            return self.obstacles[obs_id][k]
        except KeyError:
            raise PredicateError(f"missing obstacle {obs_id} in the occupancy predictions") from None

    def drivable(self, formula_atoms: Iterable[str]) -> Tuple[float, float]:
        """Admissible reference-point ``d`` range: current lane, lanes named by in_lane atoms, lanes occupied now."""
        ids = {self.lane.id, *self.occupied_lanes}
        for a in formula_atoms:
            base, arg = parse_atom(a)
            if base == "in_lane":
                ids.add(arg)
        lo = min(self.lane_extent(i)[0] for i in ids) + self.half_width
        hi = max(self.lane_extent(i)[1] for i in ids) - self.half_width
        return min(lo, self.d0), max(hi, self.d0)

    def acceleration_thresholds(self, formula_atoms: Iterable[str]) -> List[float]:
        th = set()
        for a in formula_atoms:
            if a in (ACC_KEEP, ACC_ABOVE, ACC_BELOW):
                th.update((-self.params.a_lim, self.params.a_lim))
            elif a == BRAKES_ABRUPTLY:
                th.add(-self.config.a_abrupt)
        lo, hi = self.params.a_lon_range
        return sorted(t for t in th if lo < t < hi)


# ---------------------------------------------------------------- labels


def _acc_band_label(b: BaseSet, atom: str, ctx: ReachContext) -> Label:
    lim = ctx.params.a_lim
    if atom == ACC_KEEP:
        lo, hi = -lim, lim
        if lo <= b.a_lo and b.a_hi <= hi:
            return Label.TRUE
        if b.a_hi <= lo and b.a_lo < lo or b.a_lo >= hi and b.a_hi > hi:
            return Label.FALSE
        return Label.PARTIAL
    if atom == ACC_ABOVE:
        if b.a_lo >= lim and b.a_hi > lim:
            return Label.TRUE
        if b.a_hi <= lim:
            return Label.FALSE
        return Label.PARTIAL
    if atom == ACC_BELOW:
        if b.a_hi <= -lim and b.a_lo < -lim:
            return Label.TRUE
        if b.a_lo >= -lim:
            return Label.FALSE
        return Label.PARTIAL
    thr = -ctx.config.a_abrupt
    if b.a_hi <= thr and b.a_lo < thr:
        return Label.TRUE
    if b.a_lo >= thr:
        return Label.FALSE
    return Label.PARTIAL


_AXES = {"s": ("s_lo", "s_hi"), "vs": ("vs_lo", "vs_hi"), "d": ("d_lo", "d_hi")}


def _region(atom: str, b: BaseSet, ctx: ReachContext):
    """Axis-aligned truth region of a box-decidable atom, or a constant."""
    base, arg = parse_atom(atom)
    p = ctx.params
    if base == STANDSTILL:
        return {"vs": (-p.v_err, p.v_err)}
    if base in SPEED_LIMIT_ATOMS:
        cap = {
            "keeps_lane_speed_limit": ctx.speed_cap_lane,
            "keeps_fov_speed_limit": ctx.config.fov_speed_cap,
            "keeps_type_speed_limit": ctx.config.type_speed_cap,
            "keeps_braking_speed_limit": ctx.config.braking_speed_cap,
        }[base]
        return {"vs": (-INF, cap)}
    if base == "in_lane":
        lo, hi = ctx.lane_extent(arg)
        return {"d": (lo - ctx.half_width, hi + ctx.half_width)}
    if base == "precedes":
        o = ctx.obstacle_at(arg, b.step)
        if not o.same_direction:
            return False
        reach = o.half_width + ctx.half_width
        return {"s": (-INF, o.center_s - ctx.ref_offset), "d": (o.center_d - reach, o.center_d + reach)}
    if base == BRAKING_JUSTIFIED:
        # candidate actions are verified as regular driving, never as a fail-safe manoeuvre
        return False
    raise PredicateError(f"atom {atom!r} is not box-decidable")


def _region_label(b: BaseSet, region) -> Label:
    if region is True or region is False:
        return _lab(region)
    inside = True
    for axis, (rlo, rhi) in region.items():
        lo_name, hi_name = _AXES[axis]
        lo, hi = getattr(b, lo_name), getattr(b, hi_name)
        if rlo <= lo and hi <= rhi:
            continue
        inside = False
        if hi <= rlo or lo >= rhi:
            return Label.FALSE
    return Label.TRUE if inside else Label.PARTIAL


def _ksd_bound(ctx: ReachContext, o: ObstacleFrameState):
    """``S(v)``: largest reference ``s`` (exclusive) keeping a safe gap at speed ``v``, and its inverse."""
    rear = o.center_s - o.half_length
    p, a_obs = ctx.params, ctx.config.a_obs_min

    def s_star(v: float) -> float:
        return rear - ctx.front - safe_distance(max(v, 0.0), o.v, p, a_obs)

    def v_star(s: float) -> float:
        return max_speed_for_gap(rear - ctx.front - s, o.v, p, a_obs)

    return s_star, v_star


def label_base_set(b: BaseSet, atom: str, ctx: ReachContext) -> Label:
    """TRUE if the atom holds on the whole box, FALSE if nowhere, PARTIAL otherwise."""
    if atom in b.declared:
        return b.declared[atom]
    if atom in (ACC_KEEP, ACC_ABOVE, ACC_BELOW, BRAKES_ABRUPTLY):
        return _acc_band_label(b, atom, ctx)
    base, arg = parse_atom(atom)
    if base == "keeps_safe_distance":
        o = ctx.obstacle_at(arg, b.step)
        s_star, _ = _ksd_bound(ctx, o)
        if b.s_hi < s_star(b.vs_hi):
            return Label.TRUE
        if b.s_lo >= s_star(b.vs_lo):
            return Label.FALSE
        return Label.PARTIAL
    return _region_label(b, _region(atom, b, ctx))


def split_base_set(b: BaseSet, atom: str, ctx: ReachContext) -> List[BaseSet]:
    """Refine a PARTIAL box into at most two boxes, each with a uniform label for ``atom``.

    Axis-aligned atoms are cut at the region boundary. The safe-distance atom has a
    boundary ``s = S(v)`` that is monotone in ``v``; its children are the hulls of the
    TRUE and FALSE parts, which overlap but together cover the box.
    """
    if atom in (ACC_KEEP, ACC_ABOVE, ACC_BELOW, BRAKES_ABRUPTLY):
        raise ReachabilityError(f"input band [{b.a_lo}, {b.a_hi}] straddles the threshold of {atom}")
    base, arg = parse_atom(atom)
    if base == "keeps_safe_distance":
        o = ctx.obstacle_at(arg, b.step)
        s_star, v_star = _ksd_bound(ctx, o)
        out = []
        t_s_hi = min(b.s_hi, s_star(b.vs_lo))
        t_v_hi = min(b.vs_hi, v_star(b.s_lo))
        if t_s_hi >= b.s_lo and t_v_hi >= b.vs_lo:
            c = b.copy(s_hi=t_s_hi, vs_hi=t_v_hi)
            c.declared[atom] = Label.TRUE
            out.append(c)
        f_s_lo = max(b.s_lo, s_star(b.vs_hi))
        f_v_lo = max(b.vs_lo, v_star(b.s_hi))
        if f_s_lo <= b.s_hi and f_v_lo <= b.vs_hi:
            c = b.copy(s_lo=f_s_lo, vs_lo=f_v_lo)
            c.declared[atom] = Label.FALSE
            out.append(c)
        return out
    region = _region(atom, b, ctx)
    if isinstance(region, bool):
        return [b.copy()]
    for axis, (rlo, rhi) in region.items():
        lo_name, hi_name = _AXES[axis]
        lo, hi = getattr(b, lo_name), getattr(b, hi_name)
        for cut in (rlo, rhi):
            if lo < cut < hi:
                return [b.copy(**{hi_name: cut}), b.copy(**{lo_name: cut})]
    return [b.copy()]


# ---------------------------------------------------------------- three-valued evaluation


def kleene(f: Formula, labels: Dict[str, Label]) -> Optional[bool]:
    """Three-valued value of a propositional formula; ``None`` when undetermined."""
    if isinstance(f, Atom):
        lab = labels[f.name]
        return None if lab is Label.PARTIAL else lab is Label.TRUE
    if isinstance(f, Const):
        return f.value
    if isinstance(f, Not):
        v = kleene(f.arg, labels)
        return None if v is None else not v
    if isinstance(f, And):
        a, b = kleene(f.left, labels), kleene(f.right, labels)
        if a is False or b is False:
            return False
        return None if a is None or b is None else True
    if isinstance(f, Or):
        a, b = kleene(f.left, labels), kleene(f.right, labels)
        if a is True or b is True:
            return True
        return None if a is None or b is None else False
    if isinstance(f, Implies):
        return kleene(Or(Not(f.left), f.right), labels)
    raise PredicateError(f"temporal operator inside a state formula: {f}")


# ---------------------------------------------------------------- forbidden states and the drivable area


def _overlaps(b: BaseSet, r: Tuple[float, float, float, float]) -> bool:
    fs_lo, fs_hi, fd_lo, fd_hi = r
    return b.s_lo < fs_hi and b.s_hi > fs_lo and b.d_lo < fd_hi and b.d_hi > fd_lo


def _hull_collides(s_lo, s_hi, d_lo, d_hi, regions) -> bool:
    for fs_lo, fs_hi, fd_lo, fd_hi in regions:
        if s_lo < fs_hi and s_hi > fs_lo and d_lo < fd_hi and d_hi > fd_lo:
            return True
    return False


def subtract_forbidden(b: BaseSet, regions: Sequence[Tuple[float, float, float, float]]) -> List[BaseSet]:
    """Remove open forbidden rectangles from the position part of ``b``.

    Cuts are made laterally first (pieces beside the obstacle), then longitudinally
    (pieces behind or ahead of it).
    """
    pieces = [b]
    for r in regions:
        fs_lo, fs_hi, fd_lo, fd_hi = r
        nxt = []
        for p in pieces:
            if not _overlaps(p, r):
                nxt.append(p)
                continue
            if p.d_lo < fd_lo:
                nxt.append(p.copy(d_hi=fd_lo))
            if fd_hi < p.d_hi:
                nxt.append(p.copy(d_lo=fd_hi))
            mid_lo, mid_hi = max(p.d_lo, fd_lo), min(p.d_hi, fd_hi)
            if p.s_lo < fs_lo:
                nxt.append(p.copy(s_hi=fs_lo, d_lo=mid_lo, d_hi=mid_hi))
            if fs_hi < p.s_hi:
                nxt.append(p.copy(s_lo=fs_hi, d_lo=mid_lo, d_hi=mid_hi))
        pieces = nxt
    return pieces


# ---------------------------------------------------------------- the fixed point over steps


@dataclass(eq=False)
class Corridor:
    boxes: List[List[Tuple[Tuple[float, float], Tuple[float, float]]]]
    centers: List[Tuple[float, float]]
    reference: List[Tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "boxes": [[{"s": list(s), "d": list(d)} for s, d in step] for step in self.boxes],
            "reference": [list(p) for p in self.reference],
        }


@dataclass(eq=False)
class ReachResult:
    nodes: List[List[BaseSet]]
    verified: bool
    first_empty_step: Optional[int]
    forward_counts: List[int]
    lane_id: int
    frame: object = None
    corridor: Optional[Corridor] = None
    capped: bool = False

    def node_counts(self) -> List[int]:
        return [len(n) for n in self.nodes]


@dataclass(eq=False)
class VerificationOutcome:
    pair: Optional[ActionPair]
    verified: bool
    first_empty_step: Optional[int]
    result: ReachResult
    formula: Formula
    seconds: float = 0.0

    def to_dict(self, corridor: bool = False) -> dict:
        out = {
            "pair": None if self.pair is None else self.pair.to_json(),
            "verified": self.verified,
            "first_empty_step": self.first_empty_step,
            "node_counts": self.result.node_counts(),
            "forward_node_counts": self.result.forward_counts,
            "seconds": round(self.seconds, 6),
        }
        if corridor and self.verified:
            out["corridor"] = extract_corridor(self.result).to_dict()
        return out


def _bands(ctx: ReachContext, formula_atoms) -> List[Tuple[float, float]]:
    lo, hi = ctx.params.a_lon_range
    cuts = [lo] + ctx.acceleration_thresholds(formula_atoms) + [hi]
    return list(zip(cuts[:-1], cuts[1:]))


def _resolve(b: BaseSet, ctx: ReachContext, dfa: Dfa, names: Sequence[str]):
    """Split ``b`` until every pattern operand has a definite value; drop parts that violate a G operand."""
    out = []
    stack = [b]
    budget = 10000
    while stack:
        budget -= 1
        if budget < 0:
            raise ReachabilityError("label refinement did not terminate")
        cur = stack.pop()
        labels = {a: label_base_set(cur, a, ctx) for a in names}
        g_vals = [kleene(op, labels) for op in dfa.g_operands]
        if any(v is False for v in g_vals):
            continue
        fg_vals = [kleene(op, labels) for op in dfa.fg_operands]
        open_ops = [op for op, v in zip(dfa.g_operands + dfa.fg_operands, g_vals + fg_vals) if v is None]
        if not open_ops:
            cur.labels = labels
            out.append((cur, tuple(fg_vals)))
            continue
        atom = next(a for op in open_ops for a in sorted(atoms(op)) if labels[a] is Label.PARTIAL)
        stack.extend(split_base_set(cur, atom, ctx))
    return out


def _state_of(fg_vals: Tuple[bool, ...]) -> int:
    q = 0
    for i, v in enumerate(fg_vals):
        if v:
            q |= 1 << i
    return q


def _hull(a: BaseSet, b: BaseSet) -> BaseSet:
    return BaseSet(
        a.step,
        min(a.s_lo, b.s_lo), max(a.s_hi, b.s_hi),
        min(a.vs_lo, b.vs_lo), max(a.vs_hi, b.vs_hi),
        min(a.d_lo, b.d_lo), max(a.d_hi, b.d_hi),
        min(a.vd_lo, b.vd_lo), max(a.vd_hi, b.vd_hi),
        min(a.a_lo, b.a_lo), max(a.a_hi, b.a_hi),
        tuple(sorted(set(a.parents) | set(b.parents))),
        dfa_states=a.dfa_states,
    )


def _try_merge(a: BaseSet, b: BaseSet, ctx: ReachContext, dfa: Dfa, names, regions, fg_vals) -> Optional[BaseSet]:
    h = _hull(a, b)
    if _hull_collides(h.s_lo, h.s_hi, h.d_lo, h.d_hi, regions):
        return None
    labels = {n: label_base_set(h, n, ctx) for n in names}
    if any(kleene(op, labels) is not True for op in dfa.g_operands):
        return None
    if tuple(kleene(op, labels) for op in dfa.fg_operands) != fg_vals:
        return None
    h.labels = labels
    return h


def _merge(nodes, ctx, dfa, names, regions):
    groups: Dict[Tuple[bool, ...], List[BaseSet]] = {}
    for b, fg in nodes:
        groups.setdefault(fg, []).append(b)
    out = []
    for fg in sorted(groups):
        group = sorted(groups[fg], key=lambda n: (n.s_lo, n.d_lo, n.vs_lo, n.vd_lo, n.s_hi, n.d_hi))
        changed = True
        while changed and len(group) > 1:
            changed = False
            merged: List[BaseSet] = []
            for n in group:
                for i, m in enumerate(merged):
                    h = _try_merge(m, n, ctx, dfa, names, regions, fg)
                    if h is not None:
                        merged[i] = h
                        changed = True
                        break
                else:
                    merged.append(n)
            group = merged
        out.extend(group)
    return out


def compute_reachable_sets(
    scenario: Scenario,
    formula: Formula,
    occupancies: Sequence[OccupancySequence] = (),
    h: Optional[int] = None,
    context: Optional[ReachContext] = None,
    node_cap: int = NODE_CAP,
) -> ReachResult:
    ctx = context or ReachContext(scenario, occupancies, h)
    h = ctx.h
    dfa = to_dfa(formula)
    names = sorted(dfa.alphabet)
    d_min, d_max = ctx.drivable(names)
    bands = _bands(ctx, names)
    p = ctx.params

    root = BaseSet(0, ctx.s0, ctx.s0, ctx.vs0, ctx.vs0, ctx.d0, ctx.d0, ctx.vd0, ctx.vd0, 0.0, 0.0, (),
                   dfa_states=frozenset([dfa.initial]), id=0)
    if _hull_collides(root.s_lo, root.s_hi, root.d_lo, root.d_hi, ctx.forbidden[0]):
        raise ReachabilityError("ego initially overlaps a predicted occupancy")
    next_id = 1
    layers: List[List[BaseSet]] = [[root]]
    forward_counts = [1]
    first_empty: Optional[int] = None
    capped = False

    for k in range(1, h + 1):
        regions = ctx.forbidden[k]
        resolved = []
        for node in layers[-1]:
            for band in bands:
                child = propagate(node, p, ctx.dt, band)
                child.d_lo = max(child.d_lo, d_min)
                child.d_hi = min(child.d_hi, d_max)
                if child.d_lo > child.d_hi:
                    continue
                for piece in subtract_forbidden(child, regions):
                    resolved.extend(_resolve(piece, ctx, dfa, names))
        layer = _merge(resolved, ctx, dfa, names, regions)
        for n in layer:
            fg = tuple(kleene(op, n.labels) for op in dfa.fg_operands)
            n.dfa_states = frozenset([_state_of(fg)])
        if len(layer) > node_cap:
            log.warning("step %d: %d base sets exceed the cap of %d; keeping the largest", k, len(layer), node_cap)
            layer = sorted(layer, key=lambda n: -n.volume)[:node_cap]
            capped = True
        for n in layer:
            n.id = next_id
            next_id += 1
        layers.append(layer)
        forward_counts.append(len(layer))
        if not layer:
            first_empty = k
            break

    if first_empty is not None:
        layers += [[] for _ in range(h + 1 - len(layers))]
        return ReachResult(layers, False, first_empty, forward_counts, ctx.lane.id, ctx.frame, capped=capped)

    layers[h] = [n for n in layers[h] if n.dfa_states & dfa.accepting]
    for k in range(h, 0, -1):
        alive = {pid for n in layers[k] for pid in n.parents}
        layers[k - 1] = [n for n in layers[k - 1] if n.id in alive]
    verified = all(layers[k] for k in range(h + 1))
    return ReachResult(layers, verified, None if verified else h, forward_counts, ctx.lane.id, ctx.frame,
                       capped=capped)


def action_formula(pair: ActionPair, ctx: ReachContext, rules: Sequence[Formula] = ()) -> Formula:
    return conjoin([action_to_ltlf(pair, ctx.lane_ctx), *rules])


def verify(
    scenario: Scenario,
    pair: ActionPair,
    rules: Sequence[Formula] = (),
    occupancies: Sequence[OccupancySequence] = (),
    h: Optional[int] = None,
    context: Optional[ReachContext] = None,
) -> VerificationOutcome:
    """Verify one action pair conjoined with the given rule formulas."""
    t0 = time.perf_counter()
    ctx = context or ReachContext(scenario, occupancies, h)
    formula = action_formula(pair, ctx, rules)
    res = compute_reachable_sets(scenario, formula, context=ctx)
    return VerificationOutcome(pair, res.verified, res.first_empty_step, res, formula, time.perf_counter() - t0)


def extract_corridor(result: ReachResult) -> Corridor:
    """Per-step surviving boxes plus a reference path through one surviving lineage."""
    if not result.verified:
        raise ReachabilityError("cannot extract a corridor from an unverified result")
    boxes = [[((n.s_lo, n.s_hi), (n.d_lo, n.d_hi)) for n in layer] for layer in result.nodes]
    by_id = [{n.id: n for n in layer} for layer in result.nodes]
    cur = max(result.nodes[-1], key=lambda n: n.volume)
    chain = [cur]
    for k in range(len(result.nodes) - 1, 0, -1):
        parents = [by_id[k - 1][pid] for pid in cur.parents if pid in by_id[k - 1]]
        cur = max(parents, key=lambda n: n.volume)
        chain.append(cur)
    chain.reverse()
    centers = [(0.5 * (n.s_lo + n.s_hi), 0.5 * (n.d_lo + n.d_hi)) for n in chain]
    reference = [result.frame.point_at(s, d) for s, d in centers] if result.frame is not None else []
    return Corridor(boxes, centers, reference)
