"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are collected in ``conftest.ACCEPTANCE`` and printed in the terminal
summary. Run alone with ``pytest tests/test_acceptance.py -s``.
"""
import functools
import itertools
import re
import time

import numpy as np
import pytest
import shapely

from reachguard.actions import ActionPair, Lat, Lon, feasible_actions, label_trajectory
from reachguard.decision import FAIL_SAFE, HeuristicMaker, ScriptedMaker, decide
from reachguard.ltlf import FG, TRUE, And, Atom, G, Implies, Not, Or, all_assignments, atoms, conjoin, dfa_step
from reachguard.ltlf import evaluate_trace, format_formula, to_dfa
from reachguard.params import EgoParams
from reachguard.prediction import SET_BASED, predict
from reachguard.reach import verify
from reachguard.rules import robustness_margin, rule_body_holds, rule_formulas, safe_distance
from reachguard.scenario import IdmParams
from reachguard.sim import GuardedAgent, HighwayEnv, UnguardedAgent, compute_metrics, compliant_flags, run_episode

from conftest import ACCEPTANCE, CAR, WIDTH, lane_y, make_scenario, synth_trajectory

RULES = ("R_G1", "R_G2", "R_G3")
SEEDS = range(10)
REPEATS = 3


def criterion(n, title):
    def deco(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except Exception as exc:
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                ACCEPTANCE[n] = f"criterion {n:>2} {title}: FAIL ({msg[:160]})"
                print(ACCEPTANCE[n])
                raise
            ACCEPTANCE[n] = f"criterion {n:>2} {title}: PASS" + (f" ({detail})" if detail else "")
            print(ACCEPTANCE[n])

        return run

    return deco


# ---------------------------------------------------------------- 1


@criterion(1, "safe-distance formula")
def test_c1_safe_distance():
    p = EgoParams(t_d=0.4, a_min=-6.0)
    # hand evaluation: 20*0.4 - 400/(2*-6) + 400/(2*-12) = 8 + 100/3 - 50/3
    want = 8.0 + 50.0 / 3.0
    got = safe_distance(20.0, 20.0, p, -12.0)
    assert abs(got - want) <= 1e-9, got
    assert safe_distance(0.0, 0.0, p, -12.0) == 0.0
    return f"{got:.10f}"


# ---------------------------------------------------------------- 2


def random_prop(rng, names, depth):
    if depth == 0 or rng.random() < 0.3:
        return Atom(str(rng.choice(names)))
    op = rng.integers(4)
    if op == 0:
        return Not(random_prop(rng, names, depth - 1))
    kind = (And, Or, Implies)[op - 1]
    return kind(random_prop(rng, names, depth - 1), random_prop(rng, names, depth - 1))


def random_fragment(rng, names):
    parts = [(G if rng.random() < 0.5 else FG)(random_prop(rng, names, 2)) for _ in range(rng.integers(1, 4))]
    if rng.random() < 0.1:
        parts.append(TRUE)
    return conjoin(parts)


def formula_pool(rng, total=210, with_three=24):
    seen, pool = set(), []
    while len(pool) < total:
        three = sum(len(atoms(f)) == 3 for f in pool)
        k = 3 if three < with_three else int(rng.integers(1, 3))
        f = random_fragment(rng, ["p", "q", "r"][:k])
        key = format_formula(f)
        if key in seen or (len(atoms(f)) == 3) != (k == 3):
            continue
        seen.add(key)
        pool.append(f)
    return pool


def mismatches(f, max_len=5):
    """Walk every trace up to ``max_len`` once, stepping the DFA incrementally."""
    dfa = to_dfa(f)
    alphabet = all_assignments(sorted(atoms(f)) or ["p"])
    bad = 0
    checked = 0
    stack = [((), dfa.initial)]
    while stack:
        trace, q = stack.pop()
        for label in alphabet:
            t, q2 = trace + (label,), dfa_step(dfa, q, label)
            checked += 1
            bad += (q2 in dfa.accepting) != evaluate_trace(f, t)
            if len(t) < max_len:
                stack.append((t, q2))
    return bad, checked


@criterion(2, "LTLf DFA equivalence")
def test_c2_dfa_equivalence():
    t0 = time.perf_counter()
    pool = formula_pool(np.random.default_rng(2024))
    assert len(pool) >= 200
    bad = traces = 0
    for f in pool:
        b, n = mismatches(f)
        bad += b
        traces += n
    elapsed = time.perf_counter() - t0
    assert bad == 0, f"{bad} mismatches"
    assert elapsed < 30.0, f"{elapsed:.1f} s"
    return f"{len(pool)} formulas, {traces} traces, {elapsed:.1f} s"


# ---------------------------------------------------------------- 3

SUB = 4
NAMED = re.compile(r"(\w+)\[(\d+)\]$")
ACC_ATOMS = {"abs_acc_within_lim", "acc_above_lim", "acc_below_neg_lim"}

SOUNDNESS_FIXTURES = [
    # name, scenario kwargs, pair, rules, drivable lane indices
    ("empty road, keep", dict(ego=(20.0, 0, 20.0)), "KEEP,FOLLOW-LANE", (), [0]),
    ("slower leader, brake left", dict(lane_count=2, ego=(50.0, 0, 20.0), obstacles=[(95.0, 0, 15.0)]),
     "DECELERATE,LEFT-LANE", ("R_G1", "R_G3"), [0, 1]),
    ("standing obstacle, brake", dict(ego=(20.0, 0, 20.0), obstacles=[(69.5, 0, 0.0)]),
     "DECELERATE,FOLLOW-LANE", (), [0]),
    ("three lanes, keep right", dict(lane_count=3, ego=(100.0, 1, 22.0),
                                     obstacles=[(150.0, 1, 18.0), (130.0, 2, 25.0), (175.0, 0, 20.0)]),
     "KEEP,RIGHT-LANE", RULES, [0, 1]),
    ("limited lane, stop", dict(ego=(20.0, 0, 10.0), obstacles=[(120.0, 0, 8.0)], speed_limit=22.0),
     "STOP,FOLLOW-LANE", ("R_G1", "R_G3"), [0]),
]


def advance(s, v, a, h, vmax):
    """Exact constant-acceleration step with the speed held in [0, vmax]."""
    s_new, v_new = s + v * h + 0.5 * a * h * h, v + a * h
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stop = np.where(v_new < 0.0, -v / a, 0.0)
        t_cap = np.where(v_new > vmax, (vmax - v) / a, 0.0)
    s_new = np.where(v_new < 0.0, s + 0.5 * v * t_stop, s_new)
    s_new = np.where(v_new > vmax, s + v * t_cap + 0.5 * a * t_cap**2 + vmax * (h - t_cap), s_new)
    return s_new, np.clip(v_new, 0.0, vmax)


class Oracle:
    """Rollouts and labels for one straight-road fixture, computed from first principles."""

    def __init__(self, kwargs, pair, rules, lanes):
        self.sc = make_scenario(**kwargs)
        self.pair = ActionPair.parse(pair)
        self.lane0 = kwargs["ego"][1]
        self.p = self.sc.ego_params
        self.cfg = self.sc.rule_config
        self.occ = predict(self.sc, SET_BASED)
        self.out = verify(self.sc, self.pair, rule_formulas(self.cfg, rules, [o.id for o in self.sc.obstacles]),
                          self.occ)
        self.names = sorted(atoms(self.out.formula))
        hw = CAR.width / 2
        y_lo = min(lanes) * WIDTH - lane_y(self.lane0) + hw
        y_hi = (max(lanes) + 1) * WIDTH - lane_y(self.lane0) - hw
        self.d_range = (y_lo, y_hi)
        cuts = set()
        if ACC_ATOMS & set(self.names):
            cuts |= {-self.p.a_lim, self.p.a_lim}
        if "brakes_abruptly" in self.names:
            cuts.add(-self.cfg.a_abrupt)
        lo, hi = self.p.a_lon_range
        edges = [lo, *sorted(c for c in cuts if lo < c < hi), hi]
        self.bands = np.array(list(zip(edges[:-1], edges[1:])))

    def sample(self, n, rng):
        sc, h, dt = self.sc, self.sc.horizon, self.sc.dt
        hs = dt / SUB
        nb = len(self.bands)
        base = rng.integers(nb, size=n)
        band = np.where(rng.random((n, 1)) < 0.8, base[:, None], rng.integers(nb, size=(n, h)))
        lo, hi = self.bands[band, 0], self.bands[band, 1]
        a_roll = rng.uniform(self.bands[base, 0], self.bands[base, 1])
        edge = rng.random(n) < 0.15
        a_roll = np.where(edge, np.where(rng.random(n) < 0.5, self.bands[base, 0], self.bands[base, 1]), a_roll)
        sigma = rng.uniform(0.0, 2.0, n)[:, None]
        a_step = np.clip(a_roll[:, None] + sigma * rng.standard_normal((n, h)), lo, hi)
        a_sub = np.clip(a_step[:, :, None] + 0.5 * sigma[:, :, None] * rng.standard_normal((n, h, SUB)),
                        lo[:, :, None], hi[:, :, None])

        lat_lo, lat_hi = self.p.a_lat_range
        target = rng.uniform(*self.d_range, n)
        kp, kd = rng.uniform(0.5, 5.0, n), rng.uniform(0.5, 4.0, n)
        noise = rng.uniform(0.0, 2.0, n)
        bang = rng.random(n) < 0.1

        s = np.full(n, sc.ego.position[0])
        v = np.full(n, sc.ego.v)
        d = np.zeros(n)
        vd = np.zeros(n)
        S, V, D, VD = [s], [v], [d], [vd]
        for k in range(h):
            sign = np.where(rng.random(n) < 0.5, lat_lo, lat_hi)
            for j in range(SUB):
                ad = kp * (target - d) - kd * vd + noise * rng.standard_normal(n)
                ad = np.clip(np.where(bang, sign, ad), lat_lo, lat_hi)
                s, v = advance(s, v, a_sub[:, k, j], hs, self.p.v_max)
                d, vd = d + vd * hs + 0.5 * ad * hs * hs, vd + ad * hs
            S.append(s), V.append(v), D.append(d), VD.append(vd)
        return np.stack(S, 1), np.stack(V, 1), np.stack(D, 1), np.stack(VD, 1), a_sub

    def labels(self, S, V, D, VD, A):
        """Atom values at trace positions 1..h (state at k, input of the interval ending at k)."""
        p, cfg = self.p, self.cfg
        y = D[:, 1:] + lane_y(self.lane0)
        x = S[:, 1:]
        speed = np.hypot(V[:, 1:], VD[:, 1:])
        h = x.shape[1]
        t = np.arange(1, h + 1) * self.sc.dt
        hw, half_len = CAR.width / 2, CAR.length / 2
        out = {}
        for name in self.names:
            m = NAMED.match(name)
            base, arg = (m.group(1), int(m.group(2))) if m else (name, None)
            if base == "in_standstill":
                val = speed <= p.v_err
            elif name == "abs_acc_within_lim":
                val = np.all(np.abs(A) <= p.a_lim, axis=2)
            elif name == "acc_above_lim":
                val = np.all(A > p.a_lim, axis=2)
            elif name == "acc_below_neg_lim":
                val = np.all(A < -p.a_lim, axis=2)
            elif name == "brakes_abruptly":
                val = np.any(A < -cfg.a_abrupt, axis=2)
            elif name == "braking_justification":
                val = np.zeros_like(x, dtype=bool)
            elif base == "in_lane":
                val = (y + hw > (arg - 1) * WIDTH) & (y - hw < arg * WIDTH)
            elif base in ("precedes", "keeps_safe_distance"):
                o = next(o for o in self.sc.obstacles if o.id == arg)
                ox = o.state.position[0] + o.state.v * t
                if base == "precedes":
                    val = (x < ox) & (np.abs(y - o.state.position[1]) < hw + o.shape.width / 2)
                else:
                    gap = (ox - o.shape.length / 2) - (x + half_len)
                    need = speed * p.t_d - speed**2 / (2 * p.a_min) + o.state.v**2 / (2 * cfg.a_obs_min)
                    val = gap > need
            elif base == "keeps_lane_speed_limit":
                lim = self.sc.network.lane(self.lane0 + 1).speed_limit
                val = speed <= (lim if lim is not None else cfg.speed_limit_default)
            elif base in ("keeps_fov_speed_limit", "keeps_type_speed_limit", "keeps_braking_speed_limit"):
                val = speed <= getattr(cfg, base.replace("keeps_", "").replace("_speed_limit", "_speed_cap"))
            else:
                raise AssertionError(f"oracle has no definition for {name}")
            out[name] = np.broadcast_to(val, x.shape)
        return out

    def avoids(self, S, D):
        hw, half_len = CAR.width / 2, CAR.length / 2
        ok = np.ones(S.shape[0], dtype=bool)
        for k in range(S.shape[1]):
            y = D[:, k] + lane_y(self.lane0)
            boxes = shapely.box(S[:, k] - half_len, y - hw, S[:, k] + half_len, y + hw)
            for occ in self.occ:
                for poly in occ.at(k):
                    ok &= ~shapely.intersects(boxes, poly)
        return ok

    def accepted(self, n, rng):
        S, V, D, VD, A = self.sample(n, rng)
        ok = np.all((D >= self.d_range[0]) & (D <= self.d_range[1]), axis=1) & self.avoids(S, D)
        lab = self.labels(S, V, D, VD, A)
        for i in np.flatnonzero(ok):
            trace = [{a: bool(lab[a][i, k]) for a in self.names} for k in range(S.shape[1] - 1)]
            ok[i] = evaluate_trace(self.out.formula, trace)
        return S[ok], V[ok], D[ok], VD[ok]

    def escapes(self, S, V, D, VD):
        X = np.stack([S, V, D, VD], axis=2)
        esc = np.zeros(S.shape[0], dtype=bool)
        eps = 1e-9
        for k, layer in enumerate(self.out.result.nodes):
            lo = np.array([[b.s_lo, b.vs_lo, b.d_lo, b.vd_lo] for b in layer]).reshape(-1, 4)
            hi = np.array([[b.s_hi, b.vs_hi, b.d_hi, b.vd_hi] for b in layer]).reshape(-1, 4)
            x = X[:, k, None, :]
            inside = np.all((x >= lo - eps) & (x <= hi + eps), axis=2).any(axis=1)
            esc |= ~inside
        return int(esc.sum())


@criterion(3, "reachability soundness")
def test_c3_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    notes = []
    total_escapes = 0
    for name, kwargs, pair, rules, lanes in SOUNDNESS_FIXTURES:
        o = Oracle(kwargs, pair, rules, lanes)
        assert o.out.verified and not o.out.result.capped, name
        got = [np.empty((0, o.sc.horizon + 1))] * 4
        for _ in range(60):
            batch = o.accepted(2000, rng)
            got = [np.vstack([g, b]) for g, b in zip(got, batch)]
            if len(got[0]) >= 1000:
                break
        got = [g[:1000] for g in got]
        assert len(got[0]) == 1000, f"{name}: only {len(got[0])} accepted rollouts"
        esc = o.escapes(*got)
        total_escapes += esc
        notes.append(f"{name}: {esc}")
    elapsed = time.perf_counter() - t0
    assert total_escapes == 0, "; ".join(notes)
    assert elapsed < 120.0, f"{elapsed:.1f} s"
    return f"5 x 1000 rollouts, 0 escapes, {elapsed:.1f} s"


# ---------------------------------------------------------------- 4


@criterion(4, "blocked-leader case study")
def test_c4_case_study(blocked):
    occ = predict(blocked, SET_BASED)
    rules = rule_formulas(blocked.rule_config, RULES, [1])
    acc = verify(blocked, ActionPair(Lon.ACCELERATE, Lat.FOLLOW_LANE), [], occ)
    dec = verify(blocked, ActionPair(Lon.DECELERATE, Lat.FOLLOW_LANE), [], occ)
    dec_rules = verify(blocked, ActionPair(Lon.DECELERATE, Lat.FOLLOW_LANE), rules, occ)
    assert not acc.verified and acc.first_empty_step < blocked.horizon
    assert dec.verified
    assert not dec_rules.verified
    maker = ScriptedMaker([["ACCELERATE,FOLLOW-LANE", "DECELERATE,FOLLOW-LANE", "KEEP,FOLLOW-LANE"]])
    decision = decide(blocked, maker, kappa=3, rules=RULES)
    assert decision.chosen is FAIL_SAFE
    return (f"ACC empty at step {acc.first_empty_step}, DEC verified, DEC+rules empty at step "
            f"{dec_rules.first_empty_step}, decision FAIL_SAFE")


# ---------------------------------------------------------------- 5, 7, 8


@pytest.fixture(scope="module")
def closed_loop():
    t0 = time.perf_counter()
    logs = []
    for setting in (1, 2, 3):
        for seed in SEEDS:
            for rep in range(REPEATS):
                env = HighwayEnv.setting(setting, seed=seed)
                agent = GuardedAgent(HeuristicMaker(rep), prediction=SET_BASED, rules=RULES)
                logs.append(run_episode(env, agent, rules=RULES))
    return logs, time.perf_counter() - t0


@criterion(5, "zero-collision closed loop")
def test_c5_closed_loop(closed_loop):
    logs, elapsed = closed_loop
    m = compute_metrics(logs, RULES)
    assert m.episodes == 90
    assert m.success_rate == 1.0, m
    assert m.collision_free_steps == 30.0, m
    assert elapsed < 300.0, f"{elapsed:.1f} s"
    return f"90 episodes, success 1.0, 30.0 collision-free steps, fail-safe rate {m.fail_safe_rate:.3f}, {elapsed:.0f} s"


@criterion(7, "speed-limit compliance")
def test_c7_speed_limit(closed_loop):
    logs, _ = closed_loop
    counts = [sum(compliant_flags(lg, "R_G3")) for lg in logs]
    assert all(c == 30 for c in counts), sorted(counts)[:5]
    return f"{len(logs)} episodes with 30 compliant steps"


@criterion(8, "robustness sign coherence")
def test_c8_sign_coherence(closed_loop):
    logs, _ = closed_loop
    violations = checked = 0
    for lg in logs:
        sc = lg.scenario()
        for rule in RULES:
            margins = robustness_margin(rule, lg, sc.rule_config, sc)
            for m, ws in zip(margins, lg.steps):
                checked += 1
                violations += (m > 0) != rule_body_holds(rule, ws, sc.rule_config, sc)
    assert violations == 0, f"{violations} of {checked}"
    return f"{checked} step-rule pairs"


# ---------------------------------------------------------------- 6

AGGRESSIVE = ["ACCELERATE,FOLLOW-LANE", "KEEP,FOLLOW-LANE", "DECELERATE,FOLLOW-LANE"]


def close_leader():
    return HighwayEnv.from_vehicles(
        3, (1, 300.0, 25.0),
        [(1, 335.0, 15.0, IdmParams(desired_speed=15.0)), (0, 320.0, 24.0), (2, 290.0, 26.0)],
    )


@criterion(6, "most-likely prediction is insufficient")
def test_c6_close_leader():
    bare = run_episode(close_leader(), UnguardedAgent(ScriptedMaker([AGGRESSIVE])))
    likely = run_episode(close_leader(), GuardedAgent(ScriptedMaker([AGGRESSIVE]), prediction="most-likely",
                                                      rules=RULES))
    guarded = run_episode(close_leader(), GuardedAgent(ScriptedMaker([AGGRESSIVE]), prediction=SET_BASED,
                                                       rules=RULES))
    assert bare.collision_step is not None, "unguarded agent did not collide"
    assert guarded.collision_step is None, f"set-based guarded agent collided at step {guarded.collision_step}"
    return (f"unguarded collides at step {bare.collision_step}, most-likely guarded "
            f"{'collides at step %d' % likely.collision_step if likely.collision_step is not None else 'safe'}, "
            f"set-based guarded safe")


# ---------------------------------------------------------------- 9


@criterion(9, "labeling round trip")
def test_c9_labeling():
    sc = make_scenario(lane_count=3, ego=(50.0, 1, 20.0))
    rng = np.random.default_rng(9)
    wrong = []
    pairs = list(itertools.product(Lon, Lat))
    for lon, lat in pairs:
        for _ in range(100):
            traj = synth_trajectory(lon.name, lat.name, rng)
            got = label_trajectory(traj, sc.network, sc.ego_params, sc.ego_shape)
            if got != ActionPair(lon, lat):
                wrong.append((lon.name, lat.name, str(got)))
    assert not wrong, wrong[:5]
    return f"{len(pairs)} pairs x 100 trajectories"


# ---------------------------------------------------------------- 10


@criterion(10, "verification latency")
def test_c10_latency():
    sc = make_scenario(
        lane_count=3, ego=(100.0, 1, 20.0), horizon=30, length=1200.0,
        obstacles=[(400.0, 1, 22.0), (130.0, 0, 22.0), (70.0, 2, 21.0), (170.0, 2, 24.0), (220.0, 0, 20.0)],
    )
    occ = predict(sc, SET_BASED)
    rules = rule_formulas(sc.rule_config, RULES, [o.id for o in sc.obstacles])
    times = {}
    for pair in feasible_actions(sc).pairs():
        t0 = time.perf_counter()
        out = verify(sc, pair, rules, occ)
        times[str(pair)] = (time.perf_counter() - t0, out.verified)
    slowest = max(times, key=lambda k: times[k][0])
    assert times["KEEP,FOLLOW-LANE"][1], "the reference pair should verify"
    assert times[slowest][0] <= 0.5, f"{slowest}: {times[slowest][0]:.3f} s"
    keep = times["KEEP,FOLLOW-LANE"][0]
    return f"KEEP,FOLLOW-LANE {keep * 1000:.0f} ms; slowest {slowest} {times[slowest][0] * 1000:.0f} ms"
