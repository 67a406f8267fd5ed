import numpy as np
import pytest

from reachguard.params import EgoParams
from reachguard.scenario import (
    IdmParams,
    Obstacle,
    Scenario,
    Shape,
    State,
    build_network,
    straight_lanelets,
    with_curvilinear,
)

CAR = Shape(4.5, 1.8)
WIDTH = 3.5


def lane_y(index, width=WIDTH):
    return (index + 0.5) * width


def make_scenario(lane_count=1, ego=(20.0, 0, 20.0), obstacles=(), horizon=15, length=600.0, speed_limit=None,
                  rules=(), highway=False, dt=0.2, params=None):
    """Straight road fixture. ``ego``/obstacle entries are ``(x, lane_index, v)``."""
    net = build_network(straight_lanelets(lane_count, length, WIDTH, n_points=2, speed_limit=speed_limit))
    x, li, v = ego
    lane = net.lane(li + 1)
    ego_state = with_curvilinear(State((x, lane_y(li)), v), lane)
    obs = []
    for i, entry in enumerate(obstacles, start=1):
        ox, oli, ov = entry[:3]
        kind = entry[3] if len(entry) > 3 else ("static" if ov == 0 else "car")
        obs.append(Obstacle(i, kind, CAR, behavior=IdmParams(), state=State((ox, lane_y(oli)), ov)))
    return Scenario(net, ego_state, CAR, params or EgoParams(), tuple(obs), dt=dt, horizon=horizon,
                    rules_enabled=tuple(rules), context={"highway": highway})


@pytest.fixture
def empty_road():
    return make_scenario()


@pytest.fixture
def blocked():
    """Standing obstacle 45 m (bumper to bumper) ahead of an ego at 20 m/s."""
    return make_scenario(ego=(20.0, 0, 20.0), obstacles=[(20.0 + 4.5 + 45.0, 0, 0.0)])


@pytest.fixture
def two_lane():
    return make_scenario(lane_count=2, ego=(50.0, 0, 20.0), obstacles=[(95.0, 0, 15.0)])


def synth_trajectory(lon, lat, rng, steps=25, dt=0.2, lane_index=1):
    """Trajectory meeting the action formulas with at least twice the thresholds as margin.

    ``lon``/``lat`` are the enum value names. The road is three lanes of width 3.5 with
    the ego starting in ``lane_index``.
    """
    T = steps * dt
    t = np.arange(steps + 1) * dt
    if lon == "STOP":
        v0 = rng.uniform(2.0, 12.0)
        a_brake = -rng.uniform(v0 / (0.6 * T), 6.0)  # standstill reached by 60% of the horizon at the latest
        t_stop = v0 / -a_brake
        v = np.where(t < t_stop, v0 + a_brake * t, 0.0)
        x = np.where(t < t_stop, v0 * t + 0.5 * a_brake * t**2, v0 * t_stop / 2.0)
        a = np.where(t < t_stop, a_brake, 0.0)
    else:
        if lon == "KEEP":
            acc = rng.uniform(-0.1, 0.1)
        elif lon == "ACCELERATE":
            acc = rng.uniform(0.4, 6.0)
        else:
            acc = -rng.uniform(0.4, min(6.0, 20.0 / T))
        v0 = rng.uniform(max(5.0, -acc * T + 5.0), 30.0)  # fast enough at the end for a small heading
        v = v0 + acc * t
        x = v0 * t + 0.5 * acc * t**2
        a = np.full_like(t, acc)
    y0 = lane_y(lane_index)
    if lat == "FOLLOW_LANE":
        amp = rng.uniform(0.0, 0.5)
        y = y0 + amp * np.sin(2 * np.pi * t / T * rng.uniform(0.5, 2.0))
    else:
        shift = WIDTH if lat == "LEFT_LANE" else -WIDTH
        t_end = rng.uniform(0.4, 0.9) * T
        u = np.clip(t / t_end, 0.0, 1.0)
        y = y0 + shift * (3 * u**2 - 2 * u**3)
    vx = np.gradient(x, dt)
    heading = np.where(vx > 1.0, np.arctan2(np.gradient(y, dt), vx), 0.0)
    x = x + rng.uniform(10.0, 200.0)
    return [State((float(x[k]), float(y[k])), float(max(v[k], 0.0)), theta=float(heading[k]), a=float(a[k]))
            for k in range(steps + 1)]


# acceptance results, filled by tests/test_acceptance.py and printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
