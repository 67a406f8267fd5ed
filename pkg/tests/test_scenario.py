import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reachguard.errors import OffRoadError, OutOfBandError, ScenarioError
from reachguard.scenario import (
    Lanelet,
    Shape,
    State,
    build_network,
    from_curvilinear,
    lanes_at,
    load_scenario,
    occupancy_of,
    project_to_curvilinear,
    scenario_from_dict,
    scenario_to_dict,
    straight_lanelets,
)

from conftest import make_scenario


def straight(n_points=11):
    return build_network(straight_lanelets(1, 100.0, 4.0, n_points=n_points, x0=0.0)).lanes[0]


def centered_lane():
    # centerline from (0,0) to (100,0)
    ll = Lanelet(1, left=np.array([[0.0, 2.0], [100.0, 2.0]]), right=np.array([[0.0, -2.0], [100.0, -2.0]]))
    return build_network([ll]).lanes[0]


def corners(poly):
    return sorted((round(x, 9), round(y, 9)) for x, y in list(poly.exterior.coords)[:-1])


class TestProjection:
    def test_first_vertex(self):
        assert project_to_curvilinear((0.0, 0.0), centered_lane()) == pytest.approx((0.0, 0.0), abs=1e-12)

    @pytest.mark.parametrize("d", [2.0, -2.0])
    def test_left_positive(self, d):
        assert project_to_curvilinear((30.0, d), centered_lane()) == pytest.approx((30.0, d))

    def test_out_of_band(self):
        with pytest.raises(OutOfBandError):
            project_to_curvilinear((30.0, 80.0), centered_lane())

    def test_curved_round_trip(self):
        t = np.linspace(0, math.pi / 2, 40)
        r_in, r_out = 50.0, 54.0
        ll = Lanelet(
            1,
            left=np.column_stack([r_in * np.sin(t), r_in - r_in * np.cos(t)]),
            right=np.column_stack([r_out * np.sin(t), r_in - r_out * np.cos(t)]),
        )
        lane = build_network([ll]).lanes[0]
        rng = np.random.default_rng(3)
        pts = rng.uniform([-5, -5], [60, 60], size=(4000, 2))
        hits = 0
        for p in pts:
            try:
                s, d = project_to_curvilinear(p, lane, band=10.0)
            except OutOfBandError:
                continue
            if np.min(np.abs(lane.arclengths - s)) < 1e-9:
                continue  # foot on a vertex: not invertible on the convex side
            hits += 1
            assert from_curvilinear(s, d, lane) == pytest.approx(tuple(p), abs=1e-6)
        assert hits >= 1000


@settings(max_examples=200, deadline=None)
@given(s=st.floats(0.0, 100.0), d=st.floats(-40.0, 40.0))
def test_round_trip_straight(s, d):
    lane = straight()
    x, y = from_curvilinear(s, d, lane)
    assert project_to_curvilinear((x, y), lane) == pytest.approx((s, d), abs=1e-6)


class TestLanesAt:
    def setup_method(self):
        self.net = build_network(straight_lanelets(2, 100.0, 3.5, n_points=2))

    def test_inside(self):
        assert [ln.id for ln in lanes_at(self.net, (50.0, 1.0))] == [1]

    def test_off_road(self):
        assert lanes_at(self.net, (50.0, -3.0)) == []

    def test_shared_boundary(self):
        assert sorted(ln.id for ln in lanes_at(self.net, (50.0, 3.5))) == [1, 2]


class TestOccupancy:
    def test_axis_aligned(self):
        poly = occupancy_of(State((0.0, 0.0), 0.0, theta=0.0), Shape(4.0, 2.0))
        assert corners(poly) == sorted([(2.0, 1.0), (2.0, -1.0), (-2.0, 1.0), (-2.0, -1.0)])

    def test_quarter_turn(self):
        poly = occupancy_of(State((0.0, 0.0), 0.0, theta=math.pi / 2), Shape(4.0, 2.0))
        assert corners(poly) == sorted([(1.0, 2.0), (1.0, -2.0), (-1.0, 2.0), (-1.0, -2.0)])

    def test_eighth_turn(self):
        c = math.cos(math.pi / 4)
        rot = np.array([[c, -c], [c, c]])
        expected = [tuple(np.round(rot @ p, 9)) for p in ([2, 1], [2, -1], [-2, 1], [-2, -1])]
        poly = occupancy_of(State((0.0, 0.0), 0.0, theta=math.pi / 4), Shape(4.0, 2.0))
        assert corners(poly) == pytest.approx(sorted(expected))

    def test_reference_offset(self):
        # rear-axle reference: the center sits ref_offset ahead
        poly = occupancy_of(State((0.0, 0.0), 0.0), Shape(4.0, 2.0, ref_offset=1.5))
        assert poly.bounds == pytest.approx((-0.5, -1.0, 3.5, 1.0))


class TestNetwork:
    def test_four_lane_adjacency(self):
        net = build_network(straight_lanelets(4, 500.0, 4.0, n_points=2))
        assert len(net.lanes) == 4
        by_id = {ln.id: ln for ln in net.lanes}
        for ln in net.lanes:
            if ln.adjacent_left is not None:
                other = by_id[ln.adjacent_left[0]]
                assert other.adjacent_right == (ln.id, True)
                assert np.allclose(ln.left, other.right)
        assert by_id[1].adjacent_right is None and by_id[4].adjacent_left is None

    def test_bad_boundaries(self):
        with pytest.raises(ScenarioError, match="intersect"):
            Lanelet(1, left=np.array([[0.0, 0.0], [10.0, 1.0]]), right=np.array([[0.0, 1.0], [10.0, 0.0]]))
        with pytest.raises(ScenarioError):
            Lanelet(1, left=np.array([[0.0, 1.0]]), right=np.array([[0.0, 0.0]]))

    def test_lane_chain(self):
        a = straight_lanelets(1, 50.0, 3.5, n_points=3, start_id=1)[0]
        b = straight_lanelets(1, 50.0, 3.5, n_points=3, start_id=2, x0=50.0)[0]
        a = Lanelet(a.id, a.left, a.right, successors=(2,))
        net = build_network([a, b])
        assert len(net.lanes) == 1
        lane = net.lanes[0]
        assert lane.lanelets == (1, 2)
        assert lane.length == pytest.approx(100.0)
        assert np.all(np.diff(lane.arclengths) > 0) and lane.arclengths[0] == 0.0


class TestFileFormat:
    def test_round_trip(self, tmp_path, two_lane):
        path = tmp_path / "sc.json"
        path.write_text(json.dumps(scenario_to_dict(two_lane)))
        sc = load_scenario(path)
        assert len(sc.network.lanes) == 2
        assert sc.ego.position == pytest.approx(two_lane.ego.position)
        assert [o.id for o in sc.obstacles] == [1]
        assert scenario_to_dict(sc) == scenario_to_dict(two_lane)

    def test_minimal(self):
        data = scenario_to_dict(make_scenario())
        sc = scenario_from_dict(data)
        assert len(sc.network.lanes) == 1 and sc.obstacles == ()

    def test_dangling_adjacent(self):
        data = scenario_to_dict(make_scenario())
        data["network"]["lanelets"][0]["adjacent_left"] = [7, True]
        with pytest.raises(ScenarioError, match="7"):
            scenario_from_dict(data)

    def test_invalid_horizon(self):
        data = scenario_to_dict(make_scenario())
        data["horizon"] = 0
        with pytest.raises(ScenarioError, match="horizon"):
            scenario_from_dict(data)

    def test_ego_off_road(self):
        data = scenario_to_dict(make_scenario())
        data["ego"]["state"]["position"] = [50.0, 40.0]
        with pytest.raises((OffRoadError, ScenarioError)):
            scenario_from_dict(data)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ScenarioError):
            load_scenario(path)
