import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist

from servicenet.network import (Location, MapGenConfig, MapGenerationError, NetworkMap, coverage_sets,
                                generate_map, travel_time)



def test_travel_is_euclidean(small_map):
    assert travel_time(small_map, Location.machine(0), Location.base(1)) == pytest.approx(5.0)
    assert travel_time(small_map, Location.base(0), Location.base(2)) == pytest.approx(8.0)
    assert small_map.travel.shape == (8, 8)


def test_coverage_sets_use_closed_threshold(small_map):
    # machines 1 and 3 sit exactly t* = 3 from a second base
    assert coverage_sets(small_map) == [[0], [0, 1], [0, 1], [1, 2], [2]]


def test_node_location_round_trip(small_map):
    for node in range(small_map.n_nodes):
        assert small_map.node(small_map.location(node)) == node
    with pytest.raises(KeyError):
        small_map.node(Location.base(3))


def test_json_round_trip(small_map):
    back = NetworkMap.from_json(small_map.to_json())
    np.testing.assert_array_equal(back.travel, small_map.travel)
    assert back.t_star == small_map.t_star


def test_travel_override_validation():
    m = np.zeros((1, 2))
    b = np.zeros((1, 2))
    with pytest.raises(ValueError):
        NetworkMap(m, b, 1.0, travel_override=np.array([[0, 1], [2, 0]]))


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        MapGenConfig(0, 3, 1.0, 5.0)
    with pytest.raises(ValueError):
        MapGenConfig(3, 3, -1.0, 5.0)


def test_unattainable_map_raises():
    # one machine and one base are always t*/d apart; d < 1 puts them out of reach
    with pytest.raises(MapGenerationError):
        generate_map(MapGenConfig(1, 1, 0.5, 5.0, max_attempts=5))


def test_generation_is_seeded():
    a = generate_map(MapGenConfig(20, 12, 0.3, 20.0, seed=4))
    b = generate_map(MapGenConfig(20, 12, 0.3, 20.0, seed=4))
    np.testing.assert_array_equal(a.travel, b.travel)


@settings(max_examples=40, deadline=None)
@given(K=st.integers(10, 25), R=st.integers(5, 12), d=st.sampled_from([0.3, 1.0, 2.0]),
       t_star=st.sampled_from([5.0, 10.0, 20.0, 50.0]), seed=st.integers(0, 10_000))
def test_generated_maps_are_feasible_and_scaled(K, R, d, t_star, seed):
    # very small sparse maps can be geometrically infeasible, so sizes stay realistic
    net = generate_map(MapGenConfig(K, R, d, t_star, seed=seed))
    assert net.is_feasible()
    assert np.allclose(net.travel, net.travel.T) and np.all(np.diag(net.travel) == 0)
    pts = np.vstack([net.machine_coords, net.base_coords])
    assert pdist(pts).mean() == pytest.approx(t_star / d, rel=1e-9)
    assert json.loads(net.to_json())["K"] == K
