import json

import numpy as np
import pytest

from lgnn import systems
from lgnn.topology import ROPE, State, Topology, TopologyError, free_dof_index, link_residuals


def _two_node(**kw):
    base = dict(q_ref=[[0.0, 0.0], [1.0, 0.0]], senders=[0], receivers=[1], types=[0],
                lengths=[1.0], masses=[1.0], inertias=[1 / 12], fixed=[True, False])
    base.update(kw)
    return Topology(**base)


@pytest.mark.parametrize("bad", [dict(senders=[1], receivers=[1]), dict(receivers=[2]),
                                 dict(lengths=[0.0]), dict(masses=[-1.0]), dict(inertias=[0.0]),
                                 dict(fixed=[True]), dict(q_ref=[[0.0], [1.0]])])
def test_invalid_topologies_are_rejected(bad):
    with pytest.raises(TopologyError):
        _two_node(**bad)


def test_arrays_are_read_only():
    topo = _two_node()
    with pytest.raises(ValueError):
        topo.lengths[0] = 2.0


def test_free_dof_counts():
    assert free_dof_index(systems.catalog("chain-4").topology).size == 8
    free5 = systems.chain_topology(4).replace(fixed=np.zeros(5, dtype=bool))
    assert free_dof_index(free5).size == 10
    both = systems.chain_topology(8)
    fixed = np.zeros(9, dtype=bool)
    fixed[[0, 8]] = True
    idx = free_dof_index(both.replace(fixed=fixed))
    assert idx.size == 14
    assert set(idx.free) | set(idx.fixed) == set(range(18))
    assert not set(idx.free) & set(idx.fixed)


def test_graph_distances_and_components():
    chain = systems.chain_topology(3)
    d = chain.graph_distances()
    np.testing.assert_array_equal(d[0], [0, 1, 2, 3])
    two = chain.union(chain)
    assert len(two.components()) == 2
    assert np.isinf(two.graph_distances()[0, 4])
    assert chain.is_serial_chain() and not two.is_serial_chain()


def test_permutation_relabels_consistently():
    topo = systems.chain_topology(3)
    perm = np.array([2, 0, 3, 1])
    p = topo.permuted(perm)
    for (i, j), (a, b) in zip(topo.edges(), p.edges()):
        assert (perm[i], perm[j]) == (a, b)
    np.testing.assert_array_equal(p.q_ref[perm], topo.q_ref)
    np.testing.assert_array_equal(p.fixed[perm], topo.fixed)


def test_json_round_trip(tmp_path):
    topo = systems.catalog("chain-4-hetero").topology.replace(drag_coeff=0.25, label="x")
    path = tmp_path / "t.json"
    topo.save(path)
    again = Topology.load(path)
    for name in ("q_ref", "senders", "receivers", "types", "lengths", "masses", "inertias", "fixed"):
        np.testing.assert_array_equal(getattr(topo, name), getattr(again, name))
    assert (again.gravity, again.drag_coeff, again.label) == (topo.gravity, 0.25, "x")
    data = json.loads(path.read_text())
    assert {"dim", "gravity", "nodes", "edges", "drag_coeff"} <= set(data)
    assert set(data["edges"][0]) == {"i", "j", "type", "length", "mass", "inertia"}


def test_state_at_rest_and_fixed_velocity_check():
    topo = systems.chain_topology(2)
    s = State.at_rest(topo)
    np.testing.assert_array_equal(s.qdot, 0.0)
    assert np.abs(link_residuals(topo, s.q)).max() == 0.0


def test_shipped_tensegrities_are_valid():
    for label in ("T1", "T2", "T3"):
        topo = systems.catalog(label).topology
        assert topo.fixed.sum() >= 2
        assert len(topo.components()) == 1
        assert np.abs(link_residuals(topo, topo.q_ref.reshape(-1))).max() < 1e-12
        assert set(np.unique(topo.types)) <= {0, ROPE}
