import numpy as np
import pytest

from fpcoord.instances import random_topology
from fpcoord.network import (
    CouplingProfile,
    EdgeSpec,
    Layout,
    NetworkTopology,
    TopologyError,
    build_routing_matrix,
    gather_outgoing,
    scatter_incoming,
)


def name_lookup_route(topology, v_out):
    """Independent router: copy each edge's block by (source, target) name."""
    out_pos, start = {}, 0
    for e in sorted(topology.edges, key=lambda e: (e.source, e.target)):
        n = topology.horizon * e.signal_dim
        out_pos[(e.source, e.target)] = v_out[start:start + n]
        start += n
    blocks = [out_pos[(e.source, e.target)] for e in sorted(topology.edges, key=lambda e: (e.target, e.source))]
    return np.concatenate(blocks) if blocks else np.zeros(0)


def test_two_node_ring_routing():
    top = NetworkTopology(2, [EdgeSpec(0, 1, 1), EdgeSpec(1, 0, 2)], horizon=2)
    R = build_routing_matrix(top)
    # outgoing: (0,1) occupies [0,2), (1,0) occupies [2,6)
    # incoming: S0 receives (1,0) first, then S1 receives (0,1)
    v_out = np.arange(6.0)
    np.testing.assert_array_equal(R.apply(v_out), [2, 3, 4, 5, 0, 1])
    np.testing.assert_array_equal(R.matrix @ v_out, R.apply(v_out))


def test_routing_matches_name_lookup(rng):
    for _ in range(30):
        top = random_topology(rng)
        R = build_routing_matrix(top)
        v_out = rng.standard_normal(top.dim)
        np.testing.assert_array_equal(R.apply(v_out), name_lookup_route(top, v_out))
        np.testing.assert_array_equal(R.matrix.T @ R.matrix, np.eye(top.dim, dtype=np.int64))
        np.testing.assert_array_equal(R.apply_transpose(R.apply(v_out)), v_out)


def test_empty_topology_is_valid():
    top = NetworkTopology(3, [], controlled=[1], horizon=4)
    assert top.dim == 0
    assert build_routing_matrix(top).matrix.shape == (0, 0)
    parts = scatter_incoming(CouplingProfile.zeros(top), top)
    assert [p.size for p in parts] == [0, 0, 0]


@pytest.mark.parametrize(
    "edges, msg",
    [
        ([EdgeSpec(0, 1, 1), EdgeSpec(0, 1, 2)], "duplicate"),
        ([EdgeSpec(0, 5, 1)], "outside"),
    ],
)
def test_invalid_edges_rejected(edges, msg):
    with pytest.raises(TopologyError, match=msg):
        NetworkTopology(2, edges)


def test_self_loop_and_zero_dim_rejected():
    with pytest.raises((TopologyError, ValueError)):
        EdgeSpec(1, 1, 1)
    with pytest.raises((TopologyError, ValueError)):
        EdgeSpec(0, 1, 0)


def test_slices_and_orders():
    top = NetworkTopology(3, [EdgeSpec(2, 0, 1), EdgeSpec(0, 1, 2), EdgeSpec(1, 0, 3)], horizon=2)
    assert [e.key for e in top.incoming_order()] == [(1, 0), (2, 0), (0, 1)]
    assert [e.key for e in top.outgoing_order()] == [(0, 1), (1, 0), (2, 0)]
    assert top.in_dims(0) == (3, 1)
    assert top.subsystem_slice(0, Layout.INCOMING) == slice(0, 8)
    assert top.subsystem_slice(1, Layout.INCOMING) == slice(8, 12)
    assert top.edge_slice((2, 0), Layout.INCOMING) == slice(6, 8)


def test_scatter_gather_validate_layout_and_lengths():
    top = NetworkTopology(2, [EdgeSpec(0, 1, 1), EdgeSpec(1, 0, 1)], horizon=3)
    with pytest.raises(TopologyError, match="incoming"):
        scatter_incoming(CouplingProfile(np.zeros(6), Layout.OUTGOING), top)
    with pytest.raises(TopologyError, match="length"):
        scatter_incoming(CouplingProfile(np.zeros(5), Layout.INCOMING), top)
    with pytest.raises(TopologyError, match="subsystem 1"):
        gather_outgoing([np.zeros(3), np.zeros(2)], top)
    prof = gather_outgoing([np.ones(3), 2 * np.ones(3)], top)
    assert prof.layout is Layout.OUTGOING
    np.testing.assert_array_equal(prof.data, [1, 1, 1, 2, 2, 2])


def test_nonfinite_profile_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        CouplingProfile([0.0, np.nan], Layout.INCOMING)


def test_relabel_permutes_edges():
    top = NetworkTopology(3, [EdgeSpec(0, 1, 1), EdgeSpec(1, 2, 2)], controlled=[0], horizon=1)
    rel = top.relabel([2, 0, 1])
    assert {e.key for e in rel.edges} == {(2, 0), (0, 1)}
    assert rel.controlled == frozenset({2})
    with pytest.raises(TopologyError):
        top.relabel([0, 0, 1])
