import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from archxform.graph import (
    Cell, Edge, GraphError, NetConfig, Network, OpKind, OperationSpec, ShapeError, apply_decisions, build_network,
    count_cost, diff, from_json, infer_shapes, prune, to_dot, to_json, validate,
)

C3 = OpKind.CONV3X3_RELU
TINY_CFG = NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8))


def conv(c=4, stride=1, kind=C3, out=None):
    return OperationSpec(kind, c, out or c, stride)


def single_cell(n_nodes, edge_list, c=4):
    """One-cell network on a 4x8x8 stem output; edge_list holds (src, dst, kind)."""
    edges = tuple(Edge(i, s, d, OperationSpec(k, c, c)) for i, (s, d, k) in enumerate(edge_list))
    cell = Cell("g", tuple(range(n_nodes)), edges, (c, 8, 8))
    return Network("custom", (3, 8, 8), 3, conv(3, out=c), (cell,))


# -- build_network ----------------------------------------------------------


def test_tiny_has_one_cell_four_edges():
    net = build_network("tiny", TINY_CFG)
    assert len(net.cells) == 1
    cell = net.cells[0]
    assert len(cell.edges) == 4
    assert len(cell.nodes) - 2 == 2  # intermediate nodes


def test_resnet_mini_has_residual_cells():
    net = build_network("resnet-mini", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8)))
    normal = [c for c in net.cells if c.name == "normal"]
    assert normal
    for cell in normal:
        kinds = {e.op.kind for e in cell.edges}
        assert OpKind.IDENTITY in kinds and C3 in kinds
        assert any(e.src == cell.input and e.dst == cell.output and e.op.kind == OpKind.IDENTITY for e in cell.edges)
    rep = validate(net)
    assert rep.ok and rep.connected


def test_plain_cnn_counts_32_edges():
    net = build_network("plain-cnn", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8), cells=8))
    assert len(net.edge_ids()) == 32


@pytest.mark.parametrize("cfg", [
    NetConfig(channels=0, num_classes=3, input_shape=(3, 8, 8)),
    NetConfig(channels=4, num_classes=0, input_shape=(3, 8, 8)),
    NetConfig(channels=4, num_classes=3, input_shape=(3, 0, 8)),
])
def test_build_rejects_bad_config(cfg):
    with pytest.raises(GraphError):
        build_network("tiny", cfg)


def test_build_rejects_unknown_template():
    with pytest.raises(GraphError, match="unknown template"):
        build_network("vgg", TINY_CFG)


# -- shapes and cost ---------------------------------------------------------


def test_infer_shapes_examples():
    assert conv().out_shape((4, 8, 8)) == (4, 8, 8)
    assert OperationSpec(OpKind.AVGPOOL2X2, 4, 4).out_shape((4, 8, 8)) == (4, 4, 4)
    assert conv(stride=2).out_shape((4, 9, 9)) == (4, 4, 4)
    net = build_network("tiny", TINY_CFG)
    shapes = infer_shapes(net)
    assert set(shapes) == set(net.edge_ids())
    assert all(v == ((4, 8, 8), (4, 8, 8)) for v in shapes.values())


def test_infer_shapes_sum_mismatch():
    edges = (
        Edge(0, 0, 1, conv()),
        Edge(1, 0, 1, OperationSpec(OpKind.CONV3X3_RELU, 4, 8, 2)),
    )
    cell = Cell("bad", (0, 1), edges, (4, 8, 8))
    net = Network("custom", (3, 8, 8), 3, conv(3, out=4), (cell,))
    with pytest.raises(ShapeError, match="mismatch"):
        infer_shapes(net)
    assert not validate(net).shapes_ok


def test_op_costs():
    assert conv().weight_count == 4 * 4 * 9 + 4 == 148
    assert OperationSpec(OpKind.IDENTITY, 4, 4).weight_count == 0
    assert OperationSpec(OpKind.IDENTITY, 4, 4).flops((4, 8, 8)) == 0
    assert OperationSpec(OpKind.DENSE_RELU, 5, 3).weight_count == 18


def test_tiny_cost_regression():
    # hand count for channels=4, classes=3, input 3x8x8:
    #   stem conv3x3 3->4: 3*4*9+4 = 112 params, 8*8*4*3*9 = 6912 MACs
    #   e0 conv3x3 4->4: 148, 9216; e1 conv1x1 4->4: 20, 1024
    #   e2 conv3x3: 148, 9216;      e3 conv3x3: 148, 9216
    #   head: pool 4*64 = 256 accumulates; dense 4->3: 15 params, 12 MACs
    net = build_network("tiny", TINY_CFG)
    cost = count_cost(net)
    assert cost.params == 112 + 148 + 20 + 148 + 148 + 15 == 591
    assert cost.flops == 6912 + 9216 + 1024 + 9216 + 9216 + 256 + 12 == 35852


# -- validate / prune / apply_decisions ---------------------------------------


def _all(net, choice):
    return {eid: choice for eid in net.edge_ids()}


def test_validate_examples():
    net = build_network("resnet-mini", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8)))
    assert validate(net).ok and validate(net).connected
    tiny = build_network("tiny", TINY_CFG)
    zeroed = dataclasses.replace(tiny, cells=tuple(
        dataclasses.replace(c, edges=tuple(dataclasses.replace(e, op=OperationSpec(OpKind.ZERO, 4, 4))
                                           for e in c.edges)) for c in tiny.cells))
    assert validate(zeroed).disconnected
    chain = single_cell(3, [(0, 1, OpKind.IDENTITY), (1, 2, OpKind.IDENTITY), (0, 2, OpKind.ZERO)])
    assert validate(chain).connected


def test_prune_fixed_point_and_cascade():
    net = build_network("tiny", TINY_CFG)
    assert prune(net) == net
    chain = single_cell(4, [(0, 1, OpKind.ZERO), (1, 2, C3), (0, 3, C3), (2, 3, C3)])
    p = prune(chain)
    assert p.cells[0].nodes == (0, 3)
    assert [e.index for e in p.cells[0].edges] == [2]


def test_apply_all_same_is_identity_rewrite():
    net = build_network("resnet-mini", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8)))
    assert apply_decisions(net, _all(net, "same")) == net


def test_apply_mixed_choices():
    net = build_network("tiny", TINY_CFG)
    d = {"c0.e0": "same", "c0.e1": "none", "c0.e2": "id", "c0.e3": "same"}
    out = apply_decisions(net, d)
    kinds = {e.index: e.op.kind for e in out.cells[0].edges}
    assert kinds == {0: C3, 2: OpKind.IDENTITY, 3: C3}
    assert not out.disconnected
    assert diff(net, out).n_changed == 2


def test_apply_none_into_output_flags_disconnected():
    net = build_network("tiny", TINY_CFG)
    d = _all(net, "same")
    d["c0.e3"] = "none"
    out = apply_decisions(net, d)
    assert out.disconnected
    assert validate(out).disconnected


def test_apply_errors():
    net = build_network("resnet-mini", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8)))
    d = _all(net, "same")
    d["c9.e9"] = "same"
    with pytest.raises(GraphError, match="unknown"):
        apply_decisions(net, d)
    d = _all(net, "same")
    reduce_idx = next(i for i, c in enumerate(net.cells) if c.name == "reduce")
    d[f"c{reduce_idx}.e0"] = "id"
    with pytest.raises(GraphError, match="illegal"):
        apply_decisions(net, d)


def test_diff_examples():
    net = build_network("tiny", TINY_CFG)
    assert diff(net, net).n_changed == 0
    gone = apply_decisions(net, _all(net, "none"))
    d = diff(net, gone)
    assert all(r.changed and r.new == OpKind.ZERO for r in d.records)
    other = build_network("plain-cnn", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8), cells=2))
    with pytest.raises(GraphError):
        diff(net, other)


# -- brute-force oracles on random small graphs --------------------------------


def _paths(n, edges):
    """Every input->output path as a list of edge indices (simple DAG enumeration)."""
    out = []

    def walk(node, used):
        if node == n - 1:
            out.append(list(used))
            return
        for i, (s, d, k) in enumerate(edges):
            if s == node and k != OpKind.ZERO:
                walk(d, used + [i])

    walk(0, [])
    return out


graphs = st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1), st.sampled_from([C3, OpKind.ZERO, OpKind.IDENTITY])),
             min_size=1, max_size=10).map(lambda es: [(min(s, d), max(s, d), k) for s, d, k in es if s != d]),
))


@settings(max_examples=200, deadline=None)
@given(graphs)
def test_prune_equals_path_enumeration(g):
    n, edges = g
    if not edges or any(d == 0 for _, d, _ in edges):
        return
    net = single_cell(n, edges)
    pruned = prune(net)
    paths = _paths(n, edges)
    on_path = sorted({i for p in paths for i in p})
    assert [e.index for e in pruned.cells[0].edges] == on_path
    nodes = {0, n - 1} | {edges[i][0] for i in on_path} | {edges[i][1] for i in on_path}
    assert set(pruned.cells[0].nodes) == nodes
    assert prune(pruned) == pruned
    assert validate(net).disconnected == (not paths)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["none", "id", "same"]), min_size=4, max_size=4))
def test_decisions_never_increase_cost(choices):
    net = build_network("tiny", TINY_CFG)
    out = apply_decisions(net, dict(zip(net.edge_ids(), choices)))
    assert count_cost(out) <= count_cost(net)


# -- serialization ----------------------------------------------------------


def test_json_round_trip_and_schema():
    net = build_network("resnet-mini", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8)))
    doc = json.loads(to_json(net))
    assert doc["version"] == 1 and doc["template"] == "resnet-mini"
    assert set(doc["cells"][0]["edges"][0]["op"]) == {"kind", "in", "out", "stride"}
    assert from_json(to_json(net)) == net
    t = apply_decisions(net, dict(_all(net, "same"), **{"c0.e1": "none"}))
    assert from_json(to_json(t)) == t


def test_dot_marks_changed_edges_red():
    net = build_network("tiny", TINY_CFG)
    assert "color=red" not in to_dot(net, net)
    t = apply_decisions(net, {"c0.e0": "same", "c0.e1": "none", "c0.e2": "id", "c0.e3": "same"})
    dot = to_dot(net, t)
    assert dot.count("color=red") == 2
    assert dot.count("digraph") == 1
    plain = build_network("plain-cnn", NetConfig(channels=4, num_classes=3, input_shape=(3, 8, 8), cells=3))
    assert to_dot(plain, plain).count("digraph") == 3
