import json

import numpy as np
import pytest

from lgm import build_graph, count_parameters, dense_chain_spec, flip, init_parameters, mininet_spec
from lgm.exact import enumerate_edges, node_model
from lgm.inference import InferenceConfig, run_inference
from lgm.model import (GraphError, Parameters, compact_labels, edge_array, edge_shape,
                       expand_labels, pairwise_shape, zero_parameters)
from lgm.verify import random_clamps, random_parameters

from conftest import chain_spec, conv_spec


# ------------------------------------------------------------------- graphs

@pytest.mark.parametrize("kind", ["Conv", "Local"])
def test_mininet_shapes_and_depth(kind):
    g = build_graph(mininet_spec(kind))
    assert g.depth == 4
    assert g.layers["h1"].node_shape == (8, 12, 12)
    assert g.layers["h2"].node_shape == (16, 4, 4)


def test_mininet_spatial_shapes_are_inferred():
    spec = mininet_spec("Conv")
    for l in spec["layers"][1:3]:
        del l["spatial"]
    g = build_graph(spec)
    assert g.layers["h1"].spatial == (12, 12) and g.layers["h2"].spatial == (4, 4)


def test_single_dense_connection_has_depth_one():
    g = build_graph(dense_chain_spec(hidden=()))
    assert g.depth == 1
    assert g.output_layer.labels == 10


def test_build_graph_accepts_json_text_and_path(tmp_path):
    spec = dense_chain_spec(hidden=(3,), input_nodes=4)
    p = tmp_path / "g.json"
    p.write_text(json.dumps(spec))
    assert build_graph(json.dumps(spec)).to_spec() == build_graph(p).to_spec()


def _mutate(spec, fn):
    spec = json.loads(json.dumps(spec))
    fn(spec)
    return spec


@pytest.mark.parametrize("mutation, message", [
    (lambda s: s["layers"].append(dict(s["layers"][0])), "duplicate layer"),
    (lambda s: s["connections"].append({"from": "h1", "to": "h1"}), "intra-layer"),
    (lambda s: s["layers"].append({"name": "z", "role": "hidden", "channels": 2, "spatial": []}),
     "dangling"),
    (lambda s: s["connections"].append({"from": "v", "to": "nope"}), "not a layer"),
    (lambda s: s["connections"].append({"from": "h1", "to": "v"}), "duplicate connection"),
    (lambda s: s["layers"][-1].update(role="hidden"), "output"),
    (lambda s: s["layers"][0].update(labels=1), "labels"),
])
def test_build_graph_validation(mutation, message):
    spec = _mutate(dense_chain_spec(hidden=(3,), input_nodes=4), mutation)
    with pytest.raises(GraphError, match=message):
        build_graph(spec)


def test_spatial_shape_mismatch_is_rejected():
    spec = mininet_spec("Conv")
    spec["layers"][1]["spatial"] = [13, 13]
    with pytest.raises(GraphError, match="does not match"):
        build_graph(spec)


def test_kernel_too_large_is_rejected():
    spec = conv_spec(length=3, kernel=5)
    with pytest.raises(GraphError):
        build_graph(spec)


def test_cyclic_layer_graph_only_rejected_when_tree_required():
    spec = dense_chain_spec(hidden=(2, 2), input_nodes=3)
    spec["connections"].append({"from": "h1", "to": "y"})
    g = build_graph(spec)
    assert not g.is_layer_tree()
    with pytest.raises(GraphError, match="not a tree"):
        build_graph(spec, require_tree=True)


# --------------------------------------------------------------- parameters

def test_flip_scalar_identity():
    g = build_graph(chain_spec([1, 1], [2, 2]))
    conn = g.connections[0]
    W = np.array([[[[0.7]]]])
    assert np.array_equal(flip(W, g, conn), W)


@pytest.mark.parametrize("spec", [chain_spec([3, 2, 1], [3, 4, 5]), conv_spec("Conv"),
                                  conv_spec("Local"), mininet_spec("Local")])
def test_flip_is_an_involution(spec, rng):
    g = build_graph(spec)
    for conn in g.connections:
        W = rng.normal(size=pairwise_shape(g, conn))
        assert np.array_equal(flip(flip(W, g, conn), g, conn), W)


def test_flip_rejects_wrong_shape(small_chain):
    with pytest.raises(ValueError, match="shape"):
        flip(np.zeros((2, 2, 2, 2)), small_chain, small_chain.connections[0])


@pytest.mark.parametrize("kind", ["Conv", "Local"])
def test_flip_reads_energies_at_mirrored_offset(kind, rng):
    spec = {"layers": [
        {"name": "v", "role": "input", "channels": 2, "spatial": [6], "labels": 3},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 2, "labels": 4}],
        "connections": [{"from": "v", "to": "h", "kind": kind, "kernel": [3], "stride": [1]},
                        {"from": "h", "to": "y"}]}
    g = build_graph(spec)
    conn = g.connections[0]
    W = rng.normal(size=pairwise_shape(g, conn))
    Wf = flip(W, g, conn)
    K = conn.kernel[0]
    for (cp, x), (cq, o), widx in enumerate_edges(g, conn):
        k = x - o
        a, b = 1, 2  # an arbitrary compact label pair
        direct = W[widx][a, b] if kind == "Conv" else W[widx][a, b]
        mirrored = Wf[(cq, cp, K - 1 - k) + ((o,) if kind == "Local" else ())][b, a]
        assert direct == mirrored


def test_init_is_deterministic_and_unaries_are_zero(small_chain):
    a = init_parameters(small_chain, seed=3)
    b = init_parameters(small_chain, seed=3)
    for (na, ta), (nb, tb) in zip(a.items(), b.items()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    assert all(np.all(v.data == 0) for v in a.unary.values())
    c = init_parameters(small_chain, seed=4)
    assert not np.array_equal(a.pairwise["v->h1"].data, c.pairwise["v->h1"].data)


def test_init_std_matches_fan_in():
    spec = {"layers": [
        {"name": "v", "role": "input", "channels": 1, "spatial": [40, 40], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 64, "labels": 2},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 2}],
        "connections": [{"from": "v", "to": "h", "kind": "Local", "kernel": [5, 5], "stride": [3, 3]},
                        {"from": "h", "to": "y"}]}
    g = build_graph(spec)
    W = init_parameters(g, seed=0).pairwise["v->h"].data
    assert abs(W.std() - 1 / 5) < 0.1 * (1 / 5)


def test_count_parameters_single_dense_model():
    assert count_parameters(build_graph(dense_chain_spec(hidden=()))) == 784 * 9 + 784 + 9


def test_count_parameters_one_binary_node_layer():
    g = build_graph(chain_spec([1, 1], [2, 2]))
    # v: 1 entry, y: 1 entry, W: 1 entry
    assert count_parameters(g) == 3


def test_count_parameters_is_linear_in_hidden_size():
    def unary_count(n):
        g = build_graph(dense_chain_spec(hidden=(n,), input_nodes=5))
        return int(np.prod(g.layers["h1"].param_shape))
    assert unary_count(14) == 2 * unary_count(7)


def test_count_parameters_mininet():
    g = build_graph(mininet_spec("Conv"))
    conv = 1 * 8 * 25 + 8 * 16 * 25
    dense = 16 * 16 * 100 + 100 * 9
    unary = 784 + 8 * 144 + 16 * 16 + 100 + 9
    assert count_parameters(g) == conv + dense + unary


def test_expand_then_compact_is_identity(rng):
    x = rng.normal(size=(3, 2, 4))
    full = expand_labels(x, (-2, -1))
    assert full.shape == (3, 3, 5)
    assert np.all(full[:, 0, :] == 0) and np.all(full[:, :, 0] == 0)
    assert np.array_equal(compact_labels(full, (-2, -1)), x)
    with pytest.raises(ValueError):
        compact_labels(np.ones((2, 3)), (-1,))


def test_parameters_round_trip(small_chain):
    p = init_parameters(small_chain, 0)
    q = Parameters.from_arrays(p.to_arrays())
    assert [n for n, _ in p.items()] == [n for n, _ in q.items()]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(p.tensors(), q.tensors()))
    assert np.array_equal(p.get("W:v->h1").data, p.pairwise["v->h1"].data)


# ------------------------------------------------------------- edge layouts

def _layout_edges(g, conn):
    p, q = g.layers[conn.source], g.layers[conn.target]
    src_ids = np.arange(p.n_nodes, dtype=float).reshape((1,) + p.node_shape + (1,))
    dst_ids = np.arange(q.n_nodes, dtype=float).reshape((1,) + q.node_shape + (1,))
    full = (1,) + edge_shape(g, conn) + (1,)
    a = np.broadcast_to(edge_array(src_ids, g, conn, "source"), full).ravel()
    b = np.broadcast_to(edge_array(dst_ids, g, conn, "target"), full).ravel()
    return sorted(zip(a.astype(int).tolist(), b.astype(int).tolist()))


def _explicit_edges(g, conn):
    p, q = g.layers[conn.source], g.layers[conn.target]
    return sorted((int(np.ravel_multi_index(a, p.node_shape)), int(np.ravel_multi_index(b, q.node_shape)))
                  for a, b, _ in enumerate_edges(g, conn))


@pytest.mark.parametrize("spec", [
    chain_spec([4, 3, 1], [2, 2, 3]),
    conv_spec("Conv", length=9, kernel=3, stride=2),
    conv_spec("Local", length=8, kernel=2, stride=3),
    {"layers": [
        {"name": "v", "role": "input", "channels": 2, "spatial": [5, 4], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 2, "labels": 2},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 2}],
     "connections": [{"from": "v", "to": "h", "kind": "Conv", "kernel": [2, 2], "stride": [2, 1],
                      "dilation": [1, 2]}, {"from": "h", "to": "y"}]},
])
def test_edge_layout_matches_explicit_edges(spec):
    g = build_graph(spec)
    assert sum(l.n_nodes for l in g.layers.values()) <= 50
    for conn in g.connections:
        assert _layout_edges(g, conn) == _explicit_edges(g, conn)


def test_conv_is_a_special_case_of_local(rng):
    gc = build_graph(conv_spec("Conv", length=9))
    gl = build_graph(conv_spec("Local", length=9))
    pc = random_parameters(gc, rng)
    s_q = gl.layers["h"].spatial
    arrays = pc.to_arrays()
    Wc = arrays["W:v->h"]
    arrays["W:v->h"] = np.repeat(Wc[:, :, :, None], s_q[0], axis=3)
    pl = Parameters.from_arrays(arrays)
    mc, ml = node_model(gc, pc), node_model(gl, pl)
    assert len(mc.edges) == len(ml.edges)
    for (i, j, E), (k, l, F) in zip(mc.edges, ml.edges):
        assert (i, j) == (k, l) and np.array_equal(E, F)
    clamps = random_clamps(gc, rng, batch=2)
    cfg = InferenceConfig("LBP", "Sequential", 3)
    a = run_inference(gc, pc, clamps, cfg).probabilities()
    b = run_inference(gl, pl, clamps, cfg).probabilities()
    assert np.allclose(a, b, atol=1e-13)


def test_zero_parameters_shapes(small_chain):
    z = zero_parameters(small_chain)
    assert z.unary["h1"].shape == (2, 2)
    assert z.pairwise["h1->y"].shape == (2, 1, 2, 2)
