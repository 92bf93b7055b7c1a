import numpy as np
import pytest

from lgm import ClampSpec, InferenceConfig, build_graph, compute_rho, init_parameters, run_inference
from lgm import tensor as T
from lgm.exact import exact_map, exact_marginals, node_model
from lgm.clamping import condition
from lgm.inference import (init_state, lbp_belief_update, lbp_message_update, softmax_full,
                           sweep_order)
from lgm.model import GraphError, zero_parameters
from lgm.verify import random_clamps, random_parameters

from conftest import chain_spec, conv_spec


def _single_edge(l_in=3, l_out=4):
    return build_graph(chain_spec([1, 1], [l_in, l_out], input_labels=l_in))


def _unobserved(graph, batch=1):
    name = graph.input_layers[0]
    shape = (batch,) + graph.layers[name].node_shape
    return ClampSpec.hard_labels(np.zeros(shape, int), name, observed=np.zeros(shape, bool))


# ------------------------------------------------------------------- state

def test_unclamped_binary_node_starts_uniform():
    g = build_graph(chain_spec([2, 1], [2, 3]))
    state = init_state(g, _unobserved(g))
    assert np.allclose(state.probabilities("v", g), 0.5)


def test_hard_clamped_node_shows_one_hot():
    g = build_graph(chain_spec([1, 1], [10, 2], input_labels=10))
    clamps = ClampSpec.hard_labels(np.array([[3]]), "v")
    state = init_state(g, clamps)
    assert np.array_equal(state.probabilities("v", g)[0, 0], np.eye(10)[3])


def test_clamp_on_non_input_layer_is_rejected(small_chain):
    with pytest.raises(ValueError, match="non-input"):
        init_state(small_chain, ClampSpec.hard_labels(np.zeros((1, 2), int), "h1"))


def test_zero_messages_give_unary_marginals(small_chain, rng):
    params = random_parameters(small_chain, rng)
    state = init_state(small_chain, _unobserved(small_chain))
    for layer in small_chain.layers:
        b = lbp_belief_update(state, small_chain, params, layer)
        expect = T.softmax_star(-params.unary[layer].data).data
        assert np.allclose(T.softmax_star(b).data[0], expect, atol=1e-15)


# --------------------------------------------------------------------- MF

def test_mf_with_zero_pairwise_is_unary_only(rng):
    g = build_graph(chain_spec([1, 1], [2, 2]))
    params = random_parameters(g, rng).map(lambda n, a: a * 0 if n.startswith("W") else a)
    res = run_inference(g, params, _unobserved(g), InferenceConfig("MF", "Sequential", 3))
    for layer in g.layers:
        assert np.allclose(res.beliefs[layer].data[0], -params.unary[layer].data)


def _linear_mf(model, order, sweeps=500):
    """Coordinate-ascent MF in the probability domain over an explicit node model."""
    q = [np.full(l, 1.0 / l) for l in model.labels]
    nbrs = {i: [] for i in range(len(model.nodes))}
    for i, j, E in model.edges:
        nbrs[i].append((j, E))
        nbrs[j].append((i, E.T))
    for _ in range(sweeps):
        for i in order:
            field = model.unary[i].copy()
            for j, E in nbrs[i]:
                field = field + E @ q[j]
            w = np.exp(-(field - field.min()))
            q[i] = w / w.sum()
    return q


def test_mf_fixed_point_matches_linear_domain_oracle(rng):
    for _ in range(5):
        g = build_graph(chain_spec([1, 1, 1], [3, 2, 4], input_labels=3))
        params = random_parameters(g, rng)
        res = run_inference(g, params, _unobserved(g), InferenceConfig("MF", "Sequential", 500))
        model = node_model(g, params)
        where = {n: k for k, n in enumerate(model.nodes)}
        order = [where[(layer, (0,))] for layer in sweep_order(g)]
        q = _linear_mf(model, order)
        for layer in g.layers:
            assert np.max(np.abs(res.probabilities(layer)[0, 0] - q[where[(layer, (0,))]])) < 1e-8


# --------------------------------------------------------------------- LBP

def test_zero_pairwise_sends_zero_messages(small_chain, rng):
    params = random_parameters(small_chain, rng).map(lambda n, a: a * 0 if n.startswith("W") else a)
    state = init_state(small_chain, _unobserved(small_chain))
    state.beliefs = {k: T.Tensor(rng.normal(size=v.shape)) for k, v in state.beliefs.items()}
    conn = small_chain.connections[1]
    for direction in ("forward", "backward"):
        m = lbp_message_update(state, small_chain, params, conn, direction)
        assert np.all(m.data == 0)


def test_clamp_at_implicit_label_contributes_nothing(rng):
    g = build_graph(chain_spec([3, 1], [2, 4]))
    params = random_parameters(g, rng)
    cond = condition(g, params, ClampSpec.hard_labels(np.zeros((1, 3), int), "v"))
    assert np.all(cond.shift["y"].data == 0)


def test_single_edge_belief_is_exact(rng):
    g = _single_edge(3, 4)
    for _ in range(10):
        params = random_parameters(g, rng)
        clamps = _unobserved(g)
        exact = exact_marginals(g, params, clamps)
        res = run_inference(g, params, clamps, InferenceConfig("LBP", "Sequential", 2))
        assert np.max(np.abs(res.probabilities("y")[0] - exact["y"])) < 1e-10
        assert np.max(np.abs(res.probabilities("v")[0] - exact["v"])) < 1e-10


def test_belief_without_messages_is_negative_unary(small_chain, rng):
    params = random_parameters(small_chain, rng)
    state = init_state(small_chain, ClampSpec.hard_labels(np.zeros((1, 4), int), "v"))
    # v is fully observed: h1 receives nothing from it, and y's messages are still zero
    b = lbp_belief_update(state, small_chain, params, "h1")
    assert np.array_equal(b.data[0], -params.unary["h1"].data)


def test_identical_messages_add_up(small_chain, rng):
    params = random_parameters(small_chain, rng)
    state = init_state(small_chain, _unobserved(small_chain))
    key = ("h1->y", "source")
    m = T.Tensor(rng.normal(size=state.messages[key].shape))
    once = dict(state.messages)
    once[key] = m
    twice = dict(once)
    twice[key] = T.add(m, m)
    base = lbp_belief_update(state, small_chain, params, "h1").data
    b1 = lbp_belief_update(state, small_chain, params, "h1", messages=once).data
    b2 = lbp_belief_update(state, small_chain, params, "h1", messages=twice).data
    assert np.allclose(b2 - base, 2 * (b1 - base), atol=1e-14)


def _clamped_tree():
    # inputs fully observed: the free part h(2) - y(1) is a star
    return build_graph(chain_spec([3, 2, 1], [2, 3, 4]))


@pytest.mark.parametrize("method", ["LBP", "TRW"])
def test_tree_with_clamped_inputs_is_exact_at_depth(method, rng):
    g = _clamped_tree()
    for _ in range(10):
        params = random_parameters(g, rng)
        clamps = ClampSpec.hard_labels(rng.integers(0, 2, (2, 3)), "v")
        res = run_inference(g, params, clamps, InferenceConfig(method, "Sequential", g.depth))
        for b in range(2):
            exact = exact_marginals(g, params, clamps, sample=b)
            assert np.max(np.abs(res.probabilities("y")[b] - exact["y"])) < 1e-8


def test_max_product_decodes_map_on_tree(rng):
    g = _clamped_tree()
    for _ in range(10):
        params = random_parameters(g, rng)
        clamps = ClampSpec.hard_labels(rng.integers(0, 2, (1, 3)), "v")
        res = run_inference(g, params, clamps, InferenceConfig("MaxProduct", "Sequential", g.depth))
        ref = exact_map(g, params, clamps)
        for layer in ("h1", "y"):
            assert np.array_equal(res.decode(layer)[0], ref[layer])


def test_max_product_breaks_ties_toward_lowest_label():
    g = build_graph(chain_spec([1, 1], [2, 3]))
    params = zero_parameters(g)
    clamps = ClampSpec.hard_labels(np.array([[1]]), "v")
    res = run_inference(g, params, clamps, InferenceConfig("MaxProduct", "Sequential", 1))
    assert res.decode("y")[0, 0] == 0


def test_depth_one_single_iteration_is_exact(rng):
    g = build_graph(chain_spec([5, 1], [2, 4]))
    params = random_parameters(g, rng)
    clamps = ClampSpec.soft_values(rng.random((3, 5)), "v")
    res = run_inference(g, params, clamps, InferenceConfig("LBP", "Sequential", 1))
    for b in range(3):
        exact = exact_marginals(g, params, clamps, sample=b)
        assert np.max(np.abs(res.probabilities("y")[b] - exact["y"])) < 1e-12


# --------------------------------------------------------------------- TRW

def test_trw_with_unit_rho_equals_lbp(rng):
    g = build_graph(conv_spec("Local"))
    params = random_parameters(g, rng)
    clamps = random_clamps(g, rng, batch=2)
    ones = {k: np.ones_like(v) for k, v in compute_rho(g).items()}
    for schedule in ("Sequential", "Parallel"):
        a = run_inference(g, params, clamps, InferenceConfig("LBP", schedule, 4))
        b = run_inference(g, params, clamps, InferenceConfig("TRW", schedule, 4), rho=ones)
        for layer in g.layers:
            assert np.array_equal(a.beliefs[layer].data, b.beliefs[layer].data)


def test_rho_single_dense_connection_to_one_node_output():
    g = build_graph(chain_spec([6, 1], [2, 10]))
    assert np.all(compute_rho(g)["v->y"] == 1.0)


def test_rho_on_small_chain(rng):
    g = build_graph(chain_spec([4, 2, 1], [2, 2, 3]))
    rho = compute_rho(g)
    assert np.all(rho["v->h1"] == 0.5)
    assert np.all(rho["h1->y"] == 1.0)
    params = random_parameters(g, rng)
    res = run_inference(g, params, _unobserved(g), InferenceConfig("TRW", "Sequential", 5))
    for layer in g.layers:
        p = res.probabilities(layer)
        assert np.all(p > 0) and np.allclose(p.sum(-1), 1.0)


def test_rho_dense_parent_of_100_nodes():
    g = build_graph(chain_spec([3, 100, 1], [2, 2, 2]))
    assert np.allclose(compute_rho(g)["v->h1"], 0.01)


def test_rho_conv_coverage_counts():
    spec = {"layers": [
        {"name": "v", "role": "input", "channels": 1, "spatial": [28], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 1, "labels": 2},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 2}],
        "connections": [{"from": "v", "to": "h", "kind": "Conv", "kernel": [5], "stride": [2]},
                        {"from": "h", "to": "y"}]}
    g = build_graph(spec)
    rho = compute_rho(g)["v->h"]            # (c_p, c_q, k, s_q)
    coverage = np.zeros(28)
    for o in range(12):
        coverage[2 * o:2 * o + 5] += 1
    for k in range(5):
        for o in range(12):
            assert rho[0, 0, k, o] == 1.0 / coverage[2 * o + k]
    assert set(np.unique(coverage[:24])) <= {1.0, 2.0, 3.0}
    assert set(np.unique(rho)) <= {1.0, 0.5, 1 / 3}


def test_trw_rejects_cyclic_layer_graph(rng):
    spec = chain_spec([2, 2, 2, 1], [2, 2, 2, 2])
    spec["connections"].append({"from": "h1", "to": "y"})
    g = build_graph(spec)
    params = random_parameters(g, rng)
    with pytest.raises(GraphError, match="tree"):
        run_inference(g, params, _unobserved(g), InferenceConfig("TRW", "Sequential", 2))
    # the other methods accept loops in the layer graph
    run_inference(g, params, _unobserved(g), InferenceConfig("LBP", "Parallel", 2))


# --------------------------------------------------------------- scheduling

@pytest.mark.parametrize("method", ["MF", "LBP", "TRW", "MaxProduct"])
@pytest.mark.parametrize("schedule", ["Sequential", "Parallel"])
def test_output_ignores_inputs_below_depth(method, schedule, rng):
    g = build_graph(chain_spec([4, 3, 2, 1], [2, 2, 3, 4]))
    params = random_parameters(g, rng)
    a = ClampSpec.hard_labels(rng.integers(0, 2, (1, 4)), "v")
    b = ClampSpec.hard_labels(1 - a.hard, "v")
    for t in range(1, g.depth):
        cfg = InferenceConfig(method, schedule, t)
        ya = run_inference(g, params, a, cfg).output.data
        yb = run_inference(g, params, b, cfg).output.data
        assert np.array_equal(ya, yb)
    cfg = InferenceConfig(method, schedule, g.depth + (schedule == "Parallel"))
    assert not np.array_equal(run_inference(g, params, a, cfg).output.data,
                              run_inference(g, params, b, cfg).output.data)


def test_repeated_runs_are_bit_identical(rng):
    g = build_graph(conv_spec("Conv"))
    params = random_parameters(g, rng)
    clamps = random_clamps(g, rng, batch=3, soft=True)
    for method in ("MF", "LBP", "TRW", "MaxProduct"):
        cfg = InferenceConfig(method, "Parallel", 3)
        a = run_inference(g, params, clamps, cfg)
        b = run_inference(g, params, clamps, cfg)
        for layer in g.layers:
            assert np.array_equal(a.beliefs[layer].data, b.beliefs[layer].data)


def test_sweep_goes_from_output_to_input(small_chain):
    assert sweep_order(small_chain) == ["y", "h1", "v"]


@pytest.mark.parametrize("kwargs", [dict(method="BP"), dict(schedule="Random"), dict(iterations=0)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        InferenceConfig(**kwargs)


def test_config_label():
    assert InferenceConfig("TRW", "Sequential", 5).label == "SeqTRW"
    assert InferenceConfig("MF", "Parallel", 5).label == "ParMF"


def test_filled_input_beliefs_match_oracle(rng):
    # unobserved input pixels get beliefs; on a tree they are exact
    g = build_graph(chain_spec([4, 1], [2, 3]))
    params = random_parameters(g, rng)
    observed = np.array([[True, False, True, False]])
    clamps = ClampSpec.soft_values(rng.random((1, 4)), "v", observed=observed)
    res = run_inference(g, params, clamps, InferenceConfig("LBP", "Sequential", 3))
    exact = exact_marginals(g, params, clamps)
    assert np.max(np.abs(res.probabilities("v")[0] - exact["v"])) < 1e-10


def test_softmax_full_matches_softmax_star(rng):
    b = rng.normal(size=(3, 4))
    full = softmax_full(b)
    assert np.allclose(full[:, 1:], T.softmax_star(b).data)
    assert np.allclose(full.sum(-1), 1.0)


def test_init_parameters_inference_runs_on_mininet():
    from lgm import mininet_spec
    g = build_graph(mininet_spec("Local"))
    params = init_parameters(g, 0)
    x = np.random.default_rng(0).random((2, 1, 28, 28))
    res = run_inference(g, params, ClampSpec.soft_values(x, "v"), InferenceConfig("TRW", "Sequential", 5))
    p = res.probabilities()
    assert p.shape == (2, 1, 10) and np.allclose(p.sum(-1), 1.0)
