"""Oracle-backed self checks, runnable from the command line.

Each check returns a :class:`CheckResult` carrying the largest error it
observed, so a report shows how much headroom each property has.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import inference as inf
from . import tensor as T
from .clamping import ClampSpec
from .exact import enumerate_edges, exact_map, exact_marginals, exact_mf_kl
from .inference import InferenceConfig, run_inference
from .model import Parameters, build_graph, flip, pairwise_shape
from .train import nll_loss, smooth_targets


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_error={self.max_error:.3e}  tol={self.tolerance:.0e}  {self.detail}"


# ------------------------------------------------------------ random models

def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def node_edges(graph):
    """Explicit node-level edge list ``[((layer, idx), (layer, idx)), ...]``."""
    out = []
    for conn in graph.connections:
        for a, b, _ in enumerate_edges(graph, conn):
            out.append(((conn.source, tuple(int(i) for i in a)),
                        (conn.target, tuple(int(i) for i in b))))
    return out


def is_node_forest(graph):
    edges = node_edges(graph)
    parent = {}
    for a, b in edges:
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = _find(parent, a), _find(parent, b)
        if ra == rb:
            return False
        parent[ra] = rb
    return True


def node_diameter(graph):
    """Longest shortest path (in edges) within any component of the node graph."""
    adj = {}
    for a, b in node_edges(graph):
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    best = 0
    for start in adj:
        dist, frontier = {start: 0}, [start]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        best = max(best, max(dist.values()))
    return best


def _random_layer_spec(rng, name, role, max_labels, soft_ok):
    labels = int(rng.integers(2, max_labels + 1))
    if role == "input" and soft_ok:
        labels = 2
    if role == "output":
        return {"name": name, "role": role, "channels": 1, "spatial": [], "labels": labels}
    if rng.random() < 0.4:
        return {"name": name, "role": role, "channels": 1,
                "spatial": [int(rng.integers(2, 6))], "labels": labels}
    return {"name": name, "role": role, "channels": int(rng.integers(1, 4)), "spatial": [],
            "labels": labels}


def random_tree_spec(rng, max_nodes=12, max_labels=4, soft_ok=False):
    """A random layered spec whose node graph is not checked yet."""
    n_layers = int(rng.integers(2, 5))
    out_idx = int(rng.integers(1, n_layers))
    layers = []
    for i in range(n_layers):
        role = "input" if i == 0 else "output" if i == out_idx else "hidden"
        layers.append(_random_layer_spec(rng, f"l{i}", role, max_labels, soft_ok))
    conns = []
    for i in range(1, n_layers):
        j = int(rng.integers(0, i))
        src, dst = layers[j], layers[i]
        if src["spatial"] and dst["role"] != "output" and rng.random() < 0.6:
            k = int(rng.integers(1, min(3, src["spatial"][0]) + 1))
            stride = int(rng.integers(1, 3))
            kind = "Conv" if rng.random() < 0.5 else "Local"
            dst["spatial"], dst["channels"] = None, 1
            conns.append({"from": src["name"], "to": dst["name"], "kind": kind,
                          "kernel": [k], "stride": [stride], "dilation": [1]})
        else:
            if dst["spatial"] is None:
                dst["spatial"] = []
            conns.append({"from": src["name"], "to": dst["name"], "kind": "Dense"})
    return {"layers": layers, "connections": conns}


def random_parameters(graph, rng, low=-2.0, high=2.0):
    unary = {n: rng.uniform(low, high, l.param_shape) for n, l in graph.layers.items()}
    pairwise = {c.key: rng.uniform(low, high, pairwise_shape(graph, c)) for c in graph.connections}
    return Parameters(unary, pairwise)


def random_clamps(graph, rng, batch=1, p_obs=0.5, soft=False):
    name = graph.input_layers[0]
    layer = graph.layers[name]
    shape = (batch,) + layer.node_shape
    observed = rng.random(shape) < p_obs
    if soft:
        return ClampSpec.soft_values(rng.random(shape), name, observed=observed)
    return ClampSpec.hard_labels(rng.integers(0, layer.labels, shape), name, observed=observed)


def random_tree_model(rng, max_nodes=12, max_labels=4, max_states=20000, tries=500):
    """Graph, parameters and clamps of a random LGM whose node graph is a forest."""
    for _ in range(tries):
        soft = bool(rng.random() < 0.3)
        try:
            graph = build_graph(random_tree_spec(rng, max_nodes, max_labels, soft))
        except ValueError:
            continue
        n = sum(l.n_nodes for l in graph.layers.values())
        states = np.prod([float(l.labels) ** l.n_nodes for l in graph.layers.values()])
        if n > max_nodes or states > max_states or not is_node_forest(graph):
            continue
        params = random_parameters(graph, rng)
        clamps = random_clamps(graph, rng, soft=soft)
        return graph, params, clamps
    raise RuntimeError("no valid random tree found")


# ------------------------------------------------------------------- checks

def _marginal_error(graph, result, exact):
    err = 0.0
    for name in graph.layers:
        err = max(err, float(np.abs(result.probabilities(name)[0] - exact[name]).max()))
    return err


def check_tree_exactness(n=200, seed=0, tol=1e-8, extra=1) -> list:
    """Sum-product marginals and max-product decoding against enumeration.

    Inference runs ``diameter + extra`` iterations.  Believes start at zero,
    so the first round of messages ignores the senders' unaries and one
    extra iteration is needed before every tree is solved exactly.
    """
    rng = np.random.default_rng(seed)
    errs = {"Sequential": 0.0, "Parallel": 0.0}
    map_fail = 0
    for _ in range(n):
        graph, params, clamps = random_tree_model(rng)
        d = max(node_diameter(graph), 1)
        exact = exact_marginals(graph, params, clamps)
        for schedule, iters in (("Sequential", d + extra), ("Parallel", d + extra)):
            res = run_inference(graph, params, clamps, InferenceConfig("LBP", schedule, iters))
            errs[schedule] = max(errs[schedule], _marginal_error(graph, res, exact))
        mp = run_inference(graph, params, clamps, InferenceConfig("MaxProduct", "Sequential", d + extra))
        ref = exact_map(graph, params, clamps)
        obs = clamps.observed[0]
        for name in graph.layers:
            got = mp.decode(name)[0]
            want = ref[name]
            if name == clamps.layer:
                got, want = got[~obs], want[~obs]
            map_fail += int(not np.array_equal(got, want))
    return [
        CheckResult("tree exactness SeqLBP", errs["Sequential"] < tol, errs["Sequential"], tol,
                    f"{n} trees, T=diameter+{extra}"),
        CheckResult("tree exactness ParLBP", errs["Parallel"] < tol, errs["Parallel"], tol,
                    f"{n} trees, T=diameter+{extra}"),
        CheckResult("tree MAP MaxProduct", map_fail == 0, float(map_fail), 0.5,
                    f"{map_fail} mismatching layers"),
    ]


def gradient_models():
    """Small graphs exercising Dense, Conv and Local connections and loops."""
    dense = {"layers": [
        {"name": "v", "role": "input", "channels": 5, "spatial": [], "labels": 2},
        {"name": "h", "role": "hidden", "channels": 3, "spatial": [], "labels": 3},
        {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 3}],
        "connections": [{"from": "v", "to": "h"}, {"from": "h", "to": "y"}]}
    patch = []
    for kind in ("Conv", "Local"):
        patch.append({"layers": [
            {"name": "v", "role": "input", "channels": 1, "spatial": [7], "labels": 2},
            {"name": "h", "role": "hidden", "channels": 2, "labels": 2},
            {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": 4}],
            "connections": [{"from": "v", "to": "h", "kind": kind, "kernel": [3], "stride": [2],
                             "dilation": [1]},
                            {"from": "h", "to": "y"}]})
    return [("dense", dense)] + [(s["connections"][0]["kind"].lower(), s) for s in patch]


def _loss(graph, params, clamps, targets, config):
    return nll_loss(run_inference(graph, params, clamps, config).output, targets)


def check_gradients(n_coords=120, seed=0, h=1e-4, tol=1e-4, floor=1e-5) -> CheckResult:
    """Tape gradients against central differences on random coordinates.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for label, spec in gradient_models():
        graph = build_graph(spec)
        for method in ("MF", "LBP", "TRW"):
            for schedule in ("Sequential", "Parallel"):
                cases.append((label, graph, method, schedule))
    per_case = int(np.ceil(n_coords / len(cases)))
    worst, count = 0.0, 0
    for label, graph, method, schedule in cases:
        params = random_parameters(graph, rng, -1.0, 1.0)
        clamps = random_clamps(graph, rng, batch=2, p_obs=0.7, soft=True)
        targets = smooth_targets(rng.integers(0, graph.output_layer.labels, 2),
                                 graph.output_layer.labels, 0.1)
        config = InferenceConfig(method, schedule, 3)
        leaves = params.requiring_grad()
        with T.Tape():
            loss = _loss(graph, leaves, clamps, targets, config)
        grads = T.backward(loss)
        arrays = params.to_arrays()
        names = sorted(arrays)
        for _ in range(per_case):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in arrays[name].shape)
            analytic = grads[leaves.get(name)][idx] if leaves.get(name) in grads else 0.0
            vals = []
            for sign in (1, -1):
                a = {k: v.copy() for k, v in arrays.items()}
                a[name][idx] += sign * h
                vals.append(_loss(graph, Parameters.from_arrays(a), clamps, targets, config).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
            count += 1
    return CheckResult("gradient finite-diff", worst < tol, worst, tol,
                       f"{count} coords, MF/LBP/TRW x Dense/Conv/Local")


def check_trw_reduction(n=20, seed=1) -> CheckResult:
    rng = np.random.default_rng(seed)
    diff = 0.0
    for k in range(n):
        graph, params, clamps = random_tree_model(rng)
        ones = {c: np.ones_like(r) for c, r in inf.compute_rho(graph).items()}
        for schedule in ("Sequential", "Parallel"):
            a = run_inference(graph, params, clamps, InferenceConfig("LBP", schedule, 4))
            b = run_inference(graph, params, clamps, InferenceConfig("TRW", schedule, 4), rho=ones)
            for name in graph.layers:
                if not np.array_equal(a.beliefs[name].data, b.beliefs[name].data):
                    diff = max(diff, float(np.abs(a.beliefs[name].data - b.beliefs[name].data).max()) or 1e-300)
    return CheckResult("TRW rho=1 equals LBP", diff == 0.0, diff, 0.0, "bitwise")


def check_clamp_endpoints(n=20, seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)
    diff = 0.0
    for _, spec in gradient_models():
        graph = build_graph(spec)
        for _ in range(n // 3 + 1):
            params = random_parameters(graph, rng)
            name = graph.input_layers[0]
            shape = (2,) + graph.layers[name].node_shape
            bits = rng.integers(0, 2, shape)
            observed = rng.random(shape) < 0.7
            hard = ClampSpec.hard_labels(bits, name, observed=observed)
            soft = ClampSpec.soft_values(bits.astype(float), name, observed=observed)
            for method in ("MF", "LBP", "TRW"):
                cfg = InferenceConfig(method, "Sequential", 3)
                a = run_inference(graph, params, hard, cfg)
                b = run_inference(graph, params, soft, cfg)
                for layer in graph.layers:
                    if not np.array_equal(a.beliefs[layer].data, b.beliefs[layer].data):
                        diff = max(diff, float(np.abs(a.beliefs[layer].data -
                                                      b.beliefs[layer].data).max()) or 1e-300)
    return CheckResult("soft q in {0,1} equals hard", diff == 0.0, diff, 0.0, "bitwise")


def check_flip(seed=3) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _, spec in gradient_models():
        graph = build_graph(spec)
        for conn in graph.connections:
            W = rng.normal(size=pairwise_shape(graph, conn))
            bad += int(not np.array_equal(flip(flip(W, graph, conn), graph, conn), W))
    return CheckResult("flip involution", bad == 0, float(bad), 0.0, "bitwise")


def random_small_graph(rng, max_states=4096):
    """Random (possibly loopy) dense chain small enough to enumerate."""
    for _ in range(200):
        sizes = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 3)))]
        labels = [int(rng.integers(2, 4)) for _ in sizes]
        layers = [{"name": "v", "role": "input", "channels": int(rng.integers(1, 4)), "spatial": [],
                   "labels": 2}]
        layers += [{"name": f"h{i}", "role": "hidden", "channels": s, "spatial": [], "labels": l}
                   for i, (s, l) in enumerate(zip(sizes, labels))]
        layers.append({"name": "y", "role": "output", "channels": 1, "spatial": [],
                       "labels": int(rng.integers(2, 5))})
        conns = [{"from": a["name"], "to": b["name"]} for a, b in zip(layers, layers[1:])]
        graph = build_graph({"layers": layers, "connections": conns})
        states = np.prod([float(l.labels) ** l.n_nodes for l in graph.layers.values()])
        if states <= max_states:
            return graph
    raise RuntimeError("no small graph found")


def check_mf_monotone(n=50, seed=4, tol=1e-9, sweeps=6) -> CheckResult:
    """Sequential MF sweeps never increase the exact KL(Q || P)."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n):
        graph = random_small_graph(rng)
        params = random_parameters(graph, rng)
        clamps = random_clamps(graph, rng, p_obs=0.5)
        cond = inf.condition(graph, params, clamps)
        state = inf.init_state(graph, None, batch=1, cond=cond)
        kl = exact_mf_kl(graph, params, {k: v.data for k, v in state.beliefs.items()}, clamps)
        for _ in range(sweeps):
            for layer in inf.sweep_order(graph):
                if not state.active(layer):
                    continue
                state.beliefs[layer] = inf.mf_update(state, graph, params, layer)
                new = exact_mf_kl(graph, params, {k: v.data for k, v in state.beliefs.items()},
                                  clamps)
                worst = max(worst, new - kl)
                kl = new
    return CheckResult("MF KL monotone", worst <= tol, max(worst, 0.0), tol,
                       f"{n} graphs, per-layer updates")


def run_all(quick=False) -> list:
    results = []
    results += check_tree_exactness(n=40 if quick else 200)
    results.append(check_gradients(n_coords=36 if quick else 120))
    results.append(check_trw_reduction())
    results.append(check_clamp_endpoints())
    results.append(check_flip())
    results.append(check_mf_monotone(n=15 if quick else 50))
    return results


def report(results) -> str:
    return "\n".join(r.line() for r in results)
