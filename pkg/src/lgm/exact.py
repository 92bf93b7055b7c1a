"""Brute-force enumeration over small layered models.

The node-level model is built with explicit loops over edges, independently
of the tensor layout used by inference, so it can serve as ground truth.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .clamping import ClampSpec
from .model import LgmGraph, Parameters

MAX_STATES = 10 ** 6


class StateSpaceTooLarge(ValueError):
    pass


@dataclass
class NodeModel:
    """Explicit pairwise model with full (uncompacted) energy tables."""

    nodes: list          # (layer, index tuple)
    labels: list
    unary: list          # arrays of length labels[i]
    edges: list          # (i, j, array (labels[i], labels[j]))

    def index(self):
        return {n: k for k, n in enumerate(self.nodes)}


def enumerate_edges(graph: LgmGraph, conn):
    """Yield ``(source_node, target_node, weight_index)`` for every edge of ``conn``.

    Nodes are index tuples ``(channel, *position)``; ``weight_index`` selects
    the compact ``(L_p, L_q)`` block of the stored pairwise tensor.
    """
    p, q = graph.layers[conn.source], graph.layers[conn.target]
    if conn.kind == "Dense":
        for a in range(p.n_nodes):
            for b in range(q.n_nodes):
                yield (np.unravel_index(a, p.node_shape), np.unravel_index(b, q.node_shape), (a, b))
        return
    for cp in range(p.channels):
        for cq in range(q.channels):
            for off in itertools.product(*(range(k) for k in conn.kernel)):
                for out in itertools.product(*(range(s) for s in q.spatial)):
                    pos = tuple(o * st + k * d for o, k, st, d in
                                zip(out, off, conn.stride, conn.dilation))
                    widx = (cp, cq) + off if conn.kind == "Conv" else (cp, cq) + off + out
                    yield ((cp,) + pos, (cq,) + out, widx)


def node_model(graph: LgmGraph, params: Parameters) -> NodeModel:
    nodes, labels, unary = [], [], []
    for name, layer in graph.layers.items():
        V = np.asarray(params.unary[name].data)
        for idx in itertools.product(*(range(s) for s in layer.node_shape)):
            nodes.append((name, tuple(int(i) for i in idx)))
            labels.append(layer.labels)
            unary.append(np.concatenate([[0.0], V[idx]]))
    where = {n: k for k, n in enumerate(nodes)}
    edges = []
    for conn in graph.connections:
        W = np.asarray(params.pairwise[conn.key].data)
        for a, b, widx in enumerate_edges(graph, conn):
            E = np.zeros((graph.layers[conn.source].labels, graph.layers[conn.target].labels))
            E[1:, 1:] = W[widx]
            edges.append((where[(conn.source, tuple(int(i) for i in a))],
                          where[(conn.target, tuple(int(i) for i in b))], E))
    return NodeModel(nodes, labels, unary, edges)


def _observations(model: NodeModel, clamps, sample):
    """Map node index -> full label distribution for observed nodes."""
    obs = {}
    if clamps is None:
        return obs
    for spec in [clamps] if isinstance(clamps, ClampSpec) else clamps:
        for k, (layer, idx) in enumerate(model.nodes):
            if layer != spec.layer:
                continue
            key = (sample,) + idx
            dist = np.zeros(model.labels[k])
            if spec.hard is not None and spec.hard[key] >= 0:
                dist[spec.hard[key]] = 1.0
            elif spec.soft is not None and not np.isnan(spec.soft[key]):
                dist[0], dist[1] = 1.0 - spec.soft[key], spec.soft[key]
            else:
                continue
            obs[k] = dist
    return obs


@dataclass
class JointTable:
    free: list              # node indices of the enumerated (free) nodes
    assignments: np.ndarray  # (S, len(free)) labels, lexicographic order
    logw: np.ndarray         # unnormalized log-weights
    log_z: float
    model: NodeModel

    @property
    def probabilities(self):
        return np.exp(self.logw - self.log_z)


def joint_table(graph: LgmGraph, params: Parameters, clamps=None, sample=0,
                order=None) -> JointTable:
    """Enumerate all assignments of unobserved nodes.

    Observed nodes contribute their expected pairwise energies to free
    neighbours.  ``order`` permutes the free nodes before enumeration.
    """
    model = node_model(graph, params)
    obs = _observations(model, clamps, sample)
    free = [k for k in range(len(model.nodes)) if k not in obs]
    if order is not None:
        free = [free[i] for i in order]
    sizes = [model.labels[k] for k in free]
    n_states = int(np.prod(sizes, dtype=np.float64)) if sizes else 1
    if n_states > MAX_STATES:
        raise StateSpaceTooLarge(f"{n_states} joint states exceed the limit of {MAX_STATES}")
    assign = np.array(np.unravel_index(np.arange(n_states), sizes)).T if sizes \
        else np.zeros((1, 0), dtype=np.int64)
    col = {k: c for c, k in enumerate(free)}
    unary = [u.copy() for u in model.unary]
    logw = np.zeros(n_states)
    for i, j, E in model.edges:
        if i in obs and j in obs:
            continue
        if i in obs:
            unary[j] = unary[j] + obs[i] @ E
        elif j in obs:
            unary[i] = unary[i] + E @ obs[j]
        else:
            logw -= E[assign[:, col[i]], assign[:, col[j]]]
    for k in free:
        logw -= unary[k][assign[:, col[k]]]
    return JointTable(free, assign, logw, float(logsumexp(logw)), model)


def exact_marginals(graph: LgmGraph, params: Parameters, clamps=None, sample=0) -> dict:
    """Conditional marginals per layer, shaped ``(*node_shape, labels)``.

    Observed nodes report their clamp distribution.
    """
    table = joint_table(graph, params, clamps, sample)
    model = table.model
    p = table.probabilities
    obs = _observations(model, clamps, sample)
    out = {n: np.zeros(l.node_shape + (l.labels,)) for n, l in graph.layers.items()}
    col = {k: c for c, k in enumerate(table.free)}
    for k, (layer, idx) in enumerate(model.nodes):
        if k in obs:
            out[layer][idx] = obs[k]
        else:
            out[layer][idx] = np.bincount(table.assignments[:, col[k]], weights=p,
                                          minlength=model.labels[k])
    return out


def exact_nll(graph: LgmGraph, params: Parameters, clamps, target: int, sample=0) -> float:
    """``-log P(y = target | observations)`` as a difference of two log-sums."""
    table = joint_table(graph, params, clamps, sample)
    y = graph.output_layer.name
    k = next(i for i, (layer, _) in enumerate(table.model.nodes) if layer == y)
    c = table.free.index(k)
    hit = table.assignments[:, c] == target
    return float(table.log_z - logsumexp(table.logw[hit]))


def exact_map(graph: LgmGraph, params: Parameters, clamps=None, sample=0) -> dict:
    """Most probable joint assignment of the free nodes, per layer.

    Ties go to the lexicographically smallest assignment.  Observed nodes
    report their hard label (or -1 if soft).
    """
    table = joint_table(graph, params, clamps, sample)
    best = table.assignments[int(np.argmax(table.logw))]
    model = table.model
    obs = _observations(model, clamps, sample)
    out = {n: np.full(l.node_shape, -1, dtype=np.int64) for n, l in graph.layers.items()}
    col = {k: c for c, k in enumerate(table.free)}
    for k, (layer, idx) in enumerate(model.nodes):
        if k in obs:
            d = obs[k]
            out[layer][idx] = int(np.argmax(d)) if d.max() == 1.0 else -1
        else:
            out[layer][idx] = best[col[k]]
    return out


def exact_mf_kl(graph: LgmGraph, params: Parameters, beliefs: dict, clamps=None,
                sample=0) -> float:
    """KL(Q || P) for the product distribution Q of compact log-beliefs.

    ``beliefs[layer]`` has the batched shape ``(B, *node_shape, L)``.
    """
    table = joint_table(graph, params, clamps, sample)
    logq = np.zeros(len(table.logw))
    for c, k in enumerate(table.free):
        layer, idx = table.model.nodes[k]
        b = np.concatenate([[0.0], np.asarray(beliefs[layer])[(sample,) + idx]])
        logb = b - logsumexp(b)
        logq += logb[table.assignments[:, c]]
    q = np.exp(logq)
    logp = table.logw - table.log_z
    return float(np.sum(q * (logq - logp)))
