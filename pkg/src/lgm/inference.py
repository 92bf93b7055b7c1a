"""Truncated variational inference in the compact log domain.

Believes ``B[p]`` have the shape of ``V[p]`` (batched).  Messages live in
the edge layout of their connection: ``M[(key, side)]`` is the message
into endpoint ``side`` and has shape ``(B, *edges, L_side)``.  Both carry
only the explicit labels; the implicit label is fixed at 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .clamping import ClampSpec, EffectiveEnergies, condition
from .model import (Connection, GraphError, LgmGraph, Parameters, edge_array, edge_shape,
                    from_edges, to_edges, weights_to_edges)
from .tensor import Tensor

METHODS = ("MF", "LBP", "TRW", "MaxProduct")
SCHEDULES = ("Parallel", "Sequential")


@dataclass(frozen=True)
class InferenceConfig:
    method: str = "LBP"
    schedule: str = "Sequential"
    iterations: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def label(self):
        return ("Seq" if self.schedule == "Sequential" else "Par") + self.method


def _opposite(side):
    return "target" if side == "source" else "source"


def _side(conn: Connection, layer):
    return "source" if conn.source == layer else "target"


@dataclass
class InferenceState:
    beliefs: dict
    messages: dict
    cond: EffectiveEnergies = field(default_factory=EffectiveEnergies)
    batch: int = 1
    rho: dict | None = None
    _masks: dict = field(default_factory=dict, repr=False)

    def active(self, layer):
        return not self.cond.fully_observed(layer)

    def free_edges(self, graph, conn, side):
        """Free-node mask of endpoint ``side`` in edge layout, or ``None``."""
        layer = conn.source if side == "source" else conn.target
        free = self.cond.free_mask(layer)
        if free is None:
            return None
        key = (conn.key, side)
        if key not in self._masks:
            self._masks[key] = edge_array(free[..., None].astype(float), graph, conn, side)
        return self._masks[key]

    def probabilities(self, layer, graph: LgmGraph):
        """Full label distributions ``(B, *nodes, labels)``; observed nodes show their clamp."""
        b = self.beliefs[layer].data
        p = softmax_full(b)
        if layer in self.cond.specs:
            spec = self.cond.specs[layer]
            obs = spec.observed
            p = np.where(obs[..., None], spec.observed_probabilities(graph.layers[layer].labels), p)
        return p


def softmax_full(b):
    """Complete compact log-beliefs with the implicit label and normalize."""
    b = np.asarray(b)
    full = np.concatenate([np.zeros(b.shape[:-1] + (1,)), b], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def _batch_of(clamps):
    if clamps is None:
        return 1
    if isinstance(clamps, ClampSpec):
        return clamps.batch
    return max((c.batch for c in clamps), default=1)


def init_state(graph: LgmGraph, clamps=None, batch=None, cond=None) -> InferenceState:
    """Zero beliefs and messages; observed nodes are recorded as folded away."""
    if clamps is not None:
        for spec in [clamps] if isinstance(clamps, ClampSpec) else clamps:
            if spec.layer not in graph.layers or graph.layers[spec.layer].role != "input":
                raise ValueError(f"clamp on non-input layer {spec.layer!r}")
    if batch is None:
        batch = cond.batch if cond is not None and cond.batch else _batch_of(clamps)
    if cond is None:
        cond = EffectiveEnergies(observed={s.layer: s.observed for s in
                                           ([clamps] if isinstance(clamps, ClampSpec) else clamps or [])},
                                 specs={s.layer: s for s in
                                        ([clamps] if isinstance(clamps, ClampSpec) else clamps or [])},
                                 batch=batch)
    beliefs = {n: Tensor(np.zeros((batch,) + l.param_shape)) for n, l in graph.layers.items()}
    messages = {}
    for conn in graph.connections:
        for side in ("source", "target"):
            layer = graph.layers[conn.source if side == "source" else conn.target]
            sender = conn.target if side == "source" else conn.source
            if cond.fully_observed(sender):
                continue
            messages[(conn.key, side)] = Tensor(
                np.zeros((batch,) + edge_shape(graph, conn) + (layer.labels - 1,)))
    return InferenceState(beliefs, messages, cond, batch)


# --------------------------------------------------------------------- updates

def _neg_unary(state, graph, params, layer):
    return T.neg(state.cond.adjusted_unary(layer, params))


def mf_update(state: InferenceState, graph: LgmGraph, params: Parameters, layer: str,
              beliefs=None) -> Tensor:
    """Mean-field belief of ``layer`` from the neighbours' current beliefs."""
    beliefs = state.beliefs if beliefs is None else beliefs
    B = _neg_unary(state, graph, params, layer)
    for conn, other in graph.neighbors(layer):
        if not state.active(other):
            continue
        src_side = _side(conn, other)
        S = T.softmax_star(beliefs[other], axis=-1)
        S_e = to_edges(S, graph, conn, src_side)
        free = state.free_edges(graph, conn, src_side)
        if free is not None:
            S_e = T.mul(S_e, free)
        W = weights_to_edges(params.pairwise[conn.key], conn)
        if src_side == "source":
            C = T.sum(T.mul(W, T.expand_dims(S_e, -1)), axis=-2)
        else:
            C = T.sum(T.mul(W, T.expand_dims(S_e, -2)), axis=-1)
        B = T.sub(B, from_edges(C, graph, conn, _opposite(src_side)))
    return B


def lbp_message_update(state: InferenceState, graph: LgmGraph, params: Parameters,
                       conn: Connection, direction: str, max_product=False,
                       rho=None, beliefs=None, messages=None) -> Tensor:
    """New message along ``conn``; ``direction`` is ``"forward"`` (source to
    target) or ``"backward"``."""
    beliefs = state.beliefs if beliefs is None else beliefs
    messages = state.messages if messages is None else messages
    sender = "source" if direction == "forward" else "target"
    send_layer = conn.source if sender == "source" else conn.target
    reduce = T.relu_max_star if max_product else T.logsumexp_star

    cavity = T.sub(to_edges(beliefs[send_layer], graph, conn, sender),
                   messages[(conn.key, sender)])
    W = weights_to_edges(params.pairwise[conn.key], conn)
    if rho is not None:
        W = T.mul(W, 1.0 / rho[conn.key][..., None, None])
    if sender == "source":
        inner = T.sub(T.expand_dims(cavity, -1), W)
        msg = reduce(inner, axis=-2)
    else:
        inner = T.sub(T.expand_dims(cavity, -2), W)
        msg = reduce(inner, axis=-1)
    msg = T.sub(msg, T.expand_dims(reduce(cavity, axis=-1), -1))
    free = state.free_edges(graph, conn, sender)
    if free is not None:
        msg = T.mul(msg, free)
    return msg


def lbp_belief_update(state: InferenceState, graph: LgmGraph, params: Parameters, layer: str,
                      rho=None, messages=None) -> Tensor:
    messages = state.messages if messages is None else messages
    B = _neg_unary(state, graph, params, layer)
    for conn, other in graph.neighbors(layer):
        if not state.active(other):
            continue
        side = _side(conn, layer)
        M = messages[(conn.key, side)]
        if rho is not None:
            M = T.mul(M, rho[conn.key][..., None])
        B = T.add(B, from_edges(M, graph, conn, side))
    return B


def trw_updates(state: InferenceState, graph: LgmGraph, params: Parameters, rho,
                layer: str, max_product=False) -> InferenceState:
    """One sequential TRW step for ``layer``: incoming messages, then its belief."""
    for conn, other in graph.neighbors(layer):
        if state.active(other):
            direction = "forward" if conn.source == other else "backward"
            state.messages[(conn.key, _side(conn, layer))] = lbp_message_update(
                state, graph, params, conn, direction, max_product, rho)
    state.beliefs[layer] = lbp_belief_update(state, graph, params, layer, rho)
    return state


def compute_rho(graph: LgmGraph) -> dict:
    """Edge appearance probabilities rooted at the output layer.

    Each node of a child layer picks one of its parent-layer neighbours
    uniformly and independently, so an edge appears with probability one
    over the child node's parent degree.
    """
    if not graph.is_layer_tree():
        raise GraphError("TRW requires a tree-structured layer graph")
    depth = graph.distances_from(graph.output_layer.name)
    rho = {}
    for conn in graph.connections:
        child_side = "source" if depth[conn.source] > depth[conn.target] else "target"
        ones = Tensor(np.ones((1,) + edge_shape(graph, conn) + (1,)))
        degree = from_edges(ones, graph, conn, child_side).data
        deg_e = edge_array(degree, graph, conn, child_side)[0, ..., 0]
        deg_e = np.broadcast_to(deg_e, edge_shape(graph, conn))
        rho[conn.key] = np.where(deg_e > 0, 1.0 / np.maximum(deg_e, 1.0), 1.0)
    return rho


# ------------------------------------------------------------------ scheduling

def sweep_order(graph: LgmGraph):
    """Layers sorted from the output layer toward the input layer."""
    dist = graph.distances_from(graph.output_layer.name)
    names = list(graph.layers)
    return sorted(names, key=lambda n: (dist[n], names.index(n)))


def _sequential_step(state, graph, params, config, rho):
    mp = config.method == "MaxProduct"
    for layer in sweep_order(graph):
        if not state.active(layer):
            continue
        if config.method == "MF":
            state.beliefs[layer] = mf_update(state, graph, params, layer)
            continue
        for conn, other in graph.neighbors(layer):
            if state.active(other):
                direction = "forward" if conn.source == other else "backward"
                state.messages[(conn.key, _side(conn, layer))] = lbp_message_update(
                    state, graph, params, conn, direction, mp, rho)
        state.beliefs[layer] = lbp_belief_update(state, graph, params, layer, rho)


def _parallel_step(state, graph, params, config, rho):
    mp = config.method == "MaxProduct"
    active = [n for n in graph.layers if state.active(n)]
    if config.method == "MF":
        old = dict(state.beliefs)
        for layer in active:
            state.beliefs[layer] = mf_update(state, graph, params, layer, beliefs=old)
        return
    old_b, old_m = dict(state.beliefs), dict(state.messages)
    for conn in graph.connections:
        for direction, sender, receiver, recv_layer in (
                ("forward", conn.source, "target", conn.target),
                ("backward", conn.target, "source", conn.source)):
            if state.active(sender) and state.active(recv_layer):
                state.messages[(conn.key, receiver)] = lbp_message_update(
                    state, graph, params, conn, direction, mp, rho, old_b, old_m)
    for layer in active:
        state.beliefs[layer] = lbp_belief_update(state, graph, params, layer, rho)


@dataclass
class InferenceResult:
    beliefs: dict
    state: InferenceState
    graph: LgmGraph

    def probabilities(self, layer=None):
        return self.state.probabilities(layer or self.graph.output_layer.name, self.graph)

    @property
    def output(self) -> Tensor:
        return self.beliefs[self.graph.output_layer.name]

    def decode(self, layer=None):
        """Most probable label per node; ties go to the lowest label."""
        return np.argmax(self.probabilities(layer), axis=-1)


def run_inference(graph: LgmGraph, params: Parameters, clamps, config: InferenceConfig,
                  cond: EffectiveEnergies | None = None, rho=None) -> InferenceResult:
    """Run exactly ``config.iterations`` steps of the configured method.

    ``cond`` may carry a precomputed conditioning (e.g. one that also clamps
    the output layer); otherwise it is derived from ``clamps``.
    """
    if cond is None:
        cond = condition(graph, params, clamps)
    state = init_state(graph, None, batch=max(cond.batch, _batch_of(clamps)), cond=cond)
    if config.method == "TRW":
        state.rho = rho if rho is not None else compute_rho(graph)
    step = _sequential_step if config.schedule == "Sequential" else _parallel_step
    for _ in range(config.iterations):
        step(state, graph, params, config, state.rho)
    return InferenceResult(dict(state.beliefs), state, graph)
