"""Layered graph topology and compact energy parameters.

A graph is a set of homogeneous layers joined by Dense, Conv or Local
connections.  Energies are stored in compact form: label 0 of every node is
the implicit label whose unary energy and pairwise slices are fixed at zero
and never stored.

Shapes (``L = labels - 1``):

* unary ``V[p]``: ``(c, *s, L_p)``; a flat layer has ``s = ()`` and ``c = n``.
* Dense ``W[p->q]``: ``(n_p, n_q, L_p, L_q)``
* Conv ``W[p->q]``: ``(c_p, c_q, *k, L_p, L_q)``
* Local ``W[p->q]``: ``(c_p, c_q, *k, *s_q, L_p, L_q)``

For Conv/Local the target layer ``q`` is the patch side: node ``(c_q, o)``
touches source nodes ``(c_p, o * stride + k * dilation)`` for every kernel
offset ``k``.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROLES = ("input", "hidden", "output")
KINDS = ("Dense", "Conv", "Local")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    name: str
    role: str
    channels: int
    spatial: tuple = ()
    labels: int = 2

    @property
    def node_shape(self):
        return (self.channels,) + tuple(self.spatial)

    @property
    def n_nodes(self):
        return int(np.prod(self.node_shape))

    @property
    def param_shape(self):
        return self.node_shape + (self.labels - 1,)


@dataclass(frozen=True)
class Connection:
    source: str
    target: str
    kind: str = "Dense"
    kernel: tuple = ()
    stride: tuple = ()
    dilation: tuple = ()

    @property
    def key(self):
        return f"{self.source}->{self.target}"

    def other(self, name):
        return self.target if name == self.source else self.source


@dataclass
class LgmGraph:
    layers: dict
    connections: list
    depth: int = field(init=False)

    def __post_init__(self):
        self.depth = self.distance(self.input_layers, self.output_layer.name)

    @property
    def output_layer(self) -> Layer:
        return next(l for l in self.layers.values() if l.role == "output")

    @property
    def input_layers(self):
        return [l.name for l in self.layers.values() if l.role == "input"]

    def neighbors(self, name):
        """``(connection, other_layer_name)`` pairs incident to layer ``name``."""
        return [(c, c.other(name)) for c in self.connections if name in (c.source, c.target)]

    def connection(self, key) -> Connection:
        return next(c for c in self.connections if c.key == key)

    def distance(self, sources, target):
        dist = self.distances_from(sources)
        if target not in dist:
            raise GraphError(f"layer {target!r} unreachable")
        return dist[target]

    def distances_from(self, sources):
        if isinstance(sources, str):
            sources = [sources]
        dist = {s: 0 for s in sources}
        queue = deque(sources)
        while queue:
            u = queue.popleft()
            for _, v in self.neighbors(u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def is_layer_tree(self):
        return len(self.connections) == len(self.layers) - 1 and \
            len(self.distances_from(next(iter(self.layers)))) == len(self.layers)

    def to_spec(self):
        layers = [{"name": l.name, "role": l.role, "channels": l.channels,
                   "spatial": list(l.spatial), "labels": l.labels} for l in self.layers.values()]
        conns = []
        for c in self.connections:
            d = {"from": c.source, "to": c.target, "kind": c.kind}
            if c.kind != "Dense":
                d.update(kernel=list(c.kernel), stride=list(c.stride), dilation=list(c.dilation))
            conns.append(d)
        return {"layers": layers, "connections": conns}


def build_graph(spec, require_tree: bool = False) -> LgmGraph:
    """Validate a GraphSpec (dict, JSON string or path) into an :class:`LgmGraph`.

    A Conv/Local target layer may omit ``spatial``; it is then computed from
    the source shape and the patch geometry.
    """
    if isinstance(spec, (str, Path)):
        text = spec if str(spec).lstrip().startswith("{") else Path(spec).read_text()
        spec = json.loads(text)
    raw_layers = spec.get("layers", [])
    names = [l["name"] for l in raw_layers]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise GraphError(f"duplicate layer name {dup!r}")
    pending = {l["name"]: dict(l) for l in raw_layers}
    for l in pending.values():
        if l.get("role") not in ROLES:
            raise GraphError(f"layer {l['name']!r}: role must be one of {ROLES}")
        if int(l.get("labels", 2)) < 2:
            raise GraphError(f"layer {l['name']!r}: needs at least 2 labels")
        if int(l.get("channels", 1)) < 1:
            raise GraphError(f"layer {l['name']!r}: channels must be positive")

    conns = []
    seen = set()
    for c in spec.get("connections", []):
        src, dst = c["from"], c["to"]
        for end in (src, dst):
            if end not in pending:
                raise GraphError(f"connection endpoint {end!r} is not a layer")
        if src == dst:
            raise GraphError(f"intra-layer connection on {src!r}")
        pair = frozenset((src, dst))
        if pair in seen:
            raise GraphError(f"duplicate connection between {src!r} and {dst!r}")
        seen.add(pair)
        kind = c.get("kind", "Dense")
        if kind not in KINDS:
            raise GraphError(f"unknown connection kind {kind!r}")
        if kind == "Dense":
            conns.append(Connection(src, dst, "Dense"))
            continue
        kernel = tuple(int(k) for k in c["kernel"])
        d = len(kernel)
        stride = tuple(int(v) for v in c.get("stride") or (1,) * d)
        dilation = tuple(int(v) for v in c.get("dilation") or (1,) * d)
        if not (len(stride) == len(dilation) == d):
            raise GraphError(f"{src}->{dst}: kernel/stride/dilation ranks differ")
        conns.append(Connection(src, dst, kind, kernel, stride, dilation))

    # resolve spatial shapes of patch targets in declaration order
    for _ in range(len(conns) + 1):
        for c in conns:
            if c.kind == "Dense":
                continue
            s_src = pending[c.source].get("spatial")
            if s_src is None:
                continue
            if len(s_src) != len(c.kernel):
                raise GraphError(f"{c.key}: kernel rank {len(c.kernel)} vs source rank {len(s_src)}")
            try:
                expect = T.unfold_output_shape(s_src, c.kernel, c.stride, c.dilation)
            except ValueError as e:
                raise GraphError(f"{c.key}: {e}") from e
            tgt = pending[c.target]
            if tgt.get("spatial") is None:
                tgt["spatial"] = list(expect)
            elif tuple(tgt["spatial"]) != expect:
                raise GraphError(f"{c.key}: target spatial shape {tuple(tgt['spatial'])} "
                                 f"does not match patch grid {expect}")
    layers = {}
    for n in names:
        l = pending[n]
        if l.get("spatial") is None:
            raise GraphError(f"layer {n!r}: spatial shape undetermined")
        layers[n] = Layer(n, l["role"], int(l.get("channels", 1)),
                          tuple(int(s) for s in l["spatial"]), int(l.get("labels", 2)))

    outputs = [l for l in layers.values() if l.role == "output"]
    if len(outputs) != 1:
        raise GraphError(f"expected exactly one output layer, found {len(outputs)}")
    if not any(l.role == "input" for l in layers.values()):
        raise GraphError("no input layer")
    graph = LgmGraph.__new__(LgmGraph)
    graph.layers, graph.connections = layers, conns
    reach = graph.distances_from(graph.input_layers)
    missing = [n for n in layers if n not in reach]
    if missing:
        raise GraphError(f"dangling layer(s) not reachable from the input: {missing}")
    graph.depth = reach[graph.output_layer.name]
    if require_tree and not graph.is_layer_tree():
        raise GraphError("layer graph is not a tree")
    return graph


def dense_chain_spec(hidden=(100,), input_nodes=784, input_labels=2, hidden_labels=2,
                     classes=10):
    """Sequential dense model: input -> hidden... -> output."""
    layers = [{"name": "v", "role": "input", "channels": input_nodes, "spatial": [],
               "labels": input_labels}]
    for i, n in enumerate(hidden):
        layers.append({"name": f"h{i + 1}", "role": "hidden", "channels": n, "spatial": [],
                       "labels": hidden_labels})
    layers.append({"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": classes})
    conns = [{"from": a["name"], "to": b["name"], "kind": "Dense"}
             for a, b in zip(layers, layers[1:])]
    return {"layers": layers, "connections": conns}


def mininet_spec(kind="Conv", input_labels=2, hidden_labels=2, dense_hidden=100, classes=10):
    """Two 5x5 stride-2 patch connections (28->12->4) then a dense head."""
    return {
        "layers": [
            {"name": "v", "role": "input", "channels": 1, "spatial": [28, 28], "labels": input_labels},
            {"name": "h1", "role": "hidden", "channels": 8, "spatial": [12, 12], "labels": hidden_labels},
            {"name": "h2", "role": "hidden", "channels": 16, "spatial": [4, 4], "labels": hidden_labels},
            {"name": "h3", "role": "hidden", "channels": dense_hidden, "spatial": [], "labels": hidden_labels},
            {"name": "y", "role": "output", "channels": 1, "spatial": [], "labels": classes},
        ],
        "connections": [
            {"from": "v", "to": "h1", "kind": kind, "kernel": [5, 5], "stride": [2, 2], "dilation": [1, 1]},
            {"from": "h1", "to": "h2", "kind": kind, "kernel": [5, 5], "stride": [2, 2], "dilation": [1, 1]},
            {"from": "h2", "to": "h3", "kind": "Dense"},
            {"from": "h3", "to": "y", "kind": "Dense"},
        ],
    }


# ------------------------------------------------------------------ parameters

def pairwise_shape(graph: LgmGraph, conn: Connection):
    p, q = graph.layers[conn.source], graph.layers[conn.target]
    labels = (p.labels - 1, q.labels - 1)
    if conn.kind == "Dense":
        return (p.n_nodes, q.n_nodes) + labels
    if conn.kind == "Conv":
        return (p.channels, q.channels) + conn.kernel + labels
    return (p.channels, q.channels) + conn.kernel + tuple(q.spatial) + labels


def fan_in(graph: LgmGraph, conn: Connection):
    """Edges reaching one target node through ``conn``."""
    p = graph.layers[conn.source]
    if conn.kind == "Dense":
        return p.n_nodes
    return p.channels * int(np.prod(conn.kernel))


class Parameters:
    """Compact unary (``V``) and pairwise (``W``) energy tensors."""

    def __init__(self, unary: dict, pairwise: dict):
        self.unary = {k: T.as_tensor(v) for k, v in unary.items()}
        self.pairwise = {k: T.as_tensor(v) for k, v in pairwise.items()}

    def items(self):
        for k, v in self.unary.items():
            yield f"V:{k}", v
        for k, v in self.pairwise.items():
            yield f"W:{k}", v

    def tensors(self):
        return [v for _, v in self.items()]

    def get(self, name) -> Tensor:
        kind, key = name.split(":", 1)
        return (self.unary if kind == "V" else self.pairwise)[key]

    def requiring_grad(self) -> "Parameters":
        return Parameters({k: Tensor(v.data, requires_grad=True) for k, v in self.unary.items()},
                          {k: Tensor(v.data, requires_grad=True) for k, v in self.pairwise.items()})

    def to_arrays(self):
        return {name: np.array(t.data) for name, t in self.items()}

    @classmethod
    def from_arrays(cls, arrays):
        unary = {k[2:]: v for k, v in arrays.items() if k.startswith("V:")}
        pairwise = {k[2:]: v for k, v in arrays.items() if k.startswith("W:")}
        return cls(unary, pairwise)

    def map(self, fn) -> "Parameters":
        return Parameters.from_arrays({k: fn(k, v) for k, v in self.to_arrays().items()})


def init_parameters(graph: LgmGraph, seed=0, scale=1.0) -> Parameters:
    """Zero unaries, pairwise entries ~ N(0, scale / sqrt(fan-in))."""
    rng = np.random.default_rng(seed)
    unary = {n: np.zeros(l.param_shape) for n, l in graph.layers.items()}
    pairwise = {c.key: rng.normal(0.0, scale / np.sqrt(fan_in(graph, c)), pairwise_shape(graph, c))
                for c in graph.connections}
    return Parameters(unary, pairwise)


def zero_parameters(graph: LgmGraph) -> Parameters:
    return Parameters({n: np.zeros(l.param_shape) for n, l in graph.layers.items()},
                      {c.key: np.zeros(pairwise_shape(graph, c)) for c in graph.connections})


def count_parameters(graph: LgmGraph) -> int:
    total = sum(int(np.prod(l.param_shape)) for l in graph.layers.values())
    return total + sum(int(np.prod(pairwise_shape(graph, c))) for c in graph.connections)


def flip(W, graph: LgmGraph, conn: Connection):
    """Rearrange ``W[p->q]`` into the reverse-direction layout ``W[q->p]``.

    Dense swaps the node and label axis pairs.  Conv/Local swap channels and
    labels and mirror the kernel offsets, which is how a target node sees its
    sources when gathering in the opposite direction.
    """
    W = np.asarray(W.data if isinstance(W, Tensor) else W)
    shape = pairwise_shape(graph, conn)
    if W.shape != shape and W.shape != _flipped_shape(shape, conn):
        raise ValueError(f"{conn.key}: pairwise tensor has shape {W.shape}, expected {shape}")
    nd = W.ndim
    if conn.kind == "Dense":
        return W.transpose(1, 0, 3, 2)
    d = len(conn.kernel)
    axes = [1, 0] + list(range(2, nd - 2)) + [nd - 1, nd - 2]
    out = W.transpose(axes)
    kernel_axes = tuple(range(2, 2 + d))
    return np.flip(out, axis=kernel_axes)


def _flipped_shape(shape, conn):
    if conn.kind == "Dense":
        return (shape[1], shape[0], shape[3], shape[2])
    return (shape[1], shape[0]) + shape[2:-2] + (shape[-1], shape[-2])


def expand_labels(x, axes):
    """Insert the implicit zero slice at index 0 of each axis in ``axes``."""
    x = np.asarray(x)
    for ax in axes:
        ax = ax % x.ndim
        pad = [(0, 0)] * x.ndim
        pad[ax] = (1, 0)
        x = np.pad(x, pad)
    return x


def compact_labels(x, axes):
    """Drop index 0 of each axis; raises if those slices are not zero."""
    x = np.asarray(x)
    for ax in axes:
        ax = ax % x.ndim
        head = np.take(x, 0, axis=ax)
        if np.any(head != 0):
            raise ValueError("label-0 slice is not zero; reparametrize first")
        x = np.take(x, np.arange(1, x.shape[ax]), axis=ax)
    return x


# ---------------------------------------------------------------- edge layout
# Every connection has a canonical edge layout:
#   Dense:      (n_p, n_q)
#   Conv/Local: (c_p, c_q, *k, *s_q)
# Batched edge tensors carry a leading batch axis and one or two trailing
# label axes.  Size-1 axes broadcast.

def edge_shape(graph: LgmGraph, conn: Connection):
    p, q = graph.layers[conn.source], graph.layers[conn.target]
    if conn.kind == "Dense":
        return (p.n_nodes, q.n_nodes)
    return (p.channels, q.channels) + conn.kernel + tuple(q.spatial)


def to_edges(x: Tensor, graph: LgmGraph, conn: Connection, side: str) -> Tensor:
    """Lift a node tensor ``(B, *node_shape, L)`` of one endpoint into edge layout."""
    layer = graph.layers[conn.source if side == "source" else conn.target]
    B, L = x.shape[0], x.shape[-1]
    if conn.kind == "Dense":
        flat = T.reshape(x, (B, layer.n_nodes, L))
        return T.expand_dims(flat, 2 if side == "source" else 1)
    d = len(conn.kernel)
    if side == "source":
        patches = T.unfold(x, conn.kernel, conn.stride, conn.dilation, start_axis=2)
        return T.expand_dims(patches, 2)
    return T.reshape(x, (B, 1, layer.channels) + (1,) * d + tuple(layer.spatial) + (L,))


def from_edges(m: Tensor, graph: LgmGraph, conn: Connection, side: str) -> Tensor:
    """Sum an edge tensor ``(B, *edges, L)`` onto the nodes of one endpoint."""
    full = (m.shape[0],) + edge_shape(graph, conn) + (m.shape[-1],)
    if m.shape != full:
        m = T.broadcast_to(m, full)
    B, L = full[0], full[-1]
    layer = graph.layers[conn.source if side == "source" else conn.target]
    if conn.kind == "Dense":
        s = T.sum(m, axis=2 if side == "source" else 1)
        return T.reshape(s, (B,) + layer.node_shape + (L,))
    d = len(conn.kernel)
    if side == "source":
        s = T.sum(m, axis=2)
        return T.fold(s, layer.spatial, conn.kernel, conn.stride, conn.dilation, start_axis=2)
    return T.sum(m, axis=(1,) + tuple(range(3, 3 + d)))


def weights_to_edges(W: Tensor, conn: Connection) -> Tensor:
    """Pairwise energies broadcastable against the edge layout, labels last."""
    if conn.kind == "Conv":
        d = len(conn.kernel)
        s = W.shape
        return T.reshape(W, s[:2 + d] + (1,) * d + s[-2:])
    return W


def edge_array(x, graph: LgmGraph, conn: Connection, side: str):
    """Plain-array version of :func:`to_edges` for constants such as masks."""
    return to_edges(Tensor(x), graph, conn, side).data
