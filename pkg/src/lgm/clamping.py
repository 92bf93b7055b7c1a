"""Conditioning on observed input nodes.

Observed nodes never take part in inference.  Their pairwise energies are
folded into the unary energies of the neighbouring free nodes:

* hard clamp at label ``x``: the neighbour receives the slice ``E(x, .)``;
* soft clamp with mean ``q`` on a binary node: the neighbour receives the
  expected energy ``q * E(1, .)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import LgmGraph, Parameters, edge_array, from_edges, weights_to_edges

UNOBSERVED = -1


@dataclass
class ClampSpec:
    """Per-node observations for one layer, batched along axis 0.

    ``hard`` holds labels (``-1`` where the node is not hard-clamped) and
    ``soft`` holds means in [0, 1] (``nan`` where not soft-clamped).  A node
    with neither is unobserved.
    """

    layer: str
    hard: np.ndarray | None = None
    soft: np.ndarray | None = None

    def __post_init__(self):
        if self.hard is None and self.soft is None:
            raise ValueError("ClampSpec needs hard labels, soft values or both")
        if self.hard is not None:
            self.hard = np.asarray(self.hard, dtype=np.int64)
        if self.soft is not None:
            self.soft = np.asarray(self.soft, dtype=np.float64)
            ok = np.isnan(self.soft) | ((self.soft >= 0) & (self.soft <= 1))
            if not np.all(ok):
                raise ValueError("soft clamp values must lie in [0, 1]")
        if self.hard is not None and self.soft is not None:
            if self.hard.shape != self.soft.shape:
                raise ValueError("hard and soft arrays differ in shape")
            if np.any((self.hard >= 0) & ~np.isnan(self.soft)):
                raise ValueError("a node cannot be both hard and soft clamped")

    @classmethod
    def hard_labels(cls, labels, layer="v", observed=None):
        labels = np.asarray(labels, dtype=np.int64)
        if observed is not None:
            labels = np.where(observed, labels, UNOBSERVED)
        return cls(layer, hard=labels)

    @classmethod
    def soft_values(cls, q, layer="v", observed=None):
        q = np.asarray(q, dtype=np.float64)
        if observed is not None:
            q = np.where(observed, q, np.nan)
        return cls(layer, soft=q)

    @property
    def shape(self):
        return (self.hard if self.hard is not None else self.soft).shape

    @property
    def batch(self):
        return self.shape[0]

    @property
    def hard_mask(self):
        return self.hard >= 0 if self.hard is not None else np.zeros(self.shape, bool)

    @property
    def soft_mask(self):
        return ~np.isnan(self.soft) if self.soft is not None else np.zeros(self.shape, bool)

    @property
    def observed(self):
        return self.hard_mask | self.soft_mask

    def observed_probabilities(self, labels):
        """Full label distributions of observed nodes ``(B, *nodes, labels)``; zero elsewhere."""
        out = np.zeros(self.shape + (labels,))
        if self.hard is not None:
            m = self.hard_mask
            out[m, self.hard[m]] = 1.0
        if self.soft is not None:
            m = self.soft_mask
            out[m, 0] = 1.0 - self.soft[m]
            out[m, 1] = self.soft[m]
        return out


@dataclass
class EffectiveEnergies:
    """Unary energy shifts produced by folding observed nodes away.

    ``shift[layer]`` has shape ``(B, *V[layer].shape)``; the adjusted unary is
    ``V + shift``.  ``observed[layer]`` marks folded-away nodes.
    """

    shift: dict = field(default_factory=dict)
    observed: dict = field(default_factory=dict)
    specs: dict = field(default_factory=dict)
    batch: int = 1

    def adjusted_unary(self, layer, params: Parameters):
        V = params.unary[layer]
        if layer in self.shift:
            return T.add(V, self.shift[layer])
        return V

    def add_shift(self, layer, value):
        self.shift[layer] = T.add(self.shift[layer], value) if layer in self.shift else value

    def fully_observed(self, layer):
        return layer in self.observed and bool(self.observed[layer].all())

    def free_mask(self, layer):
        """Boolean free-node mask, or ``None`` when every node is free."""
        if layer not in self.observed:
            return None
        return ~self.observed[layer]

    def merge(self, other: "EffectiveEnergies") -> "EffectiveEnergies":
        out = EffectiveEnergies(dict(self.shift), dict(self.observed), dict(self.specs),
                                max(self.batch, other.batch))
        for k, v in other.shift.items():
            out.add_shift(k, v)
        for k, v in other.observed.items():
            out.observed[k] = out.observed[k] | v if k in out.observed else v
        out.specs.update(other.specs)
        return out


def _check_layer(graph: LgmGraph, spec: ClampSpec, allow_output=False):
    if spec.layer not in graph.layers:
        raise ValueError(f"clamp on unknown layer {spec.layer!r}")
    layer = graph.layers[spec.layer]
    allowed = ("input", "output") if allow_output else ("input",)
    if layer.role not in allowed:
        raise ValueError(f"clamp on non-input layer {spec.layer!r}")
    if spec.shape[1:] != layer.node_shape:
        raise ValueError(f"clamp shape {spec.shape[1:]} does not match layer {layer.node_shape}")
    return layer


def _edge_side(conn, layer_name):
    return "source" if conn.source == layer_name else "target"


def hard_clamp(graph: LgmGraph, params: Parameters, spec: ClampSpec,
               allow_output=False) -> EffectiveEnergies:
    """Fold hard-clamped nodes by slicing the pairwise energies at their labels."""
    layer = _check_layer(graph, spec, allow_output)
    labels = spec.hard if spec.hard is not None else np.full(spec.shape, UNOBSERVED)
    if np.any(labels >= layer.labels):
        raise ValueError(f"hard clamp label out of range for {layer.name!r} "
                         f"({layer.labels} labels)")
    eff = EffectiveEnergies(observed={layer.name: labels >= 0}, batch=spec.batch,
                            specs={layer.name: spec})
    # the implicit label 0 and unobserved nodes contribute nothing
    idx = np.maximum(labels, 0).astype(np.float64)[..., None]
    for conn, other in graph.neighbors(layer.name):
        side = _edge_side(conn, layer.name)
        idx_e = edge_array(idx, graph, conn, side).astype(np.int64)
        W = weights_to_edges(params.pairwise[conn.key], conn)
        axis = -2 if side == "source" else -1
        picked = T.take_label(W, np.maximum(idx_e - 1, 0), axis=axis)
        sliced = T.where_mask(idx_e > 0, picked, 0.0)
        other_side = "target" if side == "source" else "source"
        eff.add_shift(other, from_edges(sliced, graph, conn, other_side))
    return eff


def soft_clamp(graph: LgmGraph, params: Parameters, spec: ClampSpec,
               allow_output=False) -> EffectiveEnergies:
    """Fold soft-clamped binary nodes by their expected pairwise energy."""
    layer = _check_layer(graph, spec, allow_output)
    mask = spec.soft_mask
    if mask.any() and layer.labels != 2:
        raise ValueError(f"soft clamp on non-binary layer {layer.name!r}")
    q = np.where(mask, np.nan_to_num(spec.soft if spec.soft is not None else 0.0), 0.0)
    eff = EffectiveEnergies(observed={layer.name: mask}, batch=spec.batch,
                            specs={layer.name: spec})
    for conn, other in graph.neighbors(layer.name):
        side = _edge_side(conn, layer.name)
        q_e = edge_array(q[..., None], graph, conn, side)
        W = weights_to_edges(params.pairwise[conn.key], conn)
        if side == "source":
            expected = T.sum(T.mul(W, q_e[..., :, None]), axis=-2)
        else:
            expected = T.sum(T.mul(W, q_e[..., None, :]), axis=-1)
        other_side = "target" if side == "source" else "source"
        eff.add_shift(other, from_edges(expected, graph, conn, other_side))
    return eff


def condition(graph: LgmGraph, params: Parameters, clamps, allow_output=False) -> EffectiveEnergies:
    """Fold every clamp in ``clamps`` (a ClampSpec or an iterable of them)."""
    if clamps is None:
        return EffectiveEnergies()
    if isinstance(clamps, ClampSpec):
        clamps = [clamps]
    eff = None
    for spec in clamps:
        parts = []
        if spec.hard is not None:
            parts.append(hard_clamp(graph, params, spec, allow_output))
        if spec.soft is not None:
            parts.append(soft_clamp(graph, params, spec, allow_output))
        for part in parts:
            eff = part if eff is None else eff.merge(part)
        if spec.hard is not None and spec.soft is not None:
            eff.observed[spec.layer] = spec.observed
    return eff if eff is not None else EffectiveEnergies()


# -------------------------------------------------------------- preprocessing

def quantize(image, n_colors: int):
    """Uniform binning of intensities in [0, 1] into ``n_colors`` labels."""
    if n_colors < 2:
        raise ValueError("n_colors must be at least 2")
    v = np.asarray(image, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("intensities must lie in [0, 1]")
    return np.minimum(np.floor(v * n_colors), n_colors - 1).astype(np.int64)


def binarize(image, threshold: float = 0.5):
    return (np.asarray(image) >= threshold).astype(np.int64)


def requant_hidden_labels(n_colors: int) -> int:
    """Hidden-layer label count ``n + 1`` for an input of ``2**n`` colors."""
    n = int(round(np.log2(n_colors)))
    if 2 ** n != n_colors:
        raise ValueError("n_colors must be a power of two")
    return n + 1
