"""Mini-batch maximum-likelihood training through truncated inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .clamping import ClampSpec, condition, hard_clamp
from .data import Dataset, mask
from .inference import InferenceConfig, run_inference
from .model import (LgmGraph, Parameters, edge_array, expand_labels, init_parameters,
                    weights_to_edges)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 20
    method: str = "LBP"
    schedule: str = "Sequential"
    iterations: int = 5
    test_iterations: int | None = None
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    max_epochs: int = 50
    patience: int = 3
    seed: int = 0
    clamping: str = "soft"       # soft | binarize | quantize
    n_colors: int = 2
    p_obs: float = 1.0
    gradient: str = "backprop"   # backprop | analytic
    init_scale: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.gradient not in ("backprop", "analytic"):
            raise ValueError("gradient must be 'backprop' or 'analytic'")

    def inference(self, evaluation=False) -> InferenceConfig:
        t = self.test_iterations if evaluation and self.test_iterations else self.iterations
        return InferenceConfig(self.method, self.schedule, t)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def smooth_targets(labels, n_classes, eps=0.0):
    """Correct class gets ``1 - eps (C-1)/C``, the others ``eps / C``."""
    labels = np.asarray(labels)
    t = np.full((len(labels), n_classes), eps / n_classes)
    t[np.arange(len(labels)), labels] = 1.0 - eps * (n_classes - 1) / n_classes
    return t


def nll_loss(belief, target, per_sample=False):
    """Cross-entropy of the compact output belief against target distributions.

    ``belief`` is ``(B, ..., C-1)`` with one output node; ``target`` is
    ``(B, C)``.  Returns the batch mean unless ``per_sample``.
    """
    belief = T.as_tensor(belief)
    B = belief.shape[0]
    b = T.reshape(belief, (B, belief.shape[-1]))
    target = np.asarray(target, dtype=np.float64)
    lse = T.logsumexp_star(b, axis=-1)
    rest = T.sum(T.mul(T.sub(b, T.expand_dims(lse, -1)), target[:, 1:]), axis=-1)
    per = T.neg(T.sub(rest, T.mul(lse, target[:, 0])))
    if per_sample:
        return per
    return T.mul(T.sum(per), 1.0 / B)


class Adam:
    def __init__(self, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size, self.beta1, self.beta2, self.eps = step_size, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: Parameters, grads: dict) -> Parameters:
        self.t += 1
        lr = self.step_size * np.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        new = {}
        for name, value in params.to_arrays().items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            new[name] = value - lr * m / (np.sqrt(v) + self.eps)
        return Parameters.from_arrays(new)


# ------------------------------------------------------------------- batches

def input_clamps(graph: LgmGraph, images, config: TrainConfig, sample_ids, stream=0) -> ClampSpec:
    name = graph.input_layers[0]
    layer = graph.layers[name]
    return mask(images, config.p_obs, seed=config.seed, sample_ids=sample_ids, layer=name,
                node_shape=layer.node_shape, mode=config.clamping, n_colors=config.n_colors,
                stream=stream)


def loss_and_grad(graph, params: Parameters, clamps, targets, inference: InferenceConfig):
    """Batch-mean loss and its gradient by backpropagation through inference."""
    leaves = params.requiring_grad()
    with T.Tape():
        result = run_inference(graph, leaves, clamps, inference)
        loss = nll_loss(result.output, targets)
    g = T.backward(loss)
    grads = {name: g.get(t, np.zeros(t.shape)) for name, t in leaves.items()}
    return loss.item(), grads


@dataclass
class EvalResult:
    accuracy: float
    nll: float
    probabilities: np.ndarray = field(repr=False, default=None)


def predict_proba(graph, params, clamps, inference: InferenceConfig):
    result = run_inference(graph, params, clamps, inference)
    return result.probabilities().reshape(clamps.batch, -1)


def evaluate(dataset: Dataset, graph: LgmGraph, params: Parameters, config: TrainConfig,
             batch_size=200) -> EvalResult:
    """Accuracy of the argmax prediction and mean NLL of the true class."""
    probs = []
    inf = config.inference(evaluation=True)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        clamps = input_clamps(graph, dataset.images[sl], config, dataset.ids[sl], stream=0)
        probs.append(predict_proba(graph, params, clamps, inf))
    p = np.concatenate(probs) if probs else np.zeros((0, graph.output_layer.labels))
    return metrics(p, dataset.labels)


def metrics(probabilities, labels) -> EvalResult:
    p = np.asarray(probabilities)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return EvalResult(float("nan"), float("nan"), p)
    acc = float(np.mean(np.argmax(p, axis=1) == labels))
    picked = p[np.arange(len(labels)), labels]
    nll = float(np.mean(-np.log(np.maximum(picked, np.finfo(float).tiny))))
    return EvalResult(acc, nll, p)


def _batch_gradient(graph, params, clamps, labels, targets, inference, config):
    if config.gradient == "analytic":
        if config.label_smoothing > 0:
            raise ValueError("the analytic gradient supports hard targets only")
        return analytic_loss_and_grad(graph, params, clamps, labels, targets, inference)
    return loss_and_grad(graph, params, clamps, targets, inference)


@dataclass
class TrainResult:
    params: Parameters
    history: list
    best_epoch: int
    config: TrainConfig


def train(train_set: Dataset, val_set: Dataset, graph: LgmGraph, config: TrainConfig,
          params: Parameters | None = None, on_epoch=None) -> TrainResult:
    """Adam on batch-mean NLL with early stopping on validation loss.

    Returns the parameters of the epoch with the lowest validation loss.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    params = params if params is not None else init_parameters(graph, config.seed, config.init_scale)
    opt = Adam(config.step_size, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    inf = config.inference()
    C = graph.output_layer.labels
    history, best, best_params, best_epoch, stale = [], np.inf, params, -1, 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            clamps = input_clamps(graph, train_set.images[idx], config, train_set.ids[idx],
                                  stream=epoch + 1)
            targets = smooth_targets(train_set.labels[idx], C, config.label_smoothing)
            try:
                loss, grads = _batch_gradient(graph, params, clamps, train_set.labels[idx],
                                              targets, inf, config)
            except T.NonFiniteError as e:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, batch starting "
                                       f"{start}: {e}") from e
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, "
                                       f"batch starting {start}")
            losses.append(loss * len(idx))
            params = opt.step(params, grads)
        val = evaluate(val_set, graph, params, config)
        row = {"epoch": epoch, "train_nll": float(np.sum(losses) / len(order)),
               "val_nll": val.nll, "val_accuracy": val.accuracy}
        history.append(row)
        log.info("epoch %d train_nll %.4f val_nll %.4f val_acc %.4f", epoch,
                 row["train_nll"], val.nll, val.accuracy)
        if on_epoch is not None:
            on_epoch(row)
        if val.nll < best:
            best, best_params, best_epoch, stale = val.nll, params, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best_params, history, best_epoch, config)


# ---------------------------------------------------------- analytic gradient

def _edge_probs(probs, graph, conn, side):
    return edge_array(probs, graph, conn, side)


def _pair_expectations(result, graph, params, conn, method):
    """Pairwise beliefs ``(B, *edges, l_p, l_q)`` for one connection."""
    state = result.state
    P = result.state.probabilities(conn.source, graph)
    Q = result.state.probabilities(conn.target, graph)
    Pe = _edge_probs(P, graph, conn, "source")
    Qe = _edge_probs(Q, graph, conn, "target")
    product = Pe[..., :, None] * Qe[..., None, :]
    if method == "MF" or not (state.active(conn.source) and state.active(conn.target)):
        return product
    # Bethe pairwise beliefs b_ij ~ exp(-E_ij / rho) * (b_i / m_ji) * (b_j / m_ij)
    W = weights_to_edges(params.pairwise[conn.key], conn).data
    if method == "TRW":
        W = W / state.rho[conn.key][..., None, None]
    E = expand_labels(W, (-2, -1))
    cav_p = edge_array(state.beliefs[conn.source].data, graph, conn, "source") - \
        state.messages[(conn.key, "source")].data
    cav_q = edge_array(state.beliefs[conn.target].data, graph, conn, "target") - \
        state.messages[(conn.key, "target")].data
    cav_p = expand_labels(cav_p, (-1,))
    cav_q = expand_labels(cav_q, (-1,))
    logb = -E + cav_p[..., :, None] + cav_q[..., None, :]
    logb = logb - logb.max(axis=(-2, -1), keepdims=True)
    bethe = np.exp(logb)
    bethe /= bethe.sum(axis=(-2, -1), keepdims=True)
    both_free = np.ones(bethe.shape[:-2], dtype=bool)
    for layer, side in ((conn.source, "source"), (conn.target, "target")):
        free = state.cond.free_mask(layer)
        if free is not None:
            both_free = both_free & (edge_array(free[..., None].astype(float), graph, conn, side)[..., 0] > 0)
    return np.where(both_free[..., None, None], bethe, product)


def _reduce_pairwise(x, conn, graph):
    """Sum edge-layout statistics ``(B, *edges, L_p, L_q)`` onto the shape of ``W``."""
    x = x.sum(axis=0)
    if conn.kind == "Conv":
        d = len(conn.kernel)
        x = x.sum(axis=tuple(range(2 + d, 2 + 2 * d)))
    return x


def _expectations(result, graph, params, method):
    unary = {n: result.state.probabilities(n, graph) for n in graph.layers}
    pair = {c.key: _pair_expectations(result, graph, params, c, method) for c in graph.connections}
    return unary, pair


def analytic_gradient(graph: LgmGraph, params: Parameters, clamps, labels,
                      inference: InferenceConfig):
    """Batch-mean NLL gradient as (clamped expectation) - (free expectation).

    Runs one inference with inputs and output clamped and one with inputs
    only; indicator expectations come from node beliefs and pairwise
    beliefs (Bethe for LBP/TRW, products for MF).
    """
    if inference.method == "MaxProduct":
        raise ValueError("analytic gradient needs a probabilistic inference method")
    free_res = run_inference(graph, params, clamps, inference)
    y = graph.output_layer
    out_spec = ClampSpec(y.name, hard=np.asarray(labels).reshape((-1,) + y.node_shape))
    cond = condition(graph, params, clamps).merge(hard_clamp(graph, params, out_spec, allow_output=True))
    clamped_res = run_inference(graph, params, None, inference, cond=cond)
    fu, fp = _expectations(free_res, graph, params, inference.method)
    cu, cp = _expectations(clamped_res, graph, params, inference.method)
    B = len(np.asarray(labels))
    grads = {}
    for n in graph.layers:
        grads[f"V:{n}"] = (cu[n][..., 1:] - fu[n][..., 1:]).sum(axis=0) / B
    for c in graph.connections:
        grads[f"W:{c.key}"] = _reduce_pairwise(cp[c.key][..., 1:, 1:] - fp[c.key][..., 1:, 1:],
                                               c, graph) / B
    return grads, free_res


def analytic_loss_and_grad(graph, params, clamps, labels, targets, inference):
    grads, free_res = analytic_gradient(graph, params, clamps, labels, inference)
    loss = nll_loss(free_res.output, targets).item()
    return loss, grads
