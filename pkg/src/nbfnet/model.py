"""Neural Bellman-Ford network: learned indicator, message and aggregate functions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Tensor
from .errors import ArgumentError, ConfigError, ShapeError
from .kgraph import KnowledgeGraph

MESSAGES = ("transe", "distmult", "rotate")
AGGREGATES = ("sum", "mean", "max")
EDGE_MODES = ("linear", "bias")
PROB_EPS = 1e-15


@dataclass
class ModelConfig:
    num_layers: int = 6
    hidden_dim: int = 32
    message: str = "distmult"
    aggregate: str = "sum"
    decoder_hidden: int = 64
    edge_mode: str = "linear"
    layer_norm: bool = True
    shortcut: bool = True
    symmetric: bool = False
    num_negative: int = 32
    adversarial_temperature: float | None = None

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.decoder_hidden < 1:
            raise ConfigError(f"decoder_hidden must be >= 1, got {self.decoder_hidden}")
        if self.message not in MESSAGES:
            raise ConfigError(f"message must be one of {MESSAGES}, got {self.message!r}")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"aggregate must be one of {AGGREGATES}, got {self.aggregate!r}")
        if self.edge_mode not in EDGE_MODES:
            raise ConfigError(f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")
        if self.message == "rotate" and self.hidden_dim % 2:
            raise ConfigError("rotate messages need an even hidden_dim")
        if self.num_negative < 1:
            raise ConfigError(f"num_negative must be >= 1, got {self.num_negative}")
        if self.adversarial_temperature is not None and self.adversarial_temperature <= 0:
            raise ConfigError("adversarial_temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class ModelParams:
    """Named learnable tensors of one network.

    ``num_relations`` is the relation count of the graph the network runs
    on (after inverse / self-loop augmentation).
    """

    def __init__(self, tensors: dict[str, Tensor], num_relations: int):
        self.tensors = tensors
        self.num_relations = num_relations

    @classmethod
    def init(cls, config: ModelConfig, num_relations: int, rng: np.random.Generator) -> ModelParams:
        d, m, R = config.hidden_dim, config.decoder_hidden, num_relations

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=shape))

        t = {"query": ad.parameter(rng.normal(0.0, 1.0, size=(R, d)))}
        for layer in range(config.num_layers):
            p = f"layers.{layer}."
            if config.edge_mode == "linear":
                t[p + "relation_weight"] = uniform((R, d, d), d)
                t[p + "relation_bias"] = uniform((R, d), d)
            else:
                t[p + "relation_bias"] = ad.parameter(rng.normal(0.0, 1.0, size=(R, d)))
            t[p + "linear.weight"] = uniform((d, d), d)
            t[p + "linear.bias"] = uniform((d,), d)
            if config.layer_norm:
                t[p + "norm.gain"] = ad.parameter(np.ones(d))
                t[p + "norm.bias"] = ad.parameter(np.zeros(d))
        t["decoder.hidden.weight"] = uniform((d, m), d)
        t["decoder.hidden.bias"] = uniform((m,), d)
        t["decoder.out.weight"] = uniform((m, 1), m)
        t["decoder.out.bias"] = uniform((1,), m)
        return cls(t, R)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in self.items()}

    def copy(self) -> ModelParams:
        return ModelParams({k: ad.parameter(v.data.copy()) for k, v in self.items()},
                           self.num_relations)

    def check_finite(self):
        for name, p in self.items():
            if not np.isfinite(p.data).all():
                raise ArgumentError(f"parameter {name} has non-finite values")


def _check_ids(params, num_entities, u, q):
    if not 0 <= u < num_entities:
        raise ArgumentError(f"source {u} out of range [0, {num_entities})")
    if not 0 <= q < params.num_relations:
        raise ArgumentError(f"query relation {q} out of range [0, {params.num_relations})")


def indicator(u: int, q: int, num_entities: int, params: ModelParams) -> Tensor:
    """Boundary field: row ``u`` is the query embedding, every other row is zero."""
    _check_ids(params, num_entities, u, q)
    return _boundary(params, [u], [q], num_entities)


def _boundary(params, sources, queries, num_entities):
    rows = ad.gather(params["query"], SegmentIndex(queries, params.num_relations))
    slots = np.arange(len(sources)) * num_entities + np.asarray(sources, dtype=np.int64)
    return ad.segment_reduce(rows, SegmentIndex(slots, len(sources) * num_entities), kind="sum")


def _relation_table(params, layer, queries, config):
    """Edge representations for every (query, relation): shape [B*R, d]."""
    R, d, B = params.num_relations, config.hidden_dim, len(queries)
    p = f"layers.{layer}."
    bias = params[p + "relation_bias"]
    if config.edge_mode == "bias":
        return ad.reshape(ad.broadcast(bias, (B, R, d)), (B * R, d))
    q = ad.gather(params["query"], SegmentIndex(queries, R))  # [B, d]
    weight = ad.reshape(ad.transpose(params[p + "relation_weight"], (2, 0, 1)), (d, R * d))
    table = ad.reshape(ad.matmul(q, weight), (B, R, d)) + bias
    return ad.reshape(table, (B * R, d))


def edge_representation(params: ModelParams, layer: int, r: int, q: int,
                        config: ModelConfig) -> Tensor:
    """``W_r q + b_r`` for the given layer (or just ``b_r`` in bias mode)."""
    if not 0 <= layer < config.num_layers:
        raise ArgumentError(f"layer {layer} out of range [0, {config.num_layers})")
    table = _relation_table(params, layer, [q], config)
    return ad.reshape(ad.gather(table, SegmentIndex([r], params.num_relations)), (config.hidden_dim,))


def message(kind: str, h, w) -> Tensor:
    """Relational operator applied to ``h`` by edge representation ``w``.

    rotate reads its ``d/2`` angles from the first half of ``w``.
    """
    h, w = ad._as_tensor(h), ad._as_tensor(w)
    if h.shape != w.shape:
        raise ShapeError(f"message: h {h.shape} and w {w.shape} differ")
    if kind == "transe":
        return h + w
    if kind == "distmult":
        return ad.mul(h, w)
    if kind == "rotate":
        d = h.shape[-1]
        if d % 2:
            raise ShapeError("message: rotate needs an even dimension")
        return ad.complex_rotate(h, w[..., : d // 2])
    raise ArgumentError(f"unknown message kind {kind!r}")


def _update(reduced, params, layer, config, previous):
    p = f"layers.{layer}."
    out = ad.relu(ad.matmul(reduced, params[p + "linear.weight"]) + params[p + "linear.bias"])
    if config.layer_norm:
        out = ad.layer_norm(out, params[p + "norm.gain"], params[p + "norm.bias"])
    if config.shortcut and previous is not None:
        out = out + previous
    return out


def aggregate(kind: str, messages, params: ModelParams, layer: int, config: ModelConfig,
              previous=None) -> Tensor:
    """Aggregate one node's message set (boundary message included) into a [d] vector.

    reduce -> affine -> ReLU -> layer norm (optional) -> + previous (optional).
    """
    messages = ad._as_tensor(messages)
    if messages.ndim != 2 or messages.shape[0] == 0:
        raise RuntimeError("aggregate called with an empty message set")
    reduced = ad.segment_reduce(messages, np.zeros(messages.shape[0], dtype=np.int64), 1, kind)
    if previous is not None:
        previous = ad.reshape(ad._as_tensor(previous), (1, config.hidden_dim))
    return ad.reshape(_update(reduced, params, layer, config, previous), (config.hidden_dim,))


def propagate(graph: KnowledgeGraph, sources: Sequence[int], queries: Sequence[int],
              config: ModelConfig, params: ModelParams, edge_mask=None, gate=None) -> Tensor:
    """Batched Bellman-Ford network: one pair field per (source, query) group.

    Returns a [B*V x d] tensor; rows ``b*V:(b+1)*V`` belong to group ``b``.
    ``edge_mask`` (bool, per edge) drops edges for every group. ``gate``
    is an optional per-edge tensor multiplying each edge's message at
    every layer.
    """
    V, d = graph.num_entities, config.hidden_dim
    B = len(sources)
    if len(queries) != B:
        raise ArgumentError("sources and queries must have equal length")
    for u, q in zip(sources, queries):
        _check_ids(params, V, u, q)
    if params.num_relations != graph.num_relations:
        raise ArgumentError(
            f"parameters cover {params.num_relations} relations, graph has {graph.num_relations}")
    if edge_mask is None:
        eids = np.arange(graph.num_edges)
    else:
        edge_mask = np.asarray(edge_mask, dtype=bool)
        if edge_mask.shape != (graph.num_edges,):
            raise ArgumentError(f"edge mask must have length {graph.num_edges}")
        eids = np.flatnonzero(edge_mask)
    E = len(eids)
    offsets = np.repeat(np.arange(B, dtype=np.int64), E)
    src = SegmentIndex(np.tile(graph.heads[eids], B) + offsets * V, B * V)
    rel = SegmentIndex(np.tile(graph.relations[eids], B) + offsets * graph.num_relations,
                       B * graph.num_relations)
    dst = np.tile(graph.tails[eids], B) + offsets * V
    incoming = SegmentIndex(np.concatenate([dst, np.arange(B * V)]), B * V)
    gate_rows = None
    if gate is not None:
        gate_rows = ad.broadcast(ad.reshape(ad.gather(gate, SegmentIndex(np.tile(eids, B),
                                                                         graph.num_edges)),
                                            (B * E, 1)), (B * E, d))

    boundary = _boundary(params, sources, queries, V)
    h = boundary
    for layer in range(config.num_layers):
        w = ad.gather(_relation_table(params, layer, queries, config), rel)
        msg = message(config.message, ad.gather(h, src), w)
        if gate_rows is not None:
            msg = ad.mul(msg, gate_rows)
        reduced = ad.segment_reduce(ad.concat([msg, boundary]), incoming, kind=config.aggregate)
        h = _update(reduced, params, layer, config, h)
    return h


def nbfnet_forward(graph: KnowledgeGraph, u: int, q: int, config: ModelConfig,
                   params: ModelParams, edge_mask=None, gate=None) -> Tensor:
    """Pair representations ``h_q(u, v)`` for every ``v``: a [V x d] field."""
    return propagate(graph, [u], [q], config, params, edge_mask, gate)


def decode(params: ModelParams, h) -> Tensor:
    """Two-layer MLP logits for pair representations [N x d] -> [N]."""
    h = ad._as_tensor(h)
    if h.ndim == 1:
        h = ad.reshape(h, (1, h.shape[0]))
    hidden = ad.relu(ad.matmul(h, params["decoder.hidden.weight"]) + params["decoder.hidden.bias"])
    out = ad.matmul(hidden, params["decoder.out.weight"]) + params["decoder.out.bias"]
    return ad.reshape(out, (out.shape[0],))


def score(params: ModelParams, h) -> Tensor:
    """``sigmoid(f(h))`` for one [d] or many [N x d] pair representations."""
    return ad.sigmoid(decode(params, h))


def score_symmetric(params: ModelParams, h_uv, h_vu) -> Tensor:
    """``sigmoid(f(h(u, v) + h(v, u)))``; invariant to swapping the arguments."""
    return score(params, ad.add(h_uv, h_vu))


def score_pair(graph: KnowledgeGraph, u: int, q: int, v: int, config: ModelConfig,
               params: ModelParams, edge_mask=None, side="tail") -> float:
    """Probability of ``(u, q, v)``.

    ``side='tail'`` scores ``p(v | u, q)``; ``side='head'`` scores
    ``p(u | v, q^-1)`` with the inverse relation (needs an
    inverse-augmented graph). With ``config.symmetric`` both directions
    of ``q`` are summed.
    """
    with ad.no_grad():
        if config.symmetric:
            field = propagate(graph, [u, v], [q, q], config, params, edge_mask).data
            V = graph.num_entities
            return float(score_symmetric(params, field[v], field[V + u]).data[0])
        if side == "tail":
            field = nbfnet_forward(graph, u, q, config, params, edge_mask).data
            return float(score(params, field[v]).data[0])
        if side == "head":
            field = nbfnet_forward(graph, v, graph.inverse_relation(q), config, params, edge_mask).data
            return float(score(params, field[u]).data[0])
    raise ArgumentError(f"side must be 'head' or 'tail', got {side!r}")


class _ClampCounter:
    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_events = _ClampCounter()


def _safe(p):
    data = p.data
    hits = int(np.count_nonzero((data < PROB_EPS) | (data > 1 - PROB_EPS)))
    if hits:
        clamp_events.count += hits
    return ad.clamp(p, PROB_EPS, 1 - PROB_EPS)


def _negative_weights(neg, temperature):
    n = neg.shape[-1]
    if temperature is None:
        return np.full(neg.shape, 1.0 / n)
    p = np.clip(neg.data, PROB_EPS, 1 - PROB_EPS)
    logits = (np.log(p) - np.log1p(-p)) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def loss_kg(positive, negatives, adversarial_temperature: float | None = None) -> Tensor:
    """``-log p - sum_i w_i log(1 - p'_i)``, averaged over a batch of positives.

    ``positive`` has shape [P] (or is a scalar) and ``negatives`` [P x n]
    (or [n]). Weights are ``1/n``, or with a temperature the softmax of
    negative logits divided by it (treated as constants).
    """
    positive, negatives = ad._as_tensor(positive), ad._as_tensor(negatives)
    if positive.ndim == 0:
        positive = ad.reshape(positive, (1,))
    if negatives.ndim == 1:
        negatives = ad.reshape(negatives, (1, negatives.shape[0]))
    if negatives.shape[0] != positive.shape[0]:
        raise ShapeError(f"loss: {positive.shape[0]} positives vs {negatives.shape[0]} negative rows")
    weights = _negative_weights(negatives, adversarial_temperature)
    pos_term = ad.log(_safe(positive))
    neg_term = ad.sum_(ad.mul(ad.log(_safe(ad.sub(1.0, negatives))), weights), axis=1)
    return ad.neg(ad.mean(pos_term + neg_term))


def loss_homo(positive, negatives) -> Tensor:
    """Homogeneous-graph loss: same form as :func:`loss_kg` with uniform weights."""
    return loss_kg(positive, negatives, None)
