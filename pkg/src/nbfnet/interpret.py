"""Explain a prediction by edge importance and the highest-weight paths."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError
from .kgraph import KnowledgeGraph, Vocab
from .model import ModelConfig, ModelParams, decode, propagate

INVERSE_MARK = "⁻¹"


@dataclass
class ImportanceGraph:
    """Gradient of the predicted probability with respect to a unit gate on each edge."""

    graph: KnowledgeGraph
    importance: np.ndarray
    triplet: tuple[int, int, int]
    probability: float


@dataclass
class PathInterpretation:
    edges: tuple[int, ...]
    weight: float
    text: str = ""

    def nodes(self, graph: KnowledgeGraph) -> list[int]:
        if not self.edges:
            return []
        return [int(graph.heads[self.edges[0]])] + [int(graph.tails[e]) for e in self.edges]


def edge_importance(graph: KnowledgeGraph, params: ModelParams, config: ModelConfig,
                    triplet: Sequence[int], edge_mask=None) -> ImportanceGraph:
    """One backward pass of ``p(u, q, v)`` onto a per-edge gate fixed at 1.

    The gate multiplies the edge's message at every layer. Masked edges
    get importance 0.
    """
    u, q, v = (int(x) for x in triplet)
    V = graph.num_entities
    if not (0 <= u < V and 0 <= v < V):
        raise ArgumentError(f"triplet {tuple(triplet)} has entities outside [0, {V})")
    gate = ad.parameter(np.ones(graph.num_edges))
    if config.symmetric:
        h = propagate(graph, [u, v], [q, q], config, params, edge_mask, gate)
        rep = ad.add(h[v:v + 1], h[V + u:V + u + 1])
    else:
        h = propagate(graph, [u], [q], config, params, edge_mask, gate)
        rep = h[v:v + 1]
    p = ad.sum_(ad.sigmoid(decode(params, rep)))
    prob = float(p.data)
    ad.backward(p)
    importance = np.zeros(graph.num_edges) if gate.grad is None else np.array(gate.grad, dtype=np.float64)
    return ImportanceGraph(graph, importance, (u, q, v), prob)


def _key(weight, edges):
    return (-weight, edges)


def top_k_paths(importance: ImportanceGraph, u: int, v: int, k: int, max_length: int,
                beam_width: float = math.inf, vocab: Vocab | None = None) -> list[PathInterpretation]:
    """Highest-weight simple paths ``u -> v`` of at most ``max_length`` edges.

    A path's weight is the sum of its edge importances. Each step keeps,
    per node, the ``beam_width`` best simple partial paths from ``u``;
    ties are broken by the lexicographic order of edge ids.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if beam_width < k:
        raise ArgumentError(f"beam width {beam_width} must be >= k={k}")
    if max_length < 0:
        raise ArgumentError("max_length must be >= 0")
    graph, imp = importance.graph, importance.importance
    V = graph.num_entities
    if not (0 <= u < V and 0 <= v < V):
        raise ArgumentError(f"nodes ({u}, {v}) outside [0, {V})")
    out_indptr, out_edges = graph.out_indptr, graph.out_edges
    tails = graph.tails
    # partial path: (weight, edge ids, visited nodes)
    frontier = {u: [(0.0, (), frozenset([u]))]}
    finished = []
    for _ in range(max_length):
        candidates: dict[int, list] = {}
        for x, paths in frontier.items():
            for e in out_edges[out_indptr[x]:out_indptr[x + 1]].tolist():
                y = int(tails[e])
                for weight, edges, seen in paths:
                    if y in seen:
                        continue
                    candidates.setdefault(y, []).append((weight + imp[e], edges + (e,), seen | {y}))
        frontier = {}
        for y, paths in candidates.items():
            paths.sort(key=lambda p: _key(p[0], p[1]))
            kept = paths if math.isinf(beam_width) else paths[:int(beam_width)]
            if y == v:
                finished.extend(kept)
            else:
                frontier[y] = kept
        if not frontier:
            break
    finished.sort(key=lambda p: _key(p[0], p[1]))
    out = []
    for _, edges, _ in finished[:k]:
        weight = float(sum(imp[e] for e in edges))
        out.append(PathInterpretation(edges, weight, format_path(graph, edges, vocab)))
    return out


def exhaustive_top_k_paths(importance: ImportanceGraph, u: int, v: int, k: int,
                           max_length: int) -> list[PathInterpretation]:
    """Reference enumeration of all simple paths; small graphs only."""
    graph, imp = importance.graph, importance.importance
    if graph.num_entities > 16:
        raise ArgumentError("exhaustive path enumeration is limited to 16 nodes")
    found = []

    def walk(x, edges, seen, weight):
        if x == v and edges:
            found.append((weight, edges))
            return
        if len(edges) == max_length:
            return
        for e in graph.out_edges[graph.out_indptr[x]:graph.out_indptr[x + 1]].tolist():
            y = int(graph.tails[e])
            if y not in seen:
                walk(y, edges + (e,), seen | {y}, weight + imp[e])

    walk(u, (), frozenset([u]), 0.0)
    found.sort(key=lambda p: _key(p[0], p[1]))
    return [PathInterpretation(edges, float(sum(imp[e] for e in edges)), format_path(graph, edges))
            for _, edges in found[:k]]


def relation_name(graph: KnowledgeGraph, r: int, vocab: Vocab | None = None) -> str:
    R = graph.num_base_relations
    if graph.self_loop_relation is not None and r == graph.self_loop_relation:
        return "self"

    def base(i):
        if vocab is not None and i < vocab.num_relations:
            return vocab.relations[i]
        return f"r{i}"

    if graph.inverse_augmented and r >= R:
        return base(r - R) + INVERSE_MARK
    return base(r)


def format_path(graph: KnowledgeGraph, edges, vocab: Vocab | None = None) -> str:
    """``(h, r, t) ∧ (h, r, t)`` with names when a vocabulary is given."""
    def entity(i):
        return vocab.entities[i] if vocab is not None and i < vocab.num_entities else str(i)

    parts = [f"({entity(int(graph.heads[e]))}, {relation_name(graph, int(graph.relations[e]), vocab)}, "
             f"{entity(int(graph.tails[e]))})" for e in edges]
    return " ∧ ".join(parts)


def explain(graph: KnowledgeGraph, params: ModelParams, config: ModelConfig, triplet,
            k=2, beam_width=10, vocab: Vocab | None = None, edge_mask=None):
    """Importance graph plus the top-k paths of a prediction (length bounded by the depth)."""
    importance = edge_importance(graph, params, config, triplet, edge_mask)
    u, _, v = importance.triplet
    return importance, top_k_paths(importance, u, v, k, config.num_layers, beam_width, vocab)


def format_interpretation(importance: ImportanceGraph, paths, vocab: Vocab | None = None) -> str:
    u, q, v = importance.triplet
    graph = importance.graph

    def entity(i):
        return vocab.entities[i] if vocab is not None and i < vocab.num_entities else str(i)

    lines = [f"query\t({entity(u)}, {relation_name(graph, q, vocab)}, {entity(v)})\tp={importance.probability:.6g}"]
    for path in paths:
        lines.append(f"{path.weight:.6g}\t{path.text}")
    return "\n".join(lines)
