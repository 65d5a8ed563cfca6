"""Multi-relational graph storage, triplet IO and graph-level sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ArgumentError, BuildError, ParseError, SamplingError, VocabLookupError


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bidirectional name <-> id maps for entities and relations.

    Ids are contiguous from 0 in first-seen order. A frozen vocab refuses
    to add names.
    """

    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = (), frozen=False):
        self.entity_to_id: dict[str, int] = {}
        self.relation_to_id: dict[str, int] = {}
        self.entities: list[str] = []
        self.relations: list[str] = []
        for name in entities:
            self._add(name, self.entity_to_id, self.entities)
        for name in relations:
            self._add(name, self.relation_to_id, self.relations)
        self.frozen = frozen

    @staticmethod
    def _add(name, index, names):
        if name not in index:
            index[name] = len(names)
            names.append(name)
        return index[name]

    def entity_id(self, name: str, line=None) -> int:
        if name in self.entity_to_id:
            return self.entity_to_id[name]
        if self.frozen:
            where = f" (line {line})" if line is not None else ""
            raise VocabLookupError(f"unknown entity {name!r}{where}")
        return self._add(name, self.entity_to_id, self.entities)

    def relation_id(self, name: str, line=None) -> int:
        if name in self.relation_to_id:
            return self.relation_to_id[name]
        if self.frozen:
            where = f" (line {line})" if line is not None else ""
            raise VocabLookupError(f"unknown relation {name!r}{where}")
        return self._add(name, self.relation_to_id, self.relations)

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def num_relations(self):
        return len(self.relations)

    def copy(self, frozen=None) -> Vocab:
        return Vocab(self.entities, self.relations, self.frozen if frozen is None else frozen)

    def save(self, entity_path, relation_path):
        Path(entity_path).write_text("".join(f"{n}\n" for n in self.entities), encoding="utf-8")
        Path(relation_path).write_text("".join(f"{n}\n" for n in self.relations), encoding="utf-8")

    @classmethod
    def load(cls, entity_path, relation_path, frozen=True) -> Vocab:
        def read(path):
            return Path(path).read_text(encoding="utf-8").splitlines()

        return cls(read(entity_path), read(relation_path), frozen=frozen)

    def __eq__(self, other):
        return (
            isinstance(other, Vocab)
            and self.entities == other.entities
            and self.relations == other.relations
        )

    def __repr__(self):
        return f"Vocab({self.num_entities} entities, {self.num_relations} relations)"


def read_triplet_file(path, vocab: Vocab | None = None):
    """Parse a tab-separated triplet file.

    Returns ``(triplets, weights, vocab)``. A fourth column, if present,
    is the edge weight; otherwise the weight is 1.0. Blank lines and lines
    starting with ``#`` are skipped.
    """
    vocab = Vocab() if vocab is None else vocab
    triplets, weights = [], []
    with open(path, encoding="utf-8") as fin:
        for lineno, raw in enumerate(fin, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (3, 4):
                raise ParseError(f"expected 3 or 4 tab-separated fields, got {len(fields)}", lineno)
            h, r, t = (f.strip() for f in fields[:3])
            weight = 1.0
            if len(fields) == 4:
                try:
                    weight = float(fields[3])
                except ValueError:
                    raise ParseError(f"weight {fields[3]!r} is not a number", lineno) from None
            triplets.append(Triplet(vocab.entity_id(h, lineno), vocab.relation_id(r, lineno),
                                    vocab.entity_id(t, lineno)))
            weights.append(weight)
    return triplets, weights, vocab


def load_triplets(path, vocab: Vocab | None = None) -> tuple[list[Triplet], Vocab]:
    triplets, _, vocab = read_triplet_file(path, vocab)
    return triplets, vocab


def write_triplets(path, triplets: Sequence[Triplet], vocab: Vocab, weights=None):
    with open(path, "w", encoding="utf-8") as fout:
        for i, (h, r, t) in enumerate(triplets):
            row = [vocab.entities[h], vocab.relations[r], vocab.entities[t]]
            if weights is not None:
                row.append(repr(float(weights[i])))
            fout.write("\t".join(row) + "\n")


def _csr(keys, num_rows):
    order = np.argsort(keys, kind="stable")
    indptr = np.zeros(num_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=num_rows), out=indptr[1:])
    return indptr, order.astype(np.int64)


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Immutable edge list with incoming/outgoing CSR indices.

    ``num_relations`` counts relations after augmentation. When the graph
    was built with inverse augmentation, relation ``r`` and
    ``r + num_base_relations`` are inverses of each other.
    """

    num_entities: int
    num_relations: int
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    weights: np.ndarray
    directed: bool = True
    num_base_relations: int | None = None
    inverse_augmented: bool = False
    self_loop_relation: int | None = None
    in_indptr: np.ndarray = field(init=False, repr=False)
    in_edges: np.ndarray = field(init=False, repr=False)
    out_indptr: np.ndarray = field(init=False, repr=False)
    out_edges: np.ndarray = field(init=False, repr=False)
    out_weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        for name, dtype in (("heads", np.int64), ("relations", np.int64),
                            ("tails", np.int64), ("weights", np.float64)):
            set_(self, name, _frozen(getattr(self, name), dtype))
        if self.num_base_relations is None:
            set_(self, "num_base_relations", self.num_relations)
        in_indptr, in_edges = _csr(self.tails, self.num_entities)
        out_indptr, out_edges = _csr(self.heads, self.num_entities)
        out_weight = np.bincount(self.heads, weights=self.weights, minlength=self.num_entities)
        set_(self, "in_indptr", _frozen(in_indptr, np.int64))
        set_(self, "in_edges", _frozen(in_edges, np.int64))
        set_(self, "out_indptr", _frozen(out_indptr, np.int64))
        set_(self, "out_edges", _frozen(out_edges, np.int64))
        set_(self, "out_weight", _frozen(out_weight, np.float64))

    @property
    def num_edges(self) -> int:
        return len(self.heads)

    def triplets(self) -> list[Triplet]:
        return [Triplet(int(h), int(r), int(t)) for h, r, t in zip(self.heads, self.relations, self.tails)]

    def triplet_set(self) -> frozenset:
        cached = self.__dict__.get("_triplet_set")
        if cached is None:
            cached = frozenset(zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()))
            object.__setattr__(self, "_triplet_set", cached)
        return cached

    def inverse_relation(self, r: int) -> int:
        if not self.inverse_augmented:
            raise ArgumentError("graph was built without inverse relations")
        base = self.num_base_relations
        return r + base if r < base else r - base

    def edge_subset(self, keep: np.ndarray) -> KnowledgeGraph:
        """Graph with only the edges where ``keep`` is true (same ids otherwise)."""
        keep = np.asarray(keep, dtype=bool)
        return KnowledgeGraph(self.num_entities, self.num_relations, self.heads[keep],
                              self.relations[keep], self.tails[keep], self.weights[keep],
                              self.directed, self.num_base_relations, self.inverse_augmented,
                              self.self_loop_relation)


def build_graph(
    triplets: Sequence[Sequence[int]],
    num_entities: int,
    num_relations: int,
    augment_inverse=False,
    add_self_loops=False,
    weights=None,
    directed=True,
) -> KnowledgeGraph:
    """Build an immutable graph from id triplets.

    With ``augment_inverse`` every ``(u, r, v)`` also yields
    ``(v, r + num_relations, u)``. With ``add_self_loops`` every node gets a
    ``(u, s, u)`` edge where ``s`` is a fresh relation id. An undirected
    graph stores each triplet as two directed edges of the same relation
    and weight.
    """
    data = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if weights is None:
        w = np.ones(len(data))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(data),):
            raise BuildError(f"expected {len(data)} weights, got shape {w.shape}")
    if num_entities < 0 or num_relations < 0:
        raise BuildError("entity and relation counts must be non-negative")
    h, r, t = data.T if len(data) else (np.zeros(0, np.int64),) * 3
    for name, ids, bound in (("head", h, num_entities), ("relation", r, num_relations),
                             ("tail", t, num_entities)):
        bad = np.flatnonzero((ids < 0) | (ids >= bound))
        if len(bad):
            raise BuildError(f"{name} id {ids[bad[0]]} out of range [0, {bound}) in triplet {bad[0]}")

    # layout: originals, [reversed copies], [inverses of each previous block]
    heads, rels, tails, ws = [h], [r], [t], [w]
    if not directed:
        heads.append(t)
        rels.append(r)
        tails.append(h)
        ws.append(w)
    total_relations = num_relations
    if augment_inverse:
        for bh, br, bt, bw in list(zip(heads, rels, tails, ws)):
            heads.append(bt)
            rels.append(br + num_relations)
            tails.append(bh)
            ws.append(bw)
        total_relations = 2 * num_relations
    self_loop = None
    if add_self_loops:
        self_loop = total_relations
        nodes = np.arange(num_entities, dtype=np.int64)
        heads.append(nodes)
        rels.append(np.full(num_entities, self_loop, dtype=np.int64))
        tails.append(nodes)
        ws.append(np.ones(num_entities))
        total_relations += 1
    return KnowledgeGraph(
        num_entities, total_relations, np.concatenate(heads), np.concatenate(rels),
        np.concatenate(tails), np.concatenate(ws), directed, num_relations,
        augment_inverse, self_loop,
    )


def incoming_edges(graph: KnowledgeGraph, v: int) -> list[tuple[int, int, int]]:
    """Edges ``(x, r, edge_id)`` ending at ``v``, in insertion order."""
    if not 0 <= v < graph.num_entities:
        raise ArgumentError(f"node {v} out of range [0, {graph.num_entities})")
    ids = graph.in_edges[graph.in_indptr[v]:graph.in_indptr[v + 1]]
    return [(int(graph.heads[e]), int(graph.relations[e]), int(e)) for e in ids]


def outgoing_edges(graph: KnowledgeGraph, u: int) -> list[tuple[int, int, int]]:
    """Edges ``(v, r, edge_id)`` leaving ``u``, in insertion order."""
    if not 0 <= u < graph.num_entities:
        raise ArgumentError(f"node {u} out of range [0, {graph.num_entities})")
    ids = graph.out_edges[graph.out_indptr[u]:graph.out_indptr[u + 1]]
    return [(int(graph.tails[e]), int(graph.relations[e]), int(e)) for e in ids]


class FactIndex:
    """Known-triplet lookup used for PCA negatives and filtered ranking."""

    def __init__(self, triplets: Iterable[Sequence[int]]):
        self.tails_of: dict[tuple[int, int], set[int]] = {}
        self.heads_of: dict[tuple[int, int], set[int]] = {}
        for h, r, t in triplets:
            self.tails_of.setdefault((int(h), int(r)), set()).add(int(t))
            self.heads_of.setdefault((int(r), int(t)), set()).add(int(h))

    @classmethod
    def from_graph(cls, graph: KnowledgeGraph) -> FactIndex:
        return cls(zip(graph.heads.tolist(), graph.relations.tolist(), graph.tails.tolist()))

    def known_tails(self, h, r) -> set[int]:
        return self.tails_of.get((h, r), set())

    def known_heads(self, r, t) -> set[int]:
        return self.heads_of.get((r, t), set())

    def __contains__(self, triplet):
        h, r, t = triplet
        return t in self.tails_of.get((h, r), ())


def _draw_excluding(num_entities, excluded, rng):
    # rejection is uniform over the valid set; fall back to enumeration when it is tiny
    if len(excluded) < num_entities // 2:
        while True:
            e = int(rng.integers(num_entities))
            if e not in excluded:
                return e
    valid = [e for e in range(num_entities) if e not in excluded]
    return valid[int(rng.integers(len(valid)))]


def sample_negatives_pca(
    graph: KnowledgeGraph,
    positive: Sequence[int],
    n: int,
    side="tail",
    rng: np.random.Generator | None = None,
    known: FactIndex | None = None,
) -> list[Triplet]:
    """Corrupt one entity of ``positive`` ``n`` times, skipping known triplets.

    The replacement is drawn uniformly (with replacement across the ``n``
    draws) among entities that do not form a known triplet. ``side='both'``
    picks head or tail with equal probability per draw, restricted to the
    sides that have at least one valid corruption.
    """
    if n < 1:
        raise ArgumentError(f"negative count must be >= 1, got {n}")
    if side not in ("head", "tail", "both"):
        raise ArgumentError(f"side must be head, tail or both, got {side!r}")
    rng = np.random.default_rng() if rng is None else rng
    known = FactIndex.from_graph(graph) if known is None else known
    h, r, t = (int(x) for x in positive)
    V = graph.num_entities
    bad_tails = known.known_tails(h, r)
    bad_heads = known.known_heads(r, t)
    sides = []
    if side in ("tail", "both") and len(bad_tails) < V:
        sides.append("tail")
    if side in ("head", "both") and len(bad_heads) < V:
        sides.append("head")
    if not sides:
        raise SamplingError(f"no valid corruption of {tuple(positive)} on side {side!r}")
    out = []
    for _ in range(n):
        s = sides[int(rng.integers(len(sides)))] if len(sides) > 1 else sides[0]
        if s == "tail":
            out.append(Triplet(h, r, _draw_excluding(V, bad_tails, rng)))
        else:
            out.append(Triplet(_draw_excluding(V, bad_heads, rng), r, t))
    return out


def mask_query_edges(graph: KnowledgeGraph, batch: Iterable[Sequence[int]]) -> np.ndarray:
    """Boolean keep-mask that drops every edge joining a query pair, in either direction."""
    pairs = [(int(h), int(t)) for h, _, t in batch]
    if not pairs:
        return np.ones(graph.num_edges, dtype=bool)
    V = graph.num_entities
    codes = np.array([h * V + t for h, t in pairs] + [t * V + h for h, t in pairs], dtype=np.int64)
    return ~np.isin(graph.heads * V + graph.tails, codes)


class Subgraph(NamedTuple):
    graph: KnowledgeGraph
    nodes: np.ndarray  # nodes[new_id] = original id

    def local_id(self, original: int) -> int:
        hit = np.flatnonzero(self.nodes == original)
        if not len(hit):
            raise ArgumentError(f"node {original} not in subgraph")
        return int(hit[0])


def _neighbors(graph, x, incoming):
    indptr, edges = (graph.in_indptr, graph.in_edges) if incoming else (graph.out_indptr, graph.out_edges)
    ends = graph.heads if incoming else graph.tails
    return np.unique(ends[edges[indptr[x]:indptr[x + 1]]])


def sample_bidirectional_bfs(
    graph: KnowledgeGraph,
    head: int,
    candidates: Iterable[int],
    k: int,
    m: float = math.inf,
    rng: np.random.Generator | None = None,
) -> Subgraph:
    """Union of undirected k-hop BFS balls around ``head`` and every candidate.

    Each expanded node contributes at most ``m`` outgoing and ``m`` incoming
    neighbours, downsampled uniformly without replacement. The result is
    the subgraph induced by the visited nodes, with ids remapped in
    increasing original-id order.
    """
    if k < 1:
        raise ArgumentError(f"hop radius k must be >= 1, got {k}")
    if m < 1:
        raise ArgumentError(f"neighbour cap m must be >= 1, got {m}")
    rng = np.random.default_rng() if rng is None else rng
    seeds = [int(head)] + [int(c) for c in candidates]
    for s in seeds:
        if not 0 <= s < graph.num_entities:
            raise ArgumentError(f"node {s} out of range [0, {graph.num_entities})")

    visited = np.zeros(graph.num_entities, dtype=bool)
    for seed in dict.fromkeys(seeds):
        frontier = [seed]
        seen = {seed}
        for _ in range(k):
            nxt = []
            for x in frontier:
                for incoming in (False, True):
                    nbrs = _neighbors(graph, x, incoming)
                    if len(nbrs) > m:
                        nbrs = np.sort(rng.choice(nbrs, size=int(m), replace=False))
                    for y in nbrs.tolist():
                        if y not in seen:
                            seen.add(y)
                            nxt.append(y)
            frontier = nxt
        visited[list(seen)] = True

    nodes = np.flatnonzero(visited)
    remap = np.full(graph.num_entities, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    keep = visited[graph.heads] & visited[graph.tails]
    sub = KnowledgeGraph(
        len(nodes), graph.num_relations, remap[graph.heads[keep]], graph.relations[keep],
        remap[graph.tails[keep]], graph.weights[keep], graph.directed, graph.num_base_relations,
        graph.inverse_augmented, graph.self_loop_relation,
    )
    return Subgraph(sub, nodes)
