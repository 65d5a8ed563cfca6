"""Dataset containers, loaders and small synthetic generators."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ParseError
from .kgraph import KnowledgeGraph, Vocab, build_graph, read_triplet_file


@dataclass
class Dataset:
    """Train/valid/test triplets (``[N, 3]`` int arrays, original relation ids).

    Homogeneous datasets use relation 0 for every edge and are undirected.
    For inductive data, ``test_facts`` holds the graph visible at test
    time over ``test_num_entities`` entities.
    """

    num_entities: int
    num_relations: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    homogeneous: bool = False
    test_facts: np.ndarray | None = None
    test_num_entities: int | None = None
    vocab: Vocab | None = None
    name: str = "dataset"

    def __post_init__(self):
        for split in ("train", "valid", "test"):
            arr = np.asarray(getattr(self, split), dtype=np.int64).reshape(-1, 3)
            setattr(self, split, arr)
        if self.test_facts is not None:
            self.test_facts = np.asarray(self.test_facts, dtype=np.int64).reshape(-1, 3)
        train, valid, test = (set(map(tuple, s.tolist())) for s in (self.train, self.valid, self.test))
        # inductive test ids index the test graph, so they are compared with its facts only
        seen = set(map(tuple, self.test_facts.tolist())) if self.inductive else train | valid
        if (train & valid) or (seen & test):
            raise ArgumentError("train/valid/test splits must be disjoint")

    @property
    def inductive(self) -> bool:
        return self.test_facts is not None

    def fact_graph(self, split="train") -> KnowledgeGraph:
        """Graph that messages run on when scoring ``split``."""
        if split == "test" and self.inductive:
            facts, n = self.test_facts, self.test_num_entities or self.num_entities
        else:
            facts, n = self.train, self.num_entities
        if self.homogeneous:
            return build_graph(facts, n, 1, directed=False, add_self_loops=True)
        return build_graph(facts, n, self.num_relations, augment_inverse=True)

    def known_triplets(self, split="train") -> np.ndarray:
        """Every true triplet in the world of ``split`` (the ranking filter)."""
        if split == "test" and self.inductive:
            return np.concatenate([self.test_facts, self.test])
        return np.concatenate([self.train, self.valid, self.test])


def random_graph(rng, num_nodes, num_edges, num_relations=1, weights=(1.0, 1.0),
                 integer_weights=False, directed=True) -> KnowledgeGraph:
    """Random multigraph; weights uniform in ``weights`` (or integers in that range)."""
    heads = rng.integers(num_nodes, size=num_edges)
    tails = rng.integers(num_nodes, size=num_edges)
    rels = rng.integers(num_relations, size=num_edges)
    low, high = weights
    if integer_weights:
        w = rng.integers(int(low), int(high) + 1, size=num_edges).astype(np.float64)
    else:
        w = rng.uniform(low, high, size=num_edges)
    return build_graph(np.stack([heads, rels, tails], axis=1), num_nodes, num_relations,
                       weights=w, directed=directed)


def toy_composition_kg(seed=0, num_entities=12, train_fraction=0.5, num_valid=2) -> Dataset:
    """Three relations with ``r2(x, z) <=> exists y: r0(x, y) and r1(y, z)``.

    ``r0``, ``r1`` and their composition are random permutations without
    fixed points, so every entity heads and tails exactly one fact of each
    relation and node degree carries no hint about the answer. All ``r0``
    and ``r1`` facts are training facts. ``r2`` is split: ``train_fraction``
    of it is trained on, ``num_valid`` facts validate, the rest are test
    queries.
    """
    rng = np.random.default_rng(seed)
    n = num_entities
    ids = np.arange(n)

    def derangement():
        while True:
            f = rng.permutation(n)
            if not np.any(f == ids):
                return f

    while True:
        first, second = derangement(), derangement()
        composed = second[first]
        if not np.any(composed == ids):
            break
    base = [(x, 0, int(first[x])) for x in range(n)] + [(y, 1, int(second[y])) for y in range(n)]
    rule = [(x, 2, int(composed[x])) for x in range(n)]
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train = base + [rule[i] for i in order[:n_train]]
    valid = [rule[i] for i in order[n_train:n_train + num_valid]]
    test = [rule[i] for i in order[n_train + num_valid:]]
    vocab = Vocab([f"e{i}" for i in range(n)], ["r0", "r1", "r2"])
    return Dataset(n, 3, np.array(train), np.array(valid), np.array(test), vocab=vocab,
                   name=f"toy-composition-{seed}")


def load_edge_list(path) -> tuple[np.ndarray, Vocab]:
    """Whitespace-separated node pairs (e.g. ``cora.cites``) as an undirected edge set.

    Self loops and duplicate pairs (in either direction) are dropped.
    """
    vocab = Vocab()
    seen, edges = set(), []
    with open(path, encoding="utf-8") as fin:
        for lineno, raw in enumerate(fin, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ParseError("expected two node names", lineno)
            a, b = vocab.entity_id(parts[0]), vocab.entity_id(parts[1])
            key = (min(a, b), max(a, b))
            if a != b and key not in seen:
                seen.add(key)
                edges.append(key)
    vocab.relation_id("edge")
    return np.array(edges, dtype=np.int64).reshape(-1, 2), vocab


def split_edges(edges, rng, ratios=(0.85, 0.05, 0.10)):
    """Random edge split; valid and test sizes are rounded, train takes the rest."""
    edges = np.asarray(edges)
    perm = rng.permutation(len(edges))
    n_valid = int(round(ratios[1] * len(edges)))
    n_test = int(round(ratios[2] * len(edges)))
    test = edges[perm[:n_test]]
    valid = edges[perm[n_test:n_test + n_valid]]
    train = edges[perm[n_test + n_valid:]]
    return train, valid, test


def homogeneous_dataset(edges, num_nodes, rng, ratios=(0.85, 0.05, 0.10), vocab=None,
                        name="homogeneous") -> Dataset:
    def as_triplets(pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.stack([pairs[:, 0], np.zeros(len(pairs), dtype=np.int64), pairs[:, 1]], axis=1)

    train, valid, test = split_edges(edges, rng, ratios)
    return Dataset(num_nodes, 1, as_triplets(train), as_triplets(valid), as_triplets(test),
                   homogeneous=True, vocab=vocab, name=name)


def load_cora(path, seed=0) -> Dataset:
    """Cora citation graph from a ``cora.cites`` file, split 85:5:10."""
    edges, vocab = load_edge_list(path)
    return homogeneous_dataset(edges, vocab.num_entities, np.random.default_rng(seed),
                               vocab=vocab, name="cora")


def induced_subgraph_dataset(edges, num_nodes, keep_nodes, rng, name="subgraph") -> Dataset:
    """Homogeneous dataset on the subgraph induced by the first ``keep_nodes`` BFS-ordered nodes."""
    edges = np.asarray(edges)
    adj = [[] for _ in range(num_nodes)]
    for a, b in edges.tolist():
        adj[a].append(b)
        adj[b].append(a)
    start = int(np.argmax([len(x) for x in adj]))
    order, seen, frontier = [], {start}, [start]
    while frontier and len(order) < keep_nodes:
        nxt = []
        for x in frontier:
            order.append(x)
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    nxt.append(y)
        frontier = nxt
    chosen = np.array(order[:keep_nodes])
    remap = np.full(num_nodes, -1)
    remap[chosen] = np.arange(len(chosen))
    keep = (remap[edges[:, 0]] >= 0) & (remap[edges[:, 1]] >= 0)
    return homogeneous_dataset(remap[edges[keep]], len(chosen), rng, name=name)


def clustered_graph_edges(num_nodes, m, p, seed) -> np.ndarray:
    """Holme-Kim power-law graph with tunable clustering (a citation-like stand-in)."""
    import networkx as nx

    g = nx.powerlaw_cluster_graph(num_nodes, m, p, seed=seed)
    return np.array(sorted((min(a, b), max(a, b)) for a, b in g.edges()), dtype=np.int64)


def load_dataset_dir(path, homogeneous=False) -> Dataset:
    """``train.txt``/``valid.txt``/``test.txt`` triplet files sharing one vocabulary.

    Optional ``test_graph.txt`` turns the dataset inductive: it holds the
    test-time facts, and test triplets are resolved against its entities.
    """
    path = Path(path)
    vocab = Vocab()
    train, _, vocab = read_triplet_file(path / "train.txt", vocab)
    valid, _, vocab = read_triplet_file(path / "valid.txt", vocab)
    inductive = (path / "test_graph.txt").exists()
    if inductive:
        test_vocab = Vocab(relations=vocab.relations)
        facts, _, test_vocab = read_triplet_file(path / "test_graph.txt", test_vocab)
        test, _, test_vocab = read_triplet_file(path / "test.txt", test_vocab)
        if test_vocab.num_relations != vocab.num_relations:
            raise ParseError("inductive test graph introduces unseen relations")
        return Dataset(vocab.num_entities, vocab.num_relations, np.array(train), np.array(valid),
                       np.array(test), homogeneous, np.array(facts), test_vocab.num_entities,
                       vocab, path.name)
    test, _, vocab = read_triplet_file(path / "test.txt", vocab)
    return Dataset(vocab.num_entities, vocab.num_relations, np.array(train), np.array(valid),
                   np.array(test), homogeneous, vocab=vocab, name=path.name)
