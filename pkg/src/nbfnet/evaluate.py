"""Filtered ranking, classification metrics and evaluation protocols."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .errors import ArgumentError, NumericError
from .kgraph import FactIndex, KnowledgeGraph
from .model import ModelConfig, ModelParams, decode, propagate
from .semiring import generalized_bellman_ford

TIE_POLICIES = ("optimistic", "pessimistic")
PROTOCOLS = ("kg-filtered", "inductive-sampled", "homo-balanced")
CATEGORY_THRESHOLD = 1.5

# scorer(sources, queries) -> [B x V] scores (higher means more plausible)
Scorer = Callable[[Sequence[int], Sequence[int]], np.ndarray]


def format_float(x) -> str:
    """Shortest text that parses back to the same double; integral values drop the ``.0``."""
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def filtered_rank(positive_score: float, candidate_scores, filtered=None, policy="optimistic") -> int:
    """1-based rank of ``positive_score`` among ``candidate_scores``.

    ``filtered`` is a boolean mask of candidates to drop (other known true
    answers; the positive itself should not be among the candidates).
    Ties count as beaten under the pessimistic policy only.
    """
    if policy not in TIE_POLICIES:
        raise ArgumentError(f"tie policy must be one of {TIE_POLICIES}, got {policy!r}")
    scores = np.asarray(candidate_scores, dtype=np.float64)
    if not np.isfinite(positive_score) or not np.isfinite(scores).all():
        raise NumericError("non-finite score in ranking")
    if filtered is not None:
        scores = scores[~np.asarray(filtered, dtype=bool)]
    beaten = scores > positive_score
    if policy == "pessimistic":
        beaten |= scores == positive_score
    return 1 + int(np.count_nonzero(beaten))


@dataclass
class RankingReport:
    ranks: np.ndarray
    mr: float
    mrr: float
    hits: dict[int, float]
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)
    pessimistic_mrr: float | None = None

    def as_dict(self) -> dict[str, float]:
        out = {"mr": self.mr, "mrr": self.mrr}
        out.update({f"hits@{k}": v for k, v in self.hits.items()})
        if self.pessimistic_mrr is not None:
            out["mrr_pessimistic"] = self.pessimistic_mrr
        for cat, sides in self.per_category.items():
            for side, value in sides.items():
                out[f"mrr[{cat}/{side}]"] = value
        return out

    def to_tsv(self) -> str:
        return "".join(f"{k}\t{format_float(v)}\n" for k, v in self.as_dict().items())

    def to_table(self) -> str:
        rows = self.as_dict()
        width = max(len(k) for k in rows)
        return "\n".join(f"{k:<{width}}  {v:10.4f}" for k, v in rows.items())


def ranking_metrics(ranks, ks=(1, 3, 10), categories=None, sides=None) -> RankingReport:
    """MR, MRR and HITS@k; optional per-(category, side) MRR breakdown."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ArgumentError("no ranks to summarise")
    if np.any(ranks < 1):
        raise ArgumentError("ranks are 1-based")
    report = RankingReport(ranks, float(ranks.mean()), float((1.0 / ranks).mean()),
                           {k: float((ranks <= k).mean()) for k in ks})
    if categories is not None:
        categories = np.asarray(categories)
        sides = np.asarray(sides) if sides is not None else np.full(len(ranks), "all")
        for cat in sorted(set(categories.tolist())):
            for side in sorted(set(sides.tolist())):
                sel = (categories == cat) & (sides == side)
                if sel.any():
                    report.per_category.setdefault(cat, {})[side] = float((1.0 / ranks[sel]).mean())
    return report


def relation_categories(triplets, num_relations=None, threshold=CATEGORY_THRESHOLD) -> dict[int, str]:
    """Classify relations as 1-1 / 1-N / N-1 / N-N.

    A side is "N" when its average multiplicity (tails per head, or heads
    per tail) reaches ``threshold``. Relations without facts are
    ``"unclassified"``. Accepts a triplet array or a graph (whose base
    relations are used).
    """
    if isinstance(triplets, KnowledgeGraph):
        graph = triplets
        keep = graph.relations < graph.num_base_relations
        triplets = np.stack([graph.heads[keep], graph.relations[keep], graph.tails[keep]], axis=1)
        num_relations = graph.num_base_relations if num_relations is None else num_relations
    triplets = np.unique(np.asarray(triplets, dtype=np.int64).reshape(-1, 3), axis=0)
    if num_relations is None:
        num_relations = int(triplets[:, 1].max()) + 1 if len(triplets) else 0
    out = {}
    for r in range(num_relations):
        facts = triplets[triplets[:, 1] == r]
        if not len(facts):
            out[r] = "unclassified"
            continue
        tails_per_head = len(facts) / len(np.unique(facts[:, 0]))
        heads_per_tail = len(facts) / len(np.unique(facts[:, 2]))
        head_side = "N" if heads_per_tail >= threshold else "1"
        tail_side = "N" if tails_per_head >= threshold else "1"
        out[r] = f"{head_side}-{tail_side}"
    return out


@dataclass
class ClassificationReport:
    auroc: float
    ap: float
    num_positive: int
    num_negative: int

    def as_dict(self):
        return {"auroc": self.auroc, "ap": self.ap}

    def to_tsv(self) -> str:
        return "".join(f"{k}\t{format_float(v)}\n" for k, v in self.as_dict().items())

    def to_table(self) -> str:
        return f"auroc  {self.auroc:.4f}\nap     {self.ap:.4f}"


def auroc_ap(positive_scores, negative_scores) -> tuple[float, float]:
    """AUROC (rank-sum, ties count one half) and step-interpolated average precision."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if not len(pos) or not len(neg):
        raise ArgumentError("need at least one positive and one negative score")
    if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
        raise NumericError("non-finite score in classification metrics")
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    auroc = (ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # one operating point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(labels)[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return float(auroc), ap


def nbfnet_scorer(graph: KnowledgeGraph, config: ModelConfig, params: ModelParams,
                  edge_mask=None) -> Scorer:
    """Logits of every tail entity for each (source, query) group."""
    def scorer(sources, queries):
        with ad.no_grad():
            h = propagate(graph, list(sources), list(queries), config, params, edge_mask)
            logits = decode(params, h).data
        return logits.reshape(len(sources), graph.num_entities)
    return scorer


def path_semiring_scorer(graph: KnowledgeGraph, semiring, iterations: int) -> Scorer:
    """Scores from a classical path semiring after ``iterations`` steps (query ignored)."""
    def scorer(sources, queries):
        return np.stack([generalized_bellman_ford(graph, semiring, int(u), iterations)
                         for u in sources])
    return scorer


def _score_groups(scorer: Scorer, groups, batch_size, workers) -> dict:
    groups = sorted(set(groups))
    chunks = [groups[i:i + batch_size] for i in range(0, len(groups), batch_size)]

    def run(chunk):
        return scorer([g[0] for g in chunk], [g[1] for g in chunk])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    out = {}
    for chunk, scores in zip(chunks, results):
        scores = np.asarray(scores, dtype=np.float64)
        if not np.isfinite(scores).all():
            raise NumericError("scorer produced non-finite scores")
        for g, row in zip(chunk, scores):
            out[g] = row
    return out


def _ranking_queries(triplets, inverse_offset):
    # each test triplet yields a tail query (u, q) -> v and a head query (v, q^-1) -> u
    out = []
    for u, q, v in triplets.tolist():
        out.append(("tail", q, (u, q), v, u))
        out.append(("head", q, (v, q + inverse_offset), u, v))
    return out


def evaluate_ranking(scorer: Scorer, graph: KnowledgeGraph, triplets, known, num_relations,
                     categories=None, sample_negatives=None, rng=None, batch_size=16,
                     workers=1) -> RankingReport:
    """Filtered head and tail ranking of ``triplets``.

    ``known`` lists every true triplet (the filter). With
    ``sample_negatives=k`` each query ranks against ``k`` entities drawn
    uniformly without replacement from the unfiltered candidates.
    """
    if sample_negatives is not None and sample_negatives < 1:
        raise ArgumentError(f"sampled ranking needs >= 1 negative, got {sample_negatives}")
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    index = FactIndex(np.asarray(known).tolist())
    queries = _ranking_queries(triplets, num_relations)
    fields = _score_groups(scorer, [g for _, _, g, _, _ in queries], batch_size, workers)
    V = graph.num_entities
    rng = np.random.default_rng(0) if rng is None else rng
    ranks = {p: [] for p in TIE_POLICIES}
    cats, sides = [], []
    for side, q, group, answer, anchor in queries:
        row = fields[group]
        if side == "tail":
            known_answers = index.known_tails(anchor, q)
        else:
            known_answers = index.known_heads(q, anchor)
        filtered = np.zeros(V, dtype=bool)
        filtered[list(known_answers)] = True
        filtered[answer] = True
        if sample_negatives is not None:
            pool = np.flatnonzero(~filtered)
            take = rng.choice(pool, size=min(sample_negatives, len(pool)), replace=False)
            keep = np.zeros(V, dtype=bool)
            keep[take] = True
            filtered = ~keep
        for policy in TIE_POLICIES:
            ranks[policy].append(filtered_rank(row[answer], row, filtered, policy))
        cats.append(categories.get(q, "unclassified") if categories else "all")
        sides.append(side)
    report = ranking_metrics(ranks["optimistic"], categories=cats, sides=sides)
    pessimistic = float((1.0 / np.asarray(ranks["pessimistic"], dtype=np.float64)).mean())
    if abs(pessimistic - report.mrr) > 1e-3:
        report.pessimistic_mrr = pessimistic
    return report


def sample_negative_pairs(num_nodes, count, excluded_pairs, rng) -> np.ndarray:
    """``count`` distinct unordered non-edges ``(a, b)`` with ``a != b``."""
    excluded = {(min(a, b), max(a, b)) for a, b in excluded_pairs}
    capacity = num_nodes * (num_nodes - 1) // 2 - len(excluded)
    if count > capacity:
        raise ArgumentError(f"cannot draw {count} non-edges, only {capacity} exist")
    chosen, out = set(), []
    while len(out) < count:
        a, b = (int(x) for x in rng.integers(num_nodes, size=2))
        key = (min(a, b), max(a, b))
        if a == b or key in excluded or key in chosen:
            continue
        chosen.add(key)
        out.append(key)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def evaluate_pairs(scorer: Scorer, graph: KnowledgeGraph, positive_pairs, negative_pairs,
                   query=0, symmetric=True, batch_size=16, workers=1) -> ClassificationReport:
    """AUROC / AP separating positive from negative node pairs.

    With ``symmetric`` a pair's score is ``s(a, b) + s(b, a)``.
    """
    positive_pairs = np.asarray(positive_pairs).reshape(-1, 2)
    negative_pairs = np.asarray(negative_pairs).reshape(-1, 2)
    pairs = np.concatenate([positive_pairs, negative_pairs])
    nodes = set(pairs[:, 0].tolist()) | (set(pairs[:, 1].tolist()) if symmetric else set())
    fields = _score_groups(scorer, [(n, query) for n in nodes], batch_size, workers)
    scores = np.array([fields[(a, query)][b] + (fields[(b, query)][a] if symmetric else 0.0)
                       for a, b in pairs.tolist()])
    auroc, ap = auroc_ap(scores[:len(positive_pairs)], scores[len(positive_pairs):])
    return ClassificationReport(auroc, ap, len(positive_pairs), len(negative_pairs))


def nbfnet_pair_scorer(graph, config, params, edge_mask=None) -> Scorer:
    """Like :func:`nbfnet_scorer` but returns pair representations, for symmetric decoding."""
    def scorer(sources, queries):
        with ad.no_grad():
            h = propagate(graph, list(sources), list(queries), config, params, edge_mask).data
        return h.reshape(len(sources), graph.num_entities, -1)
    return scorer


def evaluate_symmetric_pairs(graph, config, params, positive_pairs, negative_pairs, query=0,
                             batch_size=16, workers=1) -> ClassificationReport:
    """AUROC / AP with the symmetric score ``f(h(a, b) + h(b, a))``."""
    positive_pairs = np.asarray(positive_pairs).reshape(-1, 2)
    negative_pairs = np.asarray(negative_pairs).reshape(-1, 2)
    pairs = np.concatenate([positive_pairs, negative_pairs])
    nodes = sorted(set(pairs.ravel().tolist()))
    scorer = nbfnet_pair_scorer(graph, config, params)
    groups = [(n, query) for n in nodes]
    chunks = [groups[i:i + batch_size] for i in range(0, len(groups), batch_size)]

    def run(chunk):
        return scorer([g[0] for g in chunk], [g[1] for g in chunk])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    reps = {}
    for chunk, h in zip(chunks, results):
        for (n, _), row in zip(chunk, h):
            reps[n] = row
    combined = np.stack([reps[a][b] + reps[b][a] for a, b in pairs.tolist()])
    with ad.no_grad():
        scores = decode(params, combined).data
    if not np.isfinite(scores).all():
        raise NumericError("non-finite pair scores")
    auroc, ap = auroc_ap(scores[:len(positive_pairs)], scores[len(positive_pairs):])
    return ClassificationReport(auroc, ap, len(positive_pairs), len(negative_pairs))


def balanced_negatives(dataset, split="test", seed=0) -> np.ndarray:
    """Same number of non-edges as ``split`` has edges, avoiding every known edge."""
    positives = getattr(dataset, split)
    known = dataset.known_triplets(split)
    rng = np.random.default_rng(seed)
    return sample_negative_pairs(dataset.num_entities, len(positives),
                                 known[:, [0, 2]].tolist(), rng)


def evaluate(graph: KnowledgeGraph, splits, params: ModelParams, config: ModelConfig,
             protocol="kg-filtered", split="test", seed=0, batch_size=16, workers=1,
             num_sampled=50):
    """Score ``split`` of ``splits`` (a :class:`~nbfnet.datasets.Dataset`) with a trained network.

    * ``kg-filtered``: filtered head/tail ranking over all entities.
    * ``inductive-sampled``: ranking against ``num_sampled`` filtered random negatives.
    * ``homo-balanced``: AUROC / AP with an equal number of non-edges.
    """
    if protocol not in PROTOCOLS:
        raise ArgumentError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if (protocol == "homo-balanced") != bool(splits.homogeneous):
        kind = "homogeneous graph" if splits.homogeneous else "knowledge graph"
        raise ArgumentError(f"protocol {protocol!r} does not apply to a {kind}")
    if protocol == "inductive-sampled" and num_sampled < 1:
        raise ArgumentError(f"inductive protocol needs >= 1 sampled negative, got {num_sampled}")
    if protocol == "homo-balanced":
        pairs = getattr(splits, split)[:, [0, 2]]
        negatives = balanced_negatives(splits, split, seed)
        if config.symmetric:
            return evaluate_symmetric_pairs(graph, config, params, pairs, negatives,
                                            batch_size=batch_size, workers=workers)
        return evaluate_pairs(nbfnet_scorer(graph, config, params), graph, pairs, negatives,
                              symmetric=False, batch_size=batch_size, workers=workers)
    categories = relation_categories(splits.known_triplets(split), splits.num_relations)
    return evaluate_ranking(
        nbfnet_scorer(graph, config, params), graph, getattr(splits, split),
        splits.known_triplets(split), splits.num_relations, categories,
        sample_negatives=num_sampled if protocol == "inductive-sampled" else None,
        rng=np.random.default_rng(seed), batch_size=batch_size, workers=workers)
