"""Semiring-generic Bellman-Ford solver and the five classical path methods."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ArgumentError, RefusalError
from .kgraph import KnowledgeGraph

MAX_ORACLE_NODES = 16
MAX_ORACLE_LENGTH = 8


def _unit_weights(graph, mask):
    return graph.weights


@dataclass(frozen=True)
class PathSemiring:
    """Operator bundle ``<plus, times, zero, one>`` plus an edge-weight map.

    ``plus`` and ``times`` are numpy ufuncs (or any vectorised binary
    callables). ``edge_weight(graph, keep_mask)`` returns one scalar per
    edge. ``sampler(rng, n)`` draws valid scalars for the axiom checker.
    """

    name: str
    plus: Callable
    times: Callable
    zero: float
    one: float
    edge_weight: Callable[[KnowledgeGraph, Union[np.ndarray, None]], np.ndarray] = field(
        default=_unit_weights, repr=False)
    sampler: Callable | None = field(default=None, repr=False)

    def add(self, a, b):
        return self.plus(a, b)

    def mul(self, a, b):
        """``times`` with an explicit zero short-circuit (avoids inf - inf style NaNs)."""
        with np.errstate(invalid="ignore"):
            raw = self.times(a, b)
        hit_zero = np.logical_or(np.equal(a, self.zero), np.equal(b, self.zero))
        if np.ndim(raw) == 0:
            return self.zero if hit_zero else raw
        return np.where(hit_zero, self.zero, raw)


@dataclass(frozen=True)
class Katz:
    beta: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ArgumentError(f"Katz beta must lie in (0, 1), got {self.beta}")


@dataclass(frozen=True)
class PersonalizedPageRank:
    alpha: float = 0.85

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"PPR alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class GraphDistance:
    pass


@dataclass(frozen=True)
class WidestPath:
    pass


@dataclass(frozen=True)
class MostReliablePath:
    pass


ClassicalMethod = Union[Katz, PersonalizedPageRank, GraphDistance, WidestPath, MostReliablePath]


def _sample_with(rng, n, body, specials, p_special=0.1):
    values = body(rng, n)
    if specials:
        pick = rng.random(n) < p_special
        values[pick] = rng.choice(np.asarray(specials, dtype=np.float64), size=int(pick.sum()))
    return values


def make_classical(method: ClassicalMethod, graph: KnowledgeGraph | None = None) -> PathSemiring:
    """Semiring for one classical method.

    ``graph`` is only used for validation (most-reliable weights must lie
    in [0, 1]); the returned edge-weight map works on any graph.
    """
    if isinstance(method, Katz):
        beta = method.beta
        return PathSemiring(
            f"katz(beta={beta:g})", np.add, np.multiply, 0.0, 1.0,
            lambda g, mask: beta * g.weights,
            lambda rng, n: _sample_with(rng, n, lambda r, k: r.uniform(0, 10, k), [0.0, 1.0]),
        )
    if isinstance(method, PersonalizedPageRank):
        alpha = method.alpha

        def ppr_weight(g, mask):
            w = g.weights if mask is None else np.where(mask, g.weights, 0.0)
            out = np.bincount(g.heads, weights=w, minlength=g.num_entities)
            denom = out[g.heads]
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(denom > 0, alpha * g.weights / np.where(denom > 0, denom, 1.0), 0.0)

        return PathSemiring(
            f"ppr(alpha={alpha:g})", np.add, np.multiply, 0.0, 1.0, ppr_weight,
            lambda rng, n: _sample_with(rng, n, lambda r, k: r.uniform(0, 1, k), [0.0, 1.0]),
        )
    if isinstance(method, GraphDistance):
        return PathSemiring(
            "distance", np.minimum, np.add, math.inf, 0.0, _unit_weights,
            lambda rng, n: _sample_with(rng, n, lambda r, k: r.uniform(0, 10, k), [math.inf, 0.0]),
        )
    if isinstance(method, WidestPath):
        return PathSemiring(
            "widest", np.maximum, np.minimum, -math.inf, math.inf, _unit_weights,
            lambda rng, n: _sample_with(rng, n, lambda r, k: r.normal(0, 10, k), [-math.inf, math.inf]),
        )
    if isinstance(method, MostReliablePath):
        if graph is not None and graph.num_edges and (
                graph.weights.min() < 0 or graph.weights.max() > 1):
            raise ArgumentError("most reliable path needs edge weights in [0, 1]")
        return PathSemiring(
            "reliable", np.maximum, np.multiply, 0.0, 1.0, _unit_weights,
            lambda rng, n: _sample_with(rng, n, lambda r, k: r.uniform(0, 1, k), [0.0, 1.0]),
        )
    raise ArgumentError(f"unknown classical method {method!r}")


METHODS = {
    "katz": lambda beta=None, alpha=None: Katz(beta if beta is not None else Katz.beta),
    "ppr": lambda beta=None, alpha=None: PersonalizedPageRank(
        alpha if alpha is not None else PersonalizedPageRank.alpha),
    "distance": lambda beta=None, alpha=None: GraphDistance(),
    "widest": lambda beta=None, alpha=None: WidestPath(),
    "reliable": lambda beta=None, alpha=None: MostReliablePath(),
}


def _residual(new, old):
    same = new == old
    with np.errstate(invalid="ignore"):
        diff = np.abs(new - old)
    diff = np.where(same, 0.0, diff)
    return float(diff.max()) if len(diff) else 0.0


def _reduce_into(semiring, acc, index, values):
    if isinstance(semiring.plus, np.ufunc):
        semiring.plus.at(acc, index, values)
    else:
        for i, x in zip(index.tolist(), values.tolist()):
            acc[i] = semiring.plus(acc[i], x)


def bellman_ford_trace(graph: KnowledgeGraph, semiring: PathSemiring, source: int, T: int,
                       edge_mask=None):
    """Run the solver and also return the per-iteration residuals."""
    if T < 0:
        raise ArgumentError(f"iteration count must be >= 0, got {T}")
    if not 0 <= source < graph.num_entities:
        raise ArgumentError(f"source {source} out of range [0, {graph.num_entities})")
    mask = None
    if edge_mask is not None:
        mask = np.asarray(edge_mask, dtype=bool)
        if mask.shape != (graph.num_edges,):
            raise ArgumentError(f"edge mask must have length {graph.num_edges}")
    weight = np.asarray(semiring.edge_weight(graph, mask), dtype=np.float64)

    # messages are folded in the order of each node's incoming list
    order = graph.in_edges if mask is None else graph.in_edges[mask[graph.in_edges]]
    src, dst, w = graph.heads[order], graph.tails[order], weight[order]

    boundary = np.full(graph.num_entities, semiring.zero, dtype=np.float64)
    boundary[source] = semiring.one
    h = boundary.copy()
    residuals = []
    for _ in range(T):
        acc = np.full(graph.num_entities, semiring.zero, dtype=np.float64)
        _reduce_into(semiring, acc, dst, np.asarray(semiring.mul(h[src], w), dtype=np.float64))
        new = np.asarray(semiring.add(acc, boundary), dtype=np.float64)
        residuals.append(_residual(new, h))
        h = new
    return h, residuals


def generalized_bellman_ford(graph: KnowledgeGraph, semiring: PathSemiring, source: int, T: int,
                             edge_mask=None) -> np.ndarray:
    """``h^(T)(source, v)`` for every node ``v``.

    Starts from the boundary condition (``one`` at the source, ``zero``
    elsewhere) and applies ``T`` iterations of
    ``h(v) = (plus over (x, r, v) of h(x) times w(x, r, v)) plus h0(v)``.
    Edges where ``edge_mask`` is false are skipped.
    """
    return bellman_ford_trace(graph, semiring, source, T, edge_mask)[0]


def brute_force_path_sums(graph: KnowledgeGraph, semiring: PathSemiring, u: int, max_len: int,
                          edge_mask=None) -> np.ndarray:
    """Plus-fold over every walk of length <= ``max_len`` from ``u``, per target.

    Walks may repeat nodes. Refuses graphs above 16 nodes or lengths above 8.
    """
    if graph.num_entities > MAX_ORACLE_NODES or max_len > MAX_ORACLE_LENGTH:
        raise RefusalError(
            f"walk enumeration limited to <= {MAX_ORACLE_NODES} nodes and length <= "
            f"{MAX_ORACLE_LENGTH} (got {graph.num_entities} nodes, length {max_len})")
    if max_len < 0:
        raise ArgumentError(f"max_len must be >= 0, got {max_len}")
    if not 0 <= u < graph.num_entities:
        raise ArgumentError(f"node {u} out of range [0, {graph.num_entities})")
    mask = None if edge_mask is None else np.asarray(edge_mask, dtype=bool)
    weight = np.asarray(semiring.edge_weight(graph, mask), dtype=np.float64)
    order = graph.out_edges if mask is None else graph.out_edges[mask[graph.out_edges]]
    degree = np.bincount(graph.heads[order], minlength=graph.num_entities)
    start = np.concatenate([[0], np.cumsum(degree)])

    # one entry per walk: its end node and its times-product, extended a level at a time
    totals = np.full(graph.num_entities, semiring.zero, dtype=np.float64)
    ends = np.array([u])
    products = np.array([semiring.one], dtype=np.float64)
    for length in range(max_len + 1):
        _fold(semiring, totals, ends, products)
        if length == max_len or not len(ends):
            break
        counts = degree[ends]
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        edges = order[np.repeat(start[ends], counts) + offsets]
        ends = graph.tails[edges]
        products = np.asarray(semiring.mul(np.repeat(products, counts), weight[edges]), dtype=np.float64)
    return totals


def _fold(semiring, totals, ends, products):
    if isinstance(semiring.plus, np.ufunc):
        semiring.plus.at(totals, ends, products)
        return
    for x, value in zip(ends.tolist(), products.tolist()):
        totals[x] = semiring.add(totals[x], value)


def brute_force_path_sum(graph: KnowledgeGraph, semiring: PathSemiring, u: int, v: int,
                         max_len: int, edge_mask=None) -> float:
    if not 0 <= v < graph.num_entities:
        raise ArgumentError(f"node {v} out of range [0, {graph.num_entities})")
    return float(brute_force_path_sums(graph, semiring, u, max_len, edge_mask)[v])


AXIOMS = (
    "plus_commutative",
    "plus_associative",
    "plus_identity",
    "times_associative",
    "times_absorption",
    "times_identity",
    "left_distributive",
    "right_distributive",
)


@dataclass
class AxiomReport:
    semiring: str
    samples: int
    passed: dict = field(default_factory=dict)
    counterexamples: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> list[str]:
        return [law for law, ok in self.passed.items() if not ok]


def _same(x, y, rtol):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        close = np.abs(x - y) <= rtol * np.maximum(np.abs(x), np.abs(y))
    return (x == y) | (np.isfinite(x) & np.isfinite(y) & close)


def check_semiring_axioms(semiring: PathSemiring, samples: int = 10_000, rng=None, sampler=None,
                          rtol: float = 1e-9) -> AxiomReport:
    """Test the eight semiring laws on random scalar triples.

    Laws are checked on the raw ``plus``/``times`` operators (the solver's
    zero short-circuit is not used here). Values are compared exactly,
    or within ``rtol`` relative error for finite values.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    sampler = sampler or semiring.sampler
    if sampler is None:
        raise ArgumentError(f"semiring {semiring.name} has no domain sampler")
    a, b, c = (np.asarray(sampler(rng, samples), dtype=np.float64) for _ in range(3))
    P, M = semiring.plus, semiring.times
    zero = np.full_like(a, semiring.zero)
    one = np.full_like(a, semiring.one)
    with np.errstate(invalid="ignore", over="ignore"):
        checks = {
            "plus_commutative": (P(a, b), P(b, a)),
            "plus_associative": (P(P(a, b), c), P(a, P(b, c))),
            "plus_identity": (np.concatenate([P(a, zero), P(zero, a)]), np.concatenate([a, a])),
            "times_associative": (M(M(a, b), c), M(a, M(b, c))),
            "times_absorption": (np.concatenate([M(a, zero), M(zero, a)]), np.concatenate([zero, zero])),
            "times_identity": (np.concatenate([M(a, one), M(one, a)]), np.concatenate([a, a])),
            "left_distributive": (M(a, P(b, c)), P(M(a, b), M(a, c))),
            "right_distributive": (M(P(b, c), a), P(M(b, a), M(c, a))),
        }
    report = AxiomReport(semiring.name, samples)
    triples = np.stack([a, b, c], axis=1)
    for law in AXIOMS:
        lhs, rhs = checks[law]
        ok = _same(lhs, rhs, rtol)
        report.passed[law] = bool(ok.all())
        if not ok.all():
            i = int(np.flatnonzero(~ok)[0]) % samples
            report.counterexamples[law] = tuple(float(x) for x in triples[i])
    return report
