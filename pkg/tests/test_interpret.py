import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbfnet import autodiff as ad
from nbfnet.datasets import random_graph, toy_composition_kg
from nbfnet.errors import ArgumentError
from nbfnet.interpret import (ImportanceGraph, edge_importance, exhaustive_top_k_paths, explain,
                              format_interpretation, format_path, relation_name, top_k_paths)
from nbfnet.kgraph import Vocab, build_graph
from nbfnet.model import ModelConfig, ModelParams, decode, propagate, score_pair

# a 6-node multigraph where a wider beam loses the best path (see test below)
BEAM_HEADS = [4, 1, 2, 3, 1, 5, 1, 0, 0, 3, 2, 5, 1, 4, 5, 4, 1, 1, 3, 2, 2, 2, 0, 0, 2, 5, 0, 4,
              1, 4, 4, 2, 3, 1, 0]
BEAM_TAILS = [1, 3, 2, 2, 5, 1, 3, 0, 4, 1, 3, 0, 3, 5, 3, 0, 5, 3, 1, 5, 1, 3, 0, 5, 2, 1, 3, 0,
              2, 0, 2, 5, 5, 2, 0]
BEAM_WEIGHTS = [0.578, -0.512, -1.941, 0.041, -0.22, 1.241, 0.931, -1.025, -0.116, 1.404, -0.192,
                -0.729, 1.463, 0.582, -1.718, -0.753, 0.35, 1.583, -0.978, -0.446, -1.869, 0.757,
                -0.2, 0.905, -1.076, -0.81, 0.526, 0.36, 0.512, 1.624, 1.018, -0.677, -1.155,
                0.811, -1.086]


def importance_graph(graph, weights):
    return ImportanceGraph(graph, np.asarray(weights, dtype=np.float64), (0, 0, 0), 0.5)


def random_importance(rng, n, m, integer=False):
    g = random_graph(rng, n, m, num_relations=2)
    w = rng.integers(-3, 4, size=m).astype(float) if integer else rng.normal(size=m)
    return importance_graph(g, w)


def as_tuples(paths):
    return [(p.edges, p.weight) for p in paths]


def small_model(graph, seed=0, **kw):
    base = dict(num_layers=2, hidden_dim=4, decoder_hidden=4)
    base.update(kw)
    config = ModelConfig(**base)
    return config, ModelParams.init(config, graph.num_relations, np.random.default_rng(seed))


class TestEdgeImportance:
    def test_matches_finite_differences(self):
        ds = toy_composition_kg(0)
        g = ds.fact_graph()
        config, params = small_model(g)
        u, q, v = ds.test[0].tolist()
        imp = edge_importance(g, params, config, (u, q, v))
        assert imp.importance.shape == (g.num_edges,)
        gate = ad.parameter(np.ones(g.num_edges))

        def prob():
            h = propagate(g, [u], [q], config, params, None, gate)
            return ad.sum_(ad.sigmoid(decode(params, h[v:v + 1])))

        err = ad.grad_check(prob, [gate])
        assert err <= 1e-4
        gate.zero_grad()
        ad.backward(prob())
        np.testing.assert_allclose(imp.importance, gate.grad, rtol=1e-12, atol=1e-15)
        assert imp.probability == pytest.approx(score_pair(g, u, q, v, config, params), abs=1e-15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.integers(0, 10_000))
    def test_unreachable_edges_have_zero_importance(self, T, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, 10, 14, num_relations=2)
        config, params = small_model(g, seed, num_layers=T)
        v = int(rng.integers(10))
        dist = {v: 0}
        queue = deque([v])
        while queue:
            y = queue.popleft()
            for e in g.in_edges[g.in_indptr[y]:g.in_indptr[y + 1]].tolist():
                x = int(g.heads[e])
                if x not in dist:
                    dist[x] = dist[y] + 1
                    queue.append(x)
        far = np.array([dist.get(int(t), math.inf) > T - 1 for t in g.tails])
        imp = edge_importance(g, params, config, (0, 1, v))
        assert (imp.importance[far] == 0.0).all()

    def test_gate_is_linear_in_message(self):
        g = build_graph([(0, 0, 1), (2, 0, 1), (0, 0, 2)], 3, 1)
        config, params = small_model(g, num_layers=1, layer_norm=False, shortcut=False, aggregate="sum")
        params["layers.0.linear.weight"].data = np.eye(4)
        params["layers.0.linear.bias"].data = np.full(4, 100.0)  # keeps the ReLU linear
        fields = []
        for value in (0.0, 1.0, 2.0):
            gate = np.ones(3)
            gate[0] = value
            fields.append(propagate(g, [0], [0], config, params, None, ad.constant(gate)).data[1])
        np.testing.assert_allclose(fields[2] - fields[1], fields[1] - fields[0], atol=1e-12)
        assert np.abs(fields[1] - fields[0]).max() > 0

    def test_masked_edges_get_zero(self):
        ds = toy_composition_kg(1)
        g = ds.fact_graph()
        config, params = small_model(g)
        keep = np.ones(g.num_edges, bool)
        keep[::3] = False
        imp = edge_importance(g, params, config, ds.test[0].tolist(), edge_mask=keep)
        assert (imp.importance[~keep] == 0).all()

    def test_symmetric_mode(self):
        g = build_graph([(0, 0, 1), (1, 0, 2), (2, 0, 3)], 4, 1, directed=False, add_self_loops=True)
        config, params = small_model(g, symmetric=True)
        imp = edge_importance(g, params, config, (0, 0, 3))
        assert imp.probability == pytest.approx(score_pair(g, 0, 0, 3, config, params), abs=1e-15)

    def test_bad_triplet(self):
        g = build_graph([(0, 0, 1)], 2, 1)
        config, params = small_model(g)
        with pytest.raises(ArgumentError):
            edge_importance(g, params, config, (0, 0, 5))


class TestTopKPaths:
    def test_two_disjoint_paths(self):
        g = build_graph([(0, 0, 1), (1, 0, 3), (0, 0, 2), (2, 0, 3)], 4, 1)
        imp = importance_graph(g, [0.4, 0.5, 0.3, 0.4])
        paths = top_k_paths(imp, 0, 3, 2, 3)
        assert [p.edges for p in paths] == [(0, 1), (2, 3)]
        assert [p.weight for p in paths] == pytest.approx([0.9, 0.7], abs=1e-15)

    def test_single_edge(self):
        g = build_graph([(0, 0, 1)], 2, 1)
        paths = top_k_paths(importance_graph(g, [0.2]), 0, 1, 1, 1)
        assert as_tuples(paths) == [((0,), 0.2)]
        assert paths[0].nodes(g) == [0, 1]

    def test_no_path_is_empty(self):
        g = build_graph([(0, 0, 1), (1, 0, 2)], 3, 1)
        assert top_k_paths(importance_graph(g, [1.0, 1.0]), 0, 2, 1, 1) == []
        assert top_k_paths(importance_graph(g, [1.0, 1.0]), 2, 0, 1, 4) == []

    def test_argument_checks(self):
        g = build_graph([(0, 0, 1)], 2, 1)
        imp = importance_graph(g, [0.2])
        with pytest.raises(ArgumentError):
            top_k_paths(imp, 0, 1, 0, 2)
        with pytest.raises(ArgumentError):
            top_k_paths(imp, 0, 1, 3, 2, beam_width=2)
        with pytest.raises(ArgumentError):
            top_k_paths(imp, 0, 5, 1, 2)

    def test_tie_break_by_edge_ids(self):
        g = build_graph([(0, 0, 1), (0, 0, 1), (0, 0, 1)], 2, 1)
        paths = top_k_paths(importance_graph(g, [0.5, 0.5, 0.5]), 0, 1, 3, 1)
        assert [p.edges for p in paths] == [(0,), (1,), (2,)]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 30), st.integers(1, 4), st.integers(1, 6),
           st.booleans(), st.integers(0, 10_000))
    def test_unbounded_beam_equals_exhaustive(self, n, m, k, T, integer, seed):
        rng = np.random.default_rng(seed)
        imp = random_importance(rng, n, m, integer)
        u, v = (int(x) for x in rng.integers(n, size=2))
        assert as_tuples(top_k_paths(imp, u, v, k, T)) == as_tuples(exhaustive_top_k_paths(imp, u, v, k, T))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 30), st.integers(1, 3), st.integers(1, 6),
           st.integers(0, 10_000))
    def test_paths_are_simple_chains_with_summed_weights(self, n, m, k, T, seed):
        rng = np.random.default_rng(seed)
        imp = random_importance(rng, n, m)
        g = imp.graph
        for path in top_k_paths(imp, 0, n - 1, k, T, beam_width=k + 1):
            nodes = path.nodes(g)
            assert nodes[0] == 0 and nodes[-1] == n - 1
            assert len(set(nodes)) == len(nodes)
            for a, b in zip(path.edges, path.edges[1:]):
                assert g.tails[a] == g.heads[b]
            assert abs(path.weight - sum(imp.importance[e] for e in path.edges)) <= 1e-12
            assert len(path.edges) <= T

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 25), st.integers(1, 3), st.integers(1, 6),
           st.integers(0, 10_000))
    def test_dag_beam_at_least_k_is_exact(self, n, m, k, T, seed):
        # without cycles every extension stays simple, so a per-node beam of k loses nothing
        rng = np.random.default_rng(seed)
        a, b = rng.integers(n, size=(2, m))
        keep = a != b
        heads, tails = np.minimum(a, b)[keep], np.maximum(a, b)[keep]
        g = build_graph(np.stack([heads, np.zeros_like(heads), tails], 1), n, 1)
        imp = importance_graph(g, rng.normal(size=g.num_edges))
        exact = as_tuples(exhaustive_top_k_paths(imp, 0, n - 1, k, T))
        for B in (k, k + 1, k + 3):
            assert as_tuples(top_k_paths(imp, 0, n - 1, k, T, B)) == exact

    def test_wider_beam_can_lose_best_path(self):
        # per-node pruning of simple paths is not monotone in the beam width on cyclic graphs
        g = build_graph(list(zip(BEAM_HEADS, [0] * len(BEAM_HEADS), BEAM_TAILS)), 6, 1)
        imp = importance_graph(g, BEAM_WEIGHTS)
        narrow = top_k_paths(imp, 0, 5, 1, 6, beam_width=1)[0].weight
        wide = top_k_paths(imp, 0, 5, 1, 6, beam_width=2)[0].weight
        best = exhaustive_top_k_paths(imp, 0, 5, 1, 6)[0].weight
        assert wide < narrow <= best
        assert top_k_paths(imp, 0, 5, 1, 6)[0].weight == best

    def test_exhaustive_size_guard(self):
        g = build_graph([(0, 0, 1)], 17, 1)
        with pytest.raises(ArgumentError):
            exhaustive_top_k_paths(importance_graph(g, [1.0]), 0, 1, 1, 2)


class TestFormatting:
    def test_relation_names(self):
        g = build_graph([(0, 0, 1)], 2, 2, augment_inverse=True)
        vocab = Vocab(["a", "b"], ["likes", "knows"])
        assert relation_name(g, 0, vocab) == "likes"
        assert relation_name(g, 3, vocab) == "knows⁻¹"
        assert relation_name(g, 2) == "r0⁻¹"

    def test_self_loop_name(self):
        g = build_graph([(0, 0, 1)], 2, 1, directed=False, add_self_loops=True)
        assert relation_name(g, g.self_loop_relation) == "self"

    def test_path_text(self):
        g = build_graph([(0, 0, 1), (1, 1, 2)], 3, 2, augment_inverse=True)
        vocab = Vocab(["a", "b", "c"], ["p", "q"])
        assert format_path(g, [0, 2], vocab) == "(a, p, b) ∧ (b, p⁻¹, a)"
        assert format_path(g, [0, 1]) == "(0, r0, 1) ∧ (1, r1, 2)"

    def test_explain_end_to_end(self):
        ds = toy_composition_kg(0)
        g = ds.fact_graph()
        config, params = small_model(g)
        triplet = ds.test[0].tolist()
        imp, paths = explain(g, params, config, triplet, k=2, vocab=ds.vocab)
        assert len(paths) <= 2
        for p in paths:
            assert len(p.edges) <= config.num_layers
            assert p.text.startswith("(" + ds.vocab.entities[triplet[0]])
        text = format_interpretation(imp, paths, ds.vocab)
        assert text.splitlines()[0].startswith("query\t(")
        assert len(text.splitlines()) == 1 + len(paths)
