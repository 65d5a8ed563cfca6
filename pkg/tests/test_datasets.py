import numpy as np
import pytest

from nbfnet.datasets import (Dataset, clustered_graph_edges, homogeneous_dataset, induced_subgraph_dataset,
                             load_cora, load_dataset_dir, load_edge_list, split_edges, toy_composition_kg)
from nbfnet.errors import ArgumentError, ParseError


class TestToyComposition:
    @pytest.mark.parametrize("seed", range(5))
    def test_rule_holds(self, seed):
        ds = toy_composition_kg(seed)
        assert (ds.num_entities, ds.num_relations) == (12, 3)
        facts = np.concatenate([ds.train, ds.valid, ds.test])
        first = {h: t for h, r, t in facts.tolist() if r == 0}
        second = {h: t for h, r, t in facts.tolist() if r == 1}
        composed = {h: t for h, r, t in facts.tolist() if r == 2}
        assert len(first) == len(second) == len(composed) == 12
        assert all(composed[x] == second[first[x]] for x in range(12))
        for mapping in (first, second, composed):
            assert sorted(mapping.values()) == list(range(12))
            assert all(k != v for k, v in mapping.items())

    def test_only_composed_relation_is_held_out(self):
        ds = toy_composition_kg(0)
        assert set(ds.valid[:, 1]) == set(ds.test[:, 1]) == {2}
        assert (len(ds.train), len(ds.valid), len(ds.test)) == (30, 2, 4)

    def test_seeded(self):
        assert toy_composition_kg(3).train.tobytes() == toy_composition_kg(3).train.tobytes()


class TestEdgeLists:
    def test_dedup_and_self_loops(self, tmp_path):
        path = tmp_path / "cora.cites"
        path.write_text("35 1033\n1033 35\n35 35\n# comment\n\n103482 35\n")
        edges, vocab = load_edge_list(path)
        assert edges.tolist() == [[0, 1], [0, 2]]
        assert vocab.entities == ["35", "1033", "103482"]

    def test_bad_line(self, tmp_path):
        path = tmp_path / "bad.cites"
        path.write_text("1 2\n3\n")
        with pytest.raises(ParseError):
            load_edge_list(path)

    def test_split_sizes(self):
        edges = np.arange(200).reshape(100, 2)
        train, valid, test = split_edges(edges, np.random.default_rng(0))
        assert (len(train), len(valid), len(test)) == (85, 5, 10)
        rows = {tuple(e) for part in (train, valid, test) for e in part.tolist()}
        assert len(rows) == 100

    def test_load_cora_format(self, tmp_path):
        edges = clustered_graph_edges(60, 2, 0.3, seed=2)
        path = tmp_path / "cora.cites"
        path.write_text("".join(f"p{a}\tp{b}\n" for a, b in edges.tolist()))
        ds = load_cora(path)
        assert ds.homogeneous and ds.num_entities == 60
        assert len(ds.train) + len(ds.valid) + len(ds.test) == len(edges)
        assert ds.vocab.entities[0] == f"p{edges[0, 0]}"


class TestHomogeneous:
    def test_dataset_uses_one_relation(self):
        ds = homogeneous_dataset(clustered_graph_edges(50, 2, 0.3, seed=0), 50, np.random.default_rng(0))
        assert set(np.concatenate([ds.train, ds.valid, ds.test])[:, 1]) == {0}
        g = ds.fact_graph()
        assert g.num_edges == 2 * len(ds.train) + 50

    def test_induced_subgraph(self):
        edges = clustered_graph_edges(200, 2, 0.3, seed=0)
        ds = induced_subgraph_dataset(edges, 200, 40, np.random.default_rng(0))
        assert ds.num_entities == 40
        facts = np.concatenate([ds.train, ds.valid, ds.test])
        assert facts[:, [0, 2]].max() < 40

    def test_clustered_graph_is_simple(self):
        edges = clustered_graph_edges(100, 2, 0.5, seed=4)
        assert (edges[:, 0] < edges[:, 1]).all()
        assert len({tuple(e) for e in edges.tolist()}) == len(edges)


class TestDatasetDir:
    def write(self, root, name, rows):
        (root / name).write_text("".join("\t".join(r) + "\n" for r in rows))

    def test_transductive(self, tmp_path):
        self.write(tmp_path, "train.txt", [("a", "likes", "b"), ("b", "knows", "c")])
        self.write(tmp_path, "valid.txt", [("a", "knows", "c")])
        self.write(tmp_path, "test.txt", [("c", "likes", "a")])
        ds = load_dataset_dir(tmp_path)
        assert (ds.num_entities, ds.num_relations, ds.inductive) == (3, 2, False)
        assert ds.test.tolist() == [[2, 0, 0]]

    def test_inductive(self, tmp_path):
        self.write(tmp_path, "train.txt", [("a", "likes", "b"), ("b", "knows", "c")])
        self.write(tmp_path, "valid.txt", [("a", "knows", "c")])
        self.write(tmp_path, "test_graph.txt", [("x", "likes", "y"), ("y", "knows", "z")])
        self.write(tmp_path, "test.txt", [("x", "knows", "z")])
        ds = load_dataset_dir(tmp_path)
        assert ds.inductive and ds.test_num_entities == 3
        assert ds.fact_graph("test").num_entities == 3
        assert len(ds.known_triplets("test")) == 3

    def test_unseen_relation_in_test_graph(self, tmp_path):
        self.write(tmp_path, "train.txt", [("a", "likes", "b")])
        self.write(tmp_path, "valid.txt", [("b", "likes", "a")])
        self.write(tmp_path, "test_graph.txt", [("x", "hates", "y")])
        self.write(tmp_path, "test.txt", [("y", "likes", "x")])
        with pytest.raises(ParseError):
            load_dataset_dir(tmp_path)

    def test_overlapping_splits_rejected(self):
        with pytest.raises(ArgumentError):
            Dataset(2, 1, np.array([[0, 0, 1]]), np.array([[0, 0, 1]]), np.zeros((0, 3)))
