import importlib
import json
import math

import numpy as np
import pytest

from nbfnet import autodiff as ad
from nbfnet.datasets import toy_composition_kg
from nbfnet.errors import ConfigError, CorruptionError, FormatError, NumericError
from nbfnet.evaluate import evaluate
from nbfnet.kgraph import FactIndex, mask_query_edges
from nbfnet.model import ModelConfig, ModelParams
from nbfnet.train import (TrainConfig, checkpoint_bytes, configs_from_mapping, format_config,
                          kg_rows_loss, load_checkpoint, load_config, parse_config_text,
                          sample_kg_rows, save_checkpoint, train)

# the package re-exports train(), which shadows the submodule attribute
train_mod = importlib.import_module("nbfnet.train")

TOY_MODEL = dict(num_layers=4, hidden_dim=16, num_negative=32, adversarial_temperature=0.5)


def toy(seed=0):
    ds = toy_composition_kg(seed)
    return ds, ds.fact_graph()


def quick_model(**kw):
    base = dict(num_layers=2, hidden_dim=8, decoder_hidden=8, num_negative=4)
    base.update(kw)
    return ModelConfig(**base)


class TestTrainConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_zero_batch_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.learning_rate) == (20, 256, 5e-3)


class TestSampling:
    def test_rows_group_by_side(self):
        ds, g = toy()
        known = FactIndex(ds.train.tolist())
        rng = np.random.default_rng(0)
        batch = ds.train[:20].tolist()
        rows = sample_kg_rows(g, batch, 5, rng, known)
        R = g.num_base_relations
        for (h, r, t), ((src, q), target, negs) in zip(batch, rows):
            if q == r:
                assert (src, target) == (h, t)
                assert not set(negs) & known.known_tails(h, r)
            else:
                assert (src, q, target) == (t, r + R, h)
                assert not set(negs) & known.known_heads(r, t)
            assert len(negs) == 5

    def test_both_sides_used(self):
        ds, g = toy()
        rows = sample_kg_rows(g, ds.train.tolist(), 1, np.random.default_rng(1),
                              FactIndex(ds.train.tolist()))
        R = g.num_base_relations
        sides = {q >= R for (_, q), _, _ in rows}
        assert sides == {True, False}


class TestSingleStep:
    def test_loss_does_not_increase(self):
        passed = 0
        for seed in range(20):
            ds, g = toy(seed)
            config = ModelConfig(**TOY_MODEL)
            rng = np.random.default_rng(seed)
            params = ModelParams.init(config, g.num_relations, rng)
            positive = ds.train[int(rng.integers(len(ds.train)))].tolist()
            rows = sample_kg_rows(g, [positive], config.num_negative, rng, FactIndex(ds.train.tolist()))
            mask = mask_query_edges(g, [positive])
            loss = kg_rows_loss(g, rows, mask, config, params)
            before = loss.item()
            ad.backward(loss)
            ad.adam_step(params.tensors, params.grads(), ad.AdamState(lr=1e-3))
            with ad.no_grad():
                after = kg_rows_loss(g, rows, mask, config, params).item()
            passed += after <= before
        assert passed >= 18


class TestMasking:
    def test_query_edges_hidden_during_own_forward(self, monkeypatch):
        ds, g = toy(2)
        seen = []
        real = train_mod.propagate

        def spy(graph, sources, queries, config, params, edge_mask=None, gate=None):
            seen.append(np.array(edge_mask, copy=True))
            return real(graph, sources, queries, config, params, edge_mask, gate)

        monkeypatch.setattr(train_mod, "propagate", spy)
        batches = []
        real_step = train_mod.kg_step_loss

        def step(graph, batch, *args):
            batches.append(batch)
            return real_step(graph, batch, *args)

        monkeypatch.setattr(train_mod, "kg_step_loss", step)
        train(g, ds, quick_model(), TrainConfig(epochs=1, batch_size=4, steps_per_epoch=3))
        assert len(seen) == len(batches) == 3
        for mask, batch in zip(seen, batches):
            for h, _, t in batch:
                joined = ((g.heads == h) & (g.tails == t)) | ((g.heads == t) & (g.tails == h))
                assert joined.any()
                assert not mask[joined].any()


class TestTrainLoop:
    def test_history_and_improvement(self):
        ds, g = toy(0)
        config = ModelConfig(**TOY_MODEL)
        records = []
        result = train(g, ds, config, TrainConfig(epochs=4, batch_size=8, steps_per_epoch=20),
                       log=records.append)
        assert [r.epoch for r in result.history] == [0, 1, 2, 3, 4]
        assert records == result.history
        assert math.isnan(result.history[0].loss)
        assert max(r.valid_metric for r in result.history[1:]) > result.history[0].valid_metric
        best = result.history[result.best_epoch].valid_metric
        again = evaluate(g, ds, result.params, config, split="valid").mrr
        assert again == pytest.approx(best, abs=1e-12)

    def test_same_seed_same_curve(self):
        ds, g = toy(1)
        runs = [train(g, ds, quick_model(), TrainConfig(epochs=2, batch_size=4, steps_per_epoch=3, seed=5))
                for _ in range(2)]
        assert [(r.loss, r.valid_metric) for r in runs[0].history[1:]] == \
               [(r.loss, r.valid_metric) for r in runs[1].history[1:]]

    def test_non_finite_loss_dumps_inputs(self, monkeypatch, tmp_path):
        ds, g = toy(0)

        def bad_step(graph, batch, config, params, rng, known):
            return ad.mul(ad.sum_(params["query"]), math.nan), batch

        monkeypatch.setattr(train_mod, "kg_step_loss", bad_step)
        ckpt = tmp_path / "model.ckpt"
        with pytest.raises(NumericError, match="non-finite"):
            train(g, ds, quick_model(), TrainConfig(epochs=1, batch_size=2, checkpoint=str(ckpt)))
        dump = json.loads((tmp_path / "model.ckpt.nonfinite.json").read_text())
        assert dump["epoch"] == 1 and len(dump["batch"]) == 2

    def test_homogeneous_training_runs(self):
        from nbfnet.datasets import clustered_graph_edges, homogeneous_dataset
        edges = clustered_graph_edges(60, 2, 0.3, seed=0)
        ds = homogeneous_dataset(edges, 60, np.random.default_rng(0))
        g = ds.fact_graph()
        config = quick_model(num_negative=1, symmetric=True)
        result = train(g, ds, config, TrainConfig(epochs=1, batch_size=8, steps_per_epoch=2))
        assert 0.0 <= result.history[-1].valid_metric <= 1.0


class TestConfigFiles:
    def test_parse_and_split(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# desk preset\nnum_layers = 4\nhidden_dim=16\nsymmetric = true\n"
                        "adversarial_temperature = none\nepochs = 3\nlearning_rate = 0.01\n")
        model, trainer = load_config(path)
        assert (model.num_layers, model.hidden_dim, model.symmetric) == (4, 16, True)
        assert model.adversarial_temperature is None
        assert (trainer.epochs, trainer.learning_rate) == (3, 0.01)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="hiden_dim"):
            configs_from_mapping({"hiden_dim": "4"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            configs_from_mapping({"num_layers": "four"})

    def test_malformed_and_duplicate_lines(self):
        with pytest.raises(ConfigError):
            parse_config_text("num_layers 4\n")
        with pytest.raises(ConfigError):
            parse_config_text("a = 1\na = 2\n")

    def test_format_round_trip(self):
        model = ModelConfig(num_layers=3, adversarial_temperature=0.25, message="rotate")
        trainer = TrainConfig(epochs=7, checkpoint="x.ckpt")
        again = configs_from_mapping(parse_config_text(format_config(model, trainer)))
        assert again == (model, trainer)


class TestCheckpoint:
    def setup_method(self):
        self.config = quick_model(message="rotate", adversarial_temperature=0.5)
        self.params = ModelParams.init(self.config, 6, np.random.default_rng(3))

    def test_round_trip_bitwise(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.params, self.config)
        params, config = load_checkpoint(path)
        assert config == self.config
        assert params.num_relations == 6
        for name, p in self.params.items():
            assert params[name].data.tobytes() == p.data.tobytes()
        save_checkpoint(tmp_path / "b.ckpt", params, config)
        assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_scores_survive(self, tmp_path):
        ds, g = toy()
        config = quick_model()
        params = ModelParams.init(config, g.num_relations, np.random.default_rng(0))
        save_checkpoint(tmp_path / "m.ckpt", params, config)
        loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
        a = evaluate(g, ds, params, config).ranks
        b = evaluate(g, ds, loaded, config).ranks
        assert a.tobytes() == b.tobytes()

    def test_version_rejected(self, tmp_path):
        blob = checkpoint_bytes(self.params, self.config).replace(b"version 1", b"version 2", 1)
        (tmp_path / "v.ckpt").write_bytes(blob)
        with pytest.raises(FormatError, match="version 2"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello\n")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        blob = checkpoint_bytes(self.params, self.config)
        (tmp_path / "t.ckpt").write_bytes(blob[:-10])
        with pytest.raises(CorruptionError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_missing_tensor(self, tmp_path):
        params = ModelParams({k: v for k, v in self.params.items() if k != "query"}, 6)
        save_checkpoint(tmp_path / "m.ckpt", params, self.config)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m.ckpt")
