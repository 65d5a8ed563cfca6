"""Mini-batch training, model selection, checkpoints and config files."""

from __future__ import annotations

import io
import json
import logging
import math
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex
from .datasets import Dataset
from .errors import ConfigError, FormatError, NumericError
from .evaluate import evaluate
from .kgraph import FactIndex, KnowledgeGraph, mask_query_edges
from .model import ModelConfig, ModelParams, decode, loss_homo, loss_kg, propagate

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = "nbfnet-checkpoint"
CHECKPOINT_VERSION = 1
CONFIG_END = "end-config"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 5e-3
    seed: int = 0
    steps_per_epoch: int | None = None
    checkpoint: str | None = None
    selection_metric: str | None = None  # "mrr" for KGs, "auroc" for homogeneous graphs
    eval_batch_size: int = 16
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.selection_metric not in (None, "mrr", "auroc", "ap", "hits@1", "hits@3", "hits@10"):
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    valid_metric: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def _group_rows(groups):
    index = {}
    for g in groups:
        index.setdefault(g, len(index))
    return index


def sample_kg_rows(graph: KnowledgeGraph, batch, num_negative, rng, known: FactIndex):
    """PCA negatives for a batch of KG positives as ``(group, target, negatives)`` rows.

    Each positive is corrupted on one side chosen with equal probability;
    head corruption is scored as tail prediction of the inverse relation,
    so its group is ``(t, r^-1)``.
    """
    R = graph.num_base_relations
    V = graph.num_entities
    rows = []
    for h, r, t in batch:
        if rng.random() < 0.5:
            bad = known.known_tails(h, r)
            group, target = (h, r), t
        else:
            bad = known.known_heads(r, t)
            group, target = (t, r + R), h
        pool = None
        if len(bad) >= V // 2:
            pool = np.setdiff1d(np.arange(V), np.fromiter(bad, dtype=np.int64))
            if not len(pool):
                continue
        negs = []
        while len(negs) < num_negative:
            e = int(pool[rng.integers(len(pool))]) if pool is not None else int(rng.integers(V))
            if e not in bad:
                negs.append(e)
        rows.append((group, target, negs))
    return rows


def kg_rows_loss(graph: KnowledgeGraph, rows, edge_mask, config: ModelConfig, params: ModelParams):
    """Loss of fixed rows; rows sharing a group share one forward pass."""
    if not rows:
        raise NumericError("batch has no positive with a valid corruption")
    V = graph.num_entities
    n = len(rows[0][2])
    index = _group_rows(g for g, _, _ in rows)
    groups = list(index)
    h = propagate(graph, [g[0] for g in groups], [g[1] for g in groups], config, params, edge_mask)
    base = np.array([index[g] * V for g, _, _ in rows])
    pos_ids = base + np.array([t for _, t, _ in rows])
    neg_ids = (base[:, None] + np.array([ns for _, _, ns in rows])).ravel()
    wanted = np.concatenate([pos_ids, neg_ids])
    probs = ad.sigmoid(decode(params, ad.gather(h, SegmentIndex(wanted, len(groups) * V))))
    P = len(rows)
    return loss_kg(probs[:P], ad.reshape(probs[P:], (P, n)), config.adversarial_temperature)


def kg_step_loss(graph: KnowledgeGraph, batch, config: ModelConfig, params: ModelParams, rng,
                 known: FactIndex):
    """Loss on a batch of KG positives; edges joining any query pair are hidden."""
    mask = mask_query_edges(graph, batch)
    rows = sample_kg_rows(graph, batch, config.num_negative, rng, known)
    return kg_rows_loss(graph, rows, mask, config, params), rows


def sample_homo_rows(graph: KnowledgeGraph, batch, num_negative, rng, known: FactIndex):
    """Random orientation per edge; negatives replace the second endpoint."""
    V = graph.num_entities
    rows = []
    for a, _, b in batch:
        if rng.random() < 0.5:
            a, b = b, a
        bad = known.known_tails(a, 0) | {a}
        if len(bad) >= V:
            continue
        negs = []
        while len(negs) < num_negative:
            e = int(rng.integers(V))
            if e not in bad:
                negs.append(e)
        rows.append((a, b, negs))
    return rows


def homo_rows_loss(graph: KnowledgeGraph, rows, edge_mask, config: ModelConfig, params: ModelParams):
    if not rows:
        raise NumericError("batch has no edge with a valid corruption")
    V = graph.num_entities
    n = len(rows[0][2])
    flat = [(a, b) for a, b, _ in rows] + [(a, e) for a, _, negs in rows for e in negs]
    nodes = sorted({x for p in flat for x in p}) if config.symmetric else sorted({a for a, _ in flat})
    index = {x: i for i, x in enumerate(nodes)}
    h = propagate(graph, nodes, [0] * len(nodes), config, params, edge_mask)
    rows_index = SegmentIndex(np.array([index[a] * V + b for a, b in flat]), len(nodes) * V)
    rep = ad.gather(h, rows_index)
    if config.symmetric:
        back = SegmentIndex(np.array([index[b] * V + a for a, b in flat]), len(nodes) * V)
        rep = ad.add(rep, ad.gather(h, back))
    probs = ad.sigmoid(decode(params, rep))
    P = len(rows)
    return loss_homo(probs[:P], ad.reshape(probs[P:], (P, n)))


def homo_step_loss(graph: KnowledgeGraph, batch, config: ModelConfig, params: ModelParams, rng,
                   known: FactIndex):
    """Loss on a batch of undirected edges; edges joining any query pair are hidden."""
    mask = mask_query_edges(graph, batch)
    rows = sample_homo_rows(graph, batch, config.num_negative, rng, known)
    return homo_rows_loss(graph, rows, mask, config, params), rows


def _dump_step(path, epoch, step, batch, detail):
    payload = {"epoch": epoch, "step": step, "batch": [list(map(int, t)) for t in batch],
               "detail": repr(detail)}
    Path(path).write_text(json.dumps(payload, indent=1))


def train(graph: KnowledgeGraph, splits: Dataset, model_config: ModelConfig,
          train_config: TrainConfig, params: ModelParams | None = None, log=None) -> TrainResult:
    """Adam on mini-batches of training facts; keep the parameters with the best validation score.

    ``log`` (optional callable) receives each :class:`EpochRecord`. The
    returned history starts with the untrained model as epoch 0.
    """
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = ModelParams.init(model_config, graph.num_relations, rng)
    protocol = "homo-balanced" if splits.homogeneous else "kg-filtered"
    metric = train_config.selection_metric or ("auroc" if splits.homogeneous else "mrr")
    known = FactIndex(splits.train.tolist())
    if splits.homogeneous:
        known = FactIndex(splits.train.tolist() + splits.train[:, ::-1].tolist())
    step_loss = homo_step_loss if splits.homogeneous else kg_step_loss
    train_facts = splits.train

    def validate(p):
        report = evaluate(graph, splits, p, model_config, protocol, split="valid",
                          seed=train_config.seed, batch_size=train_config.eval_batch_size,
                          workers=train_config.workers)
        return float(report.as_dict()[metric])

    state = ad.AdamState(lr=train_config.learning_rate)
    best = validate(params)
    result = TrainResult(params.copy(), [EpochRecord(0, math.nan, best)], 0)
    if log:
        log(result.history[0])
    per_epoch = train_config.steps_per_epoch or max(1, math.ceil(len(train_facts) / train_config.batch_size))
    order, cursor = rng.permutation(len(train_facts)), 0
    for epoch in range(1, train_config.epochs + 1):
        losses = []
        for step in range(per_epoch):
            if cursor >= len(order):
                order, cursor = rng.permutation(len(train_facts)), 0
            batch = train_facts[order[cursor:cursor + train_config.batch_size]].tolist()
            cursor += train_config.batch_size
            params.zero_grad()
            loss, detail = step_loss(graph, batch, model_config, params, rng, known)
            value = float(loss.data)
            if not math.isfinite(value):
                if train_config.checkpoint:
                    _dump_step(str(train_config.checkpoint) + ".nonfinite.json", epoch, step, batch, detail)
                raise NumericError(f"non-finite loss {value} at epoch {epoch} step {step}; "
                                   f"batch={batch[:8]}{'...' if len(batch) > 8 else ''}")
            ad.backward(loss)
            ad.adam_step(params.tensors, params.grads(), state)
            losses.append(value)
        score = validate(params)
        record = EpochRecord(epoch, float(np.mean(losses)), score)
        result.history.append(record)
        if log:
            log(record)
        logger.info("epoch %d loss %.4f valid %s %.4f", epoch, record.loss, metric, score)
        if score > best:
            best, result.best_epoch = score, epoch
            result.params = params.copy()
    if train_config.checkpoint:
        save_checkpoint(train_config.checkpoint, result.params, model_config)
    return result


# config files and checkpoints


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, annotation, key: str):
    text = text.strip()
    hint = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    optional = "None" in hint
    if optional and text.lower() == "none":
        return None
    try:
        if hint.startswith("bool"):
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if hint.startswith("int"):
            return int(text)
        if hint.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} ({hint})") from None
    return text


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: str(hints[f.name]).replace("typing.", "") if not isinstance(hints[f.name], type)
            else hints[f.name].__name__ for f in fields(cls)}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def configs_from_mapping(raw: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Split raw key/values into model and training configs; unknown keys are errors."""
    model_types, train_types = _field_types(ModelConfig), _field_types(TrainConfig)
    model_kw, train_kw = {}, {}
    for key, value in raw.items():
        if key in model_types:
            model_kw[key] = _parse_value(value, model_types[key], key)
        elif key in train_types:
            train_kw[key] = _parse_value(value, train_types[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return configs_from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")))


def format_config(*configs) -> str:
    lines = []
    for cfg in configs:
        lines += [f"{k} = {_format_value(v)}" for k, v in asdict(cfg).items()]
    return "\n".join(lines) + "\n"


def checkpoint_bytes(params: ModelParams, config: ModelConfig) -> bytes:
    header = (f"{CHECKPOINT_HEADER} version {CHECKPOINT_VERSION}\n"
              f"num_relations = {params.num_relations}\n"
              + format_config(config) + CONFIG_END + "\n")
    buf = io.BytesIO()
    buf.write(header.encode("utf-8"))
    ad.write_tensors(buf, sorted((k, v.data) for k, v in params.items()))
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, config: ModelConfig):
    """Text config block followed by the binary tensor payload."""
    Path(path).write_bytes(checkpoint_bytes(params, config))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fin:
        first = fin.readline().decode("utf-8", "replace").split()
        if len(first) != 3 or first[0] != CHECKPOINT_HEADER or first[1] != "version":
            raise FormatError(f"{path} is not a checkpoint")
        if first[2] != str(CHECKPOINT_VERSION):
            raise FormatError(f"checkpoint version {first[2]} is not supported "
                              f"(this build reads version {CHECKPOINT_VERSION})")
        lines = []
        while True:
            line = fin.readline()
            if not line:
                raise FormatError("checkpoint config block is not terminated")
            line = line.decode("utf-8").rstrip("\n")
            if line == CONFIG_END:
                break
            lines.append(line)
        raw = parse_config_text("\n".join(lines))
        num_relations = int(raw.pop("num_relations"))
        config, _ = configs_from_mapping(raw)
        tensors = ad.read_tensors(fin)
    params = ModelParams({k: ad.parameter(v) for k, v in tensors.items()}, num_relations)
    expected = ModelParams.init(config, num_relations, np.random.default_rng(0))
    for name, p in expected.items():
        if name not in params or params[name].shape != p.shape:
            raise FormatError(f"checkpoint tensor {name} missing or mis-shaped")
    return params, config
