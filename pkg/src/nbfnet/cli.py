"""Command line entry point: ``nbfnet <solve|train|eval|interpret|sample|axioms> ...``.

Failures print one ``error<TAB>category<TAB>message`` line on stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .datasets import Dataset, load_cora, load_dataset_dir, toy_composition_kg
from .errors import ArgumentError, NBFError, RefusalError
from .evaluate import PROTOCOLS, evaluate, format_float
from .interpret import explain, format_interpretation
from .kgraph import Vocab, build_graph, read_triplet_file, sample_bidirectional_bfs, write_triplets
from .semiring import (METHODS, brute_force_path_sums, check_semiring_axioms,
                       generalized_bellman_ford, make_classical)
from .train import configs_from_mapping, load_checkpoint, parse_config_text, train

EXIT_ERROR = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NBF_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ArgumentError(f"NBF_SEED={env!r} is not an integer") from None


_fmt = format_float


# solve


def cmd_solve(args, out):
    triplets, weights, vocab = read_triplet_file(args.graph)
    graph = build_graph(triplets, vocab.num_entities, max(vocab.num_relations, 1), weights=weights,
                        directed=not args.undirected)
    semiring = make_classical(METHODS[args.method](beta=args.beta, alpha=args.alpha), graph)
    if args.iterations < 0:
        raise ArgumentError("--iterations must be >= 0")
    sources = [vocab.copy(frozen=True).entity_id(s) for s in args.source]

    def run(u):
        return generalized_bellman_ford(graph, semiring, u, args.iterations)

    if args.workers > 1 and len(sources) > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            fields = list(pool.map(run, sources))
    else:
        fields = [run(u) for u in sources]
    for name, u, h in zip(args.source, sources, fields):
        prefix = f"{name}\t" if len(sources) > 1 else ""
        for v, score in enumerate(h):
            out.write(f"{prefix}{vocab.entities[v]}\t{_fmt(score)}\n")
        if args.oracle:
            try:
                reference = brute_force_path_sums(graph, semiring, u, args.iterations)
            except RefusalError as exc:
                raise RefusalError(f"oracle refused: {exc}") from None
            with np.errstate(invalid="ignore"):
                same = (reference == h) | (np.isnan(reference) & np.isnan(h))
                diff = np.where(same, 0.0, np.abs(reference - h))
            out.write(f"# oracle max deviation\t{_fmt(diff.max() if len(diff) else 0.0)}\n")
    return 0


# data loading shared by train / eval / interpret


def _dataset(args, seed) -> Dataset:
    chosen = [x for x in (args.data, args.cora, args.toy) if x is not None]
    if len(chosen) != 1:
        raise ArgumentError("give exactly one of --data, --cora, --toy")
    if args.data is not None:
        return load_dataset_dir(args.data, homogeneous=args.homogeneous)
    if args.cora is not None:
        return load_cora(args.cora, seed=args.split_seed)
    return toy_composition_kg(args.toy)


def _configs(args, seed):
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fin:
            raw.update(parse_config_text(fin.read()))
    for item in args.set or []:
        if "=" not in item:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    for key in ("epochs", "batch_size", "steps_per_epoch", "checkpoint", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = str(value)
    raw["seed"] = str(seed)
    return configs_from_mapping(raw)


def _check_modality(dataset, graph, params, protocol=None):
    if params.num_relations != graph.num_relations:
        kind = "homogeneous" if dataset.homogeneous else "knowledge"
        raise ArgumentError(f"modality mismatch: checkpoint covers {params.num_relations} relations, "
                            f"the {kind} graph has {graph.num_relations}")
    if protocol is not None and (protocol == "homo-balanced") != dataset.homogeneous:
        raise ArgumentError(f"modality mismatch: protocol {protocol} does not fit a "
                            f"{'homogeneous' if dataset.homogeneous else 'knowledge'} graph")


def cmd_train(args, out):
    seed = _seed(args)
    model_config, train_config = _configs(args, seed)
    dataset = _dataset(args, seed)
    graph = dataset.fact_graph("train")
    metric = train_config.selection_metric or ("auroc" if dataset.homogeneous else "mrr")
    out.write(f"epoch\tloss\tval_{metric}\n")

    def log(record):
        out.write(f"{record.epoch}\t{_fmt(record.loss)}\t{_fmt(record.valid_metric)}\n")
        out.flush()

    result = train(graph, dataset, model_config, train_config, log=log)
    out.write(f"# best epoch\t{result.best_epoch}\n")
    return 0


def cmd_eval(args, out):
    seed = _seed(args)
    params, config = load_checkpoint(args.checkpoint)
    dataset = _dataset(args, seed)
    protocol = args.protocol or ("homo-balanced" if dataset.homogeneous else "kg-filtered")
    graph = dataset.fact_graph(args.split)
    _check_modality(dataset, graph, params, protocol)
    report = evaluate(graph, dataset, params, config, protocol, split=args.split, seed=seed,
                      workers=args.workers)
    out.write(report.to_tsv() if args.format == "tsv" else report.to_table() + "\n")
    return 0


def cmd_interpret(args, out):
    seed = _seed(args)
    params, config = load_checkpoint(args.checkpoint)
    dataset = _dataset(args, seed)
    graph = dataset.fact_graph(args.split)
    _check_modality(dataset, graph, params)
    vocab = dataset.vocab
    parts = args.triplet.split()
    if len(parts) != 3:
        raise ArgumentError("--triplet expects 'head relation tail'")
    if vocab is not None:
        frozen = vocab.copy(frozen=True)
        u, q, v = frozen.entity_id(parts[0]), frozen.relation_id(parts[1]), frozen.entity_id(parts[2])
    else:
        u, q, v = (int(x) for x in parts)
    importance, paths = explain(graph, params, config, (u, q, v), k=args.k,
                                beam_width=args.beam if args.beam > 0 else math.inf, vocab=vocab)
    out.write(format_interpretation(importance, paths, vocab) + "\n")
    return 0


def cmd_sample(args, out):
    triplets, weights, vocab = read_triplet_file(args.graph)
    graph = build_graph(triplets, vocab.num_entities, max(vocab.num_relations, 1), weights=weights)
    frozen = vocab.copy(frozen=True)
    head = frozen.entity_id(args.head)
    candidates = [frozen.entity_id(c) for c in args.candidates]
    m = math.inf if args.max_neighbors is None else args.max_neighbors
    sub = sample_bidirectional_bfs(graph, head, candidates, args.hops, m,
                                   np.random.default_rng(_seed(args)))
    names = [vocab.entities[i] for i in sub.nodes]
    g = sub.graph
    for h, r, t in zip(g.heads.tolist(), g.relations.tolist(), g.tails.tolist()):
        out.write(f"{names[h]}\t{vocab.relations[r]}\t{names[t]}\n")
    if args.output:
        write_triplets(args.output, g.triplets(), Vocab(names, vocab.relations), g.weights)
    return 0


def cmd_axioms(args, out):
    methods = list(METHODS) if args.method == "all" else [args.method]
    rng = np.random.default_rng(_seed(args))
    ok = True
    for name in methods:
        semiring = make_classical(METHODS[name](beta=args.beta, alpha=args.alpha))
        report = check_semiring_axioms(semiring, args.samples, rng)
        for axiom, passed in report.passed.items():
            out.write(f"{name}\t{axiom}\t{'pass' if passed else 'fail'}\n")
        ok &= report.ok
    return 0 if ok else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nbfnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed (default: $NBF_SEED or 0)")
        p.add_argument("--workers", type=int, default=1)

    def data(p):
        p.add_argument("--data", help="directory with train/valid/test.txt")
        p.add_argument("--homogeneous", action="store_true", help="--data holds an undirected graph")
        p.add_argument("--cora", help="cora.cites edge list")
        p.add_argument("--toy", type=int, help="synthetic composition KG with this seed")
        p.add_argument("--split-seed", type=int, default=0, help="seed of the Cora edge split")

    p = sub.add_parser("solve", help="classical path method via generalized Bellman-Ford")
    p.add_argument("--graph", required=True)
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--source", required=True, action="append")
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--alpha", type=float, default=0.85)
    p.add_argument("--iterations", type=int, default=6)
    p.add_argument("--undirected", action="store_true")
    p.add_argument("--oracle", action="store_true", help="compare with brute-force walk enumeration")
    common(p)

    p = sub.add_parser("train", help="train a network and report validation per epoch")
    data(p)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--checkpoint", help="write the best parameters here")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.add_argument("--format", default="table", choices=("table", "tsv"))
    common(p)

    p = sub.add_parser("interpret", help="top-k paths behind a prediction")
    data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--triplet", required=True, help="'head relation tail'")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("-k", type=int, default=2)
    p.add_argument("--beam", type=int, default=10, help="beam width (0: unbounded)")
    common(p)

    p = sub.add_parser("sample", help="bidirectional BFS subgraph")
    p.add_argument("--graph", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--max-neighbors", dest="max_neighbors", type=int)
    p.add_argument("--output")
    common(p)

    p = sub.add_parser("axioms", help="check semiring laws of the classical methods")
    p.add_argument("--method", default="all", choices=["all"] + sorted(METHODS))
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--alpha", type=float, default=0.85)
    common(p)
    return parser


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "eval": cmd_eval,
            "interpret": cmd_interpret, "sample": cmd_sample, "axioms": cmd_axioms}


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise ArgumentError("--workers must be >= 1")
        return COMMANDS[args.command](args, out)
    except NBFError as exc:
        message = " ".join(str(exc).split())
        err.write(f"error\t{exc.category}\t{message}\n")
        return EXIT_USAGE if exc.category in ("argument", "config") else EXIT_ERROR
    except OSError as exc:
        err.write(f"error\tio\t{exc.strerror or exc}: {exc.filename}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
