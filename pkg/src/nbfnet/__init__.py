"""Path-based link prediction: classical semiring solvers and neural Bellman-Ford networks."""

from .datasets import Dataset, load_cora, load_dataset_dir, random_graph, toy_composition_kg
from .errors import NBFError
from .evaluate import auroc_ap, evaluate, filtered_rank, ranking_metrics, relation_categories
from .interpret import edge_importance, explain, top_k_paths
from .kgraph import KnowledgeGraph, Triplet, Vocab, build_graph, load_triplets
from .model import ModelConfig, ModelParams, nbfnet_forward, propagate, score
from .semiring import (PathSemiring, brute_force_path_sum, check_semiring_axioms,
                       generalized_bellman_ford, make_classical)
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Dataset", "KnowledgeGraph", "ModelConfig", "ModelParams", "NBFError", "PathSemiring",
    "TrainConfig", "Triplet", "Vocab", "auroc_ap", "brute_force_path_sum", "build_graph",
    "check_semiring_axioms", "edge_importance", "evaluate", "explain", "filtered_rank",
    "generalized_bellman_ford", "load_checkpoint", "load_cora", "load_dataset_dir",
    "load_triplets", "make_classical", "nbfnet_forward", "propagate", "random_graph",
    "ranking_metrics", "relation_categories", "save_checkpoint", "score", "toy_composition_kg",
    "train",
]
