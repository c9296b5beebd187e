"""Metrics, synthetic world generation and the experiment harness."""

from .experiment import ExperimentConfig, ExperimentReport, ReportRow, run_experiment
from .metrics import bleu, evaluate_retrieval, mean_average_precision, ndcg_at_10, recall_at_k
from .synthetic import World, WorldConfig, gen_synthetic

__all__ = [
    "ExperimentConfig", "ExperimentReport", "ReportRow", "run_experiment",
    "bleu", "evaluate_retrieval", "mean_average_precision", "ndcg_at_10", "recall_at_k",
    "World", "WorldConfig", "gen_synthetic",
]
