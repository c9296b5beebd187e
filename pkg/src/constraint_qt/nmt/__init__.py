"""Toy transformer translation model with constraint-aware training and decoding."""

from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .decode import DecodeConfig, Hypothesis, beam_search, greedy_decode
from .loss import backward, candidate_smoothed_loss, constrained_softmax
from .model import TransformerParams, forward, init_params
from .optim import AdamConfig, AdamState, adam_step, lr_schedule
from .train import ParallelCorpus, TrainConfig, TrainingDiverged, TrainResult, train

__all__ = [
    "FORMAT_VERSION", "load_checkpoint", "save_checkpoint",
    "DecodeConfig", "Hypothesis", "beam_search", "greedy_decode",
    "backward", "candidate_smoothed_loss", "constrained_softmax",
    "TransformerParams", "forward", "init_params",
    "AdamConfig", "AdamState", "adam_step", "lr_schedule",
    "ParallelCorpus", "TrainConfig", "TrainingDiverged", "TrainResult", "train",
]
