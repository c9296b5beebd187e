"""Training loop: batching, candidate-smoothed loss, Adam with warmup."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..mine import ConstraintTable, query_constraint_set
from ..textproc import BOS, EOS, PAD, UNK, BpeModel, TokenSequence, Vocabulary, apply_bpe
from .checkpoint import save_checkpoint
from .loss import backward
from .model import TransformerParams, init_params
from .optim import AdamConfig, AdamState, adam_step, lr_schedule

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@dataclass
class TrainConfig:
    alpha: float = 0.6
    batch_tokens: int = 256
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    max_steps: int = 1500
    seed: int = 0
    constraint_in_training: bool = False
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    # Multiplier on the warmup schedule; 1.0 is the plain schedule.
    lr_scale: float = 1.0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.beta1, self.beta2, self.eps)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParallelCorpus:
    """Word-level sentence pairs plus the model-side vocabularies.

    When BPE models are given, model inputs and outputs are subword ids
    while the constraint lookup still uses the source words.
    """

    pairs: Sequence[tuple[TokenSequence, TokenSequence]]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    src_bpe: BpeModel | None = None
    tgt_bpe: BpeModel | None = None

    def src_ids(self, seq: TokenSequence) -> list[int]:
        if self.src_bpe is not None:
            seq = apply_bpe(self.src_bpe, seq)
        return self.src_vocab.encode(seq.tokens)

    def tgt_ids(self, seq: TokenSequence) -> list[int]:
        if self.tgt_bpe is not None:
            seq = apply_bpe(self.tgt_bpe, seq)
        return self.tgt_vocab.encode(seq.tokens)

    def smoothing_set(self, table: ConstraintTable, src: TokenSequence) -> np.ndarray | None:
        """Candidate ids a sentence spreads its smoothing mass over.

        EOS and UNK are removed from the inference mask: they are not
        translation candidates of any source word.
        """
        mask = query_constraint_set(table, src, self.tgt_vocab, self.tgt_bpe)
        if mask.fallback_full:
            return None
        allowed = mask.allowed.copy()
        allowed[[EOS, UNK]] = False
        return allowed if allowed.any() else None


@dataclass
class TrainResult:
    params: TransformerParams
    config: TrainConfig
    loss_history: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def _pad(rows: list[list[int]]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batches(lengths: Sequence[int], batch_tokens: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle sentence indices and cut them into batches of about ``batch_tokens`` target tokens."""
    order = rng.permutation(len(lengths))
    batches, cur, tokens = [], [], 0
    for i in order:
        n = lengths[i]
        if cur and tokens + n > batch_tokens:
            batches.append(cur)
            cur, tokens = [], 0
        cur.append(int(i))
        tokens += n
    if cur:
        batches.append(cur)
    return batches


def train(config: TrainConfig, corpus: ParallelCorpus, constraint_table: ConstraintTable | None = None,
          init: TransformerParams | None = None) -> TrainResult:
    """Train a translation model.

    With ``constraint_in_training`` off (or no table) this is plain
    maximum-likelihood training.
    """
    if not corpus.pairs:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else init_params(
        config.layers, config.d_model, config.heads, config.d_ff,
        len(corpus.src_vocab), len(corpus.tgt_vocab), seed=config.seed,
    )
    params = params.copy()

    src = [corpus.src_ids(s) or [UNK] for s, _ in corpus.pairs]
    tgt = [corpus.tgt_ids(t) for _, t in corpus.pairs]
    use_constraints = config.constraint_in_training and constraint_table is not None
    smoothing = [corpus.smoothing_set(constraint_table, s) if use_constraints else None for s, _ in corpus.pairs]
    lengths = [len(t) + 1 for t in tgt]

    state = AdamState()
    result = TrainResult(params, config)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir is not None and config.checkpoint_every:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    while step < config.max_steps:
        for batch in make_batches(lengths, config.batch_tokens, rng):
            step += 1
            b_src = _pad([src[i] for i in batch])
            b_in = _pad([[BOS] + tgt[i] for i in batch])
            b_gold = _pad([tgt[i] + [EOS] for i in batch])
            masks = [smoothing[i] for i in batch]
            try:
                loss, grads = backward(params, b_src, b_in, b_gold, masks, config.alpha)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, float("nan")) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(step, loss)
            lr = config.lr_scale * lr_schedule(step, config.d_model, config.warmup_steps)
            adam_step(params.tensors, grads, lr, config.adam, state)
            result.loss_history.append(float(loss))
            if step % 100 == 0:
                log.debug("step %d loss %.4f lr %.2e", step, loss, lr)
            if ckpt_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                path = ckpt_dir / f"step{step:06d}.ckpt"
                save_checkpoint(path, params, {"step": step})
                result.checkpoints.append(str(path))
            if step >= config.max_steps:
                break
    return result
