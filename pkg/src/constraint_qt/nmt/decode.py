"""Greedy and beam-search decoding, optionally restricted to a constraint mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..textproc import BOS, EOS, PAD
from .loss import constrained_log_softmax
from .model import TransformerParams, decode, encode

# Never emitted by the decoder, whatever the mask says.
_BANNED = (PAD, BOS)


@dataclass
class DecodeConfig:
    beam_size: int = 4
    length_penalty: float = 0.6
    max_len: int = 20
    constraint_in_inference: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # without the final EOS
    logprob: float
    score: float
    ended: bool  # False when cut off at max_len


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _step_logprobs(params, mem, valid, prefixes, mask, weights):
    n = len(prefixes)
    tgt = np.array([(BOS,) + p for p in prefixes])
    logits, _ = decode(params, np.repeat(mem, n, axis=0), np.repeat(valid, n, axis=0), tgt)
    logp = constrained_log_softmax(logits[:, -1], mask, weights)
    logp[:, _BANNED] = -np.inf
    return logp


def _encode_one(params, src):
    src = np.asarray(src, dtype=np.int64).reshape(1, -1)
    if src.shape[1] == 0:
        raise ValueError("source sequence is empty")
    mem, valid, _ = encode(params, src)
    return mem, valid


def greedy_decode(params: TransformerParams, src, max_len: int = 20, mask=None, weights=None) -> list[int]:
    mem, valid = _encode_one(params, src)
    out: tuple[int, ...] = ()
    for _ in range(max_len):
        tok = int(np.argmax(_step_logprobs(params, mem, valid, [out], mask, weights)[0]))
        if tok == EOS:
            break
        out += (tok,)
    return list(out)


def beam_search(params: TransformerParams, src, config: DecodeConfig, mask=None, weights=None) -> Hypothesis:
    """Beam search with a GNMT-style length penalty.

    Each step keeps the ``beam_size`` best extensions of the live
    hypotheses by cumulative log-probability; extensions ending in EOS leave
    the beam as finished hypotheses. Hypotheses still live after
    ``max_len`` tokens are finished as they are. The winner maximizes
    ``logprob / ((5 + length) / 6) ** length_penalty``, with the length
    counting the EOS when one was emitted.
    """
    mem, valid = _encode_one(params, src)
    lp = config.length_penalty
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []

    for step in range(1, config.max_len + 1):
        logp = _step_logprobs(params, mem, valid, [t for t, _ in alive], mask, weights)
        cand = np.array([s for _, s in alive])[:, None] + logp
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")[: config.beam_size]
        new_alive = []
        V = cand.shape[1]
        for idx in order:
            if not np.isfinite(flat[idx]):
                break
            a, tok = divmod(int(idx), V)
            toks, score = alive[a][0], float(flat[idx])
            if tok == EOS:
                finished.append(Hypothesis(toks, score, score / length_penalty(len(toks) + 1, lp), True))
            else:
                new_alive.append((toks + (tok,), score))
        alive = new_alive
        if not alive:
            break
    for toks, score in alive:
        finished.append(Hypothesis(toks, score, score / length_penalty(len(toks), lp), False))
    if not finished:
        return Hypothesis((), -np.inf, -np.inf, False)
    # max() keeps the first of equal scores, i.e. the earliest finished.
    return max(finished, key=lambda h: h.score)


def sequence_logprob(params: TransformerParams, src, tokens, mask=None, ended=True, weights=None) -> float:
    """Log-probability of ``tokens`` (plus EOS when ``ended``) by teacher forcing."""
    tgt = list(tokens) + ([EOS] if ended else [])
    if not tgt:
        return 0.0
    mem, valid = _encode_one(params, src)
    tgt_in = np.array([[BOS] + tgt[:-1]])
    logits, _ = decode(params, mem, valid, tgt_in)
    logp = constrained_log_softmax(logits[0], mask, weights)
    return float(sum(logp[i, t] for i, t in enumerate(tgt)))
