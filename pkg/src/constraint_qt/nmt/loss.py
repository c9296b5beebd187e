"""Candidate-smoothed training loss and the restricted (weighted) softmax."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..mine import ConstraintMask
from ..textproc import PAD
from .model import TransformerParams, backward_logits, forward


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    z = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _allowed(mask, size):
    if mask is None:
        return np.ones(size, dtype=bool)
    if isinstance(mask, ConstraintMask):
        return np.ones(size, dtype=bool) if mask.fallback_full else mask.allowed
    return np.asarray(mask, dtype=bool)


def constrained_log_softmax(logits, mask=None, weights=None):
    """Log-probabilities normalized over the allowed entries only.

    Entries outside the mask get ``-inf``. ``weights`` optionally scales the
    unnormalized probability of each entry (uniform when omitted).
    """
    logits = np.asarray(logits, dtype=np.float64)
    allowed = _allowed(mask, logits.shape[-1])
    z = logits if weights is None else logits + np.log(np.asarray(weights, dtype=np.float64))
    z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def constrained_softmax(logits, mask=None, weights=None):
    """``exp(l_j) / sum_{k in mask} exp(l_k)`` inside the mask, exactly 0 outside."""
    return np.exp(constrained_log_softmax(logits, mask, weights))


def label_mask_array(masks, batch: int, vocab: int) -> np.ndarray:
    """Stack per-sentence smoothing sets into a (batch, vocab) boolean array.

    ``None`` or a fallback mask becomes an empty row (no smoothing).
    """
    out = np.zeros((batch, vocab), dtype=bool)
    if masks is None:
        return out
    if isinstance(masks, np.ndarray):
        m = np.asarray(masks, dtype=bool)
        return np.broadcast_to(m, (batch, vocab)).copy() if m.ndim == 1 else m
    if isinstance(masks, ConstraintMask):
        masks = [masks] * batch
    for b, m in enumerate(masks):
        if m is None or (isinstance(m, ConstraintMask) and m.fallback_full):
            continue
        out[b] = m.allowed if isinstance(m, ConstraintMask) else np.asarray(m, dtype=bool)
    return out


def smoothed_targets(gold, label_masks, alpha: float, vocab: int) -> np.ndarray:
    """Target distribution per position: ``alpha`` on gold, the rest spread
    equally over the other candidates; pure one-hot when there are none.
    PAD positions get an all-zero row."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    gold = np.asarray(gold)
    label_masks = np.asarray(label_masks, dtype=bool)
    on_gold = np.take_along_axis(label_masks, gold.reshape(gold.shape[0], -1), axis=1).reshape(gold.shape)
    m_eff = label_masks.sum(-1)[:, None] - on_gold
    spread = np.divide(1.0 - alpha, m_eff, out=np.zeros(gold.shape), where=m_eff > 0)
    q = label_masks[:, None, :] * spread[..., None]
    np.put_along_axis(q, gold[..., None], np.where(m_eff > 0, alpha, 1.0)[..., None], axis=-1)
    q[gold == PAD] = 0.0
    return q


def _as_batch(logits, gold):
    logits = np.asarray(logits, dtype=np.float64)
    gold = np.asarray(gold)
    if logits.ndim == 2:
        logits, gold = logits[None], gold[None]
    if logits.shape[:2] != gold.shape:
        raise ValueError(f"logits {logits.shape} and gold {gold.shape} disagree")
    return logits, gold


def loss_and_dlogits(logits, gold, masks, alpha: float):
    logits, gold = _as_batch(logits, gold)
    B, T, V = logits.shape
    q = smoothed_targets(gold, label_mask_array(masks, B, V), alpha, V)
    n = max(int((gold != PAD).sum()), 1)
    logp = log_softmax(logits)
    loss = -(q * logp).sum() / n
    dlogits = (np.exp(logp) * q.sum(-1, keepdims=True) - q) / n
    return loss, dlogits


def candidate_smoothed_loss(logits, gold, mask, alpha: float) -> float:
    """Mean over non-PAD positions of

        -[alpha * log p(gold) + (1 - alpha) / M * sum_{v in mask, v != gold} log p(v)]

    with ``p`` the full-vocabulary softmax and ``M`` the number of such ``v``.
    ``mask`` is one ConstraintMask / boolean vector for every sentence, or a
    sequence with one per sentence.
    """
    return float(loss_and_dlogits(logits, gold, mask, alpha)[0])


def backward(params: TransformerParams, src, tgt_in, gold, masks, alpha: float):
    """Loss and exact gradients with respect to every parameter tensor."""
    logits, cache = forward(params, src, tgt_in, keep_cache=True)
    loss, dlogits = loss_and_dlogits(logits, gold, masks, alpha)
    return loss, backward_logits(params, dlogits, cache)


def batch_loss(params: TransformerParams, src, tgt_in, gold, masks, alpha: float) -> float:
    return candidate_smoothed_loss(forward(params, src, tgt_in), gold, masks, alpha)

