"""A small pre-norm transformer encoder-decoder with an explicit backward pass.

Everything runs in float64 on numpy arrays. Weight matrices multiply from
the right (``x @ W``). The target embedding doubles as the output
projection, so ``logits = h @ tgt_emb.T + out_bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..textproc import PAD

LN_EPS = 1e-6
NEG_INF = -1e30


@dataclass
class TransformerParams:
    layers: int
    d_model: int
    heads: int
    d_ff: int
    src_vocab: int
    tgt_vocab: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def hyper(self) -> dict:
        return dict(
            layers=self.layers, d_model=self.d_model, heads=self.heads,
            d_ff=self.d_ff, src_vocab=self.src_vocab, tgt_vocab=self.tgt_vocab,
        )

    def copy(self) -> "TransformerParams":
        return TransformerParams(**self.hyper(), tensors={k: v.copy() for k, v in self.tensors.items()})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: s for k, s in _shapes(self.hyper())}

    def check(self) -> None:
        expected = self.expected_shapes()
        if list(expected) != list(self.tensors):
            raise ValueError("tensor names do not match the architecture")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name}: non-finite values")


def _attn_shapes(prefix, D):
    for w in ("q", "k", "v", "o"):
        yield f"{prefix}.w{w}", (D, D)
        yield f"{prefix}.b{w}", (D,)


def _ln_shapes(prefix, D):
    yield f"{prefix}.g", (D,)
    yield f"{prefix}.b", (D,)


def _ff_shapes(prefix, D, F):
    yield f"{prefix}.w1", (D, F)
    yield f"{prefix}.b1", (F,)
    yield f"{prefix}.w2", (F, D)
    yield f"{prefix}.b2", (D,)


def _shapes(h):
    L, D, F = h["layers"], h["d_model"], h["d_ff"]
    yield "src_emb", (h["src_vocab"], D)
    yield "tgt_emb", (h["tgt_vocab"], D)
    yield "out_bias", (h["tgt_vocab"],)
    for l in range(L):
        p = f"enc.{l}"
        yield from _ln_shapes(f"{p}.ln1", D)
        yield from _attn_shapes(f"{p}.self", D)
        yield from _ln_shapes(f"{p}.ln2", D)
        yield from _ff_shapes(f"{p}.ff", D, F)
    yield from _ln_shapes("enc.ln", D)
    for l in range(L):
        p = f"dec.{l}"
        yield from _ln_shapes(f"{p}.ln1", D)
        yield from _attn_shapes(f"{p}.self", D)
        yield from _ln_shapes(f"{p}.ln2", D)
        yield from _attn_shapes(f"{p}.cross", D)
        yield from _ln_shapes(f"{p}.ln3", D)
        yield from _ff_shapes(f"{p}.ff", D, F)
    yield from _ln_shapes("dec.ln", D)


def init_params(layers, d_model, heads, d_ff, src_vocab, tgt_vocab, seed=0) -> TransformerParams:
    rng = np.random.default_rng(seed)
    hyper = dict(layers=layers, d_model=d_model, heads=heads, d_ff=d_ff, src_vocab=src_vocab, tgt_vocab=tgt_vocab)
    tensors = {}
    for name, shape in _shapes(hyper):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("_emb"):
            t = rng.normal(0.0, d_model ** -0.5, size=shape)
        elif leaf == "g":
            t = np.ones(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            t = rng.uniform(-limit, limit, size=shape)
        else:
            t = np.zeros(shape)
        tensors[name] = t.astype(np.float64)
    return TransformerParams(**hyper, tensors=tensors)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


# ---------------------------------------------------------------------------
# Primitive layers: forward returns (out, cache); backward accumulates grads.
# ---------------------------------------------------------------------------


def _ln_fwd(P, prefix, x):
    g, b = P[f"{prefix}.g"], P[f"{prefix}.b"]
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (prefix, xh, rstd)


def _ln_bwd(P, grads, dy, cache):
    prefix, xh, rstd = cache
    g = P[f"{prefix}.g"]
    grads[f"{prefix}.g"] += (dy * xh).reshape(-1, xh.shape[-1]).sum(0)
    grads[f"{prefix}.b"] += dy.reshape(-1, xh.shape[-1]).sum(0)
    dxh = dy * g
    return rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))


def _split(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _attn_fwd(P, prefix, xq, xkv, allowed, H):
    """Multi-head attention; ``allowed`` is a (B, Tq, Tk) boolean mask."""
    D = xq.shape[-1]
    scale = 1.0 / math.sqrt(D // H)
    q = _split(xq @ P[f"{prefix}.wq"] + P[f"{prefix}.bq"], H)
    k = _split(xkv @ P[f"{prefix}.wk"] + P[f"{prefix}.bk"], H)
    v = _split(xkv @ P[f"{prefix}.wv"] + P[f"{prefix}.bv"], H)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(allowed[:, None], s, NEG_INF)
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    ctx = _merge(a @ v)
    out = ctx @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"]
    return out, (prefix, xq, xkv, q, k, v, a, ctx, scale, H)


def _attn_bwd(P, grads, dout, cache):
    prefix, xq, xkv, q, k, v, a, ctx, scale, H = cache
    D = xq.shape[-1]
    grads[f"{prefix}.wo"] += ctx.reshape(-1, D).T @ dout.reshape(-1, D)
    grads[f"{prefix}.bo"] += dout.reshape(-1, D).sum(0)
    dctx = _split(dout @ P[f"{prefix}.wo"].T, H)
    da = dctx @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dctx
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dv)
    xq2, xkv2 = xq.reshape(-1, D), xkv.reshape(-1, D)
    grads[f"{prefix}.wq"] += xq2.T @ dq.reshape(-1, D)
    grads[f"{prefix}.bq"] += dq.reshape(-1, D).sum(0)
    grads[f"{prefix}.wk"] += xkv2.T @ dk.reshape(-1, D)
    grads[f"{prefix}.bk"] += dk.reshape(-1, D).sum(0)
    grads[f"{prefix}.wv"] += xkv2.T @ dv.reshape(-1, D)
    grads[f"{prefix}.bv"] += dv.reshape(-1, D).sum(0)
    dxq = dq @ P[f"{prefix}.wq"].T
    dxkv = dk @ P[f"{prefix}.wk"].T + dv @ P[f"{prefix}.wv"].T
    return dxq, dxkv


def _ff_fwd(P, prefix, x):
    pre = x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"]
    h = np.maximum(pre, 0.0)
    return h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"], (prefix, x, pre, h)


def _ff_bwd(P, grads, dout, cache):
    prefix, x, pre, h = cache
    D, F = x.shape[-1], h.shape[-1]
    grads[f"{prefix}.w2"] += h.reshape(-1, F).T @ dout.reshape(-1, D)
    grads[f"{prefix}.b2"] += dout.reshape(-1, D).sum(0)
    dh = (dout @ P[f"{prefix}.w2"].T) * (pre > 0)
    grads[f"{prefix}.w1"] += x.reshape(-1, D).T @ dh.reshape(-1, F)
    grads[f"{prefix}.b1"] += dh.reshape(-1, F).sum(0)
    return dh @ P[f"{prefix}.w1"].T


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------


def _check_ids(ids, vocab, what):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"{what} must be a (batch, length) id array, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"{what} ids out of range for vocabulary of size {vocab}")
    return ids


def encode(params: TransformerParams, src, keep_cache=False):
    P, D, H = params.tensors, params.d_model, params.heads
    src = _check_ids(src, params.src_vocab, "src")
    B, S = src.shape
    valid = src != PAD
    allowed = np.broadcast_to(valid[:, None, :], (B, S, S))
    x = P["src_emb"][src] * math.sqrt(D) + positional_encoding(S, D)
    caches = []
    for l in range(params.layers):
        p = f"enc.{l}"
        h, c1 = _ln_fwd(P, f"{p}.ln1", x)
        a, c2 = _attn_fwd(P, f"{p}.self", h, h, allowed, H)
        x = x + a
        h, c3 = _ln_fwd(P, f"{p}.ln2", x)
        f, c4 = _ff_fwd(P, f"{p}.ff", h)
        x = x + f
        caches.append((c1, c2, c3, c4))
    mem, cf = _ln_fwd(P, "enc.ln", x)
    cache = (src, caches, cf) if keep_cache else None
    return mem, valid, cache


def decode(params: TransformerParams, mem, src_valid, tgt_in, keep_cache=False):
    P, D, H = params.tensors, params.d_model, params.heads
    tgt_in = _check_ids(tgt_in, params.tgt_vocab, "tgt_prefix")
    B, T = tgt_in.shape
    if mem.shape[0] != B or mem.shape[-1] != D:
        raise ValueError(f"encoder memory shape {mem.shape} does not match batch {B} / d_model {D}")
    causal = np.broadcast_to(np.tril(np.ones((T, T), dtype=bool)), (B, T, T))
    cross = np.broadcast_to(src_valid[:, None, :], (B, T, src_valid.shape[1]))
    y = P["tgt_emb"][tgt_in] * math.sqrt(D) + positional_encoding(T, D)
    caches = []
    for l in range(params.layers):
        p = f"dec.{l}"
        h, c1 = _ln_fwd(P, f"{p}.ln1", y)
        a, c2 = _attn_fwd(P, f"{p}.self", h, h, causal, H)
        y = y + a
        h, c3 = _ln_fwd(P, f"{p}.ln2", y)
        a, c4 = _attn_fwd(P, f"{p}.cross", h, mem, cross, H)
        y = y + a
        h, c5 = _ln_fwd(P, f"{p}.ln3", y)
        f, c6 = _ff_fwd(P, f"{p}.ff", h)
        y = y + f
        caches.append((c1, c2, c3, c4, c5, c6))
    out, cf = _ln_fwd(P, "dec.ln", y)
    logits = out @ P["tgt_emb"].T + P["out_bias"]
    cache = (tgt_in, caches, cf, out) if keep_cache else None
    return logits, cache


def forward(params: TransformerParams, src, tgt_prefix, keep_cache=False):
    """Logits of shape (batch, target length, target vocabulary)."""
    src = np.asarray(src)
    tgt_prefix = np.asarray(tgt_prefix)
    if src.ndim == 1:
        src = src[None]
    if tgt_prefix.ndim == 1:
        tgt_prefix = tgt_prefix[None]
    if src.shape[0] != tgt_prefix.shape[0]:
        raise ValueError("src and tgt_prefix batch sizes differ")
    mem, valid, enc_cache = encode(params, src, keep_cache)
    logits, dec_cache = decode(params, mem, valid, tgt_prefix, keep_cache)
    if keep_cache:
        return logits, (enc_cache, dec_cache)
    return logits


def backward_logits(params: TransformerParams, dlogits, cache) -> dict[str, np.ndarray]:
    """Gradients of every tensor given d(loss)/d(logits) and a forward cache."""
    P, D = params.tensors, params.d_model
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    (src, enc_caches, enc_cf), (tgt_in, dec_caches, dec_cf, out) = cache

    grads["out_bias"] += dlogits.reshape(-1, params.tgt_vocab).sum(0)
    grads["tgt_emb"] += dlogits.reshape(-1, params.tgt_vocab).T @ out.reshape(-1, D)
    dy = _ln_bwd(P, grads, dlogits @ P["tgt_emb"], dec_cf)

    dmem = np.zeros_like(enc_cf[1])
    for l in reversed(range(params.layers)):
        c1, c2, c3, c4, c5, c6 = dec_caches[l]
        dy = dy + _ln_bwd(P, grads, _ff_bwd(P, grads, dy, c6), c5)
        dq, dkv = _attn_bwd(P, grads, dy, c4)
        dmem += dkv
        dy = dy + _ln_bwd(P, grads, dq, c3)
        dq, dkv = _attn_bwd(P, grads, dy, c2)
        dy = dy + _ln_bwd(P, grads, dq + dkv, c1)
    np.add.at(grads["tgt_emb"], tgt_in, dy * math.sqrt(D))

    dx = _ln_bwd(P, grads, dmem, enc_cf)
    for l in reversed(range(params.layers)):
        c1, c2, c3, c4 = enc_caches[l]
        dx = dx + _ln_bwd(P, grads, _ff_bwd(P, grads, dx, c4), c3)
        dq, dkv = _attn_bwd(P, grads, dx, c2)
        dx = dx + _ln_bwd(P, grads, dq + dkv, c1)
    np.add.at(grads["src_emb"], src, dx * math.sqrt(D))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name}")
    return grads
