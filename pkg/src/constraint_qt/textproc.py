"""Tokenization, byte-pair encoding and vocabularies.

Tokenization rules (applied in order):

1. Unicode NFC normalization.
2. Lowercasing.
3. Every run of word characters (``\\w``: letters, digits, underscore) is a
   token; every other non-whitespace character is a token on its own, so
   ``"red,shoes"`` becomes ``["red", ",", "shoes"]``.
4. Whitespace only separates tokens and is never part of one.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOW = "</w>"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    lang: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def text(self) -> str:
        return " ".join(self.tokens)


def tokenize(text: str, lang: str = "") -> TokenSequence:
    text = unicodedata.normalize("NFC", text).lower()
    return TokenSequence(tuple(_TOKEN_RE.findall(text)), lang)


# ---------------------------------------------------------------------------
# Byte-pair encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...]
    ranks: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        merges = tuple(tuple(m) for m in self.merges)
        if len(set(merges)) != len(merges):
            raise ValueError("BPE merges must be unique")
        object.__setattr__(self, "merges", merges)
        object.__setattr__(self, "ranks", {m: i for i, m in enumerate(merges)})

    @property
    def num_merges(self) -> int:
        return len(self.merges)


def _word_symbols(word: str) -> tuple[str, ...]:
    if not word:
        return ()
    return tuple(word[:-1]) + (word[-1] + EOW,)


def _merge_pair(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Sequence[TokenSequence], num_merges: int) -> BpeModel:
    """Learn ``num_merges`` greedy merges from word-internal symbol pairs.

    At each step the most frequent adjacent pair wins; equal counts go to the
    lexicographically smallest pair. Learning stops early once no word has
    two symbols left.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq = Counter(tok for seq in corpus for tok in seq)
    if not word_freq:
        raise ValueError("cannot learn BPE from an empty corpus")
    vocab = {_word_symbols(w): f for w, f in sorted(word_freq.items())}

    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for symbols, freq in vocab.items():
            for a, b in zip(symbols, symbols[1:]):
                pairs[(a, b)] += freq
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged: dict = {}
        for symbols, freq in vocab.items():
            new = _merge_pair(symbols, best)
            merged[new] = merged.get(new, 0) + freq
        vocab = merged
    return BpeModel(tuple(merges))


def segment_word(model: BpeModel, word: str) -> tuple[str, ...]:
    symbols = _word_symbols(word)
    ranks = model.ranks
    while len(symbols) > 1:
        candidates = [
            (ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks
        ]
        if not candidates:
            break
        symbols = _merge_pair(symbols, min(candidates)[1])
    return symbols


def strip_bpe(tokens: Iterable[str]) -> list[str]:
    """Join subword pieces back into words."""
    words, buf = [], ""
    for tok in tokens:
        if tok.endswith(EOW):
            words.append(buf + tok[: -len(EOW)])
            buf = ""
        else:
            buf += tok
    if buf:
        words.append(buf)
    return words


def apply_bpe(model: BpeModel, seq: TokenSequence) -> TokenSequence:
    # Already-segmented input (any piece carries the end-of-word marker) is
    # re-joined first, which makes the operation idempotent.
    words = strip_bpe(seq.tokens) if any(t.endswith(EOW) for t in seq.tokens) else seq.tokens
    out: list[str] = []
    for w in words:
        out.extend(segment_word(model, w))
    return TokenSequence(tuple(out), seq.lang)


def save_bpe(model: BpeModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in model.merges:
            fh.write(f"{a} {b}\n")


def load_bpe(path) -> BpeModel:
    merges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two symbols per line")
            merges.append((parts[0], parts[1]))
    return BpeModel(tuple(merges))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Token <-> id map with the four specials pinned to ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.token_of: list[str] = list(SPECIAL_TOKENS)
        self.id_of: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        for tok in tokens:
            if tok in self.id_of:
                raise ValueError(f"duplicate vocabulary entry {tok!r}")
            self.id_of[tok] = len(self.token_of)
            self.token_of.append(tok)

    pad, bos, eos, unk = PAD, BOS, EOS, UNK

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token):
        return token in self.id_of

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_of == other.token_of

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_specials and i in (PAD, BOS, EOS):
                continue
            out.append(self.token_of[i])
        return out

    def words(self) -> list[str]:
        return self.token_of[len(SPECIAL_TOKENS):]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.token_of):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if not _:
                    raise ValueError(f"{path}:{lineno}: expected token<TAB>id")
                entries.append((int(idx), tok))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: ids must be contiguous from 0")
        if tuple(t for _, t in entries[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: ids 0-3 must hold the special tokens")
        return cls([t for _, t in entries[4:]])


def build_vocab(corpus: Sequence[TokenSequence], max_size: int) -> Vocabulary:
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError("max_size must exceed the number of special tokens")
    counts = Counter(tok for seq in corpus for tok in seq if tok not in SPECIAL_TOKENS)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[: max_size - len(SPECIAL_TOKENS)]])


# ---------------------------------------------------------------------------
# Bitext files
# ---------------------------------------------------------------------------


def read_bitext(path, src_lang: str = "src", tgt_lang: str = "tgt") -> list[tuple[TokenSequence, TokenSequence]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected source<TAB>target")
            pairs.append((tokenize(parts[0], src_lang), tokenize(parts[1], tgt_lang)))
    return pairs


def write_bitext(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            s = src.text() if isinstance(src, TokenSequence) else src
            t = tgt.text() if isinstance(tgt, TokenSequence) else tgt
            fh.write(f"{s}\t{t}\n")

