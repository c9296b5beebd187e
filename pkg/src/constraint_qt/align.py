"""IBM Model 1 word alignment trained by EM.

The translation table stores ``t(y | x)`` for every (source, target) pair that
co-occurs in some sentence pair; all other entries are implicitly zero. A
``NULL`` source token is prepended to every source sentence.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterator, Sequence

NULL = "<null>"
PROB_FLOOR = 1e-12


class TranslationTable:
    """Lexical translation probabilities ``t(target | source)``."""

    def __init__(self, t: dict[str, dict[str, float]]):
        self.t = t

    def prob(self, target: str, source: str) -> float:
        return self.t.get(source, {}).get(target, 0.0)

    def sources(self) -> list[str]:
        return list(self.t)

    def row(self, source: str) -> dict[str, float]:
        return self.t.get(source, {})

    def __contains__(self, source):
        return source in self.t

    def __eq__(self, other):
        return isinstance(other, TranslationTable) and self.t == other.t

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.t):
                for tgt, p in sorted(self.t[src].items(), key=lambda kv: (-kv[1], kv[0])):
                    fh.write(f"{src}\t{tgt}\t{p!r}\n")

    @classmethod
    def load(cls, path) -> "TranslationTable":
        t: dict[str, dict[str, float]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected source<TAB>target<TAB>prob")
                t.setdefault(parts[0], {})[parts[1]] = float(parts[2])
        return cls(t)


@dataclass(frozen=True)
class Alignment:
    """One link per target position; a source index of ``None`` is NULL."""

    links: tuple[tuple[int | None, int], ...]


@dataclass(frozen=True)
class CandidateSet:
    source_word: str
    candidates: tuple[tuple[str, float], ...]

    def targets(self) -> list[str]:
        return [y for y, _ in self.candidates]

    def __len__(self):
        return len(self.candidates)


def _as_tokens(seq) -> tuple[str, ...]:
    return tuple(seq.tokens) if hasattr(seq, "tokens") else tuple(seq)


def _prepare(bitext) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    pairs = [((NULL,) + _as_tokens(s), _as_tokens(t)) for s, t in bitext]
    if not pairs:
        raise ValueError("bitext is empty")
    return pairs


def em_iterations(bitext, iterations: int) -> Iterator[TranslationTable]:
    """Run IBM Model 1 EM, yielding the table after every iteration."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pairs = _prepare(bitext)
    n_tgt = len({y for _, tgt in pairs for y in tgt})
    uniform = 1.0 / max(n_tgt, 1)
    t: dict[str, dict[str, float]] | None = None

    for _ in range(iterations):
        counts: dict[str, dict[str, float]] = defaultdict(dict)
        for src, tgt in pairs:
            for y in tgt:
                if t is None:
                    probs = [uniform] * len(src)
                else:
                    probs = [t[x][y] for x in src]
                z = math.fsum(probs)
                for x, p in zip(src, probs):
                    row = counts[x]
                    row[y] = row.get(y, 0.0) + p / z
        t = {}
        for x, row in counts.items():
            total = math.fsum(row.values())
            t[x] = {y: c / total for y, c in row.items()}
        yield TranslationTable(t)


def train_ibm1(bitext, iterations: int = 10) -> TranslationTable:
    table = None
    for table in em_iterations(bitext, iterations):
        pass
    return table


def log_likelihood(table: TranslationTable, bitext) -> float:
    """Corpus log-likelihood under Model 1 (uniform alignment prior)."""
    total = 0.0
    for src, tgt in _prepare(bitext):
        for y in tgt:
            s = math.fsum(table.prob(y, x) for x in src)
            total += math.log(max(s, PROB_FLOOR) / len(src))
    return total


def viterbi_align(table: TranslationTable, pair) -> Alignment:
    """Link each target word to its most probable source word.

    NULL competes as position -1 (reported as ``None``) and wins ties, as
    do earlier source positions over later ones.
    """
    src, tgt = _as_tokens(pair[0]), _as_tokens(pair[1])
    links = []
    for j, y in enumerate(tgt):
        best_i, best_p = None, max(table.prob(y, NULL), PROB_FLOOR)
        for i, x in enumerate(src):
            p = max(table.prob(y, x), PROB_FLOOR)
            if p > best_p:
                best_i, best_p = i, p
        links.append((best_i, j))
    return Alignment(tuple(links))


def extract_candidates(
    table: TranslationTable, source_word: str, k_max: int = 50, p_min: float = 0.01
) -> CandidateSet:
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not 0.0 <= p_min < 1.0:
        raise ValueError("p_min must lie in [0, 1)")
    if source_word == NULL:
        return CandidateSet(source_word, ())
    row = [(y, p) for y, p in table.row(source_word).items() if p > 0.0 and p >= p_min and y != NULL]
    row.sort(key=lambda kv: (-kv[1], kv[0]))
    return CandidateSet(source_word, tuple(row[:k_max]))


def candidate_sets(
    table: TranslationTable, sources: Sequence[str], k_max: int = 50, p_min: float = 0.01
) -> dict[str, CandidateSet]:
    out = {}
    for x in sources:
        cs = extract_candidates(table, x, k_max, p_min)
        if len(cs):
            out[x] = cs
    return out
