"""Constraint candidate mining from clickthrough data.

For a source word ``x`` the clicked set ``D_x`` is every document users
clicked after issuing a query that contains ``x`` as a token. Alignment
candidates for ``x`` are re-ranked inside ``D_x`` by

    TF(y)  = N(y) / sum_k N(y_k)          N: occurrences of y in D_x
    IDF(y) = ln(|D_x| / (G(y) + 1))       G: documents of D_x containing y
    score  = TF(y) * IDF(y)

and the top ``m`` survivors form that word's row of the constraint table.
The ``+ 1`` in the IDF denominator is kept as is, so a candidate found in
every clicked document gets a negative IDF.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .align import CandidateSet, TranslationTable, extract_candidates
from .textproc import BOS, EOS, PAD, UNK, BpeModel, TokenSequence, Vocabulary, segment_word, tokenize


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: TokenSequence


@dataclass(frozen=True)
class ClickRecord:
    query: TokenSequence
    clicked: tuple[str, ...]


@dataclass
class ClickLog:
    records: list[ClickRecord]

    def validate(self, docs: Mapping[str, Document]) -> None:
        for r in self.records:
            for d in r.clicked:
                if d not in docs:
                    raise KeyError(f"clicked doc_id {d!r} not in document collection")


def make_collection(docs: Iterable[Document]) -> dict[str, Document]:
    out: dict[str, Document] = {}
    for d in docs:
        if d.doc_id in out:
            raise ValueError(f"duplicate doc_id {d.doc_id!r}")
        out[d.doc_id] = d
    return out


def clicked_docs(log: ClickLog, docs: Mapping[str, Document], source_word: str) -> list[Document]:
    """Documents clicked for any query containing ``source_word``.

    Returned de-duplicated and ordered by doc_id.
    """
    ids = set()
    for rec in log.records:
        if source_word in rec.query.tokens:
            ids.update(rec.clicked)
    return [docs[i] for i in sorted(ids)]


@dataclass(frozen=True)
class ScoredCandidates:
    source_word: str
    entries: tuple[tuple[str, float], ...]
    n_docs: int
    term_counts: Mapping[str, int] = field(default_factory=dict)
    doc_counts: Mapping[str, int] = field(default_factory=dict)
    # True when no candidate occurs in the clicked documents at all.
    unscored: bool = False

    def targets(self) -> list[str]:
        return [y for y, _ in self.entries]


def score_tfidf(cands: CandidateSet, d: Sequence[Document]) -> ScoredCandidates:
    if not d:
        raise ValueError("clicked document set is empty")
    targets = cands.targets()
    wanted = set(targets)
    n_count: Counter = Counter()
    g_count: Counter = Counter()
    for doc in d:
        c = Counter(t for t in doc.text.tokens if t in wanted)
        n_count.update(c)
        g_count.update(c.keys())
    n_docs = len(d)
    stats = dict(
        n_docs=n_docs,
        term_counts={y: n_count[y] for y in targets},
        doc_counts={y: g_count[y] for y in targets},
    )
    total = sum(n_count[y] for y in targets)
    if total == 0:
        return ScoredCandidates(cands.source_word, tuple((y, 0.0) for y in targets), unscored=True, **stats)

    scored = []
    for y in targets:
        if n_count[y] == 0:
            scored.append((y, -math.inf))
            continue
        tf = n_count[y] / total
        idf = math.log(n_docs / (g_count[y] + 1))
        scored.append((y, tf * idf))
    # Stable sort: ties, including the -inf tail, keep alignment order.
    scored.sort(key=lambda kv: -kv[1])
    return ScoredCandidates(cands.source_word, tuple(scored), **stats)


# ---------------------------------------------------------------------------
# Constraint table
# ---------------------------------------------------------------------------


@dataclass
class ConstraintTable:
    m: int
    rows: dict[str, tuple[str, ...]]
    scores: dict[str, tuple[float, ...]] = field(default_factory=dict)
    # Rows ranked by alignment probability because no clicked evidence exists.
    fallback: set[str] = field(default_factory=set)

    def row(self, source_word: str) -> tuple[str, ...]:
        return self.rows.get(source_word, ())

    def save(self, path) -> None:
        """TSV ``source, rank, target, score``.

        Fallback rows write the score column as ``align=<probability>``.
        """
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.rows):
                scores = self.scores.get(src, (math.nan,) * len(self.rows[src]))
                for rank, (tgt, s) in enumerate(zip(self.rows[src], scores), 1):
                    col = f"align={s!r}" if src in self.fallback else repr(float(s))
                    fh.write(f"{src}\t{rank}\t{tgt}\t{col}\n")

    @classmethod
    def load(cls, path, m: int | None = None) -> "ConstraintTable":
        rows: dict[str, list] = {}
        scores: dict[str, list] = {}
        fallback = set()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected source<TAB>rank<TAB>target<TAB>score")
                src, rank, tgt, col = parts
                if int(rank) != len(rows.get(src, [])) + 1:
                    raise ValueError(f"{path}:{lineno}: ranks must be consecutive per source")
                if col.startswith("align="):
                    fallback.add(src)
                    col = col[len("align="):]
                rows.setdefault(src, []).append(tgt)
                scores.setdefault(src, []).append(float(col))
        width = max((len(r) for r in rows.values()), default=0)
        return cls(
            m=m if m is not None else width,
            rows={k: tuple(v) for k, v in rows.items()},
            scores={k: tuple(v) for k, v in scores.items()},
            fallback=fallback,
        )


def build_constraint_table(
    vocab_src: Vocabulary | Iterable[str],
    table: TranslationTable,
    log: ClickLog,
    docs: Mapping[str, Document],
    m: int,
    k_max: int = 50,
    p_min: float = 0.01,
    keep_unclicked: bool = True,
) -> ConstraintTable:
    """Mine the top-``m`` constraint candidates for every source word.

    Candidates that never occur in the word's clicked documents score
    ``-inf`` and sit at the tail of the row in alignment order; with
    ``keep_unclicked=False`` they are left out instead.
    Words with no clicked documents (or whose candidates never occur in
    them) fall back to the top ``m`` candidates by alignment probability.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    words = vocab_src.words() if isinstance(vocab_src, Vocabulary) else list(vocab_src)

    # Index which records mention which word once, instead of rescanning per word.
    by_word: dict[str, set[str]] = {}
    for rec in log.records:
        for tok in set(rec.query.tokens):
            by_word.setdefault(tok, set()).update(rec.clicked)

    rows, scores, fallback = {}, {}, set()
    for x in words:
        cands = extract_candidates(table, x, k_max, p_min)
        if not len(cands):
            continue
        ids = by_word.get(x)
        scored = score_tfidf(cands, [docs[i] for i in sorted(ids)]) if ids else None
        if scored is None or scored.unscored:
            top = cands.candidates[:m]
            rows[x] = tuple(y for y, _ in top)
            scores[x] = tuple(p for _, p in top)
            fallback.add(x)
            continue
        entries = [e for e in scored.entries if keep_unclicked or e[1] != -math.inf][:m]
        rows[x] = tuple(y for y, _ in entries)
        scores[x] = tuple(s for _, s in entries)
    return ConstraintTable(m=m, rows=rows, scores=scores, fallback=fallback)


# ---------------------------------------------------------------------------
# Per-query masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintMask:
    allowed: np.ndarray
    fallback_full: bool = False

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        a.setflags(write=False)
        object.__setattr__(self, "allowed", a)

    @classmethod
    def full(cls, size: int) -> "ConstraintMask":
        return cls(np.ones(size, dtype=bool), fallback_full=True)

    def ids(self) -> list[int]:
        return np.flatnonzero(self.allowed).tolist()

    def __contains__(self, token_id):
        return bool(self.allowed[token_id])

    def __len__(self):
        return int(self.allowed.sum())


def candidate_token_ids(
    table: ConstraintTable, query, vocab_tgt: Vocabulary, bpe: BpeModel | None = None
) -> set[int]:
    """Target ids of all candidate words for the query's tokens (no specials)."""
    tokens = query.tokens if hasattr(query, "tokens") else tuple(query)
    ids: set[int] = set()
    for tok in tokens:
        for word in table.row(tok):
            pieces = segment_word(bpe, word) if bpe is not None else (word,)
            for p in pieces:
                i = vocab_tgt.id_of.get(p)
                if i is not None and i not in (PAD, BOS, EOS, UNK):
                    ids.add(i)
    return ids


def query_constraint_set(
    table: ConstraintTable,
    query,
    vocab_tgt: Vocabulary,
    bpe: BpeModel | None = None,
    include_unk: bool = False,
) -> ConstraintMask:
    """Union of the table rows of every query token, plus EOS.

    Query tokens must be whole words (the keys of the table); with a BPE
    model each candidate word is expanded to all of its subword ids.
    """
    ids = candidate_token_ids(table, query, vocab_tgt, bpe)
    if not ids:
        return ConstraintMask.full(len(vocab_tgt))
    allowed = np.zeros(len(vocab_tgt), dtype=bool)
    allowed[sorted(ids)] = True
    allowed[EOS] = True
    if include_unk:
        allowed[UNK] = True
    return ConstraintMask(allowed)


# ---------------------------------------------------------------------------
# JSON-lines files
# ---------------------------------------------------------------------------


def read_clicklog(path, lang: str = "src") -> ClickLog:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if not isinstance(obj, dict) or not isinstance(obj.get("query"), str) or not isinstance(obj.get("clicked"), list):
                raise ValueError(f"{path}:{lineno}: expected {{\"query\": str, \"clicked\": [str]}}")
            records.append(ClickRecord(tokenize(obj["query"], lang), tuple(str(c) for c in obj["clicked"])))
    return ClickLog(records)


def write_clicklog(log: ClickLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in log.records:
            fh.write(json.dumps({"query": r.query.text(), "clicked": list(r.clicked)}, ensure_ascii=False) + "\n")


def read_documents(path, lang: str = "tgt") -> dict[str, Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if not isinstance(obj, dict) or not isinstance(obj.get("doc_id"), str) or not isinstance(obj.get("text"), str):
                raise ValueError(f"{path}:{lineno}: expected {{\"doc_id\": str, \"text\": str}}")
            docs.append(Document(obj["doc_id"], tokenize(obj["text"], lang)))
    return make_collection(docs)


def write_documents(docs: Mapping[str, Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs.values():
            fh.write(json.dumps({"doc_id": d.doc_id, "text": d.text.text()}, ensure_ascii=False) + "\n")
