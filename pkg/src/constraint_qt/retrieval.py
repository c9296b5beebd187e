"""Inverted index with BM25 ranking over the target-language documents."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

from .mine import Document

INDEX_FORMAT = "constraint-qt-index/1"


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    k1: float = 1.2
    b: float = 0.75

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.doc_lengths.values()) / self.n_docs if self.n_docs else 0.0

    def idf(self, term: str) -> float:
        n = len(self.postings.get(term, ()))
        return math.log((self.n_docs - n + 0.5) / (n + 0.5) + 1.0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": INDEX_FORMAT,
                "k1": self.k1,
                "b": self.b,
                "doc_lengths": dict(sorted(self.doc_lengths.items())),
                "postings": {t: [[d, tf] for d, tf in p] for t, p in sorted(self.postings.items())},
            },
            ensure_ascii=False,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "InvertedIndex":
        obj = json.loads(text)
        if obj.get("format") != INDEX_FORMAT:
            raise ValueError(f"not a {INDEX_FORMAT} index")
        return cls(
            postings={t: [(d, int(tf)) for d, tf in p] for t, p in obj["postings"].items()},
            doc_lengths={d: int(n) for d, n in obj["doc_lengths"].items()},
            k1=obj["k1"],
            b=obj["b"],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def build_index(docs: Mapping[str, Document] | Iterable[Document], k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    items = list(docs.values()) if isinstance(docs, Mapping) else list(docs)
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for doc in sorted(items, key=lambda d: d.doc_id):
        if doc.doc_id in lengths:
            raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
        lengths[doc.doc_id] = len(doc.text.tokens)
        for term, tf in sorted(Counter(doc.text.tokens).items()):
            postings.setdefault(term, []).append((doc.doc_id, tf))
    return InvertedIndex(postings, lengths, k1, b)


def search(index: InvertedIndex, query, k: int = 10) -> list[tuple[str, float]]:
    """Top-``k`` documents by BM25, ties broken by ascending doc_id.

    Every query token contributes (repeated tokens count repeatedly);
    documents matching no query term are not returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    tokens = query.tokens if hasattr(query, "tokens") else tuple(query)
    avgdl = index.avg_doc_length
    scores: dict[str, float] = {}
    for term in tokens:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[doc_id] / avgdl)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (index.k1 + 1.0) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]
