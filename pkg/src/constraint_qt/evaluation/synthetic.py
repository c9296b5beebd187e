"""Planted bilingual world with clickthrough logs and relevance judgments.

Every concept ``i`` has a source word ``x<i>``. Its everyday translation
``e<i>`` is what the general-domain bitext mostly uses. A fraction of the
concepts are polysemous: the documents (and therefore the clicks) describe
them with a different target word ``k<i>``, which the bitext uses only
occasionally. Non-polysemous concepts use ``e<i>`` everywhere.

Each concept also has a few rare synonyms ``e<i>a``, ``e<i>b``, ... that the
bitext uses now and then and that product documents mention occasionally,
so every source word has a realistic list of clicked candidates.

Documents belong to one concept each, mention its search word a few times
and are padded with filler words ``f<j>``. A test query is relevant to
every document of every concept it mentions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..mine import ClickLog, ClickRecord, Document, make_collection, write_clicklog, write_documents
from ..textproc import TokenSequence, write_bitext
from .metrics import write_judgments


@dataclass
class WorldConfig:
    n_concepts: int = 60
    polysemy: float = 0.3
    bitext_pairs: int = 20000
    # Probability that the bitext renders a polysemous word by its everyday sense.
    general_sense_prob: float = 0.8
    synonyms: int = 12
    # Probability that the bitext renders a word by one of its synonyms.
    synonym_prob: float = 0.3
    # Upper bound on synonym mentions per document.
    doc_synonyms: int = 4
    max_query_len: int = 3
    docs_per_concept: int = 4
    doc_len: tuple[int, int] = (10, 16)
    search_word_repeats: tuple[int, int] = (1, 3)
    filler_vocab: int = 80
    # Probability that a document also mentions a random other concept.
    doc_noise: float = 0.2
    click_records: int = 3000
    click_noise: float = 0.05
    test_queries: int = 200
    # Probability that a human reference uses the search sense of a polysemous word.
    ref_search_sense_prob: float = 0.5

    def validate(self) -> None:
        if self.n_concepts < 2:
            raise ValueError("n_concepts must be >= 2")
        if self.docs_per_concept < 1:
            raise ValueError("docs_per_concept must be >= 1")
        if self.bitext_pairs < 1 or self.click_records < 1 or self.test_queries < 1:
            raise ValueError("bitext_pairs, click_records and test_queries must be >= 1")
        if not 0.0 <= self.polysemy <= 1.0:
            raise ValueError("polysemy must lie in [0, 1]")
        if not 1 <= self.max_query_len <= self.n_concepts:
            raise ValueError("max_query_len must lie in [1, n_concepts]")
        lo, hi = self.doc_len
        if lo < self.search_word_repeats[1] + self.doc_synonyms + 1 or hi < lo:
            raise ValueError("doc_len too short for the search word repeats")
        if not 0 <= self.synonyms <= 26:
            raise ValueError("synonyms must lie in [0, 26]")
        if not 0.0 <= self.synonym_prob <= 1.0:
            raise ValueError("synonym_prob must lie in [0, 1]")
        if self.doc_synonyms < 0:
            raise ValueError("doc_synonyms must be >= 0")
        if self.filler_vocab < 1:
            raise ValueError("filler_vocab must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("doc_len", "search_word_repeats"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TestQuery:
    query_id: str
    source: TokenSequence
    reference: TokenSequence


@dataclass
class World:
    config: WorldConfig
    seed: int
    bitext: list[tuple[TokenSequence, TokenSequence]]
    clicklog: ClickLog
    docs: dict[str, Document]
    test_queries: list[TestQuery]
    judgments: dict[str, dict[str, float]]
    # Planted ground truth.
    general_sense: dict[str, str] = field(default_factory=dict)
    search_sense: dict[str, str] = field(default_factory=dict)
    topic_of: dict[str, str] = field(default_factory=dict)
    synonyms: dict[str, list[str]] = field(default_factory=dict)

    @property
    def polysemous(self) -> list[str]:
        return [x for x in self.general_sense if self.general_sense[x] != self.search_sense[x]]


def gen_synthetic(config: WorldConfig, seed: int) -> World:
    config.validate()
    rng = np.random.default_rng(seed)
    n = config.n_concepts
    width = len(str(n - 1))
    src = [f"x{i:0{width}d}" for i in range(n)]
    general = {x: f"e{i:0{width}d}" for i, x in enumerate(src)}
    n_poly = int(round(config.polysemy * n))
    poly = set(rng.choice(n, size=n_poly, replace=False).tolist()) if n_poly else set()
    search = {x: (f"k{i:0{width}d}" if i in poly else general[x]) for i, x in enumerate(src)}
    synonyms = {x: [general[x] + chr(ord("a") + j) for j in range(config.synonyms)] for x in src}
    fillers = [f"f{j:03d}" for j in range(config.filler_vocab)]

    def render(x):
        if synonyms[x] and rng.random() < config.synonym_prob:
            return synonyms[x][int(rng.integers(len(synonyms[x])))]
        if search[x] == general[x] or rng.random() < config.general_sense_prob:
            return general[x]
        return search[x]

    def pick_concepts():
        k = int(rng.integers(1, config.max_query_len + 1))
        return [src[i] for i in rng.choice(n, size=k, replace=False)]

    bitext = []
    for _ in range(config.bitext_pairs):
        xs = pick_concepts()
        ys = [render(x) for x in xs]
        bitext.append((TokenSequence(tuple(xs), "src"), TokenSequence(tuple(ys), "tgt")))

    docs_by_concept: dict[str, list[str]] = {}
    docs, topic_of = [], {}
    doc_width = len(str(n * config.docs_per_concept - 1))
    for x in src:
        for _ in range(config.docs_per_concept):
            doc_id = f"d{len(docs):0{doc_width}d}"
            length = int(rng.integers(config.doc_len[0], config.doc_len[1] + 1))
            reps = int(rng.integers(config.search_word_repeats[0], config.search_word_repeats[1] + 1))
            words = [search[x]] * reps
            if synonyms[x] and config.doc_synonyms:
                k = int(rng.integers(min(config.doc_synonyms, len(synonyms[x])) + 1))
                words += [synonyms[x][j] for j in rng.choice(len(synonyms[x]), size=k, replace=False)]
            if rng.random() < config.doc_noise:
                other = src[int(rng.integers(n))]
                if other != x:
                    words.append(search[other])
            words += [fillers[j] for j in rng.integers(len(fillers), size=max(length - len(words), 0))]
            words = [words[j] for j in rng.permutation(len(words))]
            docs.append(Document(doc_id, TokenSequence(tuple(words), "tgt")))
            docs_by_concept.setdefault(x, []).append(doc_id)
            topic_of[doc_id] = x
    all_ids = [d.doc_id for d in docs]

    records = []
    for _ in range(config.click_records):
        xs = pick_concepts()
        clicked = []
        for x in xs:
            pool = docs_by_concept[x]
            k = int(rng.integers(1, min(2, len(pool)) + 1))
            clicked.extend(pool[j] for j in rng.choice(len(pool), size=k, replace=False))
        if rng.random() < config.click_noise:
            clicked.append(all_ids[int(rng.integers(len(all_ids)))])
        clicked = list(dict.fromkeys(clicked))
        records.append(ClickRecord(TokenSequence(tuple(xs), "src"), tuple(clicked)))

    tests, judgments = [], {}
    q_width = len(str(config.test_queries - 1))
    for q in range(config.test_queries):
        xs = pick_concepts()
        ref = [
            search[x] if search[x] != general[x] and rng.random() < config.ref_search_sense_prob else general[x]
            for x in xs
        ]
        qid = f"q{q:0{q_width}d}"
        tests.append(TestQuery(qid, TokenSequence(tuple(xs), "src"), TokenSequence(tuple(ref), "tgt")))
        judgments[qid] = {d: 1.0 for x in xs for d in docs_by_concept[x]}

    return World(
        config=config, seed=seed, bitext=bitext, clicklog=ClickLog(records),
        docs=make_collection(docs), test_queries=tests, judgments=judgments,
        general_sense=general, search_sense=search, topic_of=topic_of, synonyms=synonyms,
    )


def audit_search_sense(world: World) -> dict[str, float]:
    """Fraction of each concept's clicked on-topic documents containing its search word."""
    out = {}
    for x, word in world.search_sense.items():
        ids = {d for r in world.clicklog.records if x in r.query.tokens for d in r.clicked if world.topic_of[d] == x}
        if ids:
            out[x] = sum(word in world.docs[d].text.tokens for d in ids) / len(ids)
    return out


def write_world(world: World, workdir) -> dict[str, str]:
    """Write the world in the documented file formats; returns the paths."""
    root = Path(workdir)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "bitext": root / "bitext.tsv",
        "clicklog": root / "clicklog.jsonl",
        "docs": root / "docs.jsonl",
        "queries": root / "test_queries.tsv",
        "judgments": root / "judgments.tsv",
        "world": root / "world.json",
    }
    write_bitext(world.bitext, paths["bitext"])
    write_clicklog(world.clicklog, paths["clicklog"])
    write_documents(world.docs, paths["docs"])
    with open(paths["queries"], "w", encoding="utf-8") as fh:
        for q in world.test_queries:
            fh.write(f"{q.query_id}\t{q.source.text()}\t{q.reference.text()}\n")
    write_judgments(world.judgments, paths["judgments"])
    with open(paths["world"], "w", encoding="utf-8") as fh:
        json.dump({"seed": world.seed, "config": world.config.to_dict(),
                   "general_sense": world.general_sense, "search_sense": world.search_sense,
                   "synonyms": world.synonyms},
                  fh, indent=2, sort_keys=True)
    return {k: str(v) for k, v in paths.items()}
