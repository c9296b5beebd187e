"""Corpus BLEU and ranked-retrieval metrics (recall@k, MAP, NDCG@10)."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

log = logging.getLogger(__name__)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int


def bleu_stats(hypotheses, references, max_order: int = 4) -> BleuStats:
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches, totals = [0] * max_order, [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return BleuStats(matches, totals, hyp_len, ref_len)


def bleu(hypotheses, references, max_order: int = 4) -> float:
    """Corpus-level BLEU-4 on a 0-100 scale, one reference per hypothesis.

    A zero match count for n >= 2 is replaced by add-one smoothing,
    ``(0 + 1) / (total + 1)``; a zero unigram precision gives BLEU 0.
    """
    st = bleu_stats(hypotheses, references, max_order)
    if st.hyp_len == 0 or st.matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_order):
        m, t = st.matches[n], st.totals[n]
        if n > 0 and m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t) / max_order
    bp = 1.0 if st.hyp_len > st.ref_len else math.exp(1.0 - st.ref_len / st.hyp_len)
    return 100.0 * bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# Retrieval metrics. ``results`` maps query id -> ranked doc ids (or
# (doc_id, score) pairs); ``judgments`` maps query id -> {doc_id: grade}.
# ---------------------------------------------------------------------------


def _ranking(entries) -> list[str]:
    return [e[0] if isinstance(e, (tuple, list)) else e for e in entries]


def _relevant(grades: Mapping[str, float] | set) -> dict[str, float]:
    if isinstance(grades, (set, frozenset)):
        return {d: 1.0 for d in grades}
    return {d: g for d, g in grades.items() if g > 0}


def _per_query(results, judgments):
    """Yield (ranking, relevant grades) for every judged query with at least
    one relevant document; also return the number of excluded queries."""
    missing = set(results) - set(judgments)
    if missing:
        raise KeyError(f"queries without judgments: {sorted(missing)[:5]}")
    rows, excluded = [], 0
    for qid in sorted(judgments):
        rel = _relevant(judgments[qid])
        if not rel:
            excluded += 1
            continue
        rows.append((_ranking(results.get(qid, [])), rel))
    if excluded:
        log.warning("%d queries have no relevant documents and were excluded", excluded)
    return rows, excluded


def query_recall(ranking, rel, k: int) -> float:
    return len(set(ranking[:k]) & set(rel)) / len(rel)


def query_average_precision(ranking, rel) -> float:
    hits, total = 0, 0.0
    for i, d in enumerate(ranking, 1):
        if d in rel:
            hits += 1
            total += hits / i
    return total / len(rel)


def query_ndcg(ranking, rel, k: int = 10) -> float:
    dcg = sum((2.0 ** rel.get(d, 0.0) - 1.0) / math.log2(i + 1) for i, d in enumerate(ranking[:k], 1))
    ideal = sorted(rel.values(), reverse=True)[:k]
    idcg = sum((2.0 ** g - 1.0) / math.log2(i + 1) for i, g in enumerate(ideal, 1))
    return dcg / idcg


def _mean(values) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def recall_at_k(results, judgments, k: int = 10) -> float:
    """Macro-averaged recall@k as a percentage."""
    rows, _ = _per_query(results, judgments)
    return 100.0 * _mean([query_recall(r, rel, k) for r, rel in rows])


def mean_average_precision(results, judgments) -> float:
    rows, _ = _per_query(results, judgments)
    return _mean([query_average_precision(r, rel) for r, rel in rows])


def ndcg_at_10(results, judgments) -> float:
    rows, _ = _per_query(results, judgments)
    return _mean([query_ndcg(r, rel, 10) for r, rel in rows])


def evaluate_retrieval(results, judgments, k: int = 10) -> dict:
    rows, excluded = _per_query(results, judgments)
    return {
        f"recall@{k}": 100.0 * _mean([query_recall(r, rel, k) for r, rel in rows]),
        "map": _mean([query_average_precision(r, rel) for r, rel in rows]),
        "ndcg@10": _mean([query_ndcg(r, rel, 10) for r, rel in rows]),
        "queries": len(rows),
        "excluded": excluded,
    }


def read_judgments(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>doc_id<TAB>grade")
            out.setdefault(parts[0], {})[parts[1]] = float(parts[2])
    return out


def write_judgments(judgments, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(judgments):
            for doc_id, grade in sorted(judgments[qid].items()):
                fh.write(f"{qid}\t{doc_id}\t{grade:g}\n")
