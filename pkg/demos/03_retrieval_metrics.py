"""
Searching the document collection and scoring the rankings
==========================================================

Translated queries are run against a BM25 index over the target-language
documents; recall@10, MAP and NDCG@10 are computed from the planted
relevance judgments. The same index also shows why the search sense
matters: the everyday sense of a polysemous word rarely occurs in the
documents at all.
"""

from constraint_qt.evaluation import WorldConfig, evaluate_retrieval, gen_synthetic
from constraint_qt.retrieval import build_index, search

world = gen_synthetic(WorldConfig(), seed=2)
index = build_index(world.docs)
print(index.n_docs, "documents,", len(index.postings), "distinct terms, avg length", round(index.avg_doc_length, 2))

x = world.polysemous[0]
for word in (world.general_sense[x], world.search_sense[x]):
    print(f"{word}: in {len(index.postings.get(word, ()))} docs, idf {index.idf(word):.3f}")

# oracle query translations: every source word by its search sense, then by its everyday sense
for sense in (world.search_sense, world.general_sense):
    results = {q.query_id: [d for d, _ in search(index, [sense[x] for x in q.source.tokens], k=100)]
               for q in world.test_queries}
    scores = evaluate_retrieval(results, world.judgments, k=10)
    print({k: round(v, 3) if isinstance(v, float) else v for k, v in scores.items()})

# the human references sit in between
results = {q.query_id: [d for d, _ in search(index, q.reference, k=100)] for q in world.test_queries}
print("references", {k: round(v, 3) if isinstance(v, float) else v for k, v in evaluate_retrieval(results, world.judgments).items()})
