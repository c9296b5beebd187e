"""
Mining constraint candidates from alignments and clicks
=======================================================

A planted world has polysemous source words. The bitext mostly translates
them by their everyday sense, while the documents people click on use a
different search sense. Alignment alone ranks the everyday sense first, and
the click-conditioned TF-IDF pass moves the search sense up.
"""

from constraint_qt.align import extract_candidates, train_ibm1
from constraint_qt.evaluation import WorldConfig, gen_synthetic
from constraint_qt.mine import build_constraint_table, clicked_docs, score_tfidf

world = gen_synthetic(WorldConfig(bitext_pairs=4000), seed=0)
print(len(world.bitext), "sentence pairs,", len(world.docs), "documents,", len(world.clicklog.records), "click records")

x = world.polysemous[0]
print("source word", x, "| everyday sense", world.general_sense[x], "| search sense", world.search_sense[x])

# IBM Model 1, 10 EM iterations
table = train_ibm1([(s.tokens, t.tokens) for s, t in world.bitext], 10)
cands = extract_candidates(table, x, k_max=50, p_min=0.01)
for y, p in cands.candidates[:5]:
    print(f"  t({y}|{x}) = {p:.3f}")

# re-rank by TF-IDF inside the documents clicked for queries containing x
docs = clicked_docs(world.clicklog, world.docs, x)
scored = score_tfidf(cands, docs)
print(len(docs), "clicked documents")
for y, s in scored.entries[:5]:
    print(f"  tfidf({y}) = {s:.4f}")

# candidates absent from every clicked doc score -inf and trail the row in alignment order,
# so the everyday sense only fits once M exceeds the clicked candidates
constraints = build_constraint_table(sorted(world.general_sense), table, world.clicklog, world.docs, m=10)
print("row for", x, "at M=10:", " ".join(constraints.row(x)))
hits = sum(constraints.row(w)[:1] == (world.search_sense[w],) for w in world.polysemous)
print(f"search sense ranked first for {hits}/{len(world.polysemous)} polysemous words")
