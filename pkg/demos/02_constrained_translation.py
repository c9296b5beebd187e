"""
Training and decoding with constraint candidates
================================================

Two small transformers are trained on the same planted bitext: one with
plain cross-entropy and one with the candidate-smoothed loss. Each is then
decoded with and without restricting the output vocabulary to the query's
candidates.
"""

from dataclasses import replace

import numpy as np

from constraint_qt.align import train_ibm1
from constraint_qt.evaluation import WorldConfig, bleu, gen_synthetic
from constraint_qt.mine import build_constraint_table, query_constraint_set
from constraint_qt.nmt import DecodeConfig, TrainConfig, beam_search, constrained_softmax, forward, train
from constraint_qt.nmt.train import ParallelCorpus
from constraint_qt.textproc import BOS, build_vocab

world = gen_synthetic(WorldConfig(bitext_pairs=6000, test_queries=40), seed=1)
table = train_ibm1([(s.tokens, t.tokens) for s, t in world.bitext], 10)
constraints = build_constraint_table(sorted(world.general_sense), table, world.clicklog, world.docs, m=10)

corpus = ParallelCorpus(
    world.bitext,
    build_vocab([s for s, _ in world.bitext], 30000),
    build_vocab([t for _, t in world.bitext], 30000),
)
print("vocab sizes", len(corpus.src_vocab), len(corpus.tgt_vocab))

cfg = TrainConfig(layers=2, d_model=32, heads=4, d_ff=64, batch_tokens=512, warmup_steps=150, max_steps=600, lr_scale=2.0)
plain = train(cfg, corpus).params
smoothed = train(replace(cfg, constraint_in_training=True), corpus, constraints).params

# one decoder step by hand: the restricted softmax zeroes everything outside the mask
q = world.test_queries[0]
mask = query_constraint_set(constraints, q.source, corpus.tgt_vocab)
logits = forward(smoothed, np.array([corpus.src_ids(q.source)]), np.array([[BOS]]))[0, 0]
p = constrained_softmax(logits, mask)
print(q.source.text(), "->", "allowed:", corpus.tgt_vocab.decode(np.flatnonzero(mask.allowed)))
for i in np.argsort(-p)[:3]:
    print(f"  p({corpus.tgt_vocab.decode([i])[0]}) = {p[i]:.3f}")

dc = DecodeConfig(beam_size=4, length_penalty=0.6, max_len=8)
refs = [q.reference.tokens for q in world.test_queries]
for name, params in (("plain", plain), ("smoothed", smoothed)):
    for restrict in (False, True):
        hyps = []
        for q in world.test_queries:
            m = query_constraint_set(constraints, q.source, corpus.tgt_vocab) if restrict else None
            hyps.append(corpus.tgt_vocab.decode(beam_search(params, corpus.src_ids(q.source), dc, m).tokens))
        print(f"{name:9s} restricted={restrict!s:5s} BLEU {bleu(hyps, refs):5.1f}   e.g. {' '.join(hyps[0])}")
