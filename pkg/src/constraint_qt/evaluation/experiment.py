"""End-to-end harness: mine constraints, train baseline and +TC models,
translate the test queries, retrieve, and score translation and retrieval.

The ablation grid crosses every constraint size ``m`` with four modes:

=============  =====================  ======================
mode           training smoothing     inference restriction
=============  =====================  ======================
both           top-m candidates       top-m candidates
train-only     top-m candidates       full vocabulary
infer-only     none                   top-m candidates
neither        none                   full vocabulary
=============  =====================  ======================

plus one plain baseline row.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..align import train_ibm1
from ..mine import ConstraintTable, build_constraint_table, query_constraint_set
from ..nmt import DecodeConfig, ParallelCorpus, TrainConfig, beam_search, save_checkpoint, train
from ..retrieval import build_index, search
from ..textproc import EOS, TokenSequence, apply_bpe, build_vocab, learn_bpe, strip_bpe
from .metrics import bleu, evaluate_retrieval
from .synthetic import World, WorldConfig, gen_synthetic, write_world

log = logging.getLogger(__name__)

MODES = ("train-only", "infer-only", "both", "neither")
BASELINE = "Transformer"
SYSTEM = "Transformer + TC"


def _toy_train_config() -> TrainConfig:
    return TrainConfig(
        layers=2, d_model=32, heads=4, d_ff=64, batch_tokens=1024,
        warmup_steps=150, max_steps=1500, lr_scale=2.0, alpha=0.6,
    )


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    seed: int = 0
    m_values: tuple[int, ...] = (5, 10, 20)
    modes: tuple[str, ...] = MODES
    train: TrainConfig = field(default_factory=_toy_train_config)
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(beam_size=4, length_penalty=0.6, max_len=8))
    align_iterations: int = 10
    k_max: int = 50
    p_min: float = 0.01
    recall_k: int = 10
    retrieval_depth: int = 100
    vocab_size: int = 30000
    bpe_merges: int | None = None
    include_unk: bool = False
    workdir: str | None = None

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}; choose from {MODES}")
        if any(m < 1 for m in self.m_values):
            raise ValueError("constraint sizes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m_values"] = list(self.m_values)
        d["modes"] = list(self.modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config fields: {sorted(unknown)}")
        d = dict(d)
        if "world" in d:
            d["world"] = WorldConfig.from_dict(d["world"])
        if "train" in d:
            base = asdict(_toy_train_config())
            base.update(d["train"])
            d["train"] = TrainConfig.from_dict(base)
        if "decode" in d:
            base = asdict(DecodeConfig(beam_size=4, length_penalty=0.6, max_len=8))
            base.update(d["decode"])
            d["decode"] = DecodeConfig(**base)
        for key in ("m_values", "modes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ReportRow:
    system: str
    mode: str
    m_train: int | None
    m_infer: int | None
    bleu: float | None = None
    recall: float | None = None
    map: float | None = None
    ndcg10: float | None = None
    mask_violations: int | None = None
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.error is None and None not in (self.bleu, self.recall, self.map, self.ndcg10)


@dataclass
class ExperimentReport:
    seed: int
    recall_k: int
    rows: list[ReportRow] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    failed: bool = False

    def baseline(self) -> ReportRow:
        return next(r for r in self.rows if r.system == BASELINE)

    def find(self, mode: str, m: int) -> ReportRow:
        return next(r for r in self.rows if r.system == SYSTEM and r.mode == mode
                    and m in (r.m_train, r.m_infer))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "recall_k": self.recall_k, "failed": self.failed,
                "stats": self.stats, "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        def fmt(v, spec):
            return "-" if v is None else format(v, spec)

        def size(m):
            return "full" if m is None else str(m)

        lines = ["Ablation over constraint size (BLEU)", ""]
        lines.append(f"{'Models':<18} {'Mode':<11} {'Training':>8} {'Inference':>9} {'BLEU':>7}")
        for r in self.rows:
            if r.system != SYSTEM:
                continue
            lines.append(f"{r.system:<18} {r.mode:<11} {size(r.m_train):>8} {size(r.m_infer):>9} {fmt(r.bleu, '7.2f')}")

        best = self._best()
        base = self.baseline()
        lines += ["", "Main translation results", ""]
        lines.append(f"{'Models':<18} {'BLEU':>7}")
        lines.append(f"{base.system:<18} {fmt(base.bleu, '7.2f')}")
        if best is not None:
            lines.append(f"{best.system:<18} {fmt(best.bleu, '7.2f')}")

        lines += ["", "Downstream retrieval", ""]
        lines.append(f"{'Metrics':<10} {base.system:>12} {SYSTEM:>18}")
        for label, attr, spec in ((f"RECALL@{self.recall_k}", "recall", "11.2f"), ("MAP", "map", "12.4f"),
                                  ("NDCG@10", "ndcg10", "12.4f")):
            b = getattr(base, attr)
            t = getattr(best, attr) if best is not None else None
            suffix = "%" if attr == "recall" else ""
            lines.append(f"{label:<10} {fmt(b, spec)}{suffix:<1} {fmt(t, spec):>17}{suffix}")
        failures = [r for r in self.rows if r.error]
        if failures:
            lines += ["", "Failures", ""] + [f"{r.system} {r.mode} m={r.m_train or r.m_infer}: {r.error}" for r in failures]
        return "\n".join(lines) + "\n"

    def _best(self) -> ReportRow | None:
        """The +TC row with the highest BLEU (constraints at both stages preferred)."""
        rows = [r for r in self.rows if r.system == SYSTEM and r.mode == "both" and r.bleu is not None]
        return max(rows, key=lambda r: (r.bleu, -(r.m_train or 0))) if rows else None


def _translate(params, corpus: ParallelCorpus, world: World, decode: DecodeConfig,
               table: ConstraintTable | None, include_unk: bool):
    """Decode every test query; returns word-level translations and the
    number of emitted tokens that fell outside their mask."""
    out, violations = [], 0
    for q in world.test_queries:
        src = corpus.src_ids(q.source)
        mask = None
        if table is not None:
            mask = query_constraint_set(table, q.source, corpus.tgt_vocab, corpus.tgt_bpe, include_unk)
        hyp = beam_search(params, src, decode, mask)
        if mask is not None:
            violations += sum(1 for t in hyp.tokens if t != EOS and not mask.allowed[t])
        tokens = corpus.tgt_vocab.decode(hyp.tokens)
        if corpus.tgt_bpe is not None:
            tokens = strip_bpe(tokens)
        out.append(tokens)
    return out, violations


def _write_lines(path: Path, world: World, translations) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q, t in zip(world.test_queries, translations):
            fh.write(f"{q.query_id}\t{' '.join(t)}\n")


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    started = time.perf_counter()
    report = ExperimentReport(seed=config.seed, recall_k=config.recall_k)
    rows = [ReportRow(BASELINE, "baseline", None, None)]
    for m in config.m_values:
        for mode in config.modes:
            rows.append(ReportRow(
                SYSTEM, mode,
                m if mode in ("both", "train-only") else None,
                m if mode in ("both", "infer-only") else None,
            ))
    report.rows = rows
    workdir = Path(config.workdir) if config.workdir else None

    try:
        world = gen_synthetic(config.world, config.seed)
        if workdir is not None:
            workdir.mkdir(parents=True, exist_ok=True)
            write_world(world, workdir / "world")
            with open(workdir / "experiment.json", "w", encoding="utf-8") as fh:
                json.dump(config.to_dict(), fh, indent=2, sort_keys=True)

        src_side = [s for s, _ in world.bitext]
        tgt_side = [t for _, t in world.bitext]
        src_bpe = tgt_bpe = None
        if config.bpe_merges is not None:
            src_bpe = learn_bpe(src_side, config.bpe_merges)
            tgt_bpe = learn_bpe(tgt_side, config.bpe_merges)
            src_model_side = [apply_bpe(src_bpe, s) for s in src_side]
            tgt_model_side = [apply_bpe(tgt_bpe, t) for t in tgt_side]
        else:
            src_model_side, tgt_model_side = src_side, tgt_side
        corpus = ParallelCorpus(
            world.bitext, build_vocab(src_model_side, config.vocab_size),
            build_vocab(tgt_model_side, config.vocab_size), src_bpe, tgt_bpe,
        )

        ttable = train_ibm1(world.bitext, config.align_iterations)
        source_words = sorted({w for s in src_side for w in s.tokens})
        tables = {
            m: build_constraint_table(source_words, ttable, world.clicklog, world.docs, m, config.k_max, config.p_min)
            for m in config.m_values
        }
        index = build_index(world.docs)
        if workdir is not None:
            ttable.save(workdir / "translation_table.tsv")
            for m, t in tables.items():
                t.save(workdir / f"constraints_m{m}.tsv")
    except Exception as exc:  # noqa: BLE001 - recorded in the report
        log.exception("experiment setup failed")
        for r in rows:
            r.error = f"setup: {exc}"
        report.failed = True
        return report

    models: dict = {}

    def model_for(m_train):
        if m_train not in models:
            cfg = TrainConfig.from_dict({**asdict(config.train), "seed": config.seed,
                                         "constraint_in_training": m_train is not None,
                                         "checkpoint_dir": None, "checkpoint_every": 0})
            result = train(cfg, corpus, tables[m_train] if m_train is not None else None)
            models[m_train] = result
            if workdir is not None:
                name = "baseline" if m_train is None else f"tc_m{m_train}"
                save_checkpoint(workdir / f"{name}.ckpt", result.params,
                                {"m_train": m_train, "steps": len(result.loss_history)})
        return models[m_train]

    translations: dict = {}
    for r in rows:
        try:
            params = model_for(r.m_train).params
            key = (r.m_train, r.m_infer)
            if key not in translations:
                table = tables[r.m_infer] if r.m_infer is not None else None
                translations[key] = _translate(params, corpus, world, config.decode, table, config.include_unk)
                if workdir is not None:
                    name = f"translations_train-{r.m_train or 'full'}_infer-{r.m_infer or 'full'}.tsv"
                    _write_lines(workdir / name, world, translations[key][0])
            hyps, violations = translations[key]
            r.mask_violations = violations if r.m_infer is not None else None
            r.bleu = bleu(hyps, [q.reference.tokens for q in world.test_queries])
            results = {
                q.query_id: [d for d, _ in search(index, TokenSequence(tuple(h)), config.retrieval_depth)]
                if h else []
                for q, h in zip(world.test_queries, hyps)
            }
            scores = evaluate_retrieval(results, world.judgments, config.recall_k)
            r.recall = scores[f"recall@{config.recall_k}"]
            r.map = scores["map"]
            r.ndcg10 = scores["ndcg@10"]
        except Exception as exc:  # noqa: BLE001 - recorded in the report
            log.error("row %s/%s failed: %s", r.system, r.mode, exc)
            log.debug(traceback.format_exc())
            r.error = str(exc)
            report.failed = True

    report.stats = {
        "polysemous_words": len(world.polysemous),
        "test_queries": len(world.test_queries),
        "documents": len(world.docs),
        "src_vocab": len(corpus.src_vocab),
        "tgt_vocab": len(corpus.tgt_vocab),
        "final_train_loss": {("baseline" if k is None else f"m{k}"): v.loss_history[-1] for k, v in models.items()},
    }
    if workdir is not None:
        (workdir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (workdir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    log.info("experiment seed=%d finished in %.1fs", config.seed, time.perf_counter() - started)
    return report
